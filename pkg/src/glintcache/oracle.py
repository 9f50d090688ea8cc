"""Brute-force patch NDF evaluation.

The patch NDF of a footprint is the footprint-weighted sum of one small
Gaussian lobe (width ``sigma_r``) per texel, centred on that texel's
projected normal.  It is evaluated here by direct summation over texels;
this is the precomputation kernel and the ground truth for everything else.

NDF images cover the projected half-vector square ``[-1, 1]^2``.  Pixel
``(i, j)`` (column, row) spans ``h_x in [-1 + 2i/N, -1 + 2(i+1)/N)`` and
likewise for ``h_y``.  A pixel stores the *average* density over its area,
computed exactly from the Gaussian CDF, so an image is a faithful box
discretisation of the continuous NDF.  Pixels whose centre lies outside the
unit disk are zero, and each image integrates to one.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numba
import numpy as np

from .errors import FootprintError, FormatError
from .texture import NormalMap

TRUNCATION = 4.0
DEFAULT_SIGMA_R = 0.005
DEFAULT_RESOLUTION = 256

NDFI_MAGIC = b"NDFI"
_NDFI_HEADER = struct.Struct("<4sIII")


@dataclass(frozen=True)
class Footprint:
    """Isotropic Gaussian pixel footprint.

    ``center`` is in texel coordinates (texel ``(x, y)`` covers
    ``[x, x+1) x [y, y+1)``); ``sigma_p`` is the standard deviation in texels.
    """

    center: tuple
    sigma_p: float

    def __post_init__(self):
        c = tuple(float(v) for v in self.center)
        if len(c) != 2 or not all(math.isfinite(v) for v in c):
            raise ValueError(f"footprint center must be two finite numbers, got {self.center}")
        if not self.sigma_p > 0:
            raise ValueError(f"sigma_p must be positive, got {self.sigma_p}")
        object.__setattr__(self, "center", c)
        object.__setattr__(self, "sigma_p", float(self.sigma_p))


@dataclass(frozen=True)
class IntrinsicRoughness:
    sigma_r: float = DEFAULT_SIGMA_R

    def __post_init__(self):
        if not self.sigma_r > 0:
            raise ValueError(f"sigma_r must be positive, got {self.sigma_r}")


@dataclass(eq=False)
class NdfImage:
    """Discretised NDF over the projected half-vector square.

    ``values`` has shape ``(res, res)`` (one channel) or ``(res, res, C)``,
    indexed ``[row (h_y), column (h_x)]``.
    """

    values: np.ndarray

    @property
    def resolution(self) -> int:
        return self.values.shape[0]

    @property
    def channels(self) -> int:
        return 1 if self.values.ndim == 2 else self.values.shape[2]

    @property
    def pixel_area(self) -> float:
        return (2.0 / self.resolution) ** 2

    def total(self) -> float:
        return float(np.sum(self.values) * self.pixel_area / self.channels)

    def pixel_of(self, h):
        return pixel_of(h, self.resolution)

    def to_bytes(self) -> bytes:
        v = np.asarray(self.values, dtype="<f4")
        planes = v[None] if v.ndim == 2 else np.moveaxis(v, -1, 0)
        return _NDFI_HEADER.pack(NDFI_MAGIC, self.resolution, self.channels, 0) + \
            np.ascontiguousarray(planes).tobytes()

    @classmethod
    def from_bytes(cls, blob: bytes) -> "NdfImage":
        if len(blob) < _NDFI_HEADER.size:
            raise FormatError("truncated NDF image header")
        magic, res, ch, _ = _NDFI_HEADER.unpack_from(blob)
        if magic != NDFI_MAGIC:
            raise FormatError(f"bad NDF image magic {magic!r}")
        if len(blob) != _NDFI_HEADER.size + 4 * res * res * ch:
            raise FormatError("NDF image payload size does not match header")
        planes = np.frombuffer(blob, dtype="<f4", offset=_NDFI_HEADER.size)
        planes = planes.reshape(ch, res, res).astype(np.float64)
        return cls(planes[0] if ch == 1 else np.moveaxis(planes, 0, -1))

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "NdfImage":
        return cls.from_bytes(Path(path).read_bytes())

    def save_png(self, path, exposure: float | None = None) -> None:
        save_png(path, self.values, exposure)


def save_png(path, values, exposure=None):
    """Tone-mapped 8-bit preview (gamma 2.2, scaled to the max)."""
    import cv2

    v = np.asarray(values, dtype=np.float64)
    scale = exposure if exposure is not None else (v.max() if v.max() > 0 else 1.0)
    img = np.clip(v / scale, 0.0, 1.0) ** (1 / 2.2)
    img = np.round(img * 255).astype(np.uint8)
    if img.ndim == 3:
        img = img[..., ::-1]
    cv2.imwrite(str(path), img)


def pixel_of(h, resolution):
    """Integer pixel (column, row) containing projected half vector(s) ``h``."""
    h = np.asarray(h, dtype=np.float64)
    p = np.floor((h + 1.0) * (resolution / 2.0)).astype(np.int64)
    return np.clip(p, 0, resolution - 1)


def pixel_center(ix, iy, resolution):
    return (-1.0 + (2 * np.asarray(ix) + 1.0) / resolution,
            -1.0 + (2 * np.asarray(iy) + 1.0) / resolution)


def disk_mask(resolution):
    """Boolean (res, res) mask of pixels whose centre lies in the unit disk."""
    c = -1.0 + (2 * np.arange(resolution) + 1.0) / resolution
    return (c[None, :] ** 2 + c[:, None] ** 2) <= 1.0


# -- footprint weights --------------------------------------------------------

def _axis_weights(center, sigma, size, boundary, supersample, axis_name):
    lo = center - TRUNCATION * sigma
    hi = center + TRUNCATION * sigma
    j0 = math.floor(lo)
    j1 = math.floor(hi)
    idx = np.arange(j0, j1 + 1)
    sub = (np.arange(supersample) + 0.5) / supersample
    pos = idx[:, None] + sub[None, :]
    d = pos - center
    g = np.where(np.abs(d) <= TRUNCATION * sigma, np.exp(-0.5 * (d / sigma) ** 2), 0.0)
    g = g.mean(axis=1)
    keep = g > 0
    idx, g = idx[keep], g[keep]
    total = g.sum()
    if boundary == "wrap":
        folded = np.bincount(np.mod(idx, size), weights=g, minlength=size)
        nz = np.nonzero(folded)[0]
        return nz, folded[nz], total
    inside = (idx >= 0) & (idx < size)
    if boundary == "error" and not inside.all():
        side = ("-" if idx[0] < 0 else "+") + axis_name
        names = {"-x": "left", "+x": "right", "-y": "top", "+y": "bottom"}
        raise FootprintError(
            f"footprint support [{lo:.2f}, {hi:.2f}] leaves the map along {side} "
            f"({names[side]} border, size {size})", direction=side)
    return idx[inside], g[inside], total


def footprint_weights(shape, fp: Footprint, boundary="error", supersample=1):
    """Separable texel weights of a truncated Gaussian footprint.

    Returns ``(ix, wx), (iy, wy), mass`` where the 2D weight of texel
    ``(ix[a], iy[b])`` is ``wy[b] * wx[a]``, normalised to sum to one over
    the kept texels, and ``mass`` is the fraction of the footprint's
    (discrete) weight that fell on the map.  ``boundary`` is ``"wrap"``,
    ``"error"`` or ``"clip"`` (drop texels outside the map).
    """
    h, w = shape
    ix, wx, tx = _axis_weights(fp.center[0], fp.sigma_p, w, boundary, supersample, "x")
    iy, wy, ty = _axis_weights(fp.center[1], fp.sigma_p, h, boundary, supersample, "y")
    sx, sy = wx.sum(), wy.sum()
    mass = (sx * sy) / (tx * ty)
    if sx > 0:
        wx = wx / sx
    if sy > 0:
        wy = wy / sy
    return (ix, wx), (iy, wy), mass


def _default_boundary(nmap, boundary):
    if boundary is None:
        return "wrap" if nmap.tileable else "error"
    if boundary not in ("wrap", "error", "clip"):
        raise ValueError(f"unknown boundary mode {boundary!r}")
    return boundary


def texel_samples(nmap: NormalMap, fp: Footprint, boundary=None, supersample=1):
    """Projected normals and weights of all texels under the footprint.

    Returns ``(nx, ny, w, mass)``; ``w`` sums to one unless the footprint
    misses the map entirely (then it is empty and ``mass`` is 0).
    """
    boundary = _default_boundary(nmap, boundary)
    (ix, wx), (iy, wy), mass = footprint_weights(nmap.shape, fp, boundary, supersample)
    if len(ix) == 0 or len(iy) == 0:
        empty = np.zeros(0)
        return empty, empty, empty, 0.0
    sub = nmap.normals[np.ix_(iy, ix)]
    w = (wy[:, None] * wx[None, :]).ravel()
    return sub[..., 0].ravel(), sub[..., 1].ravel(), w, mass


# -- kernels ------------------------------------------------------------------

@numba.njit(cache=True, nogil=True)
def _stencil(mu, s, res, lo_out, m_out):
    """Pixel masses of a truncated 1D Gaussian; returns (first pixel, count)."""
    a = mu - 4.0 * s
    b = mu + 4.0 * s
    k0 = int(math.floor(a))
    k1 = int(math.floor(b))
    if k0 < 0:
        k0 = 0
    if k1 > res - 1:
        k1 = res - 1
    n = 0
    inv = 1.0 / (s * math.sqrt(2.0))
    for k in range(k0, k1 + 1):
        lo = max(float(k), a)
        hi = min(float(k + 1), b)
        if hi > lo:
            m_out[n] = 0.5 * (math.erf((hi - mu) * inv) - math.erf((lo - mu) * inv))
        else:
            m_out[n] = 0.0
        n += 1
    lo_out[0] = k0
    return n


@numba.njit(cache=True, nogil=True)
def _splat(nx, ny, w, res, sigma_r, mask, out):
    """Accumulate pixel-averaged lobes; returns the in-disk mass."""
    s = sigma_r * res / 2.0
    cap = int(8.0 * s) + 4
    mx = np.empty(cap)
    my = np.empty(cap)
    ox = np.zeros(1, dtype=np.int64)
    oy = np.zeros(1, dtype=np.int64)
    total = 0.0
    for t in range(nx.shape[0]):
        wt = w[t]
        if wt == 0.0:
            continue
        cx = _stencil((nx[t] + 1.0) * res / 2.0, s, res, ox, mx)
        cy = _stencil((ny[t] + 1.0) * res / 2.0, s, res, oy, my)
        for b in range(cy):
            row = oy[0] + b
            wy = wt * my[b]
            for a in range(cx):
                col = ox[0] + a
                if mask[row, col]:
                    v = wy * mx[a]
                    out[row, col] += v
                    total += v
    return total


@numba.njit(cache=True, nogil=True)
def _in_disk_mass(nx, ny, w, res, sigma_r, mask):
    s = sigma_r * res / 2.0
    cap = int(8.0 * s) + 4
    mx = np.empty(cap)
    my = np.empty(cap)
    ox = np.zeros(1, dtype=np.int64)
    oy = np.zeros(1, dtype=np.int64)
    total = 0.0
    for t in range(nx.shape[0]):
        cx = _stencil((nx[t] + 1.0) * res / 2.0, s, res, ox, mx)
        cy = _stencil((ny[t] + 1.0) * res / 2.0, s, res, oy, my)
        acc = 0.0
        for b in range(cy):
            for a in range(cx):
                if mask[oy[0] + b, ox[0] + a]:
                    acc += my[b] * mx[a]
        total += w[t] * acc
    return total


@numba.njit(cache=True, nogil=True)
def _lobe_sum(nx, ny, w, hx, hy, sigma_r, out):
    cut = 4.0 * sigma_r
    norm = 1.0 / (2.0 * math.pi * sigma_r * sigma_r)
    inv2 = 1.0 / (2.0 * sigma_r * sigma_r)
    for q in range(hx.shape[0]):
        acc = 0.0
        for t in range(nx.shape[0]):
            dx = hx[q] - nx[t]
            dy = hy[q] - ny[t]
            if abs(dx) <= cut and abs(dy) <= cut:
                acc += w[t] * math.exp(-(dx * dx + dy * dy) * inv2)
        out[q] = acc * norm


_MASKS = {}


def _mask(res):
    if res not in _MASKS:
        _MASKS[res] = disk_mask(res)
    return _MASKS[res]


def splat_image(nx, ny, w, resolution, sigma_r, normalize=True):
    """Pixel-averaged NDF of weighted projected normals (raw kernel)."""
    out = np.zeros((resolution, resolution))
    total = _splat(np.ascontiguousarray(nx, dtype=np.float64),
                   np.ascontiguousarray(ny, dtype=np.float64),
                   np.ascontiguousarray(w, dtype=np.float64),
                   resolution, float(sigma_r), _mask(resolution), out)
    if normalize:
        if total <= 0:
            raise ValueError("footprint NDF has no mass inside the unit disk")
        out /= total * (2.0 / resolution) ** 2
    return out, total


# -- public evaluation --------------------------------------------------------

def eval_pndf_image(nmap: NormalMap, fp: Footprint,
                    rough: IntrinsicRoughness = IntrinsicRoughness(),
                    resolution: int = DEFAULT_RESOLUTION, *,
                    boundary=None, supersample: int = 1) -> NdfImage:
    """Discretised patch NDF of one footprint.

    ``supersample`` > 1 subdivides every texel into ``s x s`` footprint
    sample positions and every NDF pixel into ``s x s`` sub-pixels that are
    box-filtered back down; it exists to check the standard discretisation.
    """
    nx, ny, w, mass = texel_samples(nmap, fp, boundary, supersample)
    if mass == 0.0:
        raise FootprintError("footprint does not overlap the map")
    if supersample == 1:
        values, _ = splat_image(nx, ny, w, resolution, rough.sigma_r)
    else:
        fine, _ = splat_image(nx, ny, w, resolution * supersample, rough.sigma_r)
        s = supersample
        values = fine.reshape(resolution, s, resolution, s).mean(axis=(1, 3))
        values /= values.sum() * (2.0 / resolution) ** 2
    return NdfImage(values)


def eval_pndf_point(nmap: NormalMap, fp: Footprint, h,
                    rough: IntrinsicRoughness = IntrinsicRoughness(),
                    resolution: int = DEFAULT_RESOLUTION, *, boundary=None):
    """Continuous patch NDF at projected half vector(s) ``h``.

    Uses the same normalisation as :func:`eval_pndf_image` at
    ``resolution``, so the average of this function over an image pixel
    equals that pixel's value.  ``h`` may be shape (2,) or (N, 2).
    """
    h = np.asarray(h, dtype=np.float64)
    single = h.ndim == 1
    h2 = np.atleast_2d(h)
    if np.any(np.sum(h2 * h2, axis=1) > 1.0 + 1e-12):
        raise ValueError("projected half vector must satisfy |h| <= 1")
    nx, ny, w, mass = texel_samples(nmap, fp, boundary)
    if mass == 0.0:
        raise FootprintError("footprint does not overlap the map")
    norm = _in_disk_mass(nx, ny, w, resolution, rough.sigma_r, _mask(resolution))
    out = np.empty(len(h2))
    _lobe_sum(nx, ny, w, np.ascontiguousarray(h2[:, 0]), np.ascontiguousarray(h2[:, 1]),
              rough.sigma_r, out)
    out /= norm
    return float(out[0]) if single else out


def pndf_point_batch(nmap: NormalMap, centers, sigmas, h,
                     rough: IntrinsicRoughness = IntrinsicRoughness(),
                     resolution: int = DEFAULT_RESOLUTION, boundary=None):
    """Point evaluation for many independent (footprint, h) pairs."""
    centers = np.asarray(centers, dtype=np.float64).reshape(-1, 2)
    sigmas = np.broadcast_to(np.asarray(sigmas, dtype=np.float64), (len(centers),))
    h = np.asarray(h, dtype=np.float64).reshape(-1, 2)
    return np.array([eval_pndf_point(nmap, Footprint(c, s), hh, rough, resolution,
                                     boundary=boundary)
                     for c, s, hh in zip(centers, sigmas, h)])
