"""Normal-map exemplars: loading, validation and procedural generation.

Normals live in tangent space with +z up.  Arrays are indexed ``[row, col]``
so a texel at integer coordinates ``(x, y)`` covers ``[x, x+1) x [y, y+1)``
and ``normals[y, x]`` is its normal.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError

RAW_MAGIC = b"GCRF"
_RAW_HEADER = struct.Struct("<4sIII")

KINDS = ("isotropic-noise", "brushed-metal", "metallic-flakes")


@dataclass(frozen=True, eq=False)
class NormalMap:
    """A grid of unit tangent-space normals.

    Parameters
    ----------
    normals : ndarray, shape (height, width, 3)
        Unit vectors with positive z.
    texel_extent : float
        Physical size of one texel.  1 means plain texel (UV) units.
    tileable : bool
        Whether the map wraps seamlessly at its borders.
    """

    normals: np.ndarray
    texel_extent: float = 1.0
    tileable: bool = False
    name: str = field(default="", compare=False)

    def __post_init__(self):
        n = np.ascontiguousarray(self.normals, dtype=np.float64)
        if n.ndim != 3 or n.shape[2] != 3:
            raise ValueError(f"normals must have shape (H, W, 3), got {n.shape}")
        if n.shape[0] <= 0 or n.shape[1] <= 0:
            raise ValueError("normal map must have positive dimensions")
        if not np.all(np.isfinite(n)):
            raise ValueError("normal map contains non-finite values")
        bad = n[..., 2] <= 0.0
        if bad.any():
            y, x = np.argwhere(bad)[0]
            raise ValueError(
                f"degenerate normal at texel (x={x}, y={y}): z={n[y, x, 2]:.6g} <= 0")
        length = np.linalg.norm(n, axis=2)
        if np.max(np.abs(length - 1.0)) > 1e-6:
            raise ValueError("normals must have unit length within 1e-6")
        if self.texel_extent <= 0:
            raise ValueError("texel_extent must be positive")
        n.setflags(write=False)
        object.__setattr__(self, "normals", n)

    @property
    def width(self) -> int:
        return self.normals.shape[1]

    @property
    def height(self) -> int:
        return self.normals.shape[0]

    @property
    def shape(self):
        return self.normals.shape[:2]

    def projected(self) -> np.ndarray:
        """(H, W, 2) array of the normals' (x, y) components."""
        return self.normals[..., :2]


def normalize(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def heightfield_to_normals(height: np.ndarray, tileable: bool = False,
                           texel_extent: float = 1.0) -> np.ndarray:
    """Central-difference normals of a heightfield given in texel units.

    Periodic differences are used when ``tileable``; otherwise the borders
    fall back to one-sided differences.
    """
    h = np.asarray(height, dtype=np.float64)
    if tileable:
        dx = (np.roll(h, -1, axis=1) - np.roll(h, 1, axis=1)) / 2.0
        dy = (np.roll(h, -1, axis=0) - np.roll(h, 1, axis=0)) / 2.0
    else:
        dy, dx = np.gradient(h)
    dx = dx / texel_extent
    dy = dy / texel_extent
    n = np.stack([-dx, -dy, np.ones_like(h)], axis=-1)
    return normalize(n)


def encode_rgb(normals: np.ndarray) -> np.ndarray:
    """Map unit normals to RGB in [0, 1]."""
    return np.clip((np.asarray(normals) + 1.0) * 0.5, 0.0, 1.0)


def decode_rgb(rgb: np.ndarray) -> np.ndarray:
    """Map RGB (or RG) in [0, 1] to unit normals.

    With two channels the z component is rebuilt as ``sqrt(1 - x^2 - y^2)``.
    """
    rgb = np.asarray(rgb, dtype=np.float64)
    xy = rgb[..., :2] * 2.0 - 1.0
    if rgb.shape[-1] >= 3:
        z = rgb[..., 2] * 2.0 - 1.0
    else:
        z = np.sqrt(np.clip(1.0 - np.sum(xy * xy, axis=-1), 0.0, None))
    n = np.concatenate([xy, z[..., None]], axis=-1)
    length = np.linalg.norm(n, axis=-1, keepdims=True)
    with np.errstate(invalid="ignore", divide="ignore"):
        return n / length


# -- file I/O -------------------------------------------------------------

def write_raw(path, data: np.ndarray) -> None:
    """Write an (H, W) or (H, W, C) array as planar little-endian float32."""
    a = np.asarray(data, dtype="<f4")
    if a.ndim == 2:
        a = a[..., None]
    h, w, c = a.shape
    with open(path, "wb") as f:
        f.write(_RAW_HEADER.pack(RAW_MAGIC, w, h, c))
        f.write(np.ascontiguousarray(np.moveaxis(a, -1, 0)).tobytes())


def read_raw(path) -> np.ndarray:
    """Read a planar float32 file; returns an (H, W, C) float64 array."""
    blob = Path(path).read_bytes()
    if len(blob) < _RAW_HEADER.size:
        raise FormatError(f"{path}: truncated raw header")
    magic, w, h, c = _RAW_HEADER.unpack_from(blob)
    if magic != RAW_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if w <= 0 or h <= 0 or c <= 0:
        raise FormatError(f"{path}: non-positive dimensions {w}x{h}x{c}")
    expected = _RAW_HEADER.size + 4 * w * h * c
    if len(blob) != expected:
        raise FormatError(f"{path}: expected {expected} bytes, found {len(blob)}")
    planes = np.frombuffer(blob, dtype="<f4", offset=_RAW_HEADER.size).reshape(c, h, w)
    return np.moveaxis(planes, 0, -1).astype(np.float64)


def _read_png(path) -> np.ndarray:
    import cv2

    img = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if img is None:
        raise FormatError(f"{path}: unreadable image")
    if img.dtype == np.uint8:
        scale = 255.0
    elif img.dtype == np.uint16:
        scale = 65535.0
    else:
        raise FormatError(f"{path}: unsupported sample type {img.dtype}")
    img = img.astype(np.float64) / scale
    if img.ndim == 3:
        # OpenCV stores BGR(A)
        img = img[..., :3][..., ::-1] if img.shape[2] >= 3 else img
    else:
        img = img[..., None]
    return img


def write_png(path, normals: np.ndarray, bits: int = 16) -> None:
    """Encode normals as an RGB PNG with 8 or 16 bits per channel."""
    import cv2

    rgb = encode_rgb(normals)
    if bits == 8:
        q = np.round(rgb * 255.0).astype(np.uint8)
    elif bits == 16:
        q = np.round(rgb * 65535.0).astype(np.uint16)
    else:
        raise ValueError("bits must be 8 or 16")
    if not cv2.imwrite(str(path), q[..., ::-1]):
        raise FormatError(f"{path}: failed to write PNG")


def load_normal_map(path, encoding: str = "unit-vector-image", *,
                    height_scale: float = 1.0, tileable: bool = False,
                    texel_extent: float = 1.0) -> NormalMap:
    """Load a normal map from a PNG or raw float32 file.

    Parameters
    ----------
    encoding : {"unit-vector-image", "heightfield"}
        Unit-vector images store normals as RGB (PNG: [0, 1] mapped to
        [-1, 1]; raw: the components themselves).  Heightfields store one
        height channel in texel units (PNG values are multiplied by
        ``height_scale``).
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(path)
    is_raw = path.read_bytes()[:4] == RAW_MAGIC
    data = read_raw(path) if is_raw else _read_png(path)
    h, w = data.shape[:2]
    if h <= 0 or w <= 0:
        raise FormatError(f"{path}: non-positive dimensions")

    if encoding == "heightfield":
        height = data[..., 0] * (1.0 if is_raw else height_scale)
        normals = heightfield_to_normals(height, tileable, texel_extent)
    elif encoding == "unit-vector-image":
        if is_raw:
            n = data[..., :3] if data.shape[2] >= 3 else decode_rgb((data[..., :2] + 1) / 2)
            with np.errstate(invalid="ignore", divide="ignore"):
                normals = n / np.linalg.norm(n, axis=-1, keepdims=True)
        else:
            if data.shape[2] < 2:
                raise FormatError(f"{path}: normal image needs at least two channels")
            normals = decode_rgb(data)
        bad = ~(normals[..., 2] > 0.0)
        if bad.any():
            y, x = np.argwhere(bad)[0]
            raise ValueError(f"{path}: degenerate normal at texel (x={x}, y={y})")
    else:
        raise ValueError(f"unknown encoding {encoding!r}")
    return NormalMap(normals, texel_extent=texel_extent, tileable=tileable, name=path.stem)


def save_normal_map(path, nmap: NormalMap) -> None:
    """Save in the raw planar float32 format."""
    write_raw(path, nmap.normals)


# -- procedural exemplars ---------------------------------------------------

def _periodic_noise(rng, n, corr_x, corr_y):
    """Unit-variance periodic Gaussian noise with Gaussian spectrum."""
    white = rng.standard_normal((n, n))
    kx = np.fft.fftfreq(n)[None, :]
    ky = np.fft.fftfreq(n)[:, None]
    spectrum = np.exp(-2.0 * np.pi ** 2 * ((kx * corr_x) ** 2 + (ky * corr_y) ** 2))
    field = np.real(np.fft.ifft2(np.fft.fft2(white) * spectrum))
    return (field - field.mean()) / field.std()


def _slope_scaled_normals(height, slope):
    """Scale a periodic heightfield so the RMS gradient equals ``slope``."""
    dx = (np.roll(height, -1, axis=1) - np.roll(height, 1, axis=1)) / 2.0
    dy = (np.roll(height, -1, axis=0) - np.roll(height, 1, axis=0)) / 2.0
    rms = np.sqrt(np.mean(dx * dx + dy * dy))
    return heightfield_to_normals(height * (slope / rms), tileable=True)


def _periodic_voronoi(rng, n, count):
    """Label map of a periodic Voronoi partition with ``count`` sites."""
    from scipy.spatial import cKDTree

    sites = rng.uniform(0.0, n, size=(count, 2))
    tree = cKDTree(sites, boxsize=n)
    yy, xx = np.mgrid[0:n, 0:n] + 0.5
    _, labels = tree.query(np.column_stack([xx.ravel(), yy.ravel()]))
    return labels.reshape(n, n)


def generate_exemplar(kind: str, resolution: int = 512, seed: int = 0,
                      **params) -> NormalMap:
    """Deterministic, tileable procedural normal map.

    Kinds and their parameters:

    ``isotropic-noise``
        ``correlation`` (texels, default 6), ``slope`` (RMS gradient,
        default 0.18).
    ``brushed-metal``
        ``length`` (correlation along x, default 96), ``width`` (across,
        default 1.5), ``slope`` (default 0.18).  Grooves run along x, so the
        normals tilt mostly in y.
    ``metallic-flakes``
        ``density`` (flakes per texel^2, default 1/256), ``tilt`` (std of
        the flake slope, default 0.2).
    """
    if resolution < 256 or resolution & (resolution - 1):
        raise ValueError(f"resolution must be a power of two >= 256, got {resolution}")
    rng = np.random.default_rng(np.random.SeedSequence([seed, KINDS.index(kind)
                                                        if kind in KINDS else 99]))
    n = resolution
    if kind == "isotropic-noise":
        corr = float(params.get("correlation", 6.0))
        h = _periodic_noise(rng, n, corr, corr)
        normals = _slope_scaled_normals(h, float(params.get("slope", 0.18)))
    elif kind == "brushed-metal":
        h = _periodic_noise(rng, n, float(params.get("length", 96.0)),
                            float(params.get("width", 1.5)))
        normals = _slope_scaled_normals(h, float(params.get("slope", 0.18)))
    elif kind == "metallic-flakes":
        density = float(params.get("density", 1.0 / 256.0))
        count = max(1, int(round(density * n * n)))
        labels = _periodic_voronoi(rng, n, count)
        slopes = rng.normal(0.0, float(params.get("tilt", 0.2)), size=(count, 2))
        flake_n = normalize(np.column_stack([slopes, np.ones(count)]))
        normals = flake_n[labels]
    else:
        raise ValueError(f"unknown exemplar kind {kind!r}; expected one of {KINDS}")
    return NormalMap(normals, tileable=True, name=f"{kind}-{seed}")


def constant_map(normal, resolution: int = 256, tileable: bool = True) -> NormalMap:
    """Map where every texel has the same normal (handy for tests)."""
    n = normalize(np.asarray(normal, dtype=np.float64))
    return NormalMap(np.broadcast_to(n, (resolution, resolution, 3)).copy(),
                     tileable=tileable, name="constant")
