"""Spherical-Gaussian environment lighting and angular prefiltering.

A lobe ``A * exp(lambda * (axis . d - 1))`` stays above ``eps * A`` inside a
cone of half-angle ``theta``; a light sample drawn from that lobe is then
uncertain by about ``theta``, and the NDF can be averaged over a square of
side ``Q = resolution * theta / pi`` pixels around the half vector instead
of being point-sampled.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .oracle import Footprint, pixel_of
from .store import CompressedNdf, eval_ndf_batch, eval_ndf_range_batch

DEFAULT_EPS = 0.3


@dataclass(frozen=True)
class SphericalGaussian:
    axis: tuple
    lam: float
    amplitude: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        a = np.asarray(self.axis, dtype=np.float64)
        if a.shape != (3,) or abs(np.linalg.norm(a) - 1.0) > 1e-6:
            raise ValueError(f"SG axis must be a unit 3-vector, got {self.axis}")
        if not (math.isfinite(self.lam) and self.lam > 0):
            raise ValueError(f"SG bandwidth must be positive, got {self.lam}")
        amp = np.atleast_1d(np.asarray(self.amplitude, dtype=np.float64))
        if not np.all(np.isfinite(amp)) or np.any(amp <= 0):
            raise ValueError(f"SG amplitude must be positive, got {self.amplitude}")
        object.__setattr__(self, "axis", tuple(float(x) for x in a))
        object.__setattr__(self, "amplitude", tuple(float(x) for x in amp))

    @property
    def luminance(self):
        return float(np.mean(self.amplitude))

    def integral(self):
        """Integral of the lobe over the sphere, per channel."""
        lam = self.lam
        return np.asarray(self.amplitude) * 2 * math.pi / lam * -math.expm1(-2 * lam)

    def __call__(self, d):
        """Radiance towards directions ``d`` (..., 3), shape (..., channels)."""
        cos = np.asarray(d, dtype=np.float64) @ np.asarray(self.axis)
        return np.exp(self.lam * (cos - 1.0))[..., None] * np.asarray(self.amplitude)

    def sample(self, u):
        """Directions drawn from the normalised lobe, and their solid-angle pdf."""
        u = np.atleast_2d(np.asarray(u, dtype=np.float64))
        lam = self.lam
        cos = 1.0 + np.log1p(-u[:, 0] * -np.expm1(-2 * lam)) / lam
        cos = np.clip(cos, -1.0, 1.0)
        sin = np.sqrt(np.maximum(0.0, 1.0 - cos * cos))
        phi = 2 * math.pi * u[:, 1]
        t, b = _frame(np.asarray(self.axis))
        d = (cos[:, None] * np.asarray(self.axis) + (sin * np.cos(phi))[:, None] * t
             + (sin * np.sin(phi))[:, None] * b)
        return d, self.pdf(d)

    def pdf(self, d):
        lam = self.lam
        cos = np.asarray(d) @ np.asarray(self.axis)
        return lam * np.exp(lam * (cos - 1.0)) / (2 * math.pi * -np.expm1(-2 * lam))


def _frame(n):
    a = np.array([1.0, 0.0, 0.0]) if abs(n[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    t = np.cross(n, a)
    t /= np.linalg.norm(t)
    return t, np.cross(n, t)


@dataclass(eq=False)
class SgEnvironment:
    lobes: list
    weights: np.ndarray = field(init=False)
    cdf: np.ndarray = field(init=False)

    def __post_init__(self):
        if not self.lobes:
            raise ValueError("environment has no lobes")
        energy = np.array([np.mean(sg.integral()) for sg in self.lobes])
        self.weights = energy / energy.sum()
        self.cdf = np.cumsum(self.weights)
        self.cdf[-1] = 1.0

    def __len__(self):
        return len(self.lobes)

    def radiance(self, d):
        return sum(sg(d) for sg in self.lobes)

    def pdf(self, d):
        """Solid-angle density of :func:`sample_environment` (mixture over lobes)."""
        return sum(w * sg.pdf(d) for w, sg in zip(self.weights, self.lobes))

    @classmethod
    def load(cls, path):
        """Read a lobe list: one lobe per line, ``ax ay az lambda r g b``; ``#`` comments."""
        lobes = []
        for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            vals = [float(x) for x in line.replace(",", " ").split()]
            if len(vals) not in (5, 7):
                raise ValueError(f"{path}:{lineno}: expected 'ax ay az lambda r [g b]'")
            axis = np.asarray(vals[:3])
            lobes.append(SphericalGaussian(tuple(axis / np.linalg.norm(axis)), vals[3],
                                           tuple(vals[4:]) if len(vals) == 7 else (vals[4],) * 3))
        return cls(lobes)

    def save(self, path):
        lines = ["# ax ay az lambda r g b"]
        for sg in self.lobes:
            amp = (sg.amplitude * 3)[:3] if len(sg.amplitude) == 1 else sg.amplitude
            lines.append(" ".join(f"{x:.9g}" for x in (*sg.axis, sg.lam, *amp)))
        Path(path).write_text("\n".join(lines) + "\n")


def fit_environment(image, n_lobes=4, seed=0, iterations=20):
    """Fit SG lobes to an equirectangular RGB image (rows = polar angle).

    Pixel directions are clustered by luminance-weighted k-means; each
    cluster becomes one lobe whose sharpness comes from the mean resultant
    length of its directions and whose amplitude preserves its energy.
    """
    image = np.asarray(image, dtype=np.float64)
    hgt, wid = image.shape[:2]
    theta = (np.arange(hgt) + 0.5) / hgt * math.pi
    phi = (np.arange(wid) + 0.5) / wid * 2 * math.pi
    th, ph = np.meshgrid(theta, phi, indexing="ij")
    dirs = np.stack([np.sin(th) * np.cos(ph), np.sin(th) * np.sin(ph), np.cos(th)], -1).reshape(-1, 3)
    solid = (np.sin(th) * (math.pi / hgt) * (2 * math.pi / wid)).ravel()
    rgb = image.reshape(-1, image.shape[2] if image.ndim == 3 else 1)
    lum = rgb.mean(axis=1) * solid
    if lum.sum() <= 0:
        raise ValueError("environment image has no energy")
    rng = np.random.default_rng(seed)
    centers = dirs[rng.choice(len(dirs), n_lobes, replace=False, p=lum / lum.sum())]
    for _ in range(iterations):
        label = np.argmax(dirs @ centers.T, axis=1)
        for k in range(n_lobes):
            m = label == k
            s = (lum[m, None] * dirs[m]).sum(0)
            if np.linalg.norm(s) > 0:
                centers[k] = s / np.linalg.norm(s)
    label = np.argmax(dirs @ centers.T, axis=1)
    lobes = []
    for k in range(n_lobes):
        m = label == k
        if lum[m].sum() <= 0:
            continue
        s = (lum[m, None] * dirs[m]).sum(0)
        rbar = min(np.linalg.norm(s) / lum[m].sum(), 0.999)
        lam = max(rbar * (3 - rbar * rbar) / (1 - rbar * rbar), 1e-3)
        energy = (rgb[m] * solid[m, None]).sum(0)
        norm = 2 * math.pi / lam * -math.expm1(-2 * lam)
        amp = np.maximum(energy / norm, 1e-12)
        lobes.append(SphericalGaussian(tuple(s / np.linalg.norm(s)), lam,
                                       tuple(np.resize(amp, 3))))
    return SgEnvironment(lobes)


def sg_support_angle(sg: SphericalGaussian, eps: float = DEFAULT_EPS, amplitude=None) -> float:
    """Half-angle of the cone where the lobe exceeds ``eps``.

    ``amplitude`` defaults to the lobe's mean amplitude.  Lobes too wide to
    ever fall below ``eps`` get ``pi``; lobes that never reach it get 0.
    """
    amp = sg.luminance if amplitude is None else amplitude
    if not eps > 0:
        raise ValueError("eps must be positive")
    if not amp > 0:
        raise ValueError("amplitude must be positive")
    arg = (math.log(eps) - math.log(amp)) / sg.lam + 1.0
    if arg <= -1.0:
        return math.pi
    if arg >= 1.0:
        return 0.0
    return math.acos(arg)


def sg_query_side(theta: float, ndf_resolution: int = 256) -> float:
    """Side of the prefiltering square, in NDF pixels, clamped to [1, resolution]."""
    if not 0.0 <= theta <= math.pi + 1e-12:
        raise ValueError(f"theta must lie in [0, pi], got {theta}")
    return float(min(max(ndf_resolution * theta / math.pi, 1.0), ndf_resolution))


def sample_environment(env: SgEnvironment, u):
    """Pick a lobe by energy and draw a direction from it.

    ``u`` is (N, 3): the first column selects the lobe, the remaining two
    drive the lobe's own sampler.  Returns ``(lobe_index, directions,
    selection_pdf, direction_pdf)``; ``direction_pdf`` is the density of the
    full mixture, which is what an unbiased estimator must divide by.
    """
    if len(env) == 0:
        raise ValueError("environment has no lobes")
    u = np.atleast_2d(np.asarray(u, dtype=np.float64))
    idx = np.minimum(np.searchsorted(env.cdf, u[:, 0], side="right"), len(env) - 1)
    d = np.empty((len(u), 3))
    for k, sg in enumerate(env.lobes):
        m = idx == k
        if m.any():
            d[m], _ = sg.sample(u[m, 1:3])
    return idx, d, env.weights[idx], env.pdf(d)


def _local_frame(normal):
    n = np.asarray(normal, dtype=np.float64)
    n = n / np.linalg.norm(n)
    t, b = _frame(n)
    return t, b, n


def half_vector_projection(i, o, frame):
    """Projected half vector (h_x, h_y) in the shading frame; NaN below the horizon."""
    t, b, n = frame
    h = i + o
    h = h / np.linalg.norm(h, axis=-1, keepdims=True)
    return np.stack([h @ t, h @ b], axis=-1), h @ n


def prefilter_range(h_proj, theta, resolution):
    """Q x Q pixel rectangle (clipped to the image) centred on projected half vectors."""
    side = np.asarray([int(round(sg_query_side(th, resolution))) for th in np.atleast_1d(theta)])
    side = np.maximum(side, 1)
    px, py = pixel_of(np.atleast_2d(h_proj), resolution).T
    lo_x = px - (side - 1) // 2
    lo_y = py - (side - 1) // 2
    x1 = np.clip(lo_x, 0, resolution - 1)
    y1 = np.clip(lo_y, 0, resolution - 1)
    x2 = np.clip(lo_x + side - 1, 0, resolution - 1)
    y2 = np.clip(lo_y + side - 1, 0, resolution - 1)
    return x1, x2, y1, y2


def shade_env(store: CompressedNdf, fp: Footprint, env: SgEnvironment, view, u, *,
              normal=(0.0, 0.0, 1.0), f0=(1.0, 1.0, 1.0), prefilter=True, eps=DEFAULT_EPS,
              alpha=None, fallback=None, ndf=None):
    """Per-sample light-sampled radiance estimates under an SG environment.

    Each row of ``u`` (N, 3) draws one incident direction from the
    environment; the NDF is either point-evaluated at the half vector or,
    with ``prefilter``, averaged over the lobe's Q x Q range.  Returns
    (N, channels) estimates whose mean is the pixel radiance.  ``ndf`` may
    replace the store lookup with a callable ``(centers, sigmas, h) -> D``.
    """
    from .render.brdf import eval_brdf

    frame = _local_frame(normal)
    o = np.asarray(view, dtype=np.float64)
    o = o / np.linalg.norm(o)
    u = np.atleast_2d(u)
    idx, wi, _, pdf_dir = sample_environment(env, u)
    n = frame[2]
    cos_i = wi @ n
    cos_o = float(o @ n)
    out = np.zeros((len(u), 3))
    ok = (cos_i > 0) & (cos_o > 0)
    if not ok.any():
        return out
    hp, _ = half_vector_projection(wi[ok], o[None], frame)
    centers = np.repeat(np.asarray(fp.center, dtype=np.float64)[None], ok.sum(), axis=0)
    sigmas = np.full(ok.sum(), fp.sigma_p)
    res = store.resolution
    if prefilter:
        # the half vector moves by half the incident angle, so a lobe of
        # support theta blurs the NDF by theta / 2 -- a square of side Q
        theta = np.array([sg_support_angle(env.lobes[k], eps) for k in idx[ok]])
        x1, x2, y1, y2 = prefilter_range(hp, theta, res)
        D = eval_ndf_range_batch(store, centers, sigmas, x1, x2, y1, y2, fallback)
    elif ndf is not None:
        D = ndf(centers, sigmas, hp)
    else:
        D = eval_ndf_batch(store, centers, sigmas, hp, fallback)
    h = (wi[ok] + o) / np.linalg.norm(wi[ok] + o, axis=1, keepdims=True)
    brdf = eval_brdf(f0, D, cos_i[ok], cos_o, np.sum(wi[ok] * h, axis=1), alpha)
    L = env.radiance(wi[ok])
    out[ok] = brdf * L * (cos_i[ok] / pdf_dir[ok])[:, None]
    return out
