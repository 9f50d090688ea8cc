"""Small vectorised path tracer for glint materials.

Every camera sample is traced independently with a counter-based random
stream keyed by (seed, pixel, sample, dimension), so images do not depend
on how pixels are split between workers.
"""

from __future__ import annotations

import json
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from ..envlight import prefilter_range, sample_environment, sg_support_angle
from ..oracle import Footprint, IntrinsicRoughness, pndf_point_batch, save_png
from ..sampler import SampleRecord, sample_batch
from ..store import CompressedNdf, eval_ndf_batch, eval_ndf_range_batch
from ..wangtiles import eval_ndf_tiled_batch, sample_tiled_batch
from .brdf import eval_brdf, masking_alpha
from .footprint import amplify_indirect_footprint, differential_sigma
from .scene import Scene

ESTIMATORS = ("eval", "sample", "mis")

# random dimensions per camera sample
_D_PIXEL, _D_BRDF, _D_ENV, _D_BOUNCE, _D_INDIRECT, _D_AREA = 0, 2, 4, 7, 9, 16


@dataclass(frozen=True)
class RenderSettings:
    spp: int = 4
    max_bounces: int = 1
    estimator: str = "eval"
    prefilter: bool = False
    seed: int = 0
    workers: int = 1
    masking: bool | None = None  # None: follow the material
    jitter: bool = True
    keep_samples: bool = False
    glossiness: float = 0.9  # lobe-spread model for indirect footprints
    rows_per_chunk: int = 8
    region: tuple | None = None  # (x0, y0, x1, y1) pixel window, end-exclusive

    def __post_init__(self):
        if self.spp < 1:
            raise ValueError("spp must be at least 1")
        if self.max_bounces not in (1, 2):
            raise ValueError("max_bounces must be 1 or 2")
        if self.estimator not in ESTIMATORS:
            raise ValueError(f"estimator must be one of {ESTIMATORS}")
        if self.region is not None:
            x0, y0, x1, y1 = self.region
            if not (0 <= x0 < x1 and 0 <= y0 < y1):
                raise ValueError(f"invalid render region {self.region}")


@dataclass(eq=False)
class RenderResult:
    image: np.ndarray  # (H, W, 3) linear radiance
    stats: dict = field(default_factory=dict)
    samples: np.ndarray | None = None  # (H, W, spp, 3) when kept

    def save(self, prefix):
        prefix = str(prefix)
        write_pfm(prefix + ".pfm", self.image)
        save_png(prefix + ".png", tonemap(self.image))
        Path(prefix + ".stats.json").write_text(json.dumps(self.stats, indent=2, default=float))


# -- NDF sources ----------------------------------------------------------------------

class _Timed:
    def _clock(self, key, t0, stats):
        if stats is not None:
            stats[key] = stats.get(key, 0.0) + time.perf_counter() - t0


class StoreSource(_Timed):
    """NDF lookups from one compressed store (optionally with an oracle fallback map)."""

    def __init__(self, store: CompressedNdf, fallback=None):
        self.store = store
        self.fallback = fallback
        self.resolution = store.resolution
        self.sigma_r = store.params.sigma_r

    def eval(self, centers, sigmas, h, stats=None):
        t0 = time.perf_counter()
        out = eval_ndf_batch(self.store, centers, sigmas, h, self.fallback, stats)
        self._clock("eval_seconds", t0, stats)
        return out

    def eval_range(self, centers, sigmas, x1, x2, y1, y2, stats=None):
        t0 = time.perf_counter()
        out = eval_ndf_range_batch(self.store, centers, sigmas, x1, x2, y1, y2, self.fallback,
                                   stats)
        self._clock("eval_seconds", t0, stats)
        return out

    def sample(self, centers, sigmas, u, stats=None) -> SampleRecord:
        t0 = time.perf_counter()
        rec = sample_batch(self.store, centers, sigmas, u, self.fallback)
        self._clock("sample_seconds", t0, stats)
        if stats is not None:
            stats["samples"] = stats.get("samples", 0) + len(u)
        return rec


class TiledSource(_Timed):
    """NDF lookups over an implicit Wang tiling; footprints are in world texels."""

    def __init__(self, field_, tileset):
        self.field = field_
        self.tileset = tileset
        self.resolution = tileset.stores[0].resolution
        self.sigma_r = tileset.stores[0].params.sigma_r

    def eval(self, centers, sigmas, h, stats=None):
        t0 = time.perf_counter()
        out = eval_ndf_tiled_batch(self.field, self.tileset, centers, sigmas, h, stats=stats)
        self._clock("eval_seconds", t0, stats)
        return out

    def eval_range(self, centers, sigmas, x1, x2, y1, y2, stats=None):
        raise NotImplementedError("prefiltered range queries are not available on tiled sources")

    def sample(self, centers, sigmas, u, stats=None):
        t0 = time.perf_counter()
        rec = sample_tiled_batch(self.field, self.tileset, centers, sigmas, u)
        self._clock("sample_seconds", t0, stats)
        return rec


class OracleSource(_Timed):
    """Brute-force footprint NDFs straight from the normal map (reference renders)."""

    def __init__(self, nmap, sigma_r=0.005, resolution=256):
        self.nmap = nmap
        self.sigma_r = sigma_r
        self.resolution = resolution

    def eval(self, centers, sigmas, h, stats=None):
        t0 = time.perf_counter()
        out = pndf_point_batch(self.nmap, centers, sigmas, h, IntrinsicRoughness(self.sigma_r),
                               self.resolution, boundary="wrap" if self.nmap.tileable else "clip")
        self._clock("eval_seconds", t0, stats)
        return out

    def eval_range(self, *args, **kw):
        raise NotImplementedError("the oracle source only supports point evaluation")

    def sample(self, *args, **kw):
        raise NotImplementedError("the oracle source cannot be sampled")


# -- random numbers --------------------------------------------------------------------

def _mix(x):
    with np.errstate(over="ignore"):
        x = x + np.uint64(0x9E3779B97F4A7C15)
        x = (x ^ (x >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        x = (x ^ (x >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
        return x ^ (x >> np.uint64(31))


def uniforms(seed, pixel, sample, dims):
    """Counter-based uniforms in [0, 1): shape (N, len(dims))."""
    pixel = np.asarray(pixel, dtype=np.uint64)
    sample = np.asarray(sample, dtype=np.uint64)
    with np.errstate(over="ignore"):
        base = _mix(_mix(np.uint64(seed) ^ _mix(pixel)) ^ (sample * np.uint64(0x9E3779B97F4A7C15)))
        out = np.empty((len(pixel), len(dims)))
        for k, d in enumerate(dims):
            out[:, k] = (_mix(base + np.uint64(d) * np.uint64(0xD1B54A32D192ED03))
                         >> np.uint64(11)).astype(np.float64) * 2.0 ** -53
    return out


# -- geometry helpers ------------------------------------------------------------------

def _dot(a, b):
    return np.einsum("ij,ij->i", a, b)


def _normalize(v):
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def _project(h, t, b):
    hp = np.stack([_dot(h, t), _dot(h, b)], axis=1)
    r2 = np.sum(hp * hp, axis=1)
    return np.where((r2 > 1.0)[:, None], hp / np.sqrt(r2)[:, None], hp)


def _occluded(geometry, p, n, d, dist):
    t = geometry.intersect(p + 1e-6 * n, d)
    return t < dist * (1 - 1e-6)


class _Shader:
    def __init__(self, scene: Scene, source, settings: RenderSettings):
        self.scene = scene
        self.source = source
        self.settings = settings
        mat = scene.material
        use_g = mat.masking if settings.masking is None else settings.masking
        self.alpha = masking_alpha(source.sigma_r, mat.slope_rms) if use_g else None
        self.f0 = np.asarray(mat.f0, dtype=np.float64)
        env = scene.environment
        self.env_theta = (np.array([sg_support_angle(sg) for sg in env.lobes])
                          if env is not None else None)

    # brdf value times cosine for incident directions wi
    def _fcos(self, D, wi, o, n, h):
        cos_i = _dot(wi, n)
        cos_o = _dot(o, n)
        return eval_brdf(self.f0, D, cos_i, cos_o, _dot(wi, h), self.alpha) * \
            np.maximum(cos_i, 0.0)[:, None]

    def _brdf_pdf(self, D, o, h, n):
        """Solid-angle pdf of the NDF sampler producing the reflection about ``h``."""
        return D * np.maximum(_dot(h, n), 0.0) / (4.0 * np.maximum(np.abs(_dot(o, h)), 1e-12))

    def _half(self, wi, o, t, b):
        h = _normalize(wi + o)
        return h, _project(h, t, b)

    def direct(self, p, frame, o, centers, sigmas, u, brdf_rec, stats, light_only=False):
        """Direct lighting at surface points; returns (N, 3)."""
        t, b, n = frame
        s = self.settings
        geo = self.scene.geometry
        N = len(p)
        L = np.zeros((N, 3))
        use_light = light_only or s.estimator in ("eval", "mis")
        use_brdf = not light_only and s.estimator in ("sample", "mis")
        mis = not light_only and s.estimator == "mis"

        for light in self.scene.point_lights:
            d = np.asarray(light.position) - p
            dist = np.linalg.norm(d, axis=1)
            wi = d / dist[:, None]
            ok = (_dot(wi, n) > 0) & ~_occluded(geo, p, n, wi, dist)
            if not ok.any():
                continue
            h, hp = self._half(wi[ok], o[ok], t[ok], b[ok])
            D = self.source.eval(centers[ok], sigmas[ok], hp, stats)
            L[ok] += self._fcos(D, wi[ok], o[ok], n[ok], h) * \
                (np.asarray(light.intensity) / (dist[ok] ** 2)[:, None])

        env = self.scene.environment
        if use_light:
            for k, light in enumerate(self.scene.area_lights):
                ua = u[:, _D_AREA + 2 * k:_D_AREA + 2 * k + 2]
                q = (np.asarray(light.corner) + ua[:, :1] * np.asarray(light.edge_u)
                     + ua[:, 1:] * np.asarray(light.edge_v))
                d = q - p
                dist = np.linalg.norm(d, axis=1)
                wi = d / dist[:, None]
                cos_l = -(wi @ light.normal)
                ok = (cos_l > 0) & (_dot(wi, n) > 0) & ~_occluded(geo, p, n, wi, dist)
                if not ok.any():
                    continue
                pdf_l = dist[ok] ** 2 / (light.area * cos_l[ok])
                h, hp = self._half(wi[ok], o[ok], t[ok], b[ok])
                D = self.source.eval(centers[ok], sigmas[ok], hp, stats)
                w = 1.0
                if mis:
                    pb = self._brdf_pdf(D, o[ok], h, n[ok])
                    w = (pdf_l / (pdf_l + pb))[:, None]
                L[ok] += w * self._fcos(D, wi[ok], o[ok], n[ok], h) * \
                    np.asarray(light.radiance) / pdf_l[:, None]
            if env is not None:
                idx, wi, _, pdf_e = sample_environment(env, u[:, _D_ENV:_D_ENV + 3])
                ok = (_dot(wi, n) > 0) & ~_occluded(geo, p, n, wi, np.inf)
                if ok.any():
                    h, hp = self._half(wi[ok], o[ok], t[ok], b[ok])
                    if s.prefilter and not mis:
                        x1, x2, y1, y2 = prefilter_range(hp, self.env_theta[idx[ok]],
                                                         self.source.resolution)
                        D = self.source.eval_range(centers[ok], sigmas[ok], x1, x2, y1, y2, stats)
                    else:
                        D = self.source.eval(centers[ok], sigmas[ok], hp, stats)
                    w = 1.0
                    if mis:
                        pb = self._brdf_pdf(D, o[ok], h, n[ok])
                        w = (pdf_e[ok] / (pdf_e[ok] + pb))[:, None]
                    L[ok] += w * self._fcos(D, wi[ok], o[ok], n[ok], h) * \
                        env.radiance(wi[ok]) / pdf_e[ok][:, None]

        if use_brdf and brdf_rec is not None:
            wi, h, weight, valid = brdf_rec
            if valid.any():
                v = np.nonzero(valid)[0]
                Le = np.zeros((len(v), 3))
                pl = np.zeros(len(v))
                blocked = geo.intersect(p[v] + 1e-6 * n[v], wi[v]) < np.inf
                nearest = np.full(len(v), np.inf)
                for light in self.scene.area_lights:
                    tl = light.intersect(p[v], wi[v])
                    hit = (tl < nearest) & ~blocked
                    if hit.any():
                        nearest = np.where(hit, tl, nearest)
                        cos_l = -(wi[v][hit] @ light.normal)
                        Le[hit] = np.asarray(light.radiance)
                        pl[hit] = tl[hit] ** 2 / (light.area * cos_l)
                if env is not None:
                    sky = ~blocked & ~np.isfinite(nearest)
                    Le[sky] = env.radiance(wi[v][sky])
                    pl[sky] = env.pdf(wi[v][sky])
                w = 1.0
                if mis:
                    pb = weight[1][v]
                    w = (pb / (pb + pl))[:, None]
                L[v] += w * weight[0][v] * Le
        return L

    def sample_brdf(self, o, frame, centers, sigmas, u, stats):
        """One NDF-sampled incident direction per point.

        Returns ``(wi, h, (throughput, solid-angle pdf), valid)`` where
        throughput is f cos / pdf.
        """
        t, b, n = frame
        rec = self.source.sample(centers, sigmas, u, stats)
        hp = rec.h
        hz = np.sqrt(np.maximum(0.0, 1.0 - np.sum(hp * hp, axis=1)))
        h = hp[:, :1] * t + hp[:, 1:] * b + hz[:, None] * n
        oh = _dot(o, h)
        wi = 2.0 * oh[:, None] * h - o
        valid = rec.valid & (oh > 0) & (_dot(wi, n) > 0)
        pdf = np.where(valid, self._brdf_pdf(rec.pdf, o, h, n), 0.0)
        thr = np.zeros((len(o), 3))
        if valid.any():
            v = valid
            thr[v] = self._fcos(rec.pdf[v], wi[v], o[v], n[v], h[v]) / pdf[v][:, None]
        return wi, h, (thr, pdf), valid


def _needs_brdf_samples(scene, settings):
    lit_by_brdf = settings.estimator in ("sample", "mis") and (
        scene.area_lights or scene.environment is not None)
    return lit_by_brdf or settings.max_bounces > 1


def _shade_rows(shader, rows, cols, stats):
    scene, source, settings = shader.scene, shader.source, shader.settings
    cam = scene.camera
    geo = scene.geometry
    W = cam.width
    spp = settings.spp
    ys, xs, ss = np.meshgrid(np.asarray(rows), np.asarray(cols), np.arange(spp), indexing="ij")
    pix = (ys * W + xs).ravel()
    smp = ss.ravel()
    n_dims = _D_AREA + 2 * len(scene.area_lights)
    u = uniforms(settings.seed, pix, smp, range(n_dims))
    jx = u[:, 0] if settings.jitter else 0.5
    jy = u[:, 1] if settings.jitter else 0.5
    px = xs.ravel() + jx
    py = ys.ravel() + jy
    o_cam, d = cam.rays(px, py)
    t_hit = geo.intersect(o_cam, d)
    hit = np.isfinite(t_hit)
    L = np.zeros((len(pix), 3))
    env = scene.environment
    if env is not None and (~hit).any():
        L[~hit] = env.radiance(d[~hit])
    if hit.any():
        hi = np.nonzero(hit)[0]
        p = o_cam[hi] + t_hit[hi, None] * d[hi]
        frame = geo.frame(p)
        t, b, n = frame
        o = -d[hi]
        # ray differentials: neighbouring pixel rays meet the tangent plane
        diffs = []
        for dx, dy in ((1.0, 0.0), (0.0, 1.0)):
            _, d2 = cam.rays(px[hi] + dx, py[hi] + dy)
            denom = _dot(d2, n)
            with np.errstate(divide="ignore", invalid="ignore"):
                t2 = _dot(p - o_cam[hi], n) / denom
            q = o_cam[hi] + t2[:, None] * d2
            diffs.append((q - p)[:, :2] / geo.texel_extent)
        sig = differential_sigma(diffs[0], diffs[1], spp, cam.pixel_angle, t_hit[hi],
                                 geo.texel_extent)
        centers = geo.texel(p)
        uh = u[hi]
        brdf_rec = None
        if _needs_brdf_samples(scene, settings):
            brdf_rec = shader.sample_brdf(o, frame, centers, sig, uh[:, _D_BRDF:_D_BRDF + 2],
                                          stats)
        Lh = shader.direct(p, frame, o, centers, sig, uh, brdf_rec, stats)
        if settings.max_bounces > 1 and brdf_rec is not None:
            wi, _, (thr, _), valid = brdf_rec
            if valid.any():
                v = np.nonzero(valid)[0]
                t2 = geo.intersect(p[v] + 1e-6 * n[v], wi[v])
                again = np.isfinite(t2)
                if again.any():
                    w = v[again]
                    q = p[w] + 1e-6 * n[w] + t2[again, None] * wi[w]
                    fq = geo.frame(q)
                    sig_q = np.array([amplify_indirect_footprint(
                        _fp(centers[k], sig[k]), settings.glossiness, float(tt),
                        geo.texel_extent).sigma_p for k, tt in zip(w, t2[again])])
                    u2 = uniforms(settings.seed, pix[hi][w], smp[hi][w] + spp * 7919,
                                  range(n_dims))
                    Lq = shader.direct(q, fq, -wi[w], geo.texel(q), sig_q, u2, None, stats,
                                       light_only=True)
                    Lh[w] += thr[w] * Lq
                    if stats is not None:
                        stats["indirect_hits"] = stats.get("indirect_hits", 0) + len(w)
        L[hi] = Lh
        if stats is not None:
            stats["sigma_p_sum"] = stats.get("sigma_p_sum", 0.0) + float(sig.sum())
            stats["shading_points"] = stats.get("shading_points", 0) + len(hi)
    return L.reshape(len(rows), len(cols), spp, 3)


def _fp(c, s):
    return Footprint(tuple(c), float(s))


def _validate(scene: Scene, source, settings: RenderSettings):
    if settings.prefilter and scene.environment is None:
        raise ValueError("prefiltering needs an SG environment light")
    if settings.estimator in ("sample", "mis") and isinstance(source, OracleSource):
        raise ValueError("the oracle source supports only the eval estimator")
    if settings.prefilter and isinstance(source, (OracleSource, TiledSource)):
        raise ValueError("prefiltering needs range queries from a compressed store")


def render(scene: Scene, source, settings: RenderSettings = RenderSettings()) -> RenderResult:
    """Render ``scene`` with NDF lookups from ``source``.

    ``source`` is a :class:`StoreSource`, :class:`TiledSource`,
    :class:`OracleSource`, or a bare ``CompressedNdf``.
    """
    if isinstance(source, CompressedNdf):
        source = StoreSource(source)
    _validate(scene, source, settings)
    cam = scene.camera
    x0, y0, x1, y1 = settings.region or (0, 0, cam.width, cam.height)
    x1, y1 = min(x1, cam.width), min(y1, cam.height)
    H, W = y1 - y0, x1 - x0
    cols = np.arange(x0, x1)
    chunks = [list(range(r, min(r + settings.rows_per_chunk, y1)))
              for r in range(y0, y1, settings.rows_per_chunk)]
    t0 = time.perf_counter()
    shader = _Shader(scene, source, settings)

    def work(rows):
        st = {}
        return rows, _shade_rows(shader, rows, cols, st), st

    if settings.workers > 1:
        with ThreadPoolExecutor(settings.workers) as pool:
            parts = list(pool.map(work, chunks))
    else:
        parts = [work(rows) for rows in chunks]
    samples = np.zeros((H, W, settings.spp, 3))
    stats = {}
    for rows, vals, st in parts:
        samples[np.asarray(rows) - y0] = vals
        for k, v in st.items():
            stats[k] = stats.get(k, 0) + v
    stats["seconds"] = time.perf_counter() - t0
    stats["settings"] = asdict(settings)
    stats["pixels"] = H * W
    if stats.get("shading_points"):
        stats["mean_sigma_p"] = stats["sigma_p_sum"] / stats["shading_points"]
    if stats.get("point_queries"):
        stats["eval_seconds_per_query"] = stats.get("eval_seconds", 0.0) / stats["point_queries"]
    image = samples.mean(axis=2)
    return RenderResult(image, stats, samples if settings.keep_samples else None)


# -- image output ----------------------------------------------------------------------

def tonemap(image, exposure=1.0):
    """Clamp and sRGB-encode linear radiance into [0, 1]."""
    x = np.clip(np.asarray(image) * exposure, 0.0, 1.0)
    return np.where(x <= 0.0031308, 12.92 * x, 1.055 * x ** (1 / 2.4) - 0.055)


def write_pfm(path, image):
    """Little-endian colour PFM (rows stored bottom-up)."""
    img = np.asarray(image, dtype="<f4")
    if img.ndim == 2:
        img = np.repeat(img[..., None], 3, axis=2)
    h, w = img.shape[:2]
    with open(path, "wb") as f:
        f.write(f"PF\n{w} {h}\n-1.0\n".encode("ascii"))
        f.write(np.ascontiguousarray(img[::-1]).tobytes())


def read_pfm(path):
    with open(path, "rb") as f:
        kind = f.readline().strip()
        w, h = (int(v) for v in f.readline().split())
        scale = float(f.readline())
        channels = 3 if kind == b"PF" else 1
        dtype = "<f4" if scale < 0 else ">f4"
        data = np.frombuffer(f.read(), dtype=dtype).reshape(h, w, channels)[::-1]
    return data.astype(np.float32) if channels == 3 else data[..., 0].astype(np.float32)
