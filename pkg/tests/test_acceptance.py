"""End-to-end acceptance checks, one test per criterion.

Each test records a PASS/FAIL line (printed and repeated in the terminal
summary) before asserting, so a failing criterion still reports its numbers.
The expensive artefacts (512^2 pyramid, four compressed stores, a Wang tile
set) are built once per session.
"""

import math
import time
import tracemalloc

import numpy as np
import pytest

from glintcache import build_pyramid, compress, generate_exemplar
from glintcache.cpd import CpFactors, block_range_mean, build_sats
from glintcache.envlight import SgEnvironment, SphericalGaussian, sg_query_side, sg_support_angle
from glintcache.oracle import Footprint, eval_pndf_image, eval_pndf_point, pixel_center, pixel_of
from glintcache.pyramid import PyramidParams
from glintcache.render import OracleSource, RenderSettings, StoreSource, bentquad_scene, render
from glintcache.sampler import sample_half_vector
from glintcache.store import AngularRange, eval_ndf, eval_ndf_batch, eval_ndf_range, reconstruction_error
from glintcache.wangtiles import TileField, assemble, build_tileset, eval_ndf_tiled_batch

pytestmark = pytest.mark.slow

RANKS = (4, 8, 16, 32)


def _unit(v):
    v = np.asarray(v, dtype=np.float64)
    return tuple(v / np.linalg.norm(v))


@pytest.fixture(scope="session")
def iso512():
    return generate_exemplar("isotropic-noise", 512, seed=0)


@pytest.fixture(scope="session")
def pyr512(iso512):
    return build_pyramid(iso512)


@pytest.fixture(scope="session")
def stores512(pyr512):
    out = {}
    for R in RANKS:
        t0 = time.perf_counter()
        out[R] = compress(pyr512, R)
        print(f"compressed R={R} in {time.perf_counter() - t0:.1f} s")
    return out


@pytest.fixture(scope="session")
def ladder(iso512, pyr512, stores512):
    """Criterion 4 renders, shared with criterion 8's error bound."""
    t0 = time.perf_counter()
    scene = bentquad_scene(64)
    settings = RenderSettings(spp=1, estimator="eval", masking=False)
    oracle = render(scene, OracleSource(iso512), settings).image[..., 0]
    uncompressed = render(scene, _PyramidSource(stores512[32], pyr512), settings).image[..., 0]
    images = {R: render(scene, stores512[R], settings).image[..., 0] for R in RANKS}
    recon = {R: reconstruction_error(stores512[R], pyr512) for R in RANKS}
    return {"oracle": oracle, "uncompressed": uncompressed, "images": images,
            "recon": recon, "seconds": time.perf_counter() - t0}


class _PyramidSource(StoreSource):
    """The uncompressed pyramid behind the same trilinear footprint blend as a store."""

    def __init__(self, store, pyramid):
        super().__init__(store)
        self.flat = np.concatenate([lv.images.reshape(-1, *lv.images.shape[2:])
                                    for lv in pyramid.levels]).astype(np.float64)

    def eval(self, centers, sigmas, h, stats=None):
        cells, w, _, _ = self.store.neighbors(centers, sigmas)
        px, py = pixel_of(np.asarray(h).reshape(-1, 2), self.resolution).T
        return np.sum(w * self.flat[cells, py[:, None], px[:, None]], axis=1)


def _rel_rmse(img, ref):
    return math.sqrt(np.mean((img - ref) ** 2) / np.mean(ref ** 2))


# -- 1 -----------------------------------------------------------------------------------

def test_c1_rank1_factorisation_identity(report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(1)
    t = 16
    worst = 0.0
    for _ in range(10_000):
        x, y = rng.random(t), rng.random(t)
        c = float(rng.uniform(0.1, 10.0))
        f = build_sats(CpFactors(C=np.array([c]), X=x[None], Y=y[None], Z=np.ones((1, 1))))
        x1, x2 = np.sort(rng.integers(0, t, 2))
        y1, y2 = np.sort(rng.integers(0, t, 2))
        got = block_range_mean(f, 0, x1, x2, y1, y2)
        brute = c * np.outer(x, y)[x1:x2 + 1, y1:y2 + 1].mean()
        worst = max(worst, abs(got - brute) / abs(brute))
    dt = time.perf_counter() - t0
    ok = report(1, worst <= 1e-12 and dt < 5, f"max rel err {worst:.2e} over 1e4 slabs, {dt:.2f} s")
    assert ok


# -- 2 -----------------------------------------------------------------------------------

def test_c2_range_equals_mean_of_points(report, stores512):
    t0 = time.perf_counter()
    store = stores512[16]
    rng = np.random.default_rng(2)
    res, t = store.resolution, store.t
    groups = rng.choice(store.n_groups, 1000, replace=store.n_groups < 1000)
    worst = 0.0
    for g in groups:
        slab = rng.choice(np.nonzero(store.group_of_slab == g)[0])
        cell, by, bx = (int(v[0]) for v in np.nonzero(store.slab_table == slab))
        # a random rectangle that touches the group's block, possibly spilling over
        x1 = int(rng.integers(max(0, bx * t - 24), bx * t + t))
        y1 = int(rng.integers(max(0, by * t - 24), by * t + t))
        x2 = int(rng.integers(max(x1, bx * t), min(res, x1 + 48)))
        y2 = int(rng.integers(max(y1, by * t), min(res, y1 + 48)))
        rng_v = store._range_raw(np.array([cell]), x1, x2, y1, y2)[0]
        py, px = np.mgrid[y1:y2 + 1, x1:x2 + 1]
        pts = store._point_raw(np.full(px.size, cell), px.ravel(), py.ravel())
        ref = pts.mean()
        scale = max(abs(ref), np.abs(pts).max(), 1e-300)
        worst = max(worst, abs(rng_v - ref) / scale)
    dt = time.perf_counter() - t0
    ok = report(2, worst <= 1e-9 and dt < 30,
                f"max rel diff {worst:.2e} over {len(groups)} groups, {dt:.1f} s")
    assert ok


# -- 3 -----------------------------------------------------------------------------------

def test_c3_sampling_matches_ndf(report, stores512):
    t0 = time.perf_counter()
    store = stores512[16]
    fp = Footprint((211.0, 307.0), store.levels[2].sigma)  # mid-level of five
    res = store.resolution
    rng = np.random.default_rng(3)
    n_total, chunk = 10_000_000, 500_000
    hist = np.zeros(res * res)
    first = None
    for k in range(n_total // chunk):
        rec = sample_half_vector(store, fp, rng.random((chunk, 2)))
        if first is None:
            first = rec
        px, py = pixel_of(rec.h[rec.valid], res).T
        hist += np.bincount(py * res + px, minlength=res * res)
    hist = hist.reshape(res, res) / n_total / (2.0 / res) ** 2
    ix, iy = np.meshgrid(np.arange(res), np.arange(res))
    hx, hy = pixel_center(ix.ravel(), iy.ravel(), res)
    inside = hx ** 2 + hy ** 2 < 1
    ndf = np.zeros(res * res)
    h = np.column_stack([hx[inside], hy[inside]])
    ndf[inside] = eval_ndf_batch(store, np.repeat([fp.center], len(h), 0),
                                 np.full(len(h), fp.sigma_p), h)
    ndf = ndf.reshape(res, res)
    rel_l1 = np.abs(hist - ndf).sum() / ndf.sum()
    # bitwise pdf check on 1e5 records
    v = first.valid[:100_000]
    hv = first.h[:100_000][v]
    ref = eval_ndf_batch(store, np.repeat([fp.center], len(hv), 0), np.full(len(hv), fp.sigma_p), hv)
    bitwise = np.array_equal(first.pdf[:100_000][v], ref)
    dt = time.perf_counter() - t0
    # diagnostics: NDF mass over the disk, and the relative L1 expected from
    # multinomial noise alone (E|X - lam| ~ sqrt(2 lam / pi) per pixel)
    mass = ndf.sum() * (2.0 / res) ** 2
    lam = n_total * ndf / ndf.sum()
    noise = np.sum(np.sqrt(2 * lam / np.pi)) / n_total
    ok = report(3, rel_l1 < 0.02 and bitwise and dt < 300,
                f"relative L1 {100 * rel_l1:.2f}% at 1e7 samples (noise floor "
                f"~{100 * noise:.2f}% over {int((ndf > 0).sum())} lit pixels, NDF mass "
                f"{mass:.4f}), pdf bitwise={bitwise}, {dt:.0f} s")
    assert ok


# -- 4 -----------------------------------------------------------------------------------

def test_c4_compression_ladder(report, ladder):
    oracle, unc, images = ladder["oracle"], ladder["uncompressed"], ladder["images"]
    mse_oracle = [float(np.mean((images[R] - oracle) ** 2)) for R in RANKS]
    mse_unc = [float(np.mean((images[R] - unc) ** 2)) for R in RANKS]
    rel32 = _rel_rmse(images[32], oracle)
    decreasing = all(a > b for a, b in zip(mse_oracle, mse_oracle[1:]))
    detail = (f"MSE vs brute force {['%.4f' % m for m in mse_oracle]}; rank-32 rel RMSE "
              f"{100 * rel32:.1f}% vs brute force; diagnostics: MSE vs uncompressed pyramid "
              f"{['%.5f' % m for m in mse_unc]}, rank-32 {100 * _rel_rmse(images[32], unc):.2f}% "
              f"vs pyramid, pyramid itself {100 * _rel_rmse(unc, oracle):.1f}% vs brute force; "
              f"{ladder['seconds']:.0f} s of renders")
    ok = report(4, decreasing and rel32 < 0.05 and ladder["seconds"] < 1800, detail)
    assert ok


# -- 5 -----------------------------------------------------------------------------------

def _interleaved_medians(fns, rounds):
    times = [[] for _ in fns]
    for _ in range(rounds):
        for k, fn in enumerate(fns):
            t0 = time.perf_counter()
            fn()
            times[k].append(time.perf_counter() - t0)
    return [float(np.median(t)) for t in times]


def test_c5_constant_time_queries(report, iso512, stores512):
    t0 = time.perf_counter()
    store = stores512[16]
    base = store.params.base_sigma
    h = np.array([0.03, -0.02])
    fps = [Footprint((200.3, 311.7), base * m) for m in (1, 4, 16)]
    for fp in fps:  # warm up compiled kernels
        eval_ndf(store, fp, h)
    point = _interleaved_medians([lambda fp=fp: eval_ndf(store, fp, h) for fp in fps], 2000)
    fp = fps[1]
    ranges = [AngularRange.centered(h, a, store.resolution) for a in (2, 32, 128)]
    rng_t = _interleaved_medians([lambda r=r: eval_ndf_range(store, fp, r) for r in ranges], 2000)
    oracle = _interleaved_medians([lambda fp=fp: eval_pndf_point(iso512, fp, h) for fp in fps], 15)
    point_spread = max(point) / min(point)
    range_spread = max(rng_t) / min(rng_t)
    speedups = [o / p for o, p in zip(oracle, point)]
    grows = oracle[2] / oracle[0] > 16
    dt = time.perf_counter() - t0
    ok = report(5, point_spread < 1.5 and range_spread < 1.5 and grows and dt < 600,
                f"point {['%.0f us' % (1e6 * p) for p in point]} (spread {point_spread:.2f}x), "
                f"range {['%.0f us' % (1e6 * p) for p in rng_t]} (spread {range_spread:.2f}x), "
                f"oracle {['%.1f ms' % (1e3 * o) for o in oracle]}, speedup "
                f"{['%.0fx' % s for s in speedups]}")
    assert ok


# -- 6 -----------------------------------------------------------------------------------

def test_c6_storage(report, pyr512, stores512):
    ratio = stores512[16].nbytes() / pyr512.raw_nbytes()
    brushed = compress(build_pyramid(generate_exemplar("brushed-metal", 512, seed=0)), 4)
    iso_blank = stores512[16].blank_fraction()
    ok = report(6, ratio <= 0.08 and brushed.blank_fraction() > iso_blank,
                f"R=16 container {100 * ratio:.2f}% of raw pyramid; blank blocks brushed "
                f"{100 * brushed.blank_fraction():.1f}% vs isotropic {100 * iso_blank:.1f}%")
    assert ok


# -- 7 -----------------------------------------------------------------------------------

def test_c7_environment_prefiltering(report, stores512):
    t0 = time.perf_counter()
    store = stores512[16]
    env = SgEnvironment([SphericalGaussian(_unit((0, 0.9, 1.1)), 50.0, (4, 4, 4)),
                         SphericalGaussian(_unit((0.35, 0.8, 1.0)), 100.0, (6, 5, 4)),
                         SphericalGaussian(_unit((-0.3, 0.75, 1.0)), 80.0, (2, 2, 3)),
                         SphericalGaussian(_unit((0.1, 0.95, 1.05)), 150.0, (3, 3, 3))])
    scene = bentquad_scene(64, lights=[], environment=env, texel_extent=1.0 / 16384)

    def run(prefilter, spp, region=None):
        s = RenderSettings(spp=spp, prefilter=prefilter, keep_samples=True, masking=False,
                           region=region)
        smp = render(scene, store, s).samples[..., 0]
        return smp.mean(axis=2), smp.var(axis=2, ddof=1)

    m0, v0 = run(False, 16)
    m1, v1 = run(True, 16)
    glint = v0 > 0
    frac = float(np.mean(v1[glint] <= v0[glint]))

    region = (24, 24, 56, 56)
    n = 4096
    a, va = run(False, n, region)
    b, vb = run(True, n, region)
    se = np.sqrt(va / n + vb / n)
    lit = se > 0
    z = (b[lit] - a[lit]) / se[lit]
    within = float(np.mean(np.abs(z) < 3))
    crop_z = (b.mean() - a.mean()) / (math.sqrt((va.sum() + vb.sum()) / n) / a.size)
    same_mean = within >= 0.99 and abs(crop_z) < 3
    dt = time.perf_counter() - t0
    ok = report(7, frac >= 0.95 and same_mean and dt < 900,
                f"16 spp: prefiltered variance <= point on {100 * frac:.1f}% of "
                f"{int(glint.sum())} glint pixels; 4096 spp: {100 * within:.1f}% of pixels "
                f"within 3 sigma, crop mean {b.mean():.4f} vs {a.mean():.4f} "
                f"(z = {crop_z:.1f}), {dt:.0f} s")
    assert ok


# -- 8 -----------------------------------------------------------------------------------

def test_c8_implicit_tiling(report, ladder):
    t0 = time.perf_counter()
    T = 128
    exemplar = generate_exemplar("isotropic-noise", 512, seed=4)
    tset = build_tileset(exemplar, T, 32, seed=1)
    field_ = TileField(seed=3)
    cx, cy = np.meshgrid(np.arange(4), np.arange(4))
    explicit = assemble(tset.tiles, field_.tile_at(cx, cy))
    params = PyramidParams()
    res = params.ndf_resolution
    ix, iy = np.meshgrid(np.arange(res), np.arange(res))
    hx, hy = pixel_center(ix.ravel(), iy.ravel(), res)
    inside = hx ** 2 + hy ** 2 < 1
    h = np.column_stack([hx[inside], hy[inside]])

    # footprints on level-0/1 cell centres whose support straddles interior tile edges
    rng = np.random.default_rng(8)
    errs = []
    for _ in range(100):
        level = int(rng.integers(0, 2))
        sigma = params.sigma(level)
        stride = params.stride(level)
        reach = 4 * sigma
        x = -1.0
        while not reach <= x <= 4 * T - reach:  # keep the whole support inside the map
            x = T * int(rng.integers(1, 4)) + stride / 2 * rng.choice([-1, 1])
        lo = math.ceil(reach / stride - 0.5)
        hi = int(4 * T / stride - 0.5 - reach / stride)
        y = (int(rng.integers(lo, hi + 1)) + 0.5) * stride
        if rng.random() < 0.5:
            x, y = y, x
        fp = Footprint((x, y), sigma)
        ref = np.zeros(res * res)
        ref[inside] = eval_pndf_image(explicit, fp, boundary="error").values.ravel()[inside]
        got = np.zeros(res * res)
        got[inside] = eval_ndf_tiled_batch(field_, tset, np.repeat([fp.center], len(h), 0),
                                           np.full(len(h), sigma), h)
        errs.append(np.linalg.norm(got - ref) / np.linalg.norm(ref))
    errs = np.array(errs)
    bound = math.sqrt(ladder["recon"][32])

    def peak_memory(extent_tiles):
        centers = rng.uniform(0, extent_tiles * 4 * T, (2000, 2))
        hh = rng.uniform(-0.3, 0.3, (2000, 2))
        eval_ndf_tiled_batch(field_, tset, centers, 20.0, hh)  # warm caches
        tracemalloc.start()
        eval_ndf_tiled_batch(field_, tset, centers, 20.0, hh)
        peak = tracemalloc.get_traced_memory()[1]
        tracemalloc.stop()
        return peak

    m8, m64 = peak_memory(8), peak_memory(64)
    mem_equal = abs(m64 - m8) <= 0.1 * m8 + 64 * 1024
    dt = time.perf_counter() - t0
    ok = report(8, errs.mean() <= bound and mem_equal,
                f"tiled vs explicit 4x4 map: mean rel L2 {100 * errs.mean():.2f}% "
                f"(max {100 * errs.max():.2f}%) vs rank-32 compression bound "
                f"{100 * bound:.2f}%; peak memory {m8 / 1024:.0f} KiB at 8x, "
                f"{m64 / 1024:.0f} KiB at 64x, {dt:.0f} s")
    assert ok


# -- 9 -----------------------------------------------------------------------------------

def test_c9_sg_support(report):
    theta = sg_support_angle(SphericalGaussian((0.0, 0.0, 1.0), 25.0, (1.0, 1.0, 1.0)), 0.3)
    q = sg_query_side(theta, 256)
    lams = np.geomspace(0.5, 5000, 20)
    thetas = [sg_support_angle(SphericalGaussian((0.0, 0.0, 1.0), l, (1.0, 1.0, 1.0)), 0.3)
              for l in lams]
    monotone = all(a >= b for a, b in zip(thetas, thetas[1:])) and thetas[0] > thetas[-1]
    ok = report(9, abs(theta - 0.3113) <= 1e-3 and abs(q - 25.4) <= 0.1 and monotone,
                f"theta {theta:.5f} rad, Q {q:.3f}, non-increasing over 20 bandwidths: {monotone}")
    assert ok


# -- 10 ----------------------------------------------------------------------------------

def test_c10_oracle_self_consistency(report, iso512):
    rng = np.random.default_rng(10)
    base = PyramidParams().base_sigma
    worst_mse = worst_norm = 0.0
    for _ in range(100):
        fp = Footprint(rng.uniform(0, 512, 2), base * 2 ** rng.uniform(0, 3))
        std = eval_pndf_image(iso512, fp)
        sup = eval_pndf_image(iso512, fp, supersample=2)
        worst_mse = max(worst_mse, float(np.mean((std.values - sup.values) ** 2)))
        worst_norm = max(worst_norm, abs(std.total() - 1.0), abs(sup.total() - 1.0))
    ok = report(10, worst_mse < 1e-5 and worst_norm < 1e-4,
                f"max supersampled-vs-standard MSE {worst_mse:.2e}, max |integral - 1| "
                f"{worst_norm:.1e} over 100 footprints")
    assert ok
