import numpy as np
import pytest
from scipy import stats as sstats

from glintcache import build_pyramid, compress
from glintcache.oracle import Footprint, eval_pndf_image, pixel_of
from glintcache.pyramid import PyramidParams
from glintcache.sampler import _choose, _choose_index, _DenseBackend, pdf, sample_batch, sample_half_vector
from glintcache.store import eval_ndf_batch
from glintcache.texture import constant_map


@pytest.fixture(scope="module")
def flat_store():
    n = np.array([0.25, -0.4, 0.0])
    n[2] = np.sqrt(1 - n @ n)
    pyr = build_pyramid(constant_map(n, 256), PyramidParams(max_levels=1))
    return compress(pyr, R=4), n


class TestHelpers:
    def test_choose_rescales_uniformly(self, rng):
        u = rng.random(100_000)
        hi, u2 = _choose(u, np.full_like(u, 1.0), np.full_like(u, 3.0))
        assert hi.mean() == pytest.approx(0.75, abs=0.01)
        assert sstats.kstest(u2[hi], "uniform").pvalue > 1e-3
        assert sstats.kstest(u2[~hi], "uniform").pvalue > 1e-3

    def test_choose_index_skips_zero_weights(self, rng):
        w = np.tile([0.0, 2.0, 0.0, 1.0, 0.0], (50_000, 1))
        idx, u2, ok = _choose_index(rng.random(50_000), w)
        assert set(np.unique(idx)) == {1, 3}
        assert np.mean(idx == 1) == pytest.approx(2 / 3, abs=0.01)
        assert ok.all() and u2.max() < 1

    def test_dense_backend_telescopes(self, rng):
        img = rng.random((1, 32, 32))
        be = _DenseBackend(img, 8)
        blocks = be.blocks([0])[0]
        assert blocks.mean() == pytest.approx(img.mean())
        # a block's average is the mean of its four quadrant averages
        q = [be.ranges(0, x, x + 3, y, y + 3) for x in (8, 12) for y in (16, 20)]
        assert np.mean(q) == pytest.approx(blocks[2, 1])


class TestSampling:
    def test_delta_ndf_concentrates(self, flat_store):
        store, n = flat_store
        rec = sample_half_vector(store, Footprint((100.0, 100.0), 20.0),
                                 np.random.default_rng(0).random((5000, 2)))
        assert rec.valid.all()
        assert np.all(np.abs(rec.h - n[:2]) < 0.03)

    def test_pdf_bitwise_equals_eval(self, store256, rng):
        centers = rng.uniform(0, 256, (2000, 2))
        sig = rng.uniform(14, 120, 2000)
        rec = sample_batch(store256, centers, sig, rng.random((2000, 2)))
        v = rec.valid
        assert v.mean() > 0.99
        ref = eval_ndf_batch(store256, centers[v], sig[v], rec.h[v])
        assert np.array_equal(rec.pdf[v], ref)
        fp = Footprint((40.0, 50.0), 30.0)
        r1 = sample_half_vector(store256, fp, rng.random((100, 2)))
        assert np.array_equal(pdf(store256, fp, r1.h[r1.valid]), r1.pdf[r1.valid])

    def test_block_frequencies_chi_square(self, store256, rng):
        fp = Footprint((128.0, 96.0), 40.0)
        n = 100_000
        rec = sample_half_vector(store256, fp, rng.random((n, 2)))
        be_blocks = store256.blend_ranges(
            np.repeat([fp.center], 256, 0), np.full(256, fp.sigma_p),
            np.tile(np.arange(16) * 16, 16), np.tile(np.arange(16) * 16 + 15, 16),
            np.repeat(np.arange(16) * 16, 16), np.repeat(np.arange(16) * 16 + 15, 16))[0]
        p = be_blocks / be_blocks.sum()
        bx, by = (rec.path[:, 0] // 16).T
        counts = np.bincount(by * 16 + bx, minlength=256)
        keep = p * n > 20
        expected = p[keep] * n
        chi2 = np.sum((counts[keep] - expected) ** 2 / expected)
        dof = keep.sum() - 1
        assert sstats.chi2.sf(chi2, dof) > 1e-4

    def test_histogram_matches_ndf(self, store256, rng):
        fp = Footprint((64.0, 64.0), 60.0)
        n = 400_000
        rec = sample_half_vector(store256, fp, rng.random((n, 2)))
        px, py = pixel_of(rec.h[rec.valid], 64).T
        hist = np.bincount(py * 64 + px, minlength=64 * 64).reshape(64, 64) / n * (32 ** 2)
        c = (np.arange(256) + 0.5) / 128 - 1
        hx, hy = np.meshgrid(c, c)
        ndf = eval_ndf_batch(store256, np.repeat([fp.center], hx.size, 0),
                             np.full(hx.size, fp.sigma_p),
                             np.column_stack([hx.ravel(), hy.ravel()])).reshape(256, 256)
        ndf[hx ** 2 + hy ** 2 >= 1] = 0
        ndf64 = ndf.reshape(64, 4, 64, 4).mean(axis=(1, 3))
        ndf64 /= ndf64.sum() / 32 ** 2
        assert np.abs(hist - ndf64).sum() / ndf64.sum() < 0.05

    def test_dense_fallback_below_base(self, store256, iso256, rng):
        fp = Footprint((30.0, 40.0), 4.0)
        rec = sample_half_vector(store256, fp, rng.random((20_000, 2)), fallback=iso256)
        img = eval_pndf_image(iso256, fp).values
        px, py = pixel_of(rec.h[rec.valid], 256).T
        # all samples land where the oracle image has mass
        assert np.all(img[py, px] > 0)
        np.testing.assert_allclose(rec.pdf[rec.valid],
                                   eval_ndf_batch(store256, [fp.center] * rec.valid.sum(),
                                                  [fp.sigma_p] * rec.valid.sum(),
                                                  rec.h[rec.valid], iso256))

    def test_deterministic(self, store256):
        u = np.random.default_rng(5).random((500, 2))
        fp = Footprint((10.0, 20.0), 25.0)
        a = sample_half_vector(store256, fp, u)
        b = sample_half_vector(store256, fp, u)
        assert np.array_equal(a.h, b.h)
