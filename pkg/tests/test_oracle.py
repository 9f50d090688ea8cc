import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from glintcache.errors import FootprintError, FormatError
from glintcache.oracle import (
    Footprint, IntrinsicRoughness, NdfImage, disk_mask, eval_pndf_image, eval_pndf_point,
    footprint_weights, pixel_center, pixel_of,
)
from glintcache.texture import NormalMap, constant_map

SIGMA_R = 0.005
# per-axis mass of a Gaussian truncated at four deviations
TRUNC_MASS = math.erf(4 / math.sqrt(2)) ** 2


class TestAnalytic:
    def test_flat_peak_density(self):
        m = constant_map((0, 0, 1), 64)
        v = eval_pndf_point(m, Footprint((32, 32), 4), (0.0, 0.0))
        expected = 1.0 / (2 * math.pi * SIGMA_R ** 2 * TRUNC_MASS)
        assert v == pytest.approx(expected, rel=1e-9)

    def test_flat_pixel_value_is_box_average(self):
        m = constant_map((0, 0, 1), 64)
        img = eval_pndf_image(m, Footprint((32, 32), 4)).values
        edge = 2.0 / 256
        axis_mass = 0.5 * math.erf(edge / (SIGMA_R * math.sqrt(2)))
        expected = axis_mass ** 2 / TRUNC_MASS / edge ** 2
        np.testing.assert_allclose(img[127:129, 127:129], expected, rtol=1e-9)
        assert img[100, 100] == 0.0

    def test_tilted_constant_normal_peaks_at_its_projection(self):
        n = np.array([0.3, -0.2, 0.0])
        n[2] = math.sqrt(1 - 0.13)
        m = constant_map(n, 32)
        img = eval_pndf_image(m, Footprint((16, 16), 3)).values
        iy, ix = np.unravel_index(img.argmax(), img.shape)
        px, py = pixel_of((0.3, -0.2), 256)
        assert abs(ix - px) <= 1 and abs(iy - py) <= 1

    def test_two_normals_two_equal_lobes(self):
        n = np.zeros((32, 32, 3))
        n[:, ::2] = (0.2, 0.0, math.sqrt(0.96))
        n[:, 1::2] = (-0.2, 0.0, math.sqrt(0.96))
        m = NormalMap(n, tileable=True)
        a = eval_pndf_point(m, Footprint((16, 16), 6), (0.2, 0.0))
        b = eval_pndf_point(m, Footprint((16, 16), 6), (-0.2, 0.0))
        assert a == pytest.approx(b, rel=1e-6)
        assert a == pytest.approx(0.5 / (2 * math.pi * SIGMA_R ** 2 * TRUNC_MASS), rel=1e-3)


class TestFrozen:
    """Reference values of the brute-force evaluator on the seeded exemplar."""

    def test_points(self, iso256):
        fp = Footprint((100.5, 60.25), 8.0)
        v = eval_pndf_point(iso256, fp, np.array([[0.05, -0.1], [0.0, 0.0], [-0.2, 0.1]]))
        np.testing.assert_allclose(v, [1.80196969, 6.82137246, 1.58982453], rtol=1e-7)

    def test_image(self, iso256):
        img = eval_pndf_image(iso256, Footprint((100.5, 60.25), 8.0)).values
        assert img.max() == pytest.approx(114.11867760389026, rel=1e-9)
        assert np.unravel_index(img.argmax(), img.shape) == (127, 118)
        assert img[128, 128] == pytest.approx(10.29402931239952, rel=1e-9)


class TestConsistency:
    def test_image_normalised(self, iso256, rng):
        for _ in range(5):
            fp = Footprint(rng.uniform(0, 256, 2), rng.uniform(2, 40))
            assert eval_pndf_image(iso256, fp).total() == pytest.approx(1.0, abs=1e-9)

    def test_zero_outside_disk(self, iso256):
        img = eval_pndf_image(iso256, Footprint((10, 10), 5)).values
        assert np.all(img[~disk_mask(256)] == 0)

    def test_point_average_matches_pixel(self, iso256):
        fp = Footprint((40.0, 200.0), 6.0)
        img = eval_pndf_image(iso256, fp).values
        iy, ix = np.unravel_index(img.argmax(), img.shape)
        s = (np.arange(24) + 0.5) / 24
        hx = -1 + (ix + s) * 2 / 256
        hy = -1 + (iy + s) * 2 / 256
        X, Y = np.meshgrid(hx, hy)
        pts = eval_pndf_point(iso256, fp, np.column_stack([X.ravel(), Y.ravel()]))
        assert pts.mean() == pytest.approx(img[iy, ix], rel=2e-3)

    def test_supersampled_close(self, iso256):
        fp = Footprint((128.0, 128.0), 10.0)
        a = eval_pndf_image(iso256, fp).values
        b = eval_pndf_image(iso256, fp, supersample=2).values
        assert np.mean((a - b) ** 2) < 1e-5 * max(1.0, np.mean(a ** 2))

    def test_tileable_wraps(self, iso256):
        a = eval_pndf_point(iso256, Footprint((2.0, 3.0), 5.0), (0.01, 0.02))
        b = eval_pndf_point(iso256, Footprint((258.0, 259.0), 5.0), (0.01, 0.02))
        assert a == pytest.approx(b, rel=1e-12)

    @given(st.floats(0, 255), st.floats(0, 255), st.floats(0.5, 60))
    @settings(max_examples=40, deadline=None)
    def test_weights_sum_to_one(self, x, y, s):
        (ix, wx), (iy, wy), mass = footprint_weights((256, 256), Footprint((x, y), s), "wrap")
        assert wx.sum() * wy.sum() == pytest.approx(1.0)
        assert mass == pytest.approx(1.0)


class TestErrors:
    def test_footprint_leaving_nonwrapping_map(self):
        m = constant_map((0, 0, 1), 32, tileable=False)
        with pytest.raises(FootprintError, match="left"):
            eval_pndf_image(m, Footprint((2.0, 16.0), 3.0))
        # clip mode renormalises what is inside
        img = eval_pndf_image(m, Footprint((2.0, 16.0), 3.0), boundary="clip")
        assert img.total() == pytest.approx(1.0)

    def test_footprint_outside_map(self):
        m = constant_map((0, 0, 1), 32, tileable=False)
        with pytest.raises(FootprintError):
            eval_pndf_image(m, Footprint((500.0, 500.0), 2.0), boundary="clip")

    def test_invalid_inputs(self, iso256):
        with pytest.raises(ValueError):
            Footprint((0, 0), 0.0)
        with pytest.raises(ValueError):
            Footprint((0, float("nan")), 1.0)
        with pytest.raises(ValueError):
            IntrinsicRoughness(0.0)
        with pytest.raises(ValueError):
            eval_pndf_point(iso256, Footprint((5, 5), 2), (0.9, 0.9))


class TestNdfImage:
    def test_roundtrip(self, tmp_path):
        v = np.random.default_rng(0).random((16, 16))
        NdfImage(v).save(tmp_path / "a.ndfi")
        np.testing.assert_allclose(NdfImage.load(tmp_path / "a.ndfi").values, v, rtol=1e-7)

    def test_multichannel_roundtrip(self):
        v = np.random.default_rng(0).random((8, 8, 3))
        back = NdfImage.from_bytes(NdfImage(v).to_bytes())
        assert back.channels == 3
        np.testing.assert_allclose(back.values, v, rtol=1e-7)

    def test_bad_blob(self):
        blob = NdfImage(np.ones((4, 4))).to_bytes()
        with pytest.raises(FormatError):
            NdfImage.from_bytes(b"XXXX" + blob[4:])
        with pytest.raises(FormatError):
            NdfImage.from_bytes(blob[:-1])

    def test_pixel_helpers(self):
        assert tuple(pixel_of((-1.0, 0.999999), 256)) == (0, 255)
        cx, cy = pixel_center(128, 127, 256)
        assert tuple(pixel_of((cx, cy), 256)) == (128, 127)
