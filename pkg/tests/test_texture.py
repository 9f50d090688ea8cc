import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from glintcache.errors import FormatError
from glintcache.texture import (
    NormalMap, constant_map, decode_rgb, encode_rgb, generate_exemplar,
    heightfield_to_normals, load_normal_map, save_normal_map, write_png, write_raw,
)


class TestNormalMap:
    def test_rejects_downward_normal(self):
        n = np.zeros((4, 4, 3))
        n[..., 2] = 1.0
        n[2, 3] = (0.0, 0.0, -1.0)
        with pytest.raises(ValueError, match=r"x=3, y=2"):
            NormalMap(n)

    def test_rejects_non_unit(self):
        with pytest.raises(ValueError, match="unit length"):
            NormalMap(np.full((2, 2, 3), 0.5))

    def test_rejects_bad_shape_and_extent(self):
        with pytest.raises(ValueError):
            NormalMap(np.ones((4, 4, 2)))
        with pytest.raises(ValueError):
            NormalMap(constant_map((0, 0, 1), 4).normals, texel_extent=0.0)

    def test_readonly(self):
        m = constant_map((0, 0, 1), 4)
        with pytest.raises(ValueError):
            m.normals[0, 0, 0] = 1.0


class TestExemplars:
    def test_frozen_values(self):
        """Generators are seeded; these values pin the generated content."""
        m = generate_exemplar("isotropic-noise", 256, 0)
        np.testing.assert_allclose(m.normals[10, 20], [0.14735998, 0.05119605, 0.98775706],
                                   atol=1e-7)
        np.testing.assert_allclose(m.normals[..., 2].mean(), 0.9845463449395008, rtol=1e-10)
        b = generate_exemplar("brushed-metal", 256, 0)
        np.testing.assert_allclose(b.normals[5, 7], [-0.001595, -0.24316654, 0.96998324],
                                   atol=1e-7)
        f = generate_exemplar("metallic-flakes", 256, 0)
        np.testing.assert_allclose(f.normals[5, 7], [-0.29047054, 0.37423858, 0.88066585],
                                   atol=1e-7)

    @pytest.mark.parametrize("kind", ["isotropic-noise", "brushed-metal", "metallic-flakes"])
    def test_deterministic_and_seeded(self, kind):
        a = generate_exemplar(kind, 256, 3)
        b = generate_exemplar(kind, 256, 3)
        c = generate_exemplar(kind, 256, 4)
        assert np.array_equal(a.normals, b.normals)
        assert not np.array_equal(a.normals, c.normals)
        assert a.tileable

    def test_brushed_is_anisotropic(self):
        b = generate_exemplar("brushed-metal", 256, 0)
        assert b.normals[..., 1].std() > 3 * b.normals[..., 0].std()

    def test_bad_arguments(self):
        with pytest.raises(ValueError):
            generate_exemplar("velvet", 256)
        with pytest.raises(ValueError):
            generate_exemplar("isotropic-noise", 300)


class TestConversions:
    def test_flat_heightfield(self):
        n = heightfield_to_normals(np.zeros((8, 8)))
        np.testing.assert_allclose(n, np.broadcast_to([0, 0, 1.0], n.shape))

    def test_ramp_heightfield(self):
        h = np.tile(np.arange(8.0) * 0.5, (8, 1))  # dz/dx = 0.5
        n = heightfield_to_normals(h)
        np.testing.assert_allclose(n[4, 4], np.array([-0.5, 0, 1]) / np.sqrt(1.25))

    @given(st.floats(-0.7, 0.7), st.floats(-0.7, 0.7))
    @settings(max_examples=50, deadline=None)
    def test_rgb_roundtrip(self, x, y):
        v = np.array([x, y, np.sqrt(max(1 - x * x - y * y, 0.01))])
        v /= np.linalg.norm(v)
        np.testing.assert_allclose(decode_rgb(encode_rgb(v)), v, atol=1e-12)

    def test_two_channel_rebuilds_z(self):
        rgb = encode_rgb(np.array([0.6, 0.0, 0.8]))[:2]
        np.testing.assert_allclose(decode_rgb(rgb), [0.6, 0.0, 0.8], atol=1e-12)


class TestFiles:
    def test_raw_roundtrip(self, tmp_path, iso256):
        save_normal_map(tmp_path / "m.raw", iso256)
        m = load_normal_map(tmp_path / "m.raw")
        np.testing.assert_allclose(m.normals, iso256.normals, atol=1e-6)

    def test_png16_roundtrip(self, tmp_path, iso256):
        write_png(tmp_path / "m.png", iso256.normals)
        m = load_normal_map(tmp_path / "m.png")
        np.testing.assert_allclose(m.normals, iso256.normals, atol=1e-4)

    def test_heightfield_raw(self, tmp_path):
        write_raw(tmp_path / "h.raw", np.zeros((8, 8)))
        m = load_normal_map(tmp_path / "h.raw", encoding="heightfield")
        assert m.shape == (8, 8)
        np.testing.assert_allclose(m.normals[..., 2], 1.0)

    def test_truncated_raw(self, tmp_path):
        write_raw(tmp_path / "h.raw", np.zeros((8, 8)))
        blob = (tmp_path / "h.raw").read_bytes()
        (tmp_path / "t.raw").write_bytes(blob[:-4])
        with pytest.raises(FormatError):
            load_normal_map(tmp_path / "t.raw")

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_normal_map(tmp_path / "nope.png")

    def test_degenerate_png_reports_texel(self, tmp_path):
        n = np.zeros((4, 4, 3))
        n[..., 2] = 1.0
        n[1, 2] = (0.0, 0.0, -1.0)
        write_png(tmp_path / "bad.png", n)
        with pytest.raises(ValueError, match=r"x=2, y=1"):
            load_normal_map(tmp_path / "bad.png")
