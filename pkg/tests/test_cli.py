import json

import numpy as np
import pytest

from glintcache.cli import build_parser, main
from glintcache.render import read_pfm


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert main(["exemplar", "--resolution", "256", "--out", str(d / "ex.raw")]) == 0
    assert main(["pyramid", "--map", str(d / "ex.raw"), "--tileable", "--workers", "4",
                 "--out", str(d / "pyr")]) == 0
    assert main(["compress", "--pyramid", str(d / "pyr"), "--rank", "4", "--workers", "4",
                 "--out", str(d / "s.cndf")]) == 0
    return d


class TestCli:
    def test_pipeline_outputs(self, workdir, capsys):
        assert (workdir / "pyr" / "manifest.yaml").exists()
        assert (workdir / "s.cndf").read_bytes()[:4] == b"CNDF"

    def test_sample_test(self, workdir, capsys):
        out = workdir / "st"
        assert main(["sample-test", "--store", str(workdir / "s.cndf"), "--footprint",
                     "128,128,40", "--samples", "200000", "--out", str(out)]) == 0
        report = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
        assert report["relative_l1"] < 0.2
        for suffix in ("_hist.png", "_ndf.png", "_hist.ndfi", "_ndf.ndfi"):
            assert (workdir / f"st{suffix}").exists()

    def test_render(self, workdir):
        (workdir / "scene.yaml").write_text(
            "geometry: {type: bent-quad, size: [2, 2], bend: 0.2, texel_extent: 0.000244140625}\n"
            "camera: {position: [1, 0.1, 1.1], look_at: [1, 1, 0], fov: 30, resolution: [8, 8]}\n"
            "lights:\n  - {type: point, position: [1, 1.9, 1.1], intensity: [2, 2, 2]}\n")
        (workdir / "env.txt").write_text("0 0.6 0.8 100 1 1 1\n")
        prefix = workdir / "out" / "r"
        assert main(["render", "--scene", str(workdir / "scene.yaml"), "--store",
                     str(workdir / "s.cndf"), "--spp", "2", "--estimator", "mis",
                     "--prefilter", "on", "--env-sg", str(workdir / "env.txt"),
                     "--out", str(prefix)]) == 0
        img = read_pfm(str(prefix) + ".pfm")
        assert img.shape == (8, 8, 3) and np.isfinite(img).all() and img.max() > 0
        stats = json.loads((workdir / "out" / "r.stats.json").read_text())
        assert stats["pixels"] == 64

    def test_errors(self, workdir, capsys):
        assert main(["compress", "--pyramid", str(workdir / "missing"), "--out", "x"]) == 1
        assert "error" in capsys.readouterr().err
        with pytest.raises(SystemExit):
            build_parser().parse_args(["sample-test", "--store", "s", "--footprint", "1,2"])
        with pytest.raises(SystemExit):
            build_parser().parse_args(["render", "--scene", "a", "--store", "b", "--out", "c",
                                       "--estimator", "guess"])
