import json

import numpy as np
import pytest

from gsdf.cli import apply_variant, main, parse_variant
from gsdf.config import TrainConfig
from gsdf.dataset import SyntheticSpec, make_synthetic
from gsdf.errors import InvalidInputError


@pytest.fixture(scope="module")
def cli_dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("clidata")
    spec = SyntheticSpec(n_views=4, image_size=24, n_points=200)
    manifest_path, _ = make_synthetic(spec, out, seed=3)
    return manifest_path


@pytest.fixture(scope="module")
def trained_dir(cli_dataset, tmp_path_factory):
    out = tmp_path_factory.mktemp("clitrain")
    code = main(["train", "--data", str(cli_dataset), "--out", str(out),
                 "--seed", "0", "--iters", "40",
                 "--set", "pixel_samples=64", "--set", "free_samples=8",
                 "--set", "near_samples=4", "--set", "truncation=0.4",
                 "--set", "sdf_warmup_steps=120", "--set", "sdf_init_steps=120"])
    assert code == 0
    return out


class TestTrain:
    def test_outputs_exist(self, trained_dir):
        assert (trained_dir / "scene.jsonl").exists()
        assert (trained_dir / "field.bin").exists()
        assert (trained_dir / "losses.jsonl").exists()
        assert (trained_dir / "config.json").exists()
        cfg = json.loads((trained_dir / "config.json").read_text())
        assert cfg["iterations"] == 40

    def test_missing_dataset_exit_2(self, tmp_path, capsys):
        code = main(["train", "--data", str(tmp_path / "nope"), "--out",
                     str(tmp_path / "out")])
        assert code == 2
        err = capsys.readouterr().err.strip()
        parsed = json.loads(err.splitlines()[-1])
        assert "error" in parsed and "message" in parsed

    def test_bad_override_exit_2(self, cli_dataset, tmp_path):
        code = main(["train", "--data", str(cli_dataset), "--out", str(tmp_path),
                     "--set", "not_a_field=1"])
        assert code == 2


class TestMeshRenderEval:
    def test_mesh_subcommand(self, trained_dir, tmp_path):
        out = tmp_path / "mesh.ply"
        code = main(["mesh", "--checkpoint", str(trained_dir), "--resolution", "24",
                     "--out", str(out)])
        assert code == 0
        assert out.exists()
        stats = json.loads((tmp_path / "mesh.ply.stats.json").read_text())
        assert stats["triangles"] > 0
        assert 0 < stats["active_fraction"] <= 1

    def test_render_subcommand(self, trained_dir, cli_dataset, tmp_path):
        manifest = json.loads(cli_dataset.read_text())
        cam_file = tmp_path / "cam.json"
        cam_file.write_text(json.dumps(manifest["cameras"][0]))
        prefix = tmp_path / "render"
        code = main(["render", "--checkpoint", str(trained_dir), "--camera",
                     str(cam_file), "--out", str(prefix)])
        assert code == 0
        import imageio.v3 as iio
        color = iio.imread(str(prefix) + "_color.png")
        depth = iio.imread(str(prefix) + "_depth.png")
        assert color.shape == (24, 24, 3) and color.dtype == np.uint8
        assert depth.dtype == np.uint16
        sidecar = json.loads((tmp_path / "render_depth.json").read_text())
        assert sidecar["scale"] > 0

    def test_render_determinism_byte_identical(self, trained_dir, cli_dataset, tmp_path):
        manifest = json.loads(cli_dataset.read_text())
        cam_file = tmp_path / "cam.json"
        cam_file.write_text(json.dumps(manifest["cameras"][1]))
        pa, pb = tmp_path / "a", tmp_path / "b"
        for p in (pa, pb):
            assert main(["render", "--checkpoint", str(trained_dir), "--camera",
                         str(cam_file), "--out", str(p)]) == 0
        for suffix in ("_color.png", "_depth.png", "_normal.png"):
            a = (tmp_path / ("a" + suffix)).read_bytes()
            b = (tmp_path / ("b" + suffix)).read_bytes()
            assert a == b, suffix

    def test_eval_subcommand(self, trained_dir, cli_dataset, tmp_path):
        mesh_path = tmp_path / "m.ply"
        assert main(["mesh", "--checkpoint", str(trained_dir), "--resolution", "24",
                     "--out", str(mesh_path)]) == 0
        report_path = tmp_path / "report.json"
        code = main(["eval", "--checkpoint", str(trained_dir), "--data",
                     str(cli_dataset), "--mesh", str(mesh_path), "--holdout", "0",
                     "--samples", "2000", "--out", str(report_path)])
        assert code == 0
        report = json.loads(report_path.read_text())
        assert report["chamfer"] >= 0
        assert np.isfinite(report["psnr"]) and 0 <= report["ssim"] <= 1
        assert "gaussian_count" in report
        assert report["active_fraction"] is not None

    def test_eval_without_holdout_omits_psnr(self, trained_dir, cli_dataset, capsys):
        code = main(["eval", "--checkpoint", str(trained_dir), "--data",
                     str(cli_dataset)])
        assert code == 0
        report = json.loads(capsys.readouterr().out)
        assert "psnr" not in report

    def test_missing_checkpoint_exit_2(self, cli_dataset, tmp_path, capsys):
        code = main(["eval", "--checkpoint", str(tmp_path / "nope"), "--data",
                     str(cli_dataset)])
        assert code == 2


class TestVariants:
    def test_parse_ours(self):
        assert parse_variant("ours") == {}

    def test_parse_pairs(self):
        assert parse_variant("sdf2o=bell,norm=contraction") == {
            "sdf2o": "bell", "norm": "contraction"}

    def test_unknown_key_lists_registry(self):
        with pytest.raises(InvalidInputError, match="registry"):
            parse_variant("nope=1")
        with pytest.raises(InvalidInputError, match="registry"):
            parse_variant("sdf2o=parabola")

    def test_apply_variant(self):
        cfg = apply_variant(TrainConfig(), {"sdf2o": "bell", "multires": "off",
                                            "geo": "off", "prune": "opacity",
                                            "norm": "contraction"})
        assert cfg.sdf2o == "bell"
        assert cfg.normalization == "contraction"
        assert cfg.multires is False
        assert cfg.geo is False
        assert cfg.prune_mode == "opacity"

    def test_unknown_variant_exits_2(self, cli_dataset, tmp_path):
        code = main(["ablate", "--data", str(cli_dataset), "--out", str(tmp_path),
                     "--variants", "bogus=1", "--iters", "5"])
        assert code == 2
