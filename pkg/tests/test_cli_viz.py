import json
import os

import numpy as np
import pytest

from vitkd import data as dp
from vitkd import heads, viz, vit
from vitkd.cli import build_parser, main
from vitkd.imageio import read_image
from vitkd.vit import VitConfig, VitModel


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cliwork")
    cfg = {
        "seed": 4,
        "data_root": str(root / "data"),
        "out_dir": str(root / "out"),
        "model": {"preset": "tiny"},
        "head": {"features": 128},
        "optimizer": {"epochs": 2, "lr": 0.001, "warmup_epochs": 1,
                      "batch_size": 16},
        "gen": {"n_train": 32, "n_val": 8, "n_test": 8},
    }
    cfg_path = root / "cfg.json"
    cfg_path.write_text(json.dumps(cfg))
    assert main(["gen-data", "--config", str(cfg_path)]) == 0
    assert main(["train", "--config", str(cfg_path)]) == 0
    return root, str(cfg_path)


class TestCliPipeline:
    def test_train_artifacts(self, workdir):
        root, _ = workdir
        out = root / "out"
        for name in ("model.ckpt", "metrics.csv", "report.json"):
            assert (out / name).exists(), name
        report = json.loads((out / "report.json").read_text())
        assert "test" in report and "config" in report
        assert report["config"]["seed"] == 4

    def test_eval_reproduces_report_exactly(self, workdir, capsys):
        root, cfg_path = workdir
        report = json.loads((root / "out" / "report.json").read_text())
        assert main(["eval", "--config", cfg_path,
                     "--checkpoint", str(root / "out" / "model.ckpt")]) == 0
        line = capsys.readouterr().out.strip().splitlines()[-1]
        summary = json.loads(line)
        assert summary["accuracy"] == report["test"]["accuracy"]
        assert summary["auroc"] == report["test"]["auroc"]

    def test_attn_viz_outputs(self, workdir):
        root, cfg_path = workdir
        image = next((root / "data" / "test" / "class1").iterdir())
        assert main(["attn-viz", "--config", cfg_path,
                     "--checkpoint", str(root / "out" / "model.ckpt"),
                     "--image", str(image)]) == 0
        attn_dir = root / "out" / "attn"
        files = sorted(os.listdir(attn_dir))
        assert files == ["attn_layer0.png", "attn_layer1.png", "attn_meta.json"]
        overlay = read_image(attn_dir / "attn_layer0.png")
        assert overlay.shape == (32, 32, 3)
        meta = json.loads((attn_dir / "attn_meta.json").read_text())
        assert meta["normalization"] == "per-map min-max"
        assert len(meta["maps"]) == 2

    def test_attn_viz_per_head(self, workdir):
        root, cfg_path = workdir
        image = next((root / "data" / "test" / "class0").iterdir())
        out2 = str(root / "outheads")
        assert main(["attn-viz", "--config", cfg_path, "--set",
                     f"out_dir={out2}", "--checkpoint",
                     str(root / "out" / "model.ckpt"), "--image", str(image),
                     "--per-head", "--format", "ppm"]) == 0
        files = [f for f in os.listdir(os.path.join(out2, "attn"))
                 if f.endswith(".ppm")]
        assert len(files) == 2 * 4  # depth x heads

    def test_pretrain_and_distill_commands(self, workdir, capsys):
        root, cfg_path = workdir
        assert main(["pretrain", "--config", cfg_path,
                     "--set", "mae.steps=8"]) == 0
        assert (root / "out" / "encoder.ckpt").exists()
        assert main(["distill", "--config", cfg_path,
                     "--set", f"kd.teacher_checkpoint={root}/out/model.ckpt",
                     "--set", f"out_dir={root}/kd"]) == 0
        assert (root / "kd" / "student.ckpt").exists()
        assert (root / "kd" / "distill_metrics.csv").exists()
        header = (root / "kd" / "distill_metrics.csv").read_text().splitlines()[0]
        assert header == "epoch,ce,logit_loss,align_loss,total,val_accuracy"


class TestCliErrors:
    def test_invalid_config_exits_2_with_fields(self, capsys):
        rc = main(["train", "--set", "model.patch_size=5"])
        assert rc == 2
        err = capsys.readouterr().err.strip()
        assert len(err.splitlines()) == 1
        payload = json.loads(err)
        assert payload["error"] == "config-validation"
        assert any("patch_size" in f for f in payload["fields"])

    def test_distill_without_teacher_exits_2(self, workdir, capsys):
        _, cfg_path = workdir
        rc = main(["distill", "--config", cfg_path])
        assert rc == 2
        payload = json.loads(capsys.readouterr().err.strip())
        assert any("teacher_checkpoint" in f for f in payload["fields"])

    def test_missing_data_root_exits_2(self, capsys):
        rc = main(["gen-data"])
        assert rc == 2
        payload = json.loads(capsys.readouterr().err.strip())
        assert any("data_root" in f for f in payload["fields"])

    def test_bad_checkpoint_exits_1(self, workdir, capsys, tmp_path):
        _, cfg_path = workdir
        bad = tmp_path / "bad.ckpt"
        bad.write_bytes(b"garbage")
        rc = main(["eval", "--config", cfg_path, "--checkpoint", str(bad)])
        assert rc == 1
        payload = json.loads(capsys.readouterr().err.strip())
        assert payload["error"] == "checkpoint-incompatible"

    def test_help_enumerates_config_keys(self, capsys):
        with pytest.raises(SystemExit) as exc:
            build_parser().parse_args(["--help"])
        assert exc.value.code == 0
        text = capsys.readouterr().out
        for key in ("optimizer.lr", "kd.alpha", "mae.mask_ratio",
                    "augment.solarize_threshold", "model.patch_size"):
            assert key in text


@pytest.fixture(scope="module")
def model():
    cfg = VitConfig(image_size=16, patch_size=4, dim=16, depth=2, heads=4,
                    mlp_ratio=2.0, num_classes=2)
    return VitModel(cfg, heads.HeadConfig(kind="linear"), seed=21)


class TestVizInternals:
    def test_map_count_and_shape(self, model):
        img = np.random.default_rng(0).uniform(0, 1, size=(16, 16, 3))
        maps = viz.class_attention_maps(model, img)
        assert len(maps) == 2
        assert all(m.shape == (4, 4) for m in maps)

    def test_patch_mass_identity(self, model):
        # each head-averaged map sums to the class-token row mass over patches
        from vitkd import autograd as ag
        img = np.random.default_rng(1).uniform(0, 1, size=(16, 16, 3))
        maps = viz.class_attention_maps(model, img)
        with ag.no_grad():
            _, stack = vit.encode(model, dp.normalize(img))
        for grid, attn in zip(maps, stack):
            cls_to_cls = attn.data[:, 0, 0].mean()
            assert grid.sum() == pytest.approx(1.0 - cls_to_cls, abs=1e-12)
            assert grid.sum() <= 1.0

    def test_upscale_nearest_exact_blocks(self):
        grid = np.array([[0.0, 1.0], [0.5, 0.25]])
        up = viz.upscale_nearest(grid, 2)
        assert up.shape == (4, 4)
        np.testing.assert_array_equal(up[:2, :2], np.zeros((2, 2)))
        np.testing.assert_array_equal(up[:2, 2:], np.ones((2, 2)))

    def test_colormap_endpoints(self):
        rgb = viz.colormap_blue_red(np.array([0.0, 1.0]))
        np.testing.assert_allclose(rgb[0], [0.0, 0.12, 1.0])   # low = blue
        np.testing.assert_allclose(rgb[1], [1.0, 0.12, 0.0])   # high = red

    def test_render_deterministic_bytes(self, model, tmp_path):
        img = np.random.default_rng(2).uniform(0, 1, size=(16, 16, 3))
        viz.render_attention(model, img, str(tmp_path / "a"), fmt="ppm")
        viz.render_attention(model, img, str(tmp_path / "b"), fmt="ppm")
        for name in os.listdir(tmp_path / "a"):
            assert (tmp_path / "a" / name).read_bytes() == \
                (tmp_path / "b" / name).read_bytes()

    def test_band_stats(self):
        flat = [np.full((4, 4), 0.25)]
        band = np.zeros((16, 16), dtype=bool)
        band[0:4, 0:4] = True
        stats = viz.band_attention_stats(flat, band, 4)
        assert stats[0][0] == pytest.approx(stats[0][1])
