import json

import pytest

from vitkd import config as cf
from vitkd.config import ConfigValidationError


def test_defaults_validate():
    cfg = cf.load_config(None)
    assert cfg["model"]["image_size"] == 32  # tiny preset resolved
    assert cfg["model"]["depth"] == 2
    assert cfg["head"]["kind"] == "gp"
    assert cfg["kd"]["alpha"] == 5e-5
    assert cfg["mae"]["mask_ratio"] == 0.75


def test_preset_fills_only_unset(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"model": {"preset": "mini", "depth": 3}}))
    cfg = cf.load_config(str(path))
    assert cfg["model"]["dim"] == 64     # from preset
    assert cfg["model"]["depth"] == 3    # explicit wins


def test_unknown_keys_rejected(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"modle": {"dim": 4}, "optimizer": {"lrr": 1}}))
    with pytest.raises(ConfigValidationError) as err:
        cf.load_config(str(path))
    msg = str(err.value)
    assert "modle" in msg and "optimizer.lrr" in msg


def test_indivisible_patch_names_both_fields():
    with pytest.raises(ConfigValidationError) as err:
        cf.load_config(None, ["model.patch_size=5"])
    msg = str(err.value)
    assert "32" in msg and "5" in msg


def test_all_violations_reported_at_once():
    with pytest.raises(ConfigValidationError) as err:
        cf.load_config(None, ["optimizer.lr=-1", "augment.mix_p=3",
                              "kd.project_side=sideways"])
    problems = err.value.problems
    assert len(problems) >= 3
    joined = " ".join(problems)
    assert "optimizer.lr" in joined
    assert "augment.mix_p" in joined
    assert "kd.project_side" in joined


def test_type_errors_reported():
    with pytest.raises(ConfigValidationError) as err:
        cf.load_config(None, ["optimizer.epochs=3.5"])
    assert "optimizer.epochs" in str(err.value)
    with pytest.raises(ConfigValidationError):
        cf.load_config(None, ["augment.enabled=1"])  # bool field, not int


def test_override_json_and_string_values():
    cfg = cf.load_config(None, ["optimizer.lr=0.01", "head.kind=linear",
                                "kd.aligned_layers=[0]"])
    assert cfg["optimizer"]["lr"] == 0.01
    assert cfg["head"]["kind"] == "linear"
    assert cfg["kd"]["aligned_layers"] == [0]


def test_bad_override_shape_rejected():
    with pytest.raises(ConfigValidationError):
        cf.load_config(None, ["no_equals_sign"])
    with pytest.raises(ConfigValidationError):
        cf.load_config(None, ["not.a.key=1"])


def test_typed_views():
    cfg = cf.load_config(None, ["model.preset=mini"])
    vc = cf.vit_config(cfg)
    assert (vc.dim, vc.depth) == (64, 4)
    tc = cf.train_config(cfg)
    assert tc.epochs == 30 and tc.lr == 1e-4
    ac = cf.augment_config(cfg)
    assert ac.solarize_threshold == 0.5
    kc = cf.kd_config(cfg)
    assert kc.aligned_layers == (0, 1)
    hc = cf.head_config(cfg)
    assert hc.kind == "gp" and hc.features == 1024


def test_schema_help_covers_every_key():
    text = cf.schema_help()
    for field in cf.SCHEMA:
        assert field.path in text


def test_out_dir_env_fallback(monkeypatch):
    cfg = cf.load_config(None)
    monkeypatch.delenv(cf.ENV_OUT_ROOT, raising=False)
    assert cf.resolve_out_dir(cfg) == "runs"
    monkeypatch.setenv(cf.ENV_OUT_ROOT, "/tmp/elsewhere")
    assert cf.resolve_out_dir(cfg) == "/tmp/elsewhere"
    cfg["out_dir"] = "explicit"
    assert cf.resolve_out_dir(cfg) == "explicit"
