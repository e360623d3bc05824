"""Run configuration: strict JSON schema, presets, dotted-path overrides.

Unknown keys are rejected, every violated field is reported in one error, and
the schema table doubles as the --help listing so documentation cannot drift
from validation.
"""

from __future__ import annotations

import copy
import json
import os
from dataclasses import dataclass

from . import data as dp
from . import distill as kd
from . import heads
from . import train as tr
from .vit import PRESETS, VitConfig

ENV_OUT_ROOT = "VITKD_OUT"


class ConfigValidationError(Exception):
    """Carries every violated field, not just the first."""

    def __init__(self, problems: list[str]):
        super().__init__("invalid config: " + "; ".join(problems))
        self.problems = problems


@dataclass
class Field:
    path: str
    kind: object          # python type, tuple of types, or "list_int"
    default: object
    help: str
    optional: bool = False


SCHEMA: list[Field] = [
    Field("seed", int, 0, "global RNG seed; every artifact is a pure function of it"),
    Field("data_root", str, None, "dataset directory (train/ val/ test/)", optional=True),
    Field("out_dir", str, None,
          f"artifact directory; defaults to ${ENV_OUT_ROOT} or ./runs", optional=True),
    Field("init_checkpoint", str, None,
          "encoder checkpoint to warm-start training (from pretrain)", optional=True),

    Field("model.preset", str, "tiny",
          "named size: " + ", ".join(sorted(PRESETS)), optional=True),
    Field("model.image_size", int, None, "square input size in pixels", optional=True),
    Field("model.patch_size", int, None, "patch side in pixels", optional=True),
    Field("model.dim", int, None, "token channel dimension", optional=True),
    Field("model.depth", int, None, "transformer block count", optional=True),
    Field("model.heads", int, None, "attention head count", optional=True),
    Field("model.mlp_ratio", (int, float), 4.0, "MLP hidden dim multiplier"),
    Field("model.num_classes", int, 2, "label count"),

    Field("head.kind", str, "gp", "classifier head: 'gp' or 'linear'"),
    Field("head.features", int, 1024, "random feature count M (gp head)"),
    Field("head.length_scale", (int, float), None,
          "RBF length scale; null means sqrt(dim)", optional=True),

    Field("optimizer.lr", (int, float), 1e-4, "peak learning rate"),
    Field("optimizer.weight_decay", (int, float), 0.05, "decoupled weight decay"),
    Field("optimizer.beta1", (int, float), 0.9, "AdamW first-moment decay"),
    Field("optimizer.beta2", (int, float), 0.999, "AdamW second-moment decay"),
    Field("optimizer.eps", (int, float), 1e-8, "AdamW denominator epsilon"),
    Field("optimizer.epochs", int, 30, "training epochs"),
    Field("optimizer.batch_size", int, 32, "samples per step"),
    Field("optimizer.warmup_epochs", int, 3, "linear warmup epochs"),

    Field("augment.enabled", bool, True, "master switch for augmentation"),
    Field("augment.grayscale_p", (int, float), 0.33, "grayscale probability"),
    Field("augment.solarize_p", (int, float), 0.33, "solarization probability"),
    Field("augment.solarize_threshold", (int, float), 0.5,
          "pixels >= threshold are inverted"),
    Field("augment.blur_p", (int, float), 0.33, "Gaussian blur probability"),
    Field("augment.blur_sigma_min", (int, float), 0.1, "blur sigma lower bound"),
    Field("augment.blur_sigma_max", (int, float), 2.0, "blur sigma upper bound"),
    Field("augment.mix_p", (int, float), 0.5,
          "probability of MixUp-or-CutMix (then a fair coin picks one)"),
    Field("augment.mixup_alpha", (int, float), 1.0, "MixUp Beta parameter"),
    Field("augment.cutmix_alpha", (int, float), 1.0, "CutMix Beta parameter"),

    Field("kd.teacher_checkpoint", str, None,
          "frozen teacher checkpoint (required by distill)", optional=True),
    Field("kd.alpha", (int, float), 5e-5, "attention-alignment loss weight"),
    Field("kd.aligned_layers", "list_int", [0, 1], "layer indices to align"),
    Field("kd.project_side", str, "student",
          "which side the head projection maps: 'student' or 'teacher'"),
    Field("kd.share_projection", bool, False, "one projection for all layers"),
    Field("kd.include_ce", bool, True, "add the student's supervised loss"),

    Field("mae.mask_ratio", (int, float), 0.75, "fraction of patches masked"),
    Field("mae.steps", int, 300, "pretraining steps"),
    Field("mae.warmup_steps", int, 30, "pretraining warmup steps"),
    Field("mae.decoder_depth", int, 2, "decoder block count"),
    Field("mae.decoder_heads", int, 2, "decoder head count"),

    Field("gen.n_train", int, 400, "synthetic training images"),
    Field("gen.n_val", int, 100, "synthetic validation images"),
    Field("gen.n_test", int, 100, "synthetic test images"),
    Field("gen.image_size", int, 32, "synthetic image side in pixels"),
]

_SCHEMA_BY_PATH = {f.path: f for f in SCHEMA}


def default_config() -> dict:
    out: dict = {}
    for f in SCHEMA:
        _set_path(out, f.path, copy.deepcopy(f.default))
    return out


def _set_path(tree: dict, path: str, value) -> None:
    parts = path.split(".")
    node = tree
    for p in parts[:-1]:
        node = node.setdefault(p, {})
    node[parts[-1]] = value


def _get_path(tree: dict, path: str):
    node = tree
    for p in path.split("."):
        node = node[p]
    return node


def _flatten(tree: dict, prefix="") -> dict:
    out = {}
    for key, value in tree.items():
        path = f"{prefix}{key}"
        if isinstance(value, dict):
            out.update(_flatten(value, path + "."))
        else:
            out[path] = value
    return out


def parse_override(text: str) -> tuple[str, object]:
    """``--set a.b=value``; the value parses as JSON, else stays a string."""
    if "=" not in text:
        raise ConfigValidationError([f"override '{text}' is not KEY=VALUE"])
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value


def load_config(path: str | None, overrides: list[str] = ()) -> dict:
    """Defaults, then the JSON file, then dotted overrides; validated last."""
    merged = default_config()
    problems: list[str] = []
    if path is not None:
        try:
            with open(path, "r", encoding="utf-8") as f:
                user = json.load(f)
        except json.JSONDecodeError as exc:
            raise ConfigValidationError([f"config file '{path}' is not valid "
                                         f"JSON: {exc}"]) from None
        if not isinstance(user, dict):
            raise ConfigValidationError([f"config file '{path}' must hold a "
                                         "JSON object"])
        for key, value in _flatten(user).items():
            if key not in _SCHEMA_BY_PATH:
                problems.append(f"unknown key '{key}'")
            else:
                _set_path(merged, key, value)
    for item in overrides:
        key, value = parse_override(item)
        if key not in _SCHEMA_BY_PATH:
            problems.append(f"unknown key '{key}' in --set")
        else:
            _set_path(merged, key, value)
    if problems:
        raise ConfigValidationError(problems)
    return validate(merged)


def _type_ok(field: Field, value) -> bool:
    if value is None:
        return field.optional
    if field.kind == "list_int":
        return (isinstance(value, list) and
                all(isinstance(v, int) and not isinstance(v, bool) for v in value))
    if field.kind is bool:
        return isinstance(value, bool)
    if isinstance(field.kind, tuple) or field.kind is int:
        if isinstance(value, bool):
            return False
    return isinstance(value, field.kind)


def validate(config: dict) -> dict:
    """Type-check every field, resolve the model preset, then collect the
    module-level constraint violations. Raises with the full list."""
    problems: list[str] = []
    for key in _flatten(config):
        if key not in _SCHEMA_BY_PATH:
            problems.append(f"unknown key '{key}'")
    for f in SCHEMA:
        try:
            value = _get_path(config, f.path)
        except KeyError:
            _set_path(config, f.path, copy.deepcopy(f.default))
            continue
        if not _type_ok(f, value):
            kind = f.kind if isinstance(f.kind, str) else getattr(
                f.kind, "__name__", str(f.kind))
            problems.append(f"{f.path}={value!r} is not of type {kind}")
    if problems:
        raise ConfigValidationError(problems)

    model = config["model"]
    preset = model.get("preset")
    if preset is not None:
        if preset not in PRESETS:
            problems.append(f"model.preset={preset!r} not one of "
                            f"{sorted(PRESETS)}")
        else:
            for key, value in PRESETS[preset].items():
                if model.get(key) is None:
                    model[key] = value
    missing = [k for k in ("image_size", "patch_size", "dim", "depth", "heads")
               if model.get(k) is None]
    if missing:
        problems.append("model." + ", model.".join(missing) + " unset and no preset")
    if problems:
        raise ConfigValidationError(problems)

    problems.extend("model." + v for v in vit_config(config).violations())
    problems.extend(train_config(config).violations())
    problems.extend(augment_config(config).violations())
    problems.extend(kd_config(config).violations())
    if config["head"]["kind"] not in ("gp", "linear"):
        problems.append(f"head.kind={config['head']['kind']!r} must be 'gp' or 'linear'")
    if config["head"]["features"] < 1:
        problems.append(f"head.features={config['head']['features']} must be >= 1")
    ls = config["head"]["length_scale"]
    if ls is not None and not ls > 0:
        problems.append(f"head.length_scale={ls} must be positive")
    if not 0.0 < config["mae"]["mask_ratio"] < 1.0:
        problems.append(f"mae.mask_ratio={config['mae']['mask_ratio']} outside (0, 1)")
    if config["mae"]["steps"] < 1:
        problems.append(f"mae.steps={config['mae']['steps']} must be >= 1")
    for key in ("n_train", "n_val", "n_test"):
        if config["gen"][key] < 2:
            problems.append(f"gen.{key}={config['gen'][key]} must be >= 2")
    if problems:
        raise ConfigValidationError(problems)
    return config


# typed views ---------------------------------------------------------------


def vit_config(config: dict) -> VitConfig:
    m = config["model"]
    return VitConfig(image_size=m["image_size"], patch_size=m["patch_size"],
                     dim=m["dim"], depth=m["depth"], heads=m["heads"],
                     mlp_ratio=float(m["mlp_ratio"]),
                     num_classes=m["num_classes"])


def head_config(config: dict) -> heads.HeadConfig:
    h = config["head"]
    ls = h["length_scale"]
    return heads.HeadConfig(kind=h["kind"], features=h["features"],
                            length_scale=None if ls is None else float(ls))


def train_config(config: dict) -> tr.TrainConfig:
    o = config["optimizer"]
    return tr.TrainConfig(epochs=o["epochs"], batch_size=o["batch_size"],
                          lr=float(o["lr"]), weight_decay=float(o["weight_decay"]),
                          beta1=float(o["beta1"]), beta2=float(o["beta2"]),
                          eps=float(o["eps"]), warmup_epochs=o["warmup_epochs"])


def augment_config(config: dict) -> dp.AugmentConfig:
    a = config["augment"]
    return dp.AugmentConfig(
        enabled=a["enabled"], grayscale_p=float(a["grayscale_p"]),
        solarize_p=float(a["solarize_p"]),
        solarize_threshold=float(a["solarize_threshold"]),
        blur_p=float(a["blur_p"]), blur_sigma_min=float(a["blur_sigma_min"]),
        blur_sigma_max=float(a["blur_sigma_max"]), mix_p=float(a["mix_p"]),
        mixup_alpha=float(a["mixup_alpha"]), cutmix_alpha=float(a["cutmix_alpha"]))


def kd_config(config: dict) -> kd.KDConfig:
    k = config["kd"]
    return kd.KDConfig(alpha=float(k["alpha"]),
                       aligned_layers=tuple(k["aligned_layers"]),
                       project_side=k["project_side"],
                       share_projection=k["share_projection"],
                       include_ce=k["include_ce"],
                       teacher_checkpoint=k["teacher_checkpoint"])


def resolve_out_dir(config: dict) -> str:
    if config.get("out_dir"):
        return config["out_dir"]
    return os.environ.get(ENV_OUT_ROOT, "runs")


def schema_help() -> str:
    lines = ["config keys (JSON paths, overridable via --set KEY=VALUE):"]
    for f in SCHEMA:
        kind = f.kind if isinstance(f.kind, str) else getattr(
            f.kind, "__name__", None) or "/".join(t.__name__ for t in f.kind)
        opt = ", nullable" if f.optional else ""
        lines.append(f"  {f.path}  ({kind}{opt}, default={f.default!r})  {f.help}")
    return "\n".join(lines)
