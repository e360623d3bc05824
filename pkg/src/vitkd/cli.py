"""Command-line pipeline: gen-data, pretrain, train, distill, eval, attn-viz.

Every command is driven by a JSON config plus dotted --set overrides and is a
pure function of (config, seed, input files); failures exit nonzero with one
machine-parseable JSON line on stderr.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys

import numpy as np

from . import checkpoint as ckpt
from . import config as cf
from . import data as dp
from . import distill as kd
from . import mae, train as tr, vit, viz
from .config import ConfigValidationError
from .imageio import UnreadableImageError, read_image
from .optim import MissingGradError


def _say(payload: dict) -> None:
    print(json.dumps(payload, sort_keys=True))


def _require_data_root(config: dict) -> str:
    root = config.get("data_root")
    if not root:
        raise ConfigValidationError(["data_root is required for this command"])
    return root


def _build_model(config: dict) -> vit.VitModel:
    vcfg = cf.vit_config(config)
    hcfg = cf.head_config(config)
    seed = config["seed"]
    init = config.get("init_checkpoint")
    if init:
        return mae.load_pretrained(init, vcfg, hcfg, seed=seed)
    return vit.VitModel(vcfg, hcfg, seed=seed)


def cmd_gen_data(config: dict, args) -> int:
    root = _require_data_root(config)
    g = config["gen"]
    index = dp.gen_synthetic(root, {"train": g["n_train"], "val": g["n_val"],
                                    "test": g["n_test"]},
                             g["image_size"], seed=config["seed"])
    _say({"command": "gen-data", "root": root, "counts": index.counts(),
          "classes": index.class_names})
    return 0


def cmd_train(config: dict, args) -> int:
    root = _require_data_root(config)
    index = dp.load_dataset(root)
    arrays = tr.SplitArrays.from_index(index)
    model = _build_model(config)
    out_dir = cf.resolve_out_dir(config)
    rows, report = tr.train(model, arrays, cf.train_config(config),
                            aug_cfg=cf.augment_config(config),
                            seed=config["seed"], out_dir=out_dir,
                            class_names=index.class_names,
                            config_echo=config)
    _say({"command": "train", "out_dir": out_dir,
          "test_accuracy": report.accuracy, "test_auroc": report.auroc,
          "epochs": len(rows)})
    return 0


def cmd_eval(config: dict, args) -> int:
    model, class_names = vit.load_model(args.checkpoint)
    root = _require_data_root(config)
    index = dp.load_dataset(root)
    images, labels = dp.load_split_arrays(index, args.split)
    report, loss = tr.evaluate(model, images, labels)
    out_dir = cf.resolve_out_dir(config)
    os.makedirs(out_dir, exist_ok=True)
    payload = {"checkpoint": args.checkpoint, "split": args.split,
               "metrics": report.to_dict(), "loss": loss,
               "class_names": class_names}
    with open(os.path.join(out_dir, "eval.json"), "w", encoding="utf-8") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
        f.write("\n")
    _say({"command": "eval", "split": args.split,
          "accuracy": report.accuracy, "auroc": report.auroc})
    return 0


def cmd_pretrain(config: dict, args) -> int:
    root = _require_data_root(config)
    index = dp.load_dataset(root)
    images, _ = dp.load_split_arrays(index, "train")
    vcfg = cf.vit_config(config)
    model = vit.VitModel(vcfg, cf.head_config(config), seed=config["seed"])
    m = config["mae"]
    decoder = mae.MaeDecoder(vcfg, depth=m["decoder_depth"],
                             heads=m["decoder_heads"],
                             seed=np.random.default_rng(
                                 np.random.SeedSequence((config["seed"], 0xDEC))))
    o = config["optimizer"]
    losses = mae.pretrain(model, decoder, images, steps=m["steps"],
                          batch_size=o["batch_size"], lr=float(o["lr"]),
                          weight_decay=float(o["weight_decay"]),
                          warmup_steps=m["warmup_steps"],
                          mask_ratio=float(m["mask_ratio"]), seed=config["seed"])
    out_dir = cf.resolve_out_dir(config)
    os.makedirs(out_dir, exist_ok=True)
    enc_path = os.path.join(out_dir, "encoder.ckpt")
    mae.save_encoder(enc_path, model)
    with open(os.path.join(out_dir, "pretrain_log.csv"), "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["step", "loss"])
        for i, value in enumerate(losses):
            w.writerow([i, repr(value)])
    _say({"command": "pretrain", "encoder": enc_path, "steps": len(losses),
          "first_loss": losses[0], "final_loss": losses[-1]})
    return 0


def cmd_distill(config: dict, args) -> int:
    kcfg = cf.kd_config(config)
    if not kcfg.teacher_checkpoint:
        raise ConfigValidationError(["kd.teacher_checkpoint is required for distill"])
    teacher, _ = vit.load_model(kcfg.teacher_checkpoint)
    root = _require_data_root(config)
    index = dp.load_dataset(root)
    arrays = tr.SplitArrays.from_index(index)
    student = _build_model(config)
    out_dir = cf.resolve_out_dir(config)
    log = kd.distill(teacher, student, arrays, cf.train_config(config), kcfg,
                     aug_cfg=cf.augment_config(config), seed=config["seed"],
                     out_dir=out_dir)
    report, _ = tr.evaluate(student, *arrays.test)
    vit.save_model(os.path.join(out_dir, "student.ckpt"), student,
                   index.class_names)
    tr.write_report(os.path.join(out_dir, "report.json"), report,
                    best_epoch=len(log.rows) - 1, extra=config)
    _say({"command": "distill", "out_dir": out_dir,
          "test_accuracy": report.accuracy,
          "first_logit_loss": log.step_components[0]["logit"],
          "final_logit_loss": log.step_components[-1]["logit"]})
    return 0


def cmd_attn_viz(config: dict, args) -> int:
    model, _ = vit.load_model(args.checkpoint)
    image = read_image(args.image)
    out_dir = os.path.join(cf.resolve_out_dir(config), "attn")
    meta = viz.render_attention(model, image, out_dir, fmt=args.format,
                                per_head=args.per_head)
    _say({"command": "attn-viz", "out_dir": out_dir,
          "maps": len(meta["maps"])})
    return 0


COMMANDS = {
    "gen-data": cmd_gen_data,
    "pretrain": cmd_pretrain,
    "train": cmd_train,
    "distill": cmd_distill,
    "eval": cmd_eval,
    "attn-viz": cmd_attn_viz,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="vitkd",
        description="Vision-transformer classifier with GP head, attention "
                    "distillation and masked-autoencoder pretraining.",
        epilog=cf.schema_help(),
        formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def add(name, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", default=None, help="JSON config file")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config key (dotted path, JSON value)")
        return p

    add("gen-data", "write the synthetic two-class corpus under data_root")
    add("pretrain", "masked-autoencoder pretraining; emits encoder.ckpt")
    add("train", "supervised training; emits model.ckpt, metrics.csv, report.json")
    add("distill", "teacher-to-student distillation; emits student.ckpt")

    p = add("eval", "evaluate a checkpoint on a dataset split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="test", choices=dp.SPLITS)

    p = add("attn-viz", "render class-token attention heatmaps per layer")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--per-head", action="store_true",
                   help="one map per head instead of the head average")
    p.add_argument("--format", default="png", choices=("png", "ppm"))
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = cf.load_config(args.config, args.set)
        return COMMANDS[args.command](config, args)
    except ConfigValidationError as exc:
        print(json.dumps({"error": "config-validation", "fields": exc.problems},
                         sort_keys=True), file=sys.stderr)
        return 2
    except ckpt.ConfigMismatchError as exc:
        print(json.dumps({"error": "checkpoint-incompatible",
                          "fields": exc.fields}, sort_keys=True), file=sys.stderr)
        return 1
    except (ckpt.CheckpointError, kd.DistillError) as exc:
        print(json.dumps({"error": "checkpoint-incompatible", "detail": str(exc)},
                         sort_keys=True), file=sys.stderr)
        return 1
    except (dp.DatasetError, UnreadableImageError) as exc:
        print(json.dumps({"error": "data", "detail": str(exc)}, sort_keys=True),
              file=sys.stderr)
        return 1
    except (tr.TrainingDivergedError, MissingGradError) as exc:
        print(json.dumps({"error": "training", "detail": str(exc)}, sort_keys=True),
              file=sys.stderr)
        return 1
    except OSError as exc:
        print(json.dumps({"error": "io", "detail": str(exc)}, sort_keys=True),
              file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
