"""Supervised finetuning loop: AdamW, linear warmup + cosine decay, per-epoch
validation, best-checkpoint selection and the metrics artifacts."""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from . import data as dp
from . import metrics as mx
from . import vit
from .autograd import Tensor
from .optim import AdamW, cosine_lr


class TrainingDivergedError(Exception):
    """Loss left the reals; message carries step, lr and the loss value."""


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 32
    lr: float = 1e-4
    weight_decay: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    warmup_epochs: int = 3

    def violations(self) -> list[str]:
        bad = []
        if self.epochs < 1:
            bad.append(f"optimizer.epochs={self.epochs} must be >= 1")
        if self.batch_size < 1:
            bad.append(f"optimizer.batch_size={self.batch_size} must be >= 1")
        if self.lr < 0:
            bad.append(f"optimizer.lr={self.lr} must be >= 0")
        if self.weight_decay < 0:
            bad.append(f"optimizer.weight_decay={self.weight_decay} must be >= 0")
        if not 0 <= self.warmup_epochs <= self.epochs:
            bad.append(f"optimizer.warmup_epochs={self.warmup_epochs} outside "
                       f"[0, epochs]")
        for name in ("beta1", "beta2"):
            v = getattr(self, name)
            if not 0.0 <= v < 1.0:
                bad.append(f"optimizer.{name}={v} outside [0, 1)")
        return bad


@dataclass
class SplitArrays:
    """In-memory dataset: one (images, labels) pair per split."""

    train: tuple[np.ndarray, np.ndarray]
    val: tuple[np.ndarray, np.ndarray]
    test: tuple[np.ndarray, np.ndarray] | None = None

    @classmethod
    def from_index(cls, index: dp.DatasetIndex) -> "SplitArrays":
        return cls(train=dp.load_split_arrays(index, "train"),
                   val=dp.load_split_arrays(index, "val"),
                   test=dp.load_split_arrays(index, "test"))


@dataclass
class EpochRow:
    epoch: int
    train_loss: float
    val_loss: float
    val_acc: float
    val_auroc: float | None
    lr: float


def evaluate(model: vit.VitModel, images: np.ndarray, labels: np.ndarray,
             batch_size: int = 64) -> tuple[mx.MetricsReport, float]:
    """Metrics plus mean cross-entropy on un-augmented, normalized images."""
    logits = predict_logits(model, images, batch_size)
    onehot = dp.one_hot(labels, model.cfg.num_classes)
    z = logits - logits.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    loss = float(-(onehot * logp).sum() / len(labels))
    return mx.evaluate_scores(logits, labels, model.cfg.num_classes), loss


def predict_logits(model: vit.VitModel, images: np.ndarray,
                   batch_size: int = 64) -> np.ndarray:
    out = []
    with ag.no_grad():
        for start in range(0, len(images), batch_size):
            chunk = dp.normalize(images[start:start + batch_size])
            logits, _ = vit.model_logits(model, chunk)
            out.append(logits.data)
    return np.concatenate(out, axis=0)


def _build_batch(images, labels, idx, epoch, seed, aug_cfg, num_classes, rng):
    """Augment one batch: photometric per sample, then pair mixing against a
    shuffled partner within the batch."""
    raw = [images[i] for i in idx]
    dists = dp.one_hot(labels[idx], num_classes)
    if aug_cfg is None or not aug_cfg.enabled:
        return np.stack(raw), dists
    photo = [dp.augment_photometric(raw[k], aug_cfg, dp.sample_rng(seed, epoch, int(i)))
             for k, i in enumerate(idx)]
    partners = rng.permutation(len(idx))
    xs, ys = [], []
    for k, i in enumerate(idx):
        p = int(partners[k])
        srng = dp.sample_rng(seed, epoch, int(i) + 1_000_003)
        x, y = dp.augment(photo[k], dists[k], photo[p], dists[p], aug_cfg, srng)
        xs.append(x)
        ys.append(y)
    return np.stack(xs), np.stack(ys)


def train(model: vit.VitModel, arrays: SplitArrays, cfg: TrainConfig,
          aug_cfg: dp.AugmentConfig | None = None, seed: int = 0,
          out_dir: str | None = None, class_names: list[str] | None = None,
          config_echo: dict | None = None) -> tuple[list[EpochRow], mx.MetricsReport]:
    """Train in place, keep the best-validation weights, return per-epoch rows
    and the test report (computed on the best weights).

    Artifacts under out_dir when given: metrics.csv, report.json, model.ckpt.
    """
    x_train, y_train = arrays.train
    n = len(x_train)
    steps_per_epoch = max(1, (n + cfg.batch_size - 1) // cfg.batch_size)
    total_steps = cfg.epochs * steps_per_epoch
    warmup_steps = cfg.warmup_epochs * steps_per_epoch

    opt = AdamW(model.trainable(), lr=cfg.lr, betas=(cfg.beta1, cfg.beta2),
                eps=cfg.eps, weight_decay=cfg.weight_decay)

    rows: list[EpochRow] = []
    best = None  # (acc, -val_loss, epoch, weights)
    step = 0
    for epoch in range(cfg.epochs):
        order_rng = np.random.default_rng(np.random.SeedSequence((seed, epoch)))
        order = order_rng.permutation(n)
        losses = []
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            bx, by = _build_batch(x_train, y_train, idx, epoch, seed, aug_cfg,
                                  model.cfg.num_classes, order_rng)
            lr = cosine_lr(step, total_steps, warmup_steps, cfg.lr)
            try:
                logits, _ = vit.model_logits(model, dp.normalize(bx))
                loss = ag.cross_entropy(logits, Tensor(by))
                value = loss.item()
                if not np.isfinite(value):
                    raise TrainingDivergedError(
                        f"non-finite loss {value} at step {step} (lr={lr})")
                ag.backward(loss)
            except ag.NonFiniteError as exc:
                raise TrainingDivergedError(
                    f"training diverged at step {step} (lr={lr}): {exc}") from exc
            opt.step(lr=lr)
            opt.zero_grad()
            losses.append(value)
            step += 1

        report, val_loss = evaluate(model, *arrays.val)
        rows.append(EpochRow(epoch=epoch, train_loss=float(np.mean(losses)),
                             val_loss=val_loss, val_acc=report.accuracy,
                             val_auroc=report.auroc,
                             lr=cosine_lr(step - 1, total_steps, warmup_steps, cfg.lr)))
        key = (report.accuracy, -val_loss)
        if best is None or key > best[0]:
            best = (key, epoch,
                    [t.data.copy() for _, t in model.named_tensors()])

    # restore the best-validation weights before the test pass
    best_epoch = best[1]
    for (name, t), saved in zip(model.named_tensors(), best[2]):
        t.data[...] = saved

    test_report = None
    if arrays.test is not None:
        test_report, _ = evaluate(model, *arrays.test)
        test_report.loss_curve = [r.train_loss for r in rows]

    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        write_metrics_csv(os.path.join(out_dir, "metrics.csv"), rows)
        vit.save_model(os.path.join(out_dir, "model.ckpt"), model, class_names)
        if test_report is not None:
            write_report(os.path.join(out_dir, "report.json"), test_report,
                         best_epoch, extra=config_echo)
    return rows, test_report


def write_metrics_csv(path, rows: list[EpochRow]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["epoch", "train_loss", "val_loss", "val_acc", "val_auroc", "lr"])
        for r in rows:
            roc = "" if r.val_auroc is None else repr(r.val_auroc)
            w.writerow([r.epoch, repr(r.train_loss), repr(r.val_loss),
                        repr(r.val_acc), roc, repr(r.lr)])


def write_report(path, report: mx.MetricsReport, best_epoch: int,
                 extra: dict | None) -> None:
    payload = {"test": report.to_dict(), "best_epoch": best_epoch}
    if extra:
        payload["config"] = extra
    with open(path, "w", encoding="utf-8") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
        f.write("\n")
