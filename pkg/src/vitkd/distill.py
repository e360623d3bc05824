"""Teacher-to-student distillation: logit matching plus attention alignment
on shallow layers, combined as supervised loss + logit MSE + alpha * align."""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from . import data as dp
from . import train as tr
from . import vit
from .autograd import Tensor
from .optim import AdamW, cosine_lr
from .vit import VitModel, trunc_normal


class DistillError(Exception):
    pass


class TokenCountMismatchError(DistillError):
    """Teacher and student must share image and patch size."""


class MissingLayerError(DistillError):
    """An aligned layer index exceeds one of the model depths."""


@dataclass
class KDConfig:
    alpha: float = 5e-5
    aligned_layers: tuple[int, ...] = (0, 1)
    project_side: str = "student"    # which side the head projection acts on
    share_projection: bool = False   # one map for all aligned layers
    include_ce: bool = True          # add the student's supervised loss
    teacher_checkpoint: str | None = None

    def violations(self) -> list[str]:
        bad = []
        if self.alpha < 0:
            bad.append(f"kd.alpha={self.alpha} must be >= 0")
        if self.project_side not in ("student", "teacher"):
            bad.append(f"kd.project_side={self.project_side!r} must be "
                       "'student' or 'teacher'")
        if len(self.aligned_layers) == 0:
            bad.append("kd.aligned_layers must not be empty")
        if any(i < 0 for i in self.aligned_layers):
            bad.append(f"kd.aligned_layers={self.aligned_layers} has negative indices")
        return bad


def make_projections(student_heads: int, teacher_heads: int, cfg: KDConfig,
                     rng: np.random.Generator) -> list[dict[str, Tensor]]:
    """One learnable head-channel map per aligned layer (or one shared).
    Square maps start at identity so equal models begin at zero align loss."""
    if cfg.project_side == "student":
        src, dst = student_heads, teacher_heads
    else:
        src, dst = teacher_heads, student_heads
    count = 1 if cfg.share_projection else len(cfg.aligned_layers)
    projections = []
    for _ in range(count):
        if src == dst:
            w = np.eye(src)
        else:
            w = trunc_normal(rng, (src, dst), 0.02)
        projections.append({"w": Tensor(w, requires_grad=True),
                            "b": Tensor(np.zeros(dst), requires_grad=True)})
    return projections


def projection_params(projections: list[dict[str, Tensor]]) -> list[tuple[str, Tensor]]:
    out = []
    for i, proj in enumerate(projections):
        out.extend([(f"proj.{i}.w", proj["w"]), (f"proj.{i}.b", proj["b"])])
    return out


def _heads_to_channels(attn: Tensor) -> Tensor:
    # (B, H, T, T) -> (B, T, T, H): heads become a channel axis per token pair
    return ag.transpose(attn, (0, 2, 3, 1))


def align_loss(student_stack: list[Tensor], teacher_stack: list[Tensor],
               projections: list[dict[str, Tensor]], cfg: KDConfig) -> Tensor:
    """Mean over aligned layers of MSE between teacher attention and the
    head-projected student attention (or the reverse, per project_side)."""
    for i in cfg.aligned_layers:
        if i >= len(student_stack) or i >= len(teacher_stack):
            raise MissingLayerError(
                f"aligned layer {i} missing (student depth {len(student_stack)}, "
                f"teacher depth {len(teacher_stack)})")
    s0, t0 = student_stack[0].shape, teacher_stack[0].shape
    if s0[-1] != t0[-1]:
        raise TokenCountMismatchError(
            f"student tokens {s0[-1]} != teacher tokens {t0[-1]}; "
            "image and patch sizes must match")

    total = None
    for k, i in enumerate(cfg.aligned_layers):
        proj = projections[0 if cfg.share_projection else k]
        s = _heads_to_channels(student_stack[i])
        t = _heads_to_channels(teacher_stack[i])
        if cfg.project_side == "student":
            s = ag.add(ag.matmul(s, proj["w"]), proj["b"])
        else:
            t = ag.add(ag.matmul(t, proj["w"]), proj["b"])
        term = ag.mse(s, t)
        total = term if total is None else ag.add(total, term)
    return ag.mul(total, Tensor(1.0 / len(cfg.aligned_layers)))


def logit_loss(student_logits: Tensor, teacher_logits: Tensor) -> Tensor:
    return ag.mse(student_logits, teacher_logits)


def kd_loss(align: Tensor, logit: Tensor, ce, alpha: float) -> Tensor:
    """ce + logit + alpha * align; exactly linear in alpha."""
    total = ag.add(logit, ag.mul(align, Tensor(float(alpha))))
    if ce is not None:
        total = ag.add(total, ce)
    return total


@dataclass
class DistillLog:
    rows: list[dict] = field(default_factory=list)        # per epoch
    step_components: list[dict] = field(default_factory=list)  # per step


def check_compatible(teacher: VitModel, student: VitModel) -> None:
    bad = [f for f in ("image_size", "patch_size", "num_classes")
           if getattr(teacher.cfg, f) != getattr(student.cfg, f)]
    if bad:
        raise DistillError("teacher/student checkpoint incompatible on: "
                           + ", ".join(bad))


def freeze(model: VitModel) -> None:
    for _, t in model.named_tensors():
        t.requires_grad = False


def distill(teacher: VitModel, student: VitModel, arrays: tr.SplitArrays,
            cfg: tr.TrainConfig, kd: KDConfig | None = None,
            aug_cfg: dp.AugmentConfig | None = None, seed: int = 0,
            out_dir: str | None = None) -> DistillLog:
    """Optimize the student and the attention projections jointly; the
    teacher is frozen and receives no gradient (its tensors stay bit
    identical). Per-epoch component means land in distill_metrics.csv."""
    kd = kd or KDConfig()
    check_compatible(teacher, student)
    freeze(teacher)
    max_layer = max(kd.aligned_layers)
    if max_layer >= teacher.cfg.depth or max_layer >= student.cfg.depth:
        raise MissingLayerError(
            f"aligned layer {max_layer} missing (student depth "
            f"{student.cfg.depth}, teacher depth {teacher.cfg.depth})")

    rng = np.random.default_rng(np.random.SeedSequence((seed, 0xD157)))
    projections = make_projections(student.cfg.heads, teacher.cfg.heads, kd, rng)
    opt = AdamW(student.trainable() + projection_params(projections),
                lr=cfg.lr, betas=(cfg.beta1, cfg.beta2), eps=cfg.eps,
                weight_decay=cfg.weight_decay)

    x_train, y_train = arrays.train
    n = len(x_train)
    steps_per_epoch = max(1, (n + cfg.batch_size - 1) // cfg.batch_size)
    total_steps = cfg.epochs * steps_per_epoch
    warmup_steps = cfg.warmup_epochs * steps_per_epoch

    log = DistillLog()
    step = 0
    for epoch in range(cfg.epochs):
        order_rng = np.random.default_rng(np.random.SeedSequence((seed, epoch)))
        order = order_rng.permutation(n)
        sums = {"ce": 0.0, "logit": 0.0, "align": 0.0, "total": 0.0}
        count = 0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            bx, by = tr._build_batch(x_train, y_train, idx, epoch, seed, aug_cfg,
                                     student.cfg.num_classes, order_rng)
            batch = dp.normalize(bx)

            try:
                with ag.no_grad():
                    t_logits, t_stack = vit.model_logits(teacher, batch)
                s_logits, s_stack = vit.model_logits(student, batch)

                align = align_loss(s_stack, t_stack, projections, kd)
                logit = logit_loss(s_logits, t_logits)
                ce = ag.cross_entropy(s_logits, Tensor(by)) if kd.include_ce else None
                total = kd_loss(align, logit, ce, kd.alpha)

                parts = {"ce": ce.item() if ce is not None else 0.0,
                         "logit": logit.item(), "align": align.item(),
                         "total": total.item()}
                if not np.isfinite(parts["total"]):
                    raise tr.TrainingDivergedError(
                        f"non-finite distillation loss {parts} at step {step}")
                ag.backward(total)
            except ag.NonFiniteError as exc:
                raise tr.TrainingDivergedError(
                    f"distillation diverged at step {step}: {exc}") from exc
            log.step_components.append(parts)
            for key, value in parts.items():
                sums[key] += value
            count += 1
            opt.step(lr=cosine_lr(step, total_steps, warmup_steps, cfg.lr))
            opt.zero_grad()
            step += 1

        report, _ = tr.evaluate(student, *arrays.val)
        row = {"epoch": epoch, "ce": sums["ce"] / count,
               "logit_loss": sums["logit"] / count,
               "align_loss": sums["align"] / count,
               "total": sums["total"] / count,
               "val_accuracy": report.accuracy}
        log.rows.append(row)

    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "distill_metrics.csv"), "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["epoch", "ce", "logit_loss", "align_loss", "total",
                        "val_accuracy"])
            for row in log.rows:
                w.writerow([row["epoch"], repr(row["ce"]), repr(row["logit_loss"]),
                            repr(row["align_loss"]), repr(row["total"]),
                            repr(row["val_accuracy"])])
    return log
