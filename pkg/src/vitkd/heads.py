"""Classifier heads over the class embedding.

The gp head is a random-feature Gaussian process readout: frozen random
projection W and phase b, cosine features scaled by sqrt(2/M), and a trainable
linear map beta. Feature dot products approximate an RBF kernel with the
configured length scale, which is what makes the head testable against a
closed-form kernel. The linear head is a plain affine map for ablations.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Tensor


@dataclass
class HeadConfig:
    kind: str = "gp"              # "gp" or "linear"
    features: int = 1024          # M, gp only
    length_scale: float | None = None  # None -> sqrt(dim)

    def resolved_length_scale(self, dim: int) -> float:
        return float(self.length_scale) if self.length_scale is not None else float(np.sqrt(dim))


def sample_rff_params(rng: np.random.Generator, dim: int, features: int,
                      length_scale: float) -> tuple[np.ndarray, np.ndarray]:
    """Draw the frozen projection: W ~ N(0, 1/length_scale^2), b ~ U[0, 2pi)."""
    if features < 1:
        raise ValueError(f"invalid parameter: feature count must be >= 1, got {features}")
    if not length_scale > 0:
        raise ValueError(f"invalid parameter: length scale must be positive, got {length_scale}")
    w = rng.normal(0.0, 1.0 / length_scale, size=(features, dim))
    b = rng.uniform(0.0, 2.0 * np.pi, size=(features,))
    return w, b


def rff_transform(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Plain-numpy feature map sqrt(2/M) * cos(x W^T + b) for rows of x."""
    m = w.shape[0]
    return np.sqrt(2.0 / m) * np.cos(x @ w.T + b)


@dataclass
class RFFHead:
    """Frozen W, b plus trainable beta. W and b never receive gradients."""

    w: Tensor
    b: Tensor
    beta: Tensor
    features: int
    length_scale: float

    def param_items(self):
        return [("gp.W", self.w), ("gp.b", self.b), ("gp.beta", self.beta)]

    def meta(self):
        return {"kind": "gp", "features": self.features, "length_scale": self.length_scale}


@dataclass
class LinearHead:
    w: Tensor
    b: Tensor

    def param_items(self):
        return [("head.W", self.w), ("head.b", self.b)]

    def meta(self):
        return {"kind": "linear"}


def init_rff_head(dim: int, num_classes: int, features: int, length_scale: float,
                  seed: int | np.random.Generator) -> RFFHead:
    """Deterministic head init: same seed gives bit-identical W and b."""
    if dim < 1 or num_classes < 1:
        raise ValueError(f"invalid parameter: dim={dim}, num_classes={num_classes}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    w, b = sample_rff_params(rng, dim, features, length_scale)
    return RFFHead(
        w=Tensor(w, requires_grad=False),
        b=Tensor(b, requires_grad=False),
        beta=Tensor(np.zeros((features, num_classes)), requires_grad=True),
        features=features,
        length_scale=float(length_scale),
    )


def init_linear_head(dim: int, num_classes: int,
                     rng: np.random.Generator) -> LinearHead:
    from .vit import trunc_normal
    return LinearHead(
        w=Tensor(trunc_normal(rng, (dim, num_classes), 0.02), requires_grad=True),
        b=Tensor(np.zeros(num_classes), requires_grad=True),
    )


def _lift(x: Tensor) -> tuple[Tensor, bool]:
    if x.ndim == 1:
        return ag.reshape(x, (1, x.shape[0])), True
    return x, False


def rff_features(head: RFFHead, x: Tensor) -> Tensor:
    """sqrt(2/M) * cos(W x + b), rowwise over a (B, D) batch or a single (D,)."""
    x2, single = _lift(x)
    if x2.shape[-1] != head.w.shape[1]:
        raise ag.ShapeError(f"rff_features: input dim {x2.shape[-1]} does not match "
                            f"projection dim {head.w.shape[1]}")
    phase = ag.add(ag.matmul(x2, ag.transpose(head.w, (1, 0))), head.b)
    feats = ag.mul(ag.cos(phase), Tensor(np.sqrt(2.0 / head.features)))
    return ag.slice_(feats, 0) if single else feats


def gp_logits(head: RFFHead, x: Tensor) -> Tensor:
    """Phi(x) beta. Gradients reach beta (and x) only; W, b are frozen."""
    x2, single = _lift(x)
    out = ag.matmul(rff_features(head, x2), head.beta)
    return ag.slice_(out, 0) if single else out


def linear_logits(head: LinearHead, x: Tensor) -> Tensor:
    x2, single = _lift(x)
    out = ag.add(ag.matmul(x2, head.w), head.b)
    return ag.slice_(out, 0) if single else out


def head_logits(head, x: Tensor) -> Tensor:
    if isinstance(head, RFFHead):
        return gp_logits(head, x)
    return linear_logits(head, x)


def init_head(dim: int, num_classes: int, cfg: HeadConfig,
              rng: np.random.Generator):
    if cfg.kind == "gp":
        return init_rff_head(dim, num_classes, cfg.features,
                             cfg.resolved_length_scale(dim), rng)
    if cfg.kind == "linear":
        return init_linear_head(dim, num_classes, rng)
    raise ValueError(f"invalid parameter: unknown head kind {cfg.kind!r}")
