"""AdamW with decoupled weight decay, plus the warmup/cosine schedule."""

from __future__ import annotations

import numpy as np

from .autograd import Tensor


class MissingGradError(Exception):
    """step() was called while a managed parameter has no gradient."""


class AdamW:
    """Decoupled weight decay: the decay term never touches the moments, so
    lr = 0 is an exact no-op and zero gradients only shrink parameters by
    (1 - lr * wd) per step."""

    def __init__(self, params: list[tuple[str, Tensor]], lr: float = 1e-4,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0):
        self.params = list(params)
        self.lr = float(lr)
        self.beta1, self.beta2 = float(betas[0]), float(betas[1])
        self.eps = float(eps)
        self.weight_decay = float(weight_decay)
        self.t = 0
        self._m = [np.zeros_like(p.data) for _, p in self.params]
        self._v = [np.zeros_like(p.data) for _, p in self.params]

    def step(self, lr: float | None = None) -> None:
        lr = self.lr if lr is None else float(lr)
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for i, (name, p) in enumerate(self.params):
            if p.grad is None:
                raise MissingGradError(f"parameter '{name}' has no gradient")
            g = p.grad
            self._m[i] = self.beta1 * self._m[i] + (1.0 - self.beta1) * g
            self._v[i] = self.beta2 * self._v[i] + (1.0 - self.beta2) * (g * g)
            mhat = self._m[i] / bc1
            vhat = self._v[i] / bc2
            p.data[...] = (p.data
                           - lr * (mhat / (np.sqrt(vhat) + self.eps))
                           - lr * self.weight_decay * p.data)

    def zero_grad(self) -> None:
        for _, p in self.params:
            p.zero_grad()


def cosine_lr(step: int, total_steps: int, warmup_steps: int, peak: float) -> float:
    """Linear warmup to ``peak`` then cosine decay toward zero.

    The first post-warmup step gets exactly ``peak``; the final step lands
    just short of zero rather than at it, so every step still learns.
    """
    if total_steps < 1:
        raise ValueError(f"total_steps must be >= 1, got {total_steps}")
    if not 0 <= step < total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps})")
    if warmup_steps > 0 and step < warmup_steps:
        return peak * (step + 1) / warmup_steps
    span = max(1, total_steps - warmup_steps)
    progress = (step - warmup_steps) / span
    return peak * 0.5 * (1.0 + np.cos(np.pi * progress))
