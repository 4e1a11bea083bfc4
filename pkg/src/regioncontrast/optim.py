"""SGD-with-momentum and Adam, operating in place on parameter tensors.

Both optimizers apply classic coupled weight decay (the decay term is
added to the gradient before any momentum/moment bookkeeping).  Buffers
align positionally with the parameter list handed to ``step``; the first
call fixes the shapes.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .autodiff import Tensor

__all__ = ["SgdMomentum", "Adam", "opt_step"]


class SgdMomentum:
    """v <- momentum * v + (g + wd * p);  p <- p - lr * v."""

    def __init__(self, lr: float, momentum: float = 0.9, weight_decay: float = 1e-4):
        if lr <= 0:
            raise ValueError(f"SgdMomentum: lr must be > 0, got {lr}")
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity: list[np.ndarray] = []

    def step(self, params: Sequence[Tensor], grads: Sequence[np.ndarray]) -> None:
        if len(params) != len(grads):
            raise ValueError(f"step: {len(params)} params but {len(grads)} grads")
        if not self.velocity:
            self.velocity = [np.zeros_like(p.data) for p in params]
        if len(self.velocity) != len(params):
            raise ValueError("step: parameter list changed length mid-training")
        for p, g, v in zip(params, grads, self.velocity):
            if g.shape != p.data.shape:
                raise ValueError(f"step: grad shape {g.shape} != param shape {p.data.shape}")
            np.multiply(v, self.momentum, out=v)
            v += g + self.weight_decay * p.data
            p.data -= self.lr * v

    def state_dict(self) -> dict[str, np.ndarray]:
        return {f"sgd.v{i}": v.copy() for i, v in enumerate(self.velocity)}


class Adam:
    """Bias-corrected Adam with coupled weight decay (g <- g + wd * p)."""

    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8, weight_decay: float = 1e-4):
        if lr <= 0:
            raise ValueError(f"Adam: lr must be > 0, got {lr}")
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.m: list[np.ndarray] = []
        self.v: list[np.ndarray] = []
        self.t = 0

    def step(self, params: Sequence[Tensor], grads: Sequence[np.ndarray]) -> None:
        if len(params) != len(grads):
            raise ValueError(f"step: {len(params)} params but {len(grads)} grads")
        if not self.m:
            self.m = [np.zeros_like(p.data) for p in params]
            self.v = [np.zeros_like(p.data) for p in params]
        if len(self.m) != len(params):
            raise ValueError("step: parameter list changed length mid-training")
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            if g.shape != p.data.shape:
                raise ValueError(f"step: grad shape {g.shape} != param shape {p.data.shape}")
            gd = g + self.weight_decay * p.data
            m *= self.beta1
            m += (1.0 - self.beta1) * gd
            v *= self.beta2
            v += (1.0 - self.beta2) * gd * gd
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {f"adam.m{i}": m.copy() for i, m in enumerate(self.m)}
        out.update({f"adam.v{i}": v.copy() for i, v in enumerate(self.v)})
        out["adam.t"] = np.array([self.t], dtype=np.float64)
        return out


def opt_step(opt, params: Sequence[Tensor], grads: Sequence[np.ndarray]) -> Sequence[Tensor]:
    """Apply one optimizer update in place; returns the same param list."""
    opt.step(params, grads)
    return params
