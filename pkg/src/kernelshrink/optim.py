"""SGD with momentum, weight decay, and polynomial learning-rate decay."""

from __future__ import annotations

import numpy as np

from .tensor import Tensor


class DivergenceError(RuntimeError):
    """Raised when a non-finite loss or gradient aborts optimization."""


def polynomial_lr(base_lr: float, step: int, total_steps: int, power: float = 0.9) -> float:
    """lr(t) = lr0 * (1 - t/T)^power; exactly lr0 at t=0 and 0 at t=T."""
    if total_steps <= 0:
        return base_lr
    frac = 1.0 - step / total_steps
    return base_lr * max(frac, 0.0) ** power


class SGD:
    """Momentum SGD over parameter groups.

    Update per parameter: v <- m*v + (g + wd*p); p <- p - lr(t)*v with
    lr(t) following polynomial decay.  Groups carry an lr multiplier and
    may override weight decay.  Only parameters holding a gradient are
    touched, so paths inactive in an iteration stay exactly fixed.
    """

    def __init__(self, params=None, lr=0.01, momentum=0.9, weight_decay=0.0,
                 total_steps=1, power=0.9, groups=None):
        if not 0.0 <= momentum < 1.0:
            raise ValueError("momentum must be in [0, 1)")
        if weight_decay < 0.0:
            raise ValueError("weight decay must be non-negative")
        if lr <= 0.0:
            raise ValueError("learning rate must be positive")
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.total_steps = total_steps
        self.power = power
        if groups is None:
            groups = [{"params": list(params or [])}]
        self.groups = [{
            "params": list(g["params"]),
            "lr_mult": float(g.get("lr_mult", 1.0)),
            "weight_decay": float(g.get("weight_decay", weight_decay)),
        } for g in groups]
        self.step_count = 0
        self._velocity: dict[int, np.ndarray] = {}

    def lr_at(self, step: int) -> float:
        return polynomial_lr(self.lr, step, self.total_steps, self.power)

    def step(self):
        if self.step_count >= self.total_steps:
            raise ValueError(f"optimizer stepped beyond horizon {self.total_steps}")
        lr_t = self.lr_at(self.step_count)
        for group in self.groups:
            glr = lr_t * group["lr_mult"]
            wd = group["weight_decay"]
            for p in group["params"]:
                if p.grad is None:
                    continue
                if not np.all(np.isfinite(p.grad)):
                    raise DivergenceError(
                        f"non-finite gradient at step {self.step_count}"
                        f" (param shape {p.shape})")
                g = p.grad + wd * p.data if wd else p.grad
                v = self._velocity.get(id(p))
                if v is None:
                    v = np.zeros_like(p.data)
                    self._velocity[id(p)] = v
                v *= self.momentum
                v += g
                p.data -= glr * v
        self.step_count += 1

    def zero_grad(self):
        for group in self.groups:
            for p in group["params"]:
                p.zero_grad()


def check_finite_loss(loss: Tensor, step: int):
    if not np.isfinite(loss.data):
        raise DivergenceError(f"non-finite loss {float(loss.data)} at step {step}")
