"""Finite-difference verification of every backward rule.

Each check builds a scalar-valued closure over one or more input tensors,
compares the analytic gradient against central differences coordinate by
coordinate, and reports the worst relative error.  The suite covers every
differentiable op in the package once.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .tensor import Tensor, concat


@dataclass
class CheckResult:
    name: str
    cases: int
    max_rel_error: float
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tol


@dataclass
class GradCheckReport:
    results: list[CheckResult] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results)

    def lines(self):
        for r in self.results:
            status = "pass" if r.passed else "FAIL"
            yield (f"{status}  {r.name:<28} cases={r.cases:<3d} "
                   f"max_rel_err={r.max_rel_error:.3e}  tol={r.tol:.1e}")


def grad_check(closure, inputs, h=1e-5, tol=1e-4):
    """Max relative error between analytic and central-difference gradients.

    ``closure(*inputs)`` must return a scalar Tensor.  The relative error
    uses a unit floor in the denominator: |a - n| / max(1, |a|, |n|).
    """
    if not 1e-7 <= h <= 1e-3:
        raise ValueError("step size h must lie in [1e-7, 1e-3]")
    for t in inputs:
        t.zero_grad()
    out = closure(*inputs)
    out.backward()
    analytic = [np.array(t.grad) if t.grad is not None else np.zeros_like(t.data)
                for t in inputs]

    worst = 0.0
    for t, a in zip(inputs, analytic):
        flat = t.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(closure(*inputs).data)
            flat[i] = orig - h
            fm = float(closure(*inputs).data)
            flat[i] = orig
            numeric = (fp - fm) / (2.0 * h)
            ai = a.reshape(-1)[i]
            rel = abs(ai - numeric) / max(1.0, abs(ai), abs(numeric))
            worst = max(worst, rel)
    return worst, worst < tol


def _rand(rng, *shape, low=-1.0, high=1.0):
    return Tensor(rng.uniform(low, high, size=shape), requires_grad=True)


def _away_from_zero(rng, *shape, margin=0.25):
    """Uniform values with |x| >= margin, for kink-free relu checks."""
    x = rng.uniform(margin, 1.0, size=shape) * rng.choice([-1.0, 1.0], size=shape)
    return Tensor(x, requires_grad=True)


def _suite_specs():
    def conv1d(x, w):
        return (nn.conv_nd(x, w) * nn.conv_nd(x, w)).sum()

    def conv2d_stride(x, w):
        return nn.conv_nd(x, w, stride=2).sum()

    def conv3d(x, w):
        y = nn.conv_nd(x, w)
        return (y * y).mean()

    def conv3d_batched(x, w):
        return nn.conv_nd(x, w, stride=(2, 1, 1)).mean()

    def bn_train(x, s, b):
        y = nn.batch_norm(x, s, b, training=True)
        return (y * y).mean()

    def bn_eval(x, s, b):
        rm = np.array([0.1, -0.2])
        rv = np.array([0.5, 1.5])
        return nn.batch_norm(x, s, b, rm, rv, training=False).sum()

    def relu_pipeline(x, w):
        return nn.relu(nn.conv_nd(x, w)).mean()

    def gap(x):
        y = nn.global_avg_pool(x)
        return (y * y).sum()

    def lin(x, w, b):
        return nn.linear(x, w, b).sum()

    def smax(x):
        p = nn.softmax(x, axis=1)
        return (p * p).sum()

    def ce(x):
        return nn.softmax_cross_entropy(x, np.array([0, 2, 1]))

    def dice(x):
        p = nn.softmax(x, axis=1)
        return nn.dice_loss(p, _DICE_LABELS)

    def absum(x):
        return x.abs().sum()

    def cat(a, b):
        return (concat([a, b], axis=1) * concat([a, b], axis=1)).sum()

    def gather(w):
        return (w[_GATHER_IDX] * w[_GATHER_IDX]).sum()

    rng0 = np.random.default_rng(7)
    global _DICE_LABELS, _GATHER_IDX
    _DICE_LABELS = rng0.integers(0, 3, size=(2, 4, 4))
    _GATHER_IDX = np.array([2, 0, 2])

    return [
        ("conv_nd_1d", conv1d,
         lambda rng: [_rand(rng, 1, 6), _rand(rng, 2, 1, 3)]),
        ("conv_nd_2d_stride", conv2d_stride,
         lambda rng: [_rand(rng, 2, 5, 5), _rand(rng, 3, 2, 3, 3)]),
        ("conv_nd_3d", conv3d,
         lambda rng: [_rand(rng, 2, 4, 4, 4), _rand(rng, 2, 2, 3, 1, 3)]),
        ("conv_nd_3d_batched", conv3d_batched,
         lambda rng: [_rand(rng, 2, 1, 4, 4, 4), _rand(rng, 2, 1, 3, 3, 3)]),
        ("batch_norm_train", bn_train,
         lambda rng: [_rand(rng, 3, 2, 4), _rand(rng, 2), _rand(rng, 2)]),
        ("batch_norm_eval", bn_eval,
         lambda rng: [_rand(rng, 3, 2, 4), _rand(rng, 2), _rand(rng, 2)]),
        ("relu_conv_pipeline", relu_pipeline,
         lambda rng: [_away_from_zero(rng, 1, 5, 5), _rand(rng, 2, 1, 3, 3)]),
        ("global_avg_pool", gap,
         lambda rng: [_rand(rng, 2, 3, 4, 4)]),
        ("linear", lin,
         lambda rng: [_rand(rng, 3, 4), _rand(rng, 4, 2), _rand(rng, 2)]),
        ("softmax", smax,
         lambda rng: [_rand(rng, 3, 5)]),
        ("softmax_cross_entropy", ce,
         lambda rng: [_rand(rng, 3, 4)]),
        ("dice_loss", dice,
         lambda rng: [_rand(rng, 2, 3, 4, 4)]),
        ("abs_penalty", absum,
         lambda rng: [_away_from_zero(rng, 6)]),
        ("concat", cat,
         lambda rng: [_rand(rng, 2, 3), _rand(rng, 2, 2)]),
        ("channel_gather", gather,
         lambda rng: [_rand(rng, 4, 3)]),
    ]


def run_suite(cases_per_op=20, h=1e-5, tol=1e-4, corrupt=None, seed=0) -> GradCheckReport:
    """Finite-difference check of every op, ``cases_per_op`` random draws each.

    ``corrupt`` names an op whose backward rule is deliberately broken for
    the run (negative control); the suite must then fail.
    """
    report = GradCheckReport()
    if corrupt is not None:
        nn._CORRUPTED.add(corrupt)
    try:
        for name, closure, make_inputs in _suite_specs():
            worst = 0.0
            for case in range(cases_per_op):
                rng = np.random.default_rng(
                    seed * 100003 + zlib.crc32(name.encode()) % 65521 + case)
                inputs = make_inputs(rng)
                err, _ = grad_check(closure, inputs, h=h, tol=tol)
                worst = max(worst, err)
            report.results.append(CheckResult(name, cases_per_op, worst, tol))
    finally:
        nn._CORRUPTED.discard(corrupt)
    return report
