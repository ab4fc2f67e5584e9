"""Over-parameterized multi-path networks for sub-kernel search.

Each replaceable layer is expanded so that every (output channel,
candidate sub-kernel) pair owns an independent convolution branch and a
per-branch normalization whose scale parameter doubles as the branch's
path weight.  Two modes exist:

* ``perf``: exclusive branches; each forward pass activates exactly one
  sampled branch per channel, so only sampled paths receive gradients.
* ``cost``: all branches run; their normalized outputs are concatenated
  and aggregated back to the layer width by a pointwise convolution.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from .backbone import BackboneSpec, LayerSpec, Network, PlainConvLayer, channel_scatter
from .kernels import SubKernelSet
from .tensor import Tensor, concat

PERF = "perf"
COST = "cost"


@dataclass
class PathSample:
    """Chosen candidate index per (replaceable layer, output channel)."""

    choices: dict[str, np.ndarray]
    seed: int | None = None


class _BranchBank(nn.Module):
    """Per-candidate conv weights and per-branch normalization state."""

    def __init__(self, layer: LayerSpec, sub_set: SubKernelSet, rng,
                 eps=1e-5, momentum=0.1):
        super().__init__()
        self.layer = layer
        self.sub_set = sub_set
        self.eps, self.momentum = eps, momentum
        c_out, c_in = layer.out_channels, layer.in_channels
        self.weights = [nn.init_conv_weight(rng, c_out, c_in, s.extents)
                        for s in sub_set]
        self.scales = [Tensor(np.ones(c_out), requires_grad=True) for _ in sub_set]
        self.shifts = [Tensor(np.zeros(c_out), requires_grad=True) for _ in sub_set]
        self.running_mean = [np.zeros(c_out) for _ in sub_set]
        self.running_var = [np.ones(c_out) for _ in sub_set]

    def branch_norm(self, y, i, idx=None):
        """Normalize branch ``i`` outputs (optionally a channel subset)."""
        if idx is None:
            return nn.batch_norm(y, self.scales[i], self.shifts[i],
                                 self.running_mean[i], self.running_var[i],
                                 training=self.training, momentum=self.momentum,
                                 eps=self.eps)
        rm = self.running_mean[i][idx].copy()
        rv = self.running_var[i][idx].copy()
        out = nn.batch_norm(y, self.scales[i][idx], self.shifts[i][idx], rm, rv,
                            training=self.training, momentum=self.momentum,
                            eps=self.eps)
        if self.training:
            self.running_mean[i][idx] = rm
            self.running_var[i][idx] = rv
        return out

    def freeze_identity(self):
        for rm, rv in zip(self.running_mean, self.running_var):
            rm[:] = 0.0
            rv[:] = 1.0 - self.eps

    def alpha(self) -> np.ndarray:
        """Path-weight snapshot, shape (C_o, n)."""
        return np.stack([s.data.copy() for s in self.scales], axis=1)

    def set_alpha(self, alpha: np.ndarray):
        alpha = np.asarray(alpha, dtype=np.float64)
        if alpha.shape != (self.layer.out_channels, len(self.sub_set)):
            raise ValueError(f"alpha shape {alpha.shape} != "
                             f"({self.layer.out_channels}, {len(self.sub_set)})")
        for i, s in enumerate(self.scales):
            s.data = alpha[:, i].copy()


class PerfSuperLayer(_BranchBank):
    """Exclusive branch slots: one sampled sub-kernel computes each channel."""

    def forward(self, x, choice: np.ndarray):
        layer = self.layer
        choice = np.asarray(choice)
        if choice.shape != (layer.out_channels,):
            raise ValueError(f"path sample for {layer.name!r} must have "
                             f"{layer.out_channels} entries")
        if choice.min() < 0 or choice.max() >= len(self.sub_set):
            raise ValueError(f"path sample index out of range for {layer.name!r}")
        parts = []
        for i in np.unique(choice):
            idx = np.where(choice == i)[0]
            y = nn.conv_nd(x, self.weights[i][idx], stride=layer.stride)
            y = self.branch_norm(y, int(i), idx)
            parts.append((y, idx))
        out = channel_scatter(parts, layer.out_channels)
        if layer.residual:
            out = out + x
        if layer.act == "relu":
            out = out.relu()
        return out


class CostSuperLayer(_BranchBank):
    """All branches active; outputs concatenated then aggregated pointwise.

    The aggregator starts as an own-channel average (1/n on the slots of
    the same output channel, 0 elsewhere), so the initial function matches
    a plain backbone layer up to normalization.
    """

    def __init__(self, layer: LayerSpec, sub_set: SubKernelSet, rng, **kw):
        super().__init__(layer, sub_set, rng, **kw)
        n = len(sub_set)
        c_out = layer.out_channels
        agg = np.zeros((c_out, n * c_out, 1, 1, 1))
        for c in range(c_out):
            agg[c, [i * c_out + c for i in range(n)]] = 1.0 / n
        self.aggregator = Tensor(agg, requires_grad=True)

    def forward(self, x):
        layer = self.layer
        branches = []
        for i in range(len(self.sub_set)):
            y = nn.conv_nd(x, self.weights[i], stride=layer.stride)
            branches.append(self.branch_norm(y, i))
        cat = concat(branches, axis=1)
        out = nn.conv_nd(cat, self.aggregator, stride=1)
        if layer.residual:
            out = out + x
        if layer.act == "relu":
            out = out.relu()
        return out


class SuperNet(nn.Module):
    def __init__(self, spec: BackboneSpec, sub_set: SubKernelSet, mode: str, seed=0):
        super().__init__()
        if mode not in (PERF, COST):
            raise ValueError(f"mode must be {PERF!r} or {COST!r}, got {mode!r}")
        for layer in spec.replaceable_layers():
            if layer.kernel != sub_set.base:
                raise ValueError(f"replaceable layer {layer.name!r} kernel "
                                 f"{layer.kernel} != candidate base {sub_set.base}")
        rng = np.random.default_rng(seed)
        self.spec = spec
        self.sub_set = sub_set
        self.mode = mode
        body = []
        for layer in spec.layers:
            if not layer.replaceable:
                body.append(PlainConvLayer(layer, rng))
            elif mode == PERF:
                body.append(PerfSuperLayer(layer, sub_set, rng))
            else:
                body.append(CostSuperLayer(layer, sub_set, rng))
        self.net = Network(spec, body, rng)

    @property
    def super_layers(self):
        return [(l.layer.name, l) for l in self.net.body
                if isinstance(l, _BranchBank)]

    def forward(self, x, sample: PathSample | None = None):
        if self.mode == PERF:
            if sample is None:
                raise ValueError("perf mode forward requires a path sample")
            out = x
            for layer_mod in self.net.body:
                if isinstance(layer_mod, PerfSuperLayer):
                    out = layer_mod.forward(out, sample.choices[layer_mod.layer.name])
                else:
                    out = layer_mod.forward(out)
            if self.spec.head == "classification":
                out = nn.global_avg_pool(out)
                return self.net.head.forward(out)
            return self.net.head.forward(out)
        if sample is not None:
            raise ValueError("cost mode forward takes no path sample")
        return self.net.forward(x)

    def sample_path(self, rng) -> PathSample:
        """Independent uniform candidate choice per (layer, channel)."""
        if self.mode != PERF:
            raise ValueError("path sampling applies to perf mode only")
        n = len(self.sub_set)
        choices = {name: rng.integers(0, n, size=l.layer.out_channels)
                   for name, l in self.super_layers}
        return PathSample(choices=choices)

    def read_path_weights(self) -> dict[str, np.ndarray]:
        """Snapshot of normalization scales per (layer, channel, candidate)."""
        return {name: l.alpha() for name, l in self.super_layers}

    def set_path_weights(self, alpha: dict[str, np.ndarray]):
        for name, l in self.super_layers:
            l.set_alpha(alpha[name])

    def scale_tensors(self):
        """Per-branch scale tensors with their candidate index, per layer."""
        return [(name, i, l.scales[i])
                for name, l in self.super_layers
                for i in range(len(self.sub_set))]

    def freeze_identity_stats(self):
        for _, l in self.super_layers:
            l.freeze_identity()


def build_supernet(spec: BackboneSpec, sub_set: SubKernelSet, mode: str,
                   seed=0) -> SuperNet:
    return SuperNet(spec, sub_set, mode, seed=seed)


def inflate_init(net: SuperNet, source2d: dict[str, np.ndarray]) -> SuperNet:
    """Initialize branch kernels from per-layer 2D kernels.

    The 2D source for a layer has shape (C_o, C_i, k_h, k_w) matching the
    base kernel's spatial extents.  Candidate axes of extent 1 receive the
    spatial average over the collapsed source axis; axes matching the base
    extent copy the source; depth extents > 1 repeat the result along depth
    divided by the repeat count, preserving the response to depth-constant
    inputs.
    """
    layers = dict(net.super_layers)
    for name, w2 in source2d.items():
        if name not in layers:
            raise ValueError(f"no replaceable layer named {name!r}")
        bank = layers[name]
        base = bank.sub_set.base
        w2 = np.asarray(w2, dtype=np.float64)
        expected = (bank.layer.out_channels, bank.layer.in_channels,
                    base.k_h, base.k_w)
        if w2.shape != expected:
            raise ValueError(f"2D source for {name!r} has shape {w2.shape}, "
                             f"expected {expected}")
        for i, shape in enumerate(bank.sub_set):
            w = w2
            for axis, (k, kb) in enumerate(zip((shape.k_h, shape.k_w),
                                               (base.k_h, base.k_w))):
                if k == kb:
                    continue
                if k == 1:
                    w = w.mean(axis=2 + axis, keepdims=True)
                else:
                    raise ValueError(f"candidate extent {k} not inflatable "
                                     f"from source extent {kb}")
            w = w[:, :, None]  # depth axis
            if shape.k_d > 1:
                w = np.repeat(w, shape.k_d, axis=2) / shape.k_d
            bank.weights[i].data = np.ascontiguousarray(w)
    return net
