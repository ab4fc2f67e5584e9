"""Declarative backbone descriptions and network construction.

A backbone is an ordered list of convolution layer descriptors plus a task
head (classification or dense segmentation).  Layers flagged replaceable
can have each output channel's kernel swapped for a cheaper sub-kernel;
the resulting heterogeneous layer is realized as shape-grouped
convolutions whose concatenated output matches the per-channel definition.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .kernels import KernelShape
from .tensor import Tensor

P3D = "p3d"

_TOP_KEYS = {"name", "input_channels", "num_classes", "head", "input_dims", "layers"}
_LAYER_KEYS = {"name", "type", "out_channels", "kernel", "stride", "replaceable",
               "norm", "act", "residual"}


class SchemaError(ValueError):
    """A config document failed validation; the message names the field."""


def check_keys(obj: dict, allowed: set, context: str):
    for key in obj:
        if key not in allowed:
            raise SchemaError(f"unknown field {key!r} in {context}")


def require(obj: dict, key: str, context: str):
    if key not in obj:
        raise SchemaError(f"missing field {key!r} in {context}")
    return obj[key]


@dataclass(frozen=True)
class LayerSpec:
    name: str
    in_channels: int
    out_channels: int
    kernel: KernelShape
    stride: tuple[int, int, int] = (1, 1, 1)
    replaceable: bool = False
    norm: bool = True
    act: str = "relu"
    residual: bool = False


@dataclass(frozen=True)
class BackboneSpec:
    name: str
    input_channels: int
    num_classes: int
    head: str  # "classification" | "segmentation"
    input_dims: tuple[int, int, int]
    layers: tuple[LayerSpec, ...] = field(default_factory=tuple)

    def replaceable_layers(self) -> list[LayerSpec]:
        return [l for l in self.layers if l.replaceable]

    def layer(self, name: str) -> LayerSpec:
        for l in self.layers:
            if l.name == name:
                return l
        raise KeyError(f"no layer named {name!r}")

    @classmethod
    def from_dict(cls, doc: dict) -> "BackboneSpec":
        check_keys(doc, _TOP_KEYS, "backbone spec")
        name = str(doc.get("name", "backbone"))
        c_in = int(require(doc, "input_channels", "backbone spec"))
        k = int(require(doc, "num_classes", "backbone spec"))
        head = str(require(doc, "head", "backbone spec"))
        if head not in ("classification", "segmentation"):
            raise SchemaError(f"head must be classification or segmentation, got {head!r}")
        dims = tuple(int(d) for d in doc.get("input_dims", (16, 16, 16)))
        if len(dims) != 3 or any(d < 1 for d in dims):
            raise SchemaError(f"input_dims must be three positive extents, got {dims}")
        raw_layers = require(doc, "layers", "backbone spec")
        if not raw_layers:
            raise SchemaError("backbone spec needs at least one layer")

        layers = []
        prev_c = c_in
        names = set()
        for i, raw in enumerate(raw_layers):
            ctx = f"layer {i} ({raw.get('name', '?')})"
            check_keys(raw, _LAYER_KEYS, ctx)
            if raw.get("type", "conv") != "conv":
                raise SchemaError(f"unsupported layer type {raw.get('type')!r} in {ctx}")
            lname = str(raw.get("name", f"layer{i}"))
            if lname in names:
                raise SchemaError(f"duplicate layer name {lname!r}")
            names.add(lname)
            c_out = int(require(raw, "out_channels", ctx))
            try:
                kernel = KernelShape.parse(str(require(raw, "kernel", ctx)))
            except ValueError as e:
                raise SchemaError(f"{e} in {ctx}") from None
            stride = raw.get("stride", 1)
            stride = (stride,) * 3 if isinstance(stride, int) else tuple(int(s) for s in stride)
            if len(stride) != 3 or any(s < 1 for s in stride):
                raise SchemaError(f"bad stride {stride} in {ctx}")
            residual = bool(raw.get("residual", False))
            if residual and (prev_c != c_out or stride != (1, 1, 1)):
                raise SchemaError(f"residual layer needs matching channels and unit "
                                  f"stride in {ctx}")
            layers.append(LayerSpec(
                name=lname, in_channels=prev_c, out_channels=c_out, kernel=kernel,
                stride=stride, replaceable=bool(raw.get("replaceable", False)),
                norm=bool(raw.get("norm", True)), act=str(raw.get("act", "relu")),
                residual=residual))
            prev_c = c_out

        spec = cls(name=name, input_channels=c_in, num_classes=k, head=head,
                   input_dims=dims, layers=tuple(layers))
        spec.validate_dims()
        return spec

    def validate_dims(self):
        dims = self.input_dims
        for l in self.layers:
            dims = nn.conv_output_dims(dims, l.kernel.extents, l.stride,
                                       nn.same_padding(l.kernel.extents))
            if any(d < 1 for d in dims):
                raise SchemaError(f"layer {l.name!r} shrinks dims below 1: {dims}")
        if self.head == "segmentation":
            if dims != self.input_dims:
                raise SchemaError("segmentation head requires unit total stride "
                                  f"(got output dims {dims} for input {self.input_dims})")

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "input_channels": self.input_channels,
            "num_classes": self.num_classes,
            "head": self.head,
            "input_dims": list(self.input_dims),
            "layers": [{
                "name": l.name, "type": "conv", "out_channels": l.out_channels,
                "kernel": str(l.kernel), "stride": list(l.stride),
                "replaceable": l.replaceable, "norm": l.norm, "act": l.act,
                "residual": l.residual,
            } for l in self.layers],
        }

    @classmethod
    def from_file(cls, path) -> "BackboneSpec":
        with open(path) as f:
            try:
                doc = json.load(f)
            except json.JSONDecodeError as e:
                raise SchemaError(f"invalid JSON in {path}: {e}") from None
        return cls.from_dict(doc)


def channel_scatter(parts, c_total):
    """Assemble (N, C, *S) from per-group outputs and their channel slots."""
    n_shape = parts[0][0].shape
    out_data = np.empty((n_shape[0], c_total) + n_shape[2:])
    tensors = []
    for t, idx in parts:
        out_data[:, idx] = t.data
        tensors.append(t)
    out = Tensor(out_data, parents=tuple(tensors))
    if out.requires_grad:
        def bw(g):
            for t, idx in parts:
                if t.requires_grad:
                    t._accumulate(g[:, idx])
        out._backward = bw
    return out


class GroupedConvLayer(nn.Module):
    """Per-channel heterogeneous convolution realized as shape groups.

    Channels that share a kernel shape are computed by one convolution;
    outputs are scattered back to their original channel slots, so the
    forward pass equals the naive channel-by-channel definition.
    """

    def __init__(self, layer: LayerSpec, shapes: list[KernelShape], rng):
        super().__init__()
        if len(shapes) != layer.out_channels:
            raise ValueError(f"layer {layer.name!r}: config lists {len(shapes)} "
                             f"channels, spec has {layer.out_channels}")
        for s in shapes:
            if not s.fits_in(layer.kernel):
                raise ValueError(f"shape {s} does not fit layer kernel {layer.kernel}")
        self.layer = layer
        self.shapes = list(shapes)
        groups = {}
        for c, s in enumerate(shapes):
            groups.setdefault(s, []).append(c)
        self.group_shapes = sorted(groups, key=lambda s: (-s.volume, s.extents))
        self.group_channels = [np.array(groups[s]) for s in self.group_shapes]
        self.group_weights = [
            nn.init_conv_weight(rng, len(groups[s]), layer.in_channels, s.extents)
            for s in self.group_shapes]
        self.bn = nn.BatchNorm(layer.out_channels) if layer.norm else None

    def forward(self, x):
        parts = []
        for s, idx, w in zip(self.group_shapes, self.group_channels, self.group_weights):
            parts.append((nn.conv_nd(x, w, stride=self.layer.stride), idx))
        out = channel_scatter(parts, self.layer.out_channels)
        if self.bn is not None:
            out = self.bn.forward(out)
        if self.layer.residual:
            out = out + x
        if self.layer.act == "relu":
            out = out.relu()
        return out


class PlainConvLayer(nn.Module):
    def __init__(self, layer: LayerSpec, rng):
        super().__init__()
        self.layer = layer
        self.conv = nn.Conv(layer.in_channels, layer.out_channels,
                            layer.kernel.extents, stride=layer.stride, rng=rng)
        self.bn = nn.BatchNorm(layer.out_channels) if layer.norm else None

    def forward(self, x):
        out = self.conv.forward(x)
        if self.bn is not None:
            out = self.bn.forward(out)
        if self.layer.residual:
            out = out + x
        if self.layer.act == "relu":
            out = out.relu()
        return out


class P3DLayer(nn.Module):
    """Layer-wise factorization: a 1 x kh x kw conv followed by kd x 1 x 1."""

    def __init__(self, layer: LayerSpec, rng):
        super().__init__()
        kd, kh, kw = layer.kernel.extents
        self.layer = layer
        self.conv_spatial = nn.Conv(layer.in_channels, layer.out_channels,
                                    (1, kh, kw), stride=layer.stride, rng=rng)
        self.bn_spatial = nn.BatchNorm(layer.out_channels) if layer.norm else None
        self.conv_depth = nn.Conv(layer.out_channels, layer.out_channels,
                                  (kd, 1, 1), stride=1, rng=rng)
        self.bn_depth = nn.BatchNorm(layer.out_channels) if layer.norm else None

    def forward(self, x):
        out = self.conv_spatial.forward(x)
        if self.bn_spatial is not None:
            out = self.bn_spatial.forward(out)
        out = out.relu()
        out = self.conv_depth.forward(out)
        if self.bn_depth is not None:
            out = self.bn_depth.forward(out)
        if self.layer.residual:
            out = out + x
        if self.layer.act == "relu":
            out = out.relu()
        return out


class SegHead(nn.Module):
    """Pointwise conv to class logits, with bias (no norm follows)."""

    def __init__(self, c_in, num_classes, rng):
        super().__init__()
        self.conv = nn.Conv(c_in, num_classes, (1, 1, 1), rng=rng)
        self.bias = Tensor(np.zeros(num_classes), requires_grad=True)

    def forward(self, x):
        out = self.conv.forward(x)
        return out + self.bias.reshape(1, -1, 1, 1, 1)


class Network(nn.Module):
    """A concrete network: stem + body layers + task head."""

    def __init__(self, spec: BackboneSpec, body: list, rng):
        super().__init__()
        self.spec = spec
        self.body = body
        c_last = spec.layers[-1].out_channels
        if spec.head == "classification":
            self.head = nn.Linear(c_last, spec.num_classes, rng=rng)
        else:
            self.head = SegHead(c_last, spec.num_classes, rng=rng)

    def forward(self, x):
        out = x
        for layer in self.body:
            out = layer.forward(out)
        if self.spec.head == "classification":
            out = nn.global_avg_pool(out)
            return self.head.forward(out)
        return self.head.forward(out)


def build_network(spec: BackboneSpec, config=None, seed=0) -> Network:
    """Instantiate a network; ``config`` maps replaceable layer names to
    per-channel shape lists (or the "p3d" marker).  Without a config every
    layer uses its declared kernel.  Weights are freshly initialized from
    the seed; nothing is inherited from any search phase.
    """
    rng = np.random.default_rng(seed)
    entries = dict(config.entries) if config is not None else {}
    unknown = set(entries) - {l.name for l in spec.replaceable_layers()}
    if unknown:
        raise ValueError(f"config names non-replaceable or missing layers: {sorted(unknown)}")
    body = []
    for layer in spec.layers:
        choice = entries.get(layer.name)
        if choice is None:
            body.append(PlainConvLayer(layer, rng))
        elif choice == P3D:
            body.append(P3DLayer(layer, rng))
        else:
            body.append(GroupedConvLayer(layer, choice, rng))
    return Network(spec, body, rng)
