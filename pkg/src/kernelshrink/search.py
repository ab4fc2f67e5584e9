"""Per-channel sub-kernel search over a multi-path network.

Two procedures are provided.  Performance-priority samples one branch per
channel per iteration and trains on the task loss alone; cost-priority
trains all branches jointly under a cost-aware lasso on the path weights,
lam * sum_i beta_i * |alpha_i|, where beta is proportional to parameter
cost per dimensionality class.  Either way the final per-channel choice is
the candidate with the largest path-weight magnitude.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import tasks
from .backbone import P3D, BackboneSpec, SchemaError, build_network, check_keys
from .kernels import KernelShape, SubKernelSet, cost_beta, default_subkernel_set
from .optim import SGD, DivergenceError, check_finite_loss
from .supernet import COST, PERF, SuperNet
from .tensor import Tensor

_SEARCH_KEYS = {"mode", "lambda", "iterations", "batch_size", "learning_rate",
                "momentum", "weight_decay", "scale_lr_mult", "seed", "augment",
                "lr_power", "alpha_warmup", "candidates", "base_kernel"}


@dataclass(frozen=True)
class SearchConfig:
    mode: str = COST
    lam: float = 1e-4
    iterations: int = 600
    batch_size: int = 4
    learning_rate: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 4e-5
    scale_lr_mult: float = 1.0
    seed: int = 0
    augment: bool = True
    lr_power: float = 0.9
    alpha_warmup: int = 0

    def __post_init__(self):
        if self.mode not in (PERF, COST):
            raise SchemaError(f"mode must be {PERF!r} or {COST!r}, got {self.mode!r}")
        if self.lam < 0:
            raise SchemaError("penalty coefficient lambda must be non-negative")
        if self.iterations < 0:
            raise SchemaError("iterations must be non-negative")
        if self.alpha_warmup < 0:
            raise SchemaError("alpha_warmup must be non-negative")

    @classmethod
    def from_dict(cls, doc: dict) -> tuple["SearchConfig", SubKernelSet]:
        check_keys(doc, _SEARCH_KEYS, "search config")
        cfg = cls(
            mode=str(doc.get("mode", COST)),
            lam=float(doc.get("lambda", 1e-4)),
            iterations=int(doc.get("iterations", 600)),
            batch_size=int(doc.get("batch_size", 4)),
            learning_rate=float(doc.get("learning_rate", 0.05)),
            momentum=float(doc.get("momentum", 0.9)),
            weight_decay=float(doc.get("weight_decay", 4e-5)),
            scale_lr_mult=float(doc.get("scale_lr_mult", 1.0)),
            seed=int(doc.get("seed", 0)),
            augment=bool(doc.get("augment", True)),
            lr_power=float(doc.get("lr_power", 0.9)),
            alpha_warmup=int(doc.get("alpha_warmup", 0)),
        )
        if "candidates" in doc:
            sub_set = SubKernelSet.from_strings(doc.get("base_kernel", "3x3x3"),
                                                doc["candidates"])
        else:
            sub_set = default_subkernel_set()
        return cfg, sub_set

    def to_dict(self) -> dict:
        return {"mode": self.mode, "lambda": self.lam, "iterations": self.iterations,
                "batch_size": self.batch_size, "learning_rate": self.learning_rate,
                "momentum": self.momentum, "weight_decay": self.weight_decay,
                "scale_lr_mult": self.scale_lr_mult, "seed": self.seed,
                "augment": self.augment, "lr_power": self.lr_power,
                "alpha_warmup": self.alpha_warmup}


def penalty_loss(alpha, beta, lam: float) -> Tensor:
    """Cost-aware lasso lam * sum_i beta_i * |alpha_i| (0 at alpha_i = 0)."""
    alpha = alpha if isinstance(alpha, Tensor) else Tensor(alpha)
    beta = np.broadcast_to(np.asarray(beta, dtype=np.float64), alpha.shape)
    return (alpha.abs() * beta).sum() * lam


def supernet_penalty(net: SuperNet, lam: float) -> Tensor:
    """Penalty over every replaceable-branch scale; stem and aggregator excluded."""
    beta = cost_beta(net.sub_set)
    total = None
    for _, i, scale in net.scale_tensors():
        term = scale.abs().sum() * (lam * beta[i])
        total = term if total is None else total + term
    return total if total is not None else Tensor(0.0)


def _make_optimizer(net: SuperNet, cfg: SearchConfig) -> SGD:
    scale_ids = {id(s) for _, _, s in net.scale_tensors()}
    scales = [s for _, _, s in net.scale_tensors()]
    others = [p for p in net.parameters() if id(p) not in scale_ids]
    groups = [{"params": others},
              {"params": scales, "lr_mult": cfg.scale_lr_mult}]
    return SGD(lr=cfg.learning_rate, momentum=cfg.momentum,
               weight_decay=cfg.weight_decay, total_steps=max(cfg.iterations, 1),
               power=cfg.lr_power, groups=groups)


def _search_loop(net: SuperNet, train_ds: tasks.Dataset, cfg: SearchConfig,
                 sample_paths: bool):
    rng = np.random.default_rng(cfg.seed)
    log = tasks.TrainLog()
    if cfg.iterations == 0:
        return net.read_path_weights(), log
    net.train(True)
    opt = _make_optimizer(net, cfg)
    try:
        for t in range(cfg.iterations):
            # during warmup the path-weight group is frozen so branch kernels
            # settle before path competition starts
            opt.groups[-1]["lr_mult"] = \
                0.0 if t < cfg.alpha_warmup else cfg.scale_lr_mult
            idx = rng.integers(0, len(train_ds), size=cfg.batch_size)
            x, labels = tasks.make_batch(train_ds, idx, cfg.augment, rng)
            sample = net.sample_path(rng) if sample_paths else None
            opt.zero_grad()
            logits = net.forward(x, sample) if sample_paths else net.forward(x)
            loss = tasks.task_loss(logits, labels, train_ds.spec.head)
            if sample_paths:
                total = loss
                pen = 0.0
            else:
                pen_t = supernet_penalty(net, cfg.lam)
                total = loss + pen_t
                pen = float(pen_t.data)
            check_finite_loss(total, t)
            total.backward()
            opt.step()
            log.append(iteration=t, loss=float(loss.data), penalty=pen,
                       lr=opt.lr_at(t))
    except DivergenceError as e:
        e.partial_log = log
        raise
    net.eval()
    return net.read_path_weights(), log


def run_performance_priority(net: SuperNet, train_ds: tasks.Dataset,
                             cfg: SearchConfig):
    """Single-path training on the task loss; returns (alpha snapshot, log)."""
    if net.mode != PERF:
        raise ValueError("performance-priority search needs a perf-mode network")
    return _search_loop(net, train_ds, cfg, sample_paths=True)


def run_cost_priority(net: SuperNet, train_ds: tasks.Dataset, cfg: SearchConfig):
    """All-path training on task loss + cost-aware lasso; returns (alpha, log)."""
    if net.mode != COST:
        raise ValueError("cost-priority search needs a cost-mode network")
    return _search_loop(net, train_ds, cfg, sample_paths=False)


# -- finalization -------------------------------------------------------------


@dataclass
class ReplacementConfig:
    """Chosen kernel shape per output channel of each replaceable layer.

    An entry is either a per-channel list of shapes or the literal "p3d"
    marker for the layer-wise two-stage factorization baseline.
    """

    entries: dict[str, object] = field(default_factory=dict)

    def to_dict(self) -> dict:
        layers = {}
        for name, entry in self.entries.items():
            layers[name] = entry if entry == P3D else [str(s) for s in entry]
        return {"layers": layers}

    @classmethod
    def from_dict(cls, doc: dict) -> "ReplacementConfig":
        check_keys(doc, {"layers"}, "replacement config")
        entries = {}
        for name, entry in doc.get("layers", {}).items():
            if entry == P3D:
                entries[name] = P3D
            elif isinstance(entry, list):
                try:
                    entries[name] = [KernelShape.parse(s) for s in entry]
                except ValueError as e:
                    raise SchemaError(f"{e} in config layer {name!r}") from None
            else:
                raise SchemaError(f"config layer {name!r} must be a shape list "
                                  f"or {P3D!r}")
        return cls(entries)

    @classmethod
    def from_file(cls, path) -> "ReplacementConfig":
        with open(path) as f:
            try:
                doc = json.load(f)
            except json.JSONDecodeError as e:
                raise SchemaError(f"invalid JSON in {path}: {e}") from None
        return cls.from_dict(doc)

    def validate_against(self, spec: BackboneSpec):
        replaceable = {l.name: l for l in spec.replaceable_layers()}
        for name, entry in self.entries.items():
            if name not in replaceable:
                raise SchemaError(f"config names unknown replaceable layer {name!r}")
            if entry == P3D:
                continue
            layer = replaceable[name]
            if len(entry) != layer.out_channels:
                raise SchemaError(f"config layer {name!r} lists {len(entry)} "
                                  f"channels, spec has {layer.out_channels}")
            for s in entry:
                if not s.fits_in(layer.kernel):
                    raise SchemaError(f"shape {s} too large for layer {name!r}")


def finalize(alpha: dict[str, np.ndarray], sub_set: SubKernelSet) -> ReplacementConfig:
    """Per channel, keep the candidate with the largest |path weight|.

    Exact ties break toward the cheaper shape, then candidate order.  The
    choice is invariant to positive per-channel rescaling of the weights.
    """
    entries = {}
    for name, mat in alpha.items():
        mat = np.asarray(mat, dtype=np.float64)
        if mat.ndim != 2 or mat.shape[1] != len(sub_set):
            raise ValueError(f"alpha for {name!r} must be (channels, {len(sub_set)})")
        shapes = []
        for c in range(mat.shape[0]):
            mags = np.abs(mat[c])
            tied = np.flatnonzero(mags == mags.max())
            pick = min(tied, key=lambda i: (sub_set.candidates[i].volume, i))
            shapes.append(sub_set.candidates[pick])
        entries[name] = shapes
    return ReplacementConfig(entries)


def manual_config(spec: BackboneSpec, sub_set: SubKernelSet,
                  scheme: str) -> ReplacementConfig:
    """Hand-designed baselines: uniform, pure2d, pure1d, or p3d."""
    layers = spec.replaceable_layers()
    if not layers:
        raise ValueError("backbone has no replaceable layers")
    entries = {}
    if scheme == "uniform":
        for l in layers:
            entries[l.name] = [sub_set.candidates[c % len(sub_set)]
                               for c in range(l.out_channels)]
    elif scheme == "pure2d":
        for l in layers:
            shape = KernelShape(1, l.kernel.k_h, l.kernel.k_w)
            if shape not in sub_set.candidates:
                raise ValueError(f"scheme pure2d needs {shape} in the candidate set")
            entries[l.name] = [shape] * l.out_channels
    elif scheme == "pure1d":
        one_d = [s for s in sub_set if s.dim_class == 1]
        if not one_d:
            raise ValueError("scheme pure1d needs 1D candidates in the set")
        for l in layers:
            entries[l.name] = [one_d[c % len(one_d)] for c in range(l.out_channels)]
    elif scheme == P3D:
        for l in layers:
            entries[l.name] = P3D
    else:
        raise ValueError(f"unknown manual scheme {scheme!r}")
    return ReplacementConfig(entries)


def build_final_network(spec: BackboneSpec, config: ReplacementConfig, seed=0):
    """Freshly initialized compact network realizing the replacement config."""
    config.validate_against(spec)
    return build_network(spec, config, seed=seed)


# -- cost accounting ----------------------------------------------------------


@dataclass
class CostReport:
    total_params: int
    total_flops: int
    layers: list[dict]
    class_counts: dict[str, int]
    axis_counts: dict[str, int]
    replaced_channels: int

    def to_dict(self) -> dict:
        return {"total_params": self.total_params, "total_flops": self.total_flops,
                "layers": self.layers, "class_counts": self.class_counts,
                "axis_counts": self.axis_counts,
                "replaced_channels": self.replaced_channels}

    def to_csv(self, path):
        cols = ["layer", "replaceable", "params", "flops",
                "count_pointwise", "count_1d", "count_2d", "count_3d"]
        with open(path, "w") as f:
            f.write(",".join(cols) + "\n")
            for row in self.layers:
                counts = row.get("class_counts", {})
                f.write(",".join([
                    row["name"], str(row["replaceable"]).lower(),
                    str(row["params"]), str(row["flops"]),
                    str(counts.get("pointwise", 0)), str(counts.get("1d", 0)),
                    str(counts.get("2d", 0)), str(counts.get("3d", 0)),
                ]) + "\n")
            f.write(f"total,,{self.total_params},{self.total_flops},"
                    f"{self.class_counts.get('pointwise', 0)},"
                    f"{self.class_counts.get('1d', 0)},"
                    f"{self.class_counts.get('2d', 0)},"
                    f"{self.class_counts.get('3d', 0)}\n")


_CLASS_KEY = {0: "pointwise", 1: "1d", 2: "2d", 3: "3d"}


def cost_report(spec: BackboneSpec, config: ReplacementConfig | None = None,
                input_dims=None) -> CostReport:
    """Parameter/FLOP accounting with per-class and per-axis composition.

    A multiply-add counts as two FLOPs; normalization affine parameters are
    excluded.  Class counts tally one entry per (channel, convolution);
    axis counts tally chosen kernels with extent > 1 along each axis.
    """
    if config is not None:
        config.validate_against(spec)
    entries = dict(config.entries) if config is not None else {}
    dims = tuple(input_dims) if input_dims is not None else spec.input_dims

    rows = []
    total_params = 0
    total_flops = 0
    class_counts = {"pointwise": 0, "1d": 0, "2d": 0, "3d": 0}
    axis_counts = {"d": 0, "h": 0, "w": 0}
    replaced = 0

    from .nn import conv_output_dims, same_padding

    for layer in spec.layers:
        out_dims = conv_output_dims(dims, layer.kernel.extents, layer.stride,
                                    same_padding(layer.kernel.extents))
        vox = int(np.prod(out_dims))
        entry = entries.get(layer.name)
        row = {"name": layer.name, "replaceable": layer.replaceable}
        if entry is None:
            params = layer.out_channels * layer.in_channels * layer.kernel.volume
            flops = 2 * params * vox
            row["shape_counts"] = {str(layer.kernel): layer.out_channels}
            row["class_counts"] = {}
        elif entry == P3D:
            kd, kh, kw = layer.kernel.extents
            p_spatial = layer.out_channels * layer.in_channels * kh * kw
            p_depth = layer.out_channels * layer.out_channels * kd
            params = p_spatial + p_depth
            flops = 2 * (p_spatial + p_depth) * vox
            row["shape_counts"] = {f"1x{kh}x{kw}": layer.out_channels,
                                   f"{kd}x1x1": layer.out_channels}
            lc = {"2d": layer.out_channels, "1d": layer.out_channels}
            row["class_counts"] = lc
            for k, v in lc.items():
                class_counts[k] += v
            axis_counts["h"] += layer.out_channels
            axis_counts["w"] += layer.out_channels
            axis_counts["d"] += layer.out_channels
            replaced += 2 * layer.out_channels
        else:
            params = sum(layer.in_channels * s.volume for s in entry)
            flops = 2 * params * vox
            shape_counts: dict[str, int] = {}
            lc = {}
            for s in entry:
                shape_counts[str(s)] = shape_counts.get(str(s), 0) + 1
                key = _CLASS_KEY[s.dim_class]
                lc[key] = lc.get(key, 0) + 1
                class_counts[key] += 1
                for ax, e in zip(("d", "h", "w"), s.extents):
                    if e > 1:
                        axis_counts[ax] += 1
            row["shape_counts"] = dict(sorted(shape_counts.items()))
            row["class_counts"] = lc
            replaced += len(entry)
        row["params"] = int(params)
        row["flops"] = int(flops)
        rows.append(row)
        total_params += params
        total_flops += flops
        dims = out_dims

    vox = int(np.prod(dims))
    c_last = spec.layers[-1].out_channels
    if spec.head == "classification":
        head_params = c_last * spec.num_classes + spec.num_classes
        head_flops = 2 * c_last * spec.num_classes
    else:
        head_params = c_last * spec.num_classes + spec.num_classes
        head_flops = 2 * c_last * spec.num_classes * vox
    rows.append({"name": "head", "replaceable": False, "params": head_params,
                 "flops": head_flops, "shape_counts": {}, "class_counts": {}})
    total_params += head_params
    total_flops += head_flops

    return CostReport(total_params=int(total_params), total_flops=int(total_flops),
                      layers=rows, class_counts=class_counts,
                      axis_counts=axis_counts, replaced_channels=replaced)


def replaceable_params(spec: BackboneSpec, config: ReplacementConfig | None = None) -> int:
    """Convolution weight count over replaceable layers only."""
    entries = dict(config.entries) if config is not None else {}
    total = 0
    for layer in spec.replaceable_layers():
        entry = entries.get(layer.name)
        if entry is None:
            total += layer.out_channels * layer.in_channels * layer.kernel.volume
        elif entry == P3D:
            kd, kh, kw = layer.kernel.extents
            total += (layer.out_channels * layer.in_channels * kh * kw
                      + layer.out_channels * layer.out_channels * kd)
        else:
            total += sum(layer.in_channels * s.volume for s in entry)
    return total
