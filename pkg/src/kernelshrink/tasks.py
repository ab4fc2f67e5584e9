"""Synthetic desk-scale tasks with planted structure, plus the harness.

Each task kind plants exactly one dimensionality class of structure, so
the best sub-kernel class is known by construction and can serve as a
search oracle:

* ``planted_plane``: the label depends only on a 2D pattern replicated
  along the depth axis (depth-extent-1 kernels suffice).
* ``planted_temporal``: the label is the circular distance between two
  depth bumps replicated spatially (only depth-extent kernels can see it).
* ``isotropic_3d``: the label depends on genuinely 3D structure whose 1D
  and 2D axis-projections are all exactly zero.

Three nuisances make the planted class the unique per-channel optimum
rather than merely a sufficient one.  Class patterns share one value
multiset, so pooled per-voxel statistics are class-blind; every sample is
cyclically shifted along the planted axes (in steps of two, commuting with
stride-2 stems), so unfiltered copies of the volume carry no label signal;
and noise shares the structure's invariances, so kernels with extent along
a degenerate axis gain nothing by averaging over it.  Labels are invariant
to the augmentations (right-angle H-W rotations, axis flips): those map
every sample to another sample of the same class family.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .backbone import SchemaError, check_keys, require
from .optim import SGD, DivergenceError, check_finite_loss
from .tensor import Tensor

KINDS = ("planted_plane", "planted_temporal", "isotropic_3d")

_TASK_KEYS = {"kind", "dims", "classes", "noise", "train_size", "val_size",
              "seed", "head", "train"}
_TRAIN_KEYS = {"iterations", "batch_size", "learning_rate", "momentum",
               "weight_decay", "augment", "lr_power"}


@dataclass(frozen=True)
class SyntheticTaskSpec:
    kind: str
    dims: tuple[int, int, int] = (16, 16, 16)
    classes: int = 4
    noise: float = 0.1
    train_size: int = 128
    val_size: int = 64
    seed: int = 0
    head: str = "classification"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise SchemaError(f"unknown task kind {self.kind!r}")
        if len(self.dims) != 3 or any(not 1 <= d <= 32 for d in self.dims):
            raise SchemaError(f"dims must be three extents in [1, 32], got {self.dims}")
        if self.classes < 2:
            raise SchemaError("need at least two classes")
        if self.noise < 0:
            raise SchemaError("noise level must be non-negative")
        if self.head not in ("classification", "segmentation"):
            raise SchemaError(f"unknown head {self.head!r}")
        if min(self.train_size, self.val_size) < 1:
            raise SchemaError("train_size and val_size must be positive")

    @classmethod
    def from_dict(cls, doc: dict) -> "SyntheticTaskSpec":
        check_keys(doc, _TASK_KEYS, "task spec")
        return cls(
            kind=str(require(doc, "kind", "task spec")),
            dims=tuple(int(d) for d in doc.get("dims", (16, 16, 16))),
            classes=int(doc.get("classes", 4)),
            noise=float(doc.get("noise", 0.1)),
            train_size=int(doc.get("train_size", 128)),
            val_size=int(doc.get("val_size", 64)),
            seed=int(doc.get("seed", 0)),
            head=str(doc.get("head", "classification")),
        )

    def to_dict(self) -> dict:
        return {"kind": self.kind, "dims": list(self.dims), "classes": self.classes,
                "noise": self.noise, "train_size": self.train_size,
                "val_size": self.val_size, "seed": self.seed, "head": self.head}


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 500
    batch_size: int = 8
    learning_rate: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 4e-5
    augment: bool = False
    lr_power: float = 0.9

    @classmethod
    def from_dict(cls, doc: dict) -> "TrainConfig":
        check_keys(doc, _TRAIN_KEYS, "train config")
        out = cls(
            iterations=int(doc.get("iterations", 500)),
            batch_size=int(doc.get("batch_size", 8)),
            learning_rate=float(doc.get("learning_rate", 0.01)),
            momentum=float(doc.get("momentum", 0.9)),
            weight_decay=float(doc.get("weight_decay", 4e-5)),
            augment=bool(doc.get("augment", False)),
            lr_power=float(doc.get("lr_power", 0.9)),
        )
        if out.iterations < 0 or out.batch_size < 1:
            raise SchemaError("iterations must be >= 0 and batch_size >= 1")
        return out

    def to_dict(self) -> dict:
        return {"iterations": self.iterations, "batch_size": self.batch_size,
                "learning_rate": self.learning_rate, "momentum": self.momentum,
                "weight_decay": self.weight_decay, "augment": self.augment,
                "lr_power": self.lr_power}


def load_task_file(path) -> tuple[SyntheticTaskSpec, TrainConfig]:
    with open(path) as f:
        try:
            doc = json.load(f)
        except json.JSONDecodeError as e:
            raise SchemaError(f"invalid JSON in {path}: {e}") from None
    train = TrainConfig.from_dict(doc.get("train", {}))
    return SyntheticTaskSpec.from_dict(doc), train


# -- augmentation group ----------------------------------------------------


def transform_group(dims):
    """All (rotation, flips) elements that preserve the volume shape.

    Rotations are right-angle turns in the H-W plane (only for square H=W);
    flips act along each of the three axes independently.
    """
    _, h, w = dims
    rotations = range(4) if h == w else (0, 2)
    return [(r, (fd, fh, fw))
            for r in rotations
            for fd in (False, True) for fh in (False, True) for fw in (False, True)]


def apply_transform(vol: np.ndarray, transform):
    """Apply (rotation, flips) to an array whose last three axes are D,H,W."""
    r, flips = transform
    out = np.rot90(vol, r, axes=(-2, -1)) if r else vol
    for axis, flip in zip((-3, -2, -1), flips):
        if flip:
            out = np.flip(out, axis=axis)
    return np.ascontiguousarray(out)


def _symmetrize(pattern: np.ndarray, dims) -> np.ndarray:
    group = transform_group(dims)
    acc = np.zeros_like(pattern)
    for t in group:
        acc += apply_transform(pattern, t)
    return acc / len(group)


def _assert_label_safe(kind: str, patterns: np.ndarray, dims):
    """Verify augmentations keep every sample inside its class family.

    The class family is the pattern's orbit under even cyclic shifts along
    its structured axes, so a transformed pattern must coincide with some
    member of that orbit (exactly the pattern itself for isotropic banks).
    """
    def in_even_shift_orbit(moved, base, axes, extents):
        shift_sets = [range(0, e, 2) for e in extents]
        import itertools as _it
        for shifts in _it.product(*shift_sets):
            if np.allclose(np.roll(base, shifts, axis=axes), moved, atol=1e-9):
                return True
        return False

    for t in transform_group(dims):
        moved = apply_transform(patterns, t)
        for k in range(patterns.shape[0]):
            if kind == "planted_plane":
                ok = in_even_shift_orbit(moved[k], patterns[k], (1, 2),
                                         (dims[1], dims[2]))
            elif kind == "planted_temporal":
                ok = in_even_shift_orbit(moved[k], patterns[k], (0,), (dims[0],))
            else:
                ok = np.allclose(moved[k], patterns[k], atol=1e-9)
            if not ok:
                raise AssertionError(
                    f"{kind} pattern {k} leaves its class family under {t}")


# -- pattern banks -----------------------------------------------------------


def _dihedral_orbits(h, w):
    """Group positions of an HxW grid into orbits of the symmetry group."""
    group = transform_group((1, h, w))
    index = np.arange(h * w).reshape(1, h, w)
    orbit_of = np.full(h * w, -1, dtype=np.int64)
    n_orbits = 0
    images = [apply_transform(index, t).reshape(-1) for t in group]
    for pos in range(h * w):
        if orbit_of[pos] >= 0:
            continue
        members = {img[pos] for img in images}
        # transforms permute positions; the orbit is closed by construction
        for m in members:
            orbit_of[m] = n_orbits
        n_orbits += 1
    return orbit_of.reshape(h, w), n_orbits


def _permute_within_size_groups(values: np.ndarray, sizes: np.ndarray, rng):
    """Permute orbit values only among orbits of equal size.

    Keeps the voxel-value histogram of the resulting pattern exactly equal
    across classes, so pooled per-voxel statistics carry no label signal.
    """
    out = values.copy()
    for size in np.unique(sizes):
        ids = np.where(sizes == size)[0]
        out[ids] = values[ids][rng.permutation(len(ids))]
    return out


def _normalize_bank(bank: np.ndarray) -> np.ndarray:
    flat = bank.reshape(bank.shape[0], -1)
    flat = flat - flat.mean(axis=1, keepdims=True)
    rms = np.sqrt((flat ** 2).mean(axis=1, keepdims=True))
    rms[rms == 0] = 1.0
    return (flat / rms).reshape(bank.shape)


def _bank_planted_plane(rng, classes, dims):
    d, h, w = dims
    orbit_of, n_orbits = _dihedral_orbits(h, w)
    sizes = np.bincount(orbit_of.reshape(-1), minlength=n_orbits)
    base_values = rng.normal(size=n_orbits)
    bank = np.empty((classes, d, h, w))
    for k in range(classes):
        vals = base_values if k == 0 else _permute_within_size_groups(
            base_values, sizes, rng)
        bank[k] = vals[orbit_of][None, :, :]  # constant along depth
    return _normalize_bank(bank)


def _bank_planted_temporal(rng, classes, dims):
    """Bump-pair profiles: the class is the circular distance between two
    2-wide depth bumps.  A local window sees one bump at a time (and value
    histograms are identical across classes), so the label is reachable
    only through depth receptive fields spanning the pair; a depth flip
    maps each profile onto an even cyclic shift of itself, keeping labels
    augmentation-invariant."""
    d, h, w = dims
    if classes > max(d // 4, 1):
        raise SchemaError(f"planted_temporal supports at most {d // 4} classes "
                          f"for depth {d}")
    bank = np.empty((classes, d, h, w))
    for k in range(classes):
        sig = np.zeros(d)
        sig[[0, 1]] = 1.0
        start = 2 * (k + 1)
        sig[[start % d, (start + 1) % d]] = 1.0
        bank[k] = sig[:, None, None]
    return _normalize_bank(bank)


def _bank_isotropic(rng, classes, dims):
    bank = rng.normal(size=(classes,) + tuple(dims))
    bank = np.stack([_symmetrize(p, dims) for p in bank])
    # remove every 1D/2D marginal: keep only the three-way interaction
    for axis in (1, 2, 3):
        bank = bank - bank.mean(axis=axis, keepdims=True)
    return _normalize_bank(bank)


_BANKS = {"planted_plane": _bank_planted_plane,
          "planted_temporal": _bank_planted_temporal,
          "isotropic_3d": _bank_isotropic}


def class_patterns(spec: SyntheticTaskSpec) -> np.ndarray:
    """The (K, D, H, W) pattern bank for a task spec; deterministic."""
    rng = np.random.default_rng(spec.seed)
    n_fg = spec.classes - 1 if spec.head == "segmentation" else spec.classes
    for attempt in range(8):
        bank = _BANKS[spec.kind](rng, n_fg, spec.dims)
        if n_fg == 1:
            _assert_label_safe(spec.kind, bank, spec.dims)
            return bank
        corr = np.corrcoef(bank.reshape(n_fg, -1))
        np.fill_diagonal(corr, 0.0)
        if np.abs(corr).max() < 0.95:
            _assert_label_safe(spec.kind, bank, spec.dims)
            return bank
    raise RuntimeError("failed to draw a usable pattern bank")


# -- datasets ---------------------------------------------------------------


@dataclass
class Dataset:
    spec: SyntheticTaskSpec
    volumes: np.ndarray  # (N, 1, D, H, W)
    labels: np.ndarray   # (N,) or (N, D, H, W) int64
    patterns: np.ndarray = field(repr=False, default=None)

    def __len__(self):
        return self.volumes.shape[0]

    def split(self) -> tuple["Dataset", "Dataset"]:
        t = self.spec.train_size
        v = self.spec.val_size
        return (Dataset(self.spec, self.volumes[:t], self.labels[:t], self.patterns),
                Dataset(self.spec, self.volumes[t:t + v], self.labels[t:t + v],
                        self.patterns))


def _noise_field(rng, kind, dims) -> np.ndarray:
    """Per-sample noise sharing the planted structure's invariances.

    The planted kinds carry no information along their collapsed axes, so
    the noise is replicated along those axes too: otherwise kernels with
    extent there could average it away, making larger kernels genuinely
    better denoisers and breaking the known-optimal-class construction.
    """
    d, h, w = dims
    if kind == "planted_plane":
        return np.broadcast_to(rng.normal(size=(1, h, w)), dims)
    if kind == "planted_temporal":
        return np.broadcast_to(rng.normal(size=(d, 1, 1)), dims)
    return rng.normal(size=dims)


def _shifted_pattern(rng, kind, pattern) -> np.ndarray:
    """Pattern under a random cyclic shift along its structured axes.

    The shift is a per-sample nuisance: pooled per-voxel statistics of any
    unfiltered copy of the volume are class-blind, so label information is
    only reachable through shift-invariant (convolutional) features along
    the planted axes.  Labels stay exact because the shift never mixes
    classes, and axis flips/rotations map shifted samples to other shifted
    samples of the same class.  Shifts move in steps of two so they commute
    with stride-2 stems (a shifted sample subsamples to a shifted copy of
    the same subsampled pattern, not to a different phase family).
    """
    d, h, w = pattern.shape

    def pick(extent):
        return 2 * int(rng.integers(max(extent // 2, 1)))

    if kind == "planted_plane":
        return np.roll(pattern, (pick(h), pick(w)), axis=(1, 2))
    if kind == "planted_temporal":
        return np.roll(pattern, pick(d), axis=0)
    return np.roll(pattern, (pick(d), pick(h), pick(w)), axis=(0, 1, 2))


def generate(spec: SyntheticTaskSpec) -> Dataset:
    """Full train+val dataset; byte-identical for identical specs."""
    patterns = class_patterns(spec)
    rng = np.random.default_rng(spec.seed + 1)
    n = spec.train_size + spec.val_size
    n_fg = patterns.shape[0]
    # exact round-robin class balance, order shuffled
    assignment = np.arange(n) % n_fg
    rng.shuffle(assignment)

    volumes = np.empty((n, 1) + tuple(spec.dims))
    if spec.head == "classification":
        labels = assignment.astype(np.int64)
        for i, k in enumerate(assignment):
            # amplitude jitter: a scale nuisance the loss can never fit away,
            # so gradients stay live however long training runs
            gain = rng.uniform(0.6, 1.4)
            volumes[i, 0] = gain * _shifted_pattern(rng, spec.kind, patterns[k])
    else:
        labels = np.empty((n,) + tuple(spec.dims), dtype=np.int64)
        thresholds = np.quantile(patterns.reshape(n_fg, -1), 0.7, axis=1)
        for i, k in enumerate(assignment):
            field = _shifted_pattern(rng, spec.kind, patterns[k])
            volumes[i, 0] = field
            labels[i] = np.where(field > thresholds[k], k + 1, 0)
    if spec.noise > 0:
        for i in range(n):
            volumes[i, 0] += spec.noise * _noise_field(rng, spec.kind, spec.dims)
    return Dataset(spec, volumes, labels, patterns)


def save_dataset(ds: Dataset, path_prefix: str):
    """Cache as little-endian float64 blob plus a JSON sidecar."""
    blob = ds.volumes.astype("<f8").tobytes() + ds.labels.astype("<f8").tobytes()
    with open(f"{path_prefix}.bin", "wb") as f:
        f.write(blob)
    sidecar = {
        "spec": ds.spec.to_dict(),
        "count": len(ds),
        "volume_shape": list(ds.volumes.shape),
        "label_shape": list(ds.labels.shape),
        "checksum": hashlib.sha256(blob).hexdigest(),
    }
    with open(f"{path_prefix}.json", "w") as f:
        json.dump(sidecar, f, indent=2, sort_keys=True)


def load_dataset(path_prefix: str) -> Dataset:
    with open(f"{path_prefix}.json") as f:
        sidecar = json.load(f)
    with open(f"{path_prefix}.bin", "rb") as f:
        blob = f.read()
    if hashlib.sha256(blob).hexdigest() != sidecar["checksum"]:
        raise ValueError(f"dataset cache {path_prefix}.bin is corrupt")
    spec = SyntheticTaskSpec.from_dict(sidecar["spec"])
    vshape = tuple(sidecar["volume_shape"])
    lshape = tuple(sidecar["label_shape"])
    nv = int(np.prod(vshape))
    volumes = np.frombuffer(blob[:nv * 8], dtype="<f8").reshape(vshape).copy()
    labels = np.frombuffer(blob[nv * 8:], dtype="<f8").reshape(lshape)
    return Dataset(spec, volumes, labels.astype(np.int64), class_patterns(spec))


# -- metrics ----------------------------------------------------------------


def dsc(prediction: np.ndarray, truth: np.ndarray) -> float:
    """Dice overlap of two binary masks; empty-vs-empty counts as 1."""
    prediction = np.asarray(prediction, dtype=bool)
    truth = np.asarray(truth, dtype=bool)
    if prediction.shape != truth.shape:
        raise ValueError(f"mask shapes differ: {prediction.shape} vs {truth.shape}")
    denom = prediction.sum() + truth.sum()
    if denom == 0:
        return 1.0
    return 2.0 * np.logical_and(prediction, truth).sum() / denom


@dataclass
class EvalResult:
    head: str
    loss: float
    samples: int
    accuracy: float | None = None
    dsc_per_class: dict[int, float] | None = None
    mean_dsc: float | None = None

    def to_dict(self) -> dict:
        out = {"head": self.head, "loss": self.loss, "samples": self.samples}
        if self.accuracy is not None:
            out["accuracy"] = self.accuracy
        if self.dsc_per_class is not None:
            out["dsc_per_class"] = {str(k): v for k, v in self.dsc_per_class.items()}
            out["mean_dsc"] = self.mean_dsc
        return out

    def to_csv(self, path):
        if self.head == "classification":
            cols, vals = ["head", "samples", "loss", "accuracy"], \
                [self.head, self.samples, repr(self.loss), repr(self.accuracy)]
        else:
            cols = ["head", "samples", "loss", "mean_dsc"] + \
                [f"dsc_class_{c}" for c in sorted(self.dsc_per_class)]
            vals = [self.head, self.samples, repr(self.loss),
                    repr(self.mean_dsc)] + \
                [repr(self.dsc_per_class[c]) for c in sorted(self.dsc_per_class)]
        with open(path, "w") as f:
            f.write(",".join(cols) + "\n")
            f.write(",".join(str(v) for v in vals) + "\n")


# -- training ---------------------------------------------------------------


def task_loss(logits: Tensor, labels: np.ndarray, head: str) -> Tensor:
    """Cross-entropy for classification; cross-entropy + dice for dense heads."""
    ce = nn.softmax_cross_entropy(logits, labels)
    if head == "classification":
        return ce
    probs = nn.softmax(logits, axis=1)
    return ce + nn.dice_loss(probs, labels)


def make_batch(ds: Dataset, idx: np.ndarray, augment: bool, rng):
    vols = ds.volumes[idx]
    labels = ds.labels[idx]
    if augment:
        vols = vols.copy()
        labels = labels.copy()
        dense = labels.ndim > 1
        for j in range(len(idx)):
            t = (int(rng.integers(4)) if ds.spec.dims[1] == ds.spec.dims[2] else
                 int(rng.integers(2)) * 2,
                 tuple(bool(b) for b in rng.integers(2, size=3)))
            vols[j] = apply_transform(vols[j], t)
            if dense:
                labels[j] = apply_transform(labels[j], t)
    return Tensor(vols), labels


@dataclass
class TrainLog:
    rows: list[dict] = field(default_factory=list)

    def append(self, **kw):
        self.rows.append(kw)

    def to_csv(self, path):
        if not self.rows:
            cols = ["iteration", "loss", "lr"]
        else:
            cols = list(self.rows[0])
        with open(path, "w") as f:
            f.write(",".join(cols) + "\n")
            for row in self.rows:
                f.write(",".join(repr(row[c]) if isinstance(row[c], float)
                                 else str(row[c]) for c in cols) + "\n")


def train(network, train_ds: Dataset, cfg: TrainConfig, seed=0) -> TrainLog:
    """SGD with polynomial learning-rate decay; deterministic given the seed.

    Raises DivergenceError on a non-finite loss or gradient; the partial
    log is attached to the exception.
    """
    rng = np.random.default_rng(seed)
    log = TrainLog()
    if cfg.iterations == 0:
        return log
    network.train(True)
    opt = SGD(network.parameters(), lr=cfg.learning_rate, momentum=cfg.momentum,
              weight_decay=cfg.weight_decay, total_steps=cfg.iterations,
              power=cfg.lr_power)
    try:
        for t in range(cfg.iterations):
            idx = rng.integers(0, len(train_ds), size=cfg.batch_size)
            x, labels = make_batch(train_ds, idx, cfg.augment, rng)
            opt.zero_grad()
            loss = task_loss(network.forward(x), labels, train_ds.spec.head)
            check_finite_loss(loss, t)
            loss.backward()
            opt.step()
            log.append(iteration=t, loss=float(loss.data), lr=opt.lr_at(t))
    except DivergenceError as e:
        e.partial_log = log
        raise
    network.eval()
    return log


# -- inference ---------------------------------------------------------------


def sliding_window_infer(network, volume: np.ndarray, patch, stride) -> np.ndarray:
    """Average overlapping window logits into a dense (K, D, H, W) map."""
    patch = tuple(patch)
    stride = tuple(stride)
    dims = volume.shape[-3:]
    if any(s < 1 for s in stride):
        raise ValueError("stride must be positive")
    if any(p > d for p, d in zip(patch, dims)):
        raise ValueError(f"patch {patch} exceeds volume dims {dims}")

    starts_per_axis = []
    for d, p, s in zip(dims, patch, stride):
        starts = list(range(0, d - p + 1, s))
        if starts[-1] != d - p:
            starts.append(d - p)  # clamp the last window to the boundary
        starts_per_axis.append(starts)

    k = network.spec.num_classes
    acc = np.zeros((k,) + dims)
    count = np.zeros(dims)
    for sd in starts_per_axis[0]:
        for sh in starts_per_axis[1]:
            for sw in starts_per_axis[2]:
                sl = (slice(sd, sd + patch[0]), slice(sh, sh + patch[1]),
                      slice(sw, sw + patch[2]))
                window = volume[(Ellipsis,) + sl]
                logits = network.forward(Tensor(window[None])).data[0]
                acc[(slice(None),) + sl] += logits
                count[sl] += 1.0
    return acc / count


def _forward_logits(network, volumes: np.ndarray, chunk=16) -> np.ndarray:
    outs = []
    for lo in range(0, len(volumes), chunk):
        outs.append(network.forward(Tensor(volumes[lo:lo + chunk])).data)
    return np.concatenate(outs, axis=0)


def evaluate(network, ds: Dataset, inference="direct", patch=None, stride=None,
             threads=1) -> EvalResult:
    """Accuracy (classification) or per-class DSC (segmentation) over ``ds``."""
    network.eval()
    head = ds.spec.head
    if head == "classification":
        logits = _forward_logits(network, ds.volumes)
        loss = float(nn.softmax_cross_entropy(Tensor(logits), ds.labels).data)
        acc = float((logits.argmax(axis=1) == ds.labels).mean())
        return EvalResult(head=head, loss=loss, samples=len(ds), accuracy=acc)

    k = ds.spec.classes

    def infer_one(i):
        if inference == "sliding_window":
            logits = sliding_window_infer(network, ds.volumes[i], patch, stride)
        else:
            logits = network.forward(Tensor(ds.volumes[i][None])).data[0]
        return logits

    if threads > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(max_workers=threads) as pool:
            all_logits = list(pool.map(infer_one, range(len(ds))))
    else:
        all_logits = [infer_one(i) for i in range(len(ds))]

    loss_total = 0.0
    per_class = {c: [] for c in range(1, k)}
    for i, logits in enumerate(all_logits):
        loss_total += float(nn.softmax_cross_entropy(
            Tensor(logits[None]), ds.labels[i][None]).data)
        pred = logits.argmax(axis=0)
        for c in range(1, k):
            per_class[c].append(dsc(pred == c, ds.labels[i] == c))
    dsc_per_class = {c: float(np.mean(v)) for c, v in per_class.items()}
    return EvalResult(head=head, loss=loss_total / len(ds), samples=len(ds),
                      dsc_per_class=dsc_per_class,
                      mean_dsc=float(np.mean(list(dsc_per_class.values()))))
