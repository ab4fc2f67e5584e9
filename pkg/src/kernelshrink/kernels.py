"""Sub-kernel shapes, enumeration, centered embedding, and cost accounting.

A sub-kernel is a cuboid kernel whose extents are elementwise <= the base
3D kernel's extents.  Shapes are grouped into dimensionality classes by
how many extents exceed one: 0 (pointwise), 1 (1D), 2 (2D), 3 (3D).
Everything here is pure numpy, no gradients involved.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

CLASS_NAMES = {0: "pointwise", 1: "1d", 2: "2d", 3: "3d"}
AXIS_NAMES = ("d", "h", "w")


@dataclass(frozen=True, order=True)
class KernelShape:
    """Kernel extents (k_d, k_h, k_w); each must be a positive odd integer."""

    k_d: int
    k_h: int
    k_w: int

    def __post_init__(self):
        for name, k in zip(AXIS_NAMES, self.extents):
            if not isinstance(k, (int, np.integer)) or k < 1:
                raise ValueError(f"kernel extent {name}={k} must be a positive integer")
            if k % 2 == 0:
                raise ValueError(f"kernel extent {name}={k} must be odd (centering undefined)")

    @property
    def extents(self) -> tuple[int, int, int]:
        return (self.k_d, self.k_h, self.k_w)

    @property
    def volume(self) -> int:
        return self.k_d * self.k_h * self.k_w

    @property
    def dim_class(self) -> int:
        """Number of axes with extent > 1: 0=pointwise, 1=1D, 2=2D, 3=3D."""
        return sum(1 for k in self.extents if k > 1)

    def fits_in(self, base: "KernelShape") -> bool:
        return all(a <= b for a, b in zip(self.extents, base.extents))

    def __str__(self) -> str:
        return f"{self.k_d}x{self.k_h}x{self.k_w}"

    @classmethod
    def parse(cls, text: str) -> "KernelShape":
        """Parse the "KdxKhxKw" wire format, e.g. "1x3x3"."""
        parts = text.strip().lower().split("x")
        if len(parts) != 3:
            raise ValueError(f"kernel shape {text!r} must have form 'KdxKhxKw'")
        try:
            k = tuple(int(p) for p in parts)
        except ValueError:
            raise ValueError(f"kernel shape {text!r} has non-integer extents") from None
        return cls(*k)


@dataclass(frozen=True)
class SubKernelSet:
    """An ordered candidate set of sub-kernels of a common base shape.

    The order is part of the contract: it defines branch indexing in the
    multi-path network and the deterministic tie-break used at selection
    time.  Candidates are sorted by descending volume, then lexicographic.
    """

    base: KernelShape
    candidates: tuple[KernelShape, ...]

    def __post_init__(self):
        if not self.candidates:
            raise ValueError("candidate set must be non-empty")
        seen = set()
        for c in self.candidates:
            if not c.fits_in(self.base):
                raise ValueError(f"candidate {c} does not fit in base {self.base}")
            if c in seen:
                raise ValueError(f"duplicate candidate {c}")
            seen.add(c)

    def __len__(self):
        return len(self.candidates)

    def __iter__(self):
        return iter(self.candidates)

    def index(self, shape: KernelShape) -> int:
        return self.candidates.index(shape)

    @property
    def dim_classes(self) -> tuple[int, ...]:
        return tuple(c.dim_class for c in self.candidates)

    def to_strings(self) -> list[str]:
        return [str(c) for c in self.candidates]

    @classmethod
    def from_strings(cls, base: str, candidates: list[str]) -> "SubKernelSet":
        return cls(KernelShape.parse(base),
                   tuple(KernelShape.parse(c) for c in candidates))


def enumerate_subkernels(base: KernelShape, per_axis_choices=(1, 3),
                         exclude_pointwise=True) -> SubKernelSet:
    """All cuboid sub-kernels formed by the per-axis extent choices.

    Returns the Cartesian product of the choices, optionally dropping the
    1x1x1 pointwise shape, ordered by descending volume then lexicographic.
    """
    choices = sorted(set(int(c) for c in per_axis_choices))
    for c in choices:
        if c % 2 == 0 or c < 1:
            raise ValueError(f"per-axis choice {c} must be a positive odd integer")
        if c > max(base.extents):
            raise ValueError(f"per-axis choice {c} exceeds base {base}")
    shapes = []
    for kd, kh, kw in itertools.product(*[[c for c in choices if c <= e]
                                          for e in base.extents]):
        s = KernelShape(kd, kh, kw)
        if exclude_pointwise and s.dim_class == 0:
            continue
        shapes.append(s)
    if not shapes:
        raise ValueError("enumeration produced an empty candidate set")
    shapes.sort(key=lambda s: (-s.volume, s.extents))
    return SubKernelSet(base, tuple(shapes))


def default_subkernel_set() -> SubKernelSet:
    """The seven-candidate set of 1D/2D/3D sub-kernels of a 3x3x3 base."""
    return enumerate_subkernels(KernelShape(3, 3, 3), (1, 3), exclude_pointwise=True)


def embed_subkernel(w_sub: np.ndarray, base: KernelShape) -> np.ndarray:
    """Zero-pad a sub-kernel into the center of the base kernel volume.

    ``w_sub`` has shape (..., a, b, c) with odd a <= k_d, b <= k_h, c <= k_w;
    leading axes (output/input channels) are carried through.  Convolving
    with the embedded kernel under the base's same-padding is numerically
    identical to convolving with the sub-kernel under its own same-padding.
    """
    w_sub = np.asarray(w_sub, dtype=np.float64)
    sub_extents = w_sub.shape[-3:]
    for name, k, kb in zip(AXIS_NAMES, sub_extents, base.extents):
        if k % 2 == 0:
            raise ValueError(f"sub-kernel extent {name}={k} must be odd")
        if k > kb:
            raise ValueError(f"sub-kernel extent {name}={k} exceeds base {kb}")
    out = np.zeros(w_sub.shape[:-3] + base.extents, dtype=np.float64)
    starts = [(kb - k) // 2 for k, kb in zip(sub_extents, base.extents)]
    sl = tuple(slice(s, s + k) for s, k in zip(starts, sub_extents))
    out[(Ellipsis,) + sl] = w_sub
    return out


@dataclass(frozen=True)
class CostModel:
    """Accounting conventions: FLOPs per multiply-add and whether the
    per-channel normalization affines are charged.  Costs are strictly
    monotone in kernel volume either way."""

    flops_per_mac: int = 2
    include_norm_cost: bool = False

    def conv_params(self, shape: KernelShape, c_in: int, c_out: int) -> int:
        params = c_out * c_in * shape.volume
        if self.include_norm_cost:
            params += 2 * c_out
        return params

    def conv_flops(self, shape: KernelShape, c_in: int, c_out: int,
                   out_dims) -> int:
        vox = int(math.prod(out_dims))
        flops = self.flops_per_mac * c_out * c_in * shape.volume * vox
        if self.include_norm_cost:
            flops += 2 * c_out * vox
        return flops


def param_count(shape: KernelShape, c_in: int, c_out: int) -> int:
    """Weight count of a convolution with this kernel shape (no bias)."""
    return CostModel().conv_params(shape, c_in, c_out)


def flop_count(shape: KernelShape, c_in: int, c_out: int, out_dims) -> int:
    """FLOPs of one convolution, counting a multiply-add as 2 FLOPs."""
    return CostModel().conv_flops(shape, c_in, c_out, out_dims)


def cost_beta(sub_set: SubKernelSet) -> np.ndarray:
    """Per-candidate penalty weights proportional to parameter cost.

    Weights are assigned per dimensionality class (all 1D shapes share one
    value, etc.) and normalized so that the distinct class weights sum to 1
    across the classes present.  For the default 3x3x3 set this yields
    9/13, 3/13, 1/13 for the 3D, 2D, and 1D classes.
    """
    class_volumes: dict[int, list[int]] = {}
    for c in sub_set:
        class_volumes.setdefault(c.dim_class, []).append(c.volume)
    class_cost = {d: float(np.mean(v)) for d, v in class_volumes.items()}
    total = sum(class_cost.values())
    return np.array([class_cost[c.dim_class] / total for c in sub_set])
