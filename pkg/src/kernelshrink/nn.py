"""Differentiable network operations built on the Tensor engine.

Convolution uses cross-correlation semantics (no kernel flip) with
centered "same" zero padding by default.  All ops register exact backward
rules; batch normalization backpropagates through the batch statistics in
training mode.
"""

from __future__ import annotations

import itertools

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Tensor, as_tensor

# Test hook: op names listed here get a deliberately wrong backward rule,
# used as the negative control of the finite-difference suite.
_CORRUPTED: set[str] = set()


def _norm_tuple(value, n, name):
    if isinstance(value, (int, np.integer)):
        value = (int(value),) * n
    value = tuple(int(v) for v in value)
    if len(value) != n:
        raise ValueError(f"{name} must have {n} entries, got {value}")
    return value


def conv_output_dims(in_dims, kernel, stride, padding):
    return tuple((i + 2 * p - k) // s + 1
                 for i, k, s, p in zip(in_dims, kernel, stride, padding))


def same_padding(kernel):
    return tuple((k - 1) // 2 for k in kernel)


def conv_nd(x: Tensor, w: Tensor, stride=1, padding="same") -> Tensor:
    """N-dimensional cross-correlation.

    ``x`` is (C_i, *S) or batched (N, C_i, *S); ``w`` is (C_o, C_i, *K) with
    every kernel extent odd.  Output extent per axis is
    floor((in + 2*pad - k) / stride) + 1.
    """
    x = as_tensor(x)
    w = as_tensor(w)
    nsp = w.ndim - 2
    if nsp < 1:
        raise ValueError("weight must have at least one spatial axis")
    batched = x.ndim == w.ndim
    if not batched and x.ndim != w.ndim - 1:
        raise ValueError(f"input rank {x.ndim} incompatible with weight rank {w.ndim}")
    kernel = w.shape[2:]
    for k in kernel:
        if k % 2 == 0:
            raise ValueError(f"even kernel extent {k}: centering undefined")
    c_in = x.shape[0 if not batched else 1]
    if w.shape[1] != c_in:
        raise ValueError(f"channel mismatch: input has {c_in}, weight expects {w.shape[1]}")
    stride = _norm_tuple(stride, nsp, "stride")
    padding = same_padding(kernel) if padding == "same" else _norm_tuple(padding, nsp, "padding")

    xd = x.data if batched else x.data[None]
    n, _, *in_dims = xd.shape
    out_dims = conv_output_dims(in_dims, kernel, stride, padding)
    if any(o < 1 for o in out_dims):
        raise ValueError(f"kernel {kernel} does not fit input dims {tuple(in_dims)}")

    xp = np.pad(xd, [(0, 0), (0, 0)] + [(p, p) for p in padding])
    windows = sliding_window_view(xp, kernel, axis=tuple(range(2, 2 + nsp)))
    windows = windows[(slice(None), slice(None))
                      + tuple(slice(None, None, s) for s in stride)]
    # windows: (N, C_i, *S_out, *K); contract C_i and K against the weight
    y = np.tensordot(windows, w.data,
                     axes=([1] + list(range(2 + nsp, 2 + 2 * nsp)),
                           [1] + list(range(2, 2 + nsp))))
    y = np.ascontiguousarray(np.moveaxis(y, -1, 1))

    out = Tensor(y if batched else y[0], parents=(x, w))
    if out.requires_grad:
        def bw(g):
            gy = g if batched else g[None]
            if w.requires_grad:
                gw = np.tensordot(gy, windows,
                                  axes=([0] + list(range(2, 2 + nsp)),
                                        [0] + list(range(2, 2 + nsp))))
                w._accumulate(gw)
            if x.requires_grad:
                # (N, *S_out, C_i, *K) -> (N, C_i, *S_out, *K), then scatter
                # each kernel offset back onto the padded input grid
                gxw = np.tensordot(gy, w.data, axes=([1], [0]))
                gxw = np.moveaxis(gxw, 1 + nsp, 1)
                gxp = np.zeros_like(xp)
                for kk in itertools.product(*[range(k) for k in kernel]):
                    sl = tuple(slice(kk[a], kk[a] + stride[a] * out_dims[a], stride[a])
                               for a in range(nsp))
                    gxp[(slice(None), slice(None)) + sl] += gxw[(Ellipsis,) + kk]
                sl = tuple(slice(p, p + d) for p, d in zip(padding, in_dims))
                gx = gxp[(slice(None), slice(None)) + sl]
                if "conv" in _CORRUPTED:
                    gx = gx * 1.01
                x._accumulate(gx if batched else gx[0])
        out._backward = bw
    return out


def batch_norm(x: Tensor, scale: Tensor, shift: Tensor,
               running_mean: np.ndarray | None = None,
               running_var: np.ndarray | None = None,
               training: bool = True, momentum: float = 0.1,
               eps: float = 1e-5) -> Tensor:
    """Per-channel batch normalization with affine (scale, shift).

    ``x`` is (N, C, *S); statistics are taken over all axes but the channel
    axis.  Training mode normalizes by batch statistics (and updates the
    running buffers in place); eval mode uses the running statistics.
    Variances are biased (ddof=0) in both modes.
    """
    x = as_tensor(x)
    if eps <= 0:
        raise ValueError("eps must be positive")
    c = x.shape[1]
    if scale.size != c or shift.size != c:
        raise ValueError(f"scale/shift length must equal channel extent {c}")
    axes = (0,) + tuple(range(2, x.ndim))
    bshape = (1, c) + (1,) * (x.ndim - 2)
    m = x.size // c

    if training:
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        if running_mean is not None:
            running_mean *= 1.0 - momentum
            running_mean += momentum * mu
        if running_var is not None:
            running_var *= 1.0 - momentum
            running_var += momentum * var
    else:
        if running_mean is None or running_var is None:
            raise ValueError("eval mode requires running statistics")
        mu = running_mean
        var = running_var

    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu.reshape(bshape)) * inv_std.reshape(bshape)
    y = scale.data.reshape(bshape) * xhat + shift.data.reshape(bshape)

    out = Tensor(y, parents=(x, scale, shift))
    if out.requires_grad:
        def bw(g):
            if scale.requires_grad:
                scale._accumulate((g * xhat).sum(axis=axes).reshape(scale.shape))
            if shift.requires_grad:
                shift._accumulate(g.sum(axis=axes).reshape(shift.shape))
            if x.requires_grad:
                gxhat = g * scale.data.reshape(bshape)
                if training:
                    xc = x.data - mu.reshape(bshape)
                    istd = inv_std.reshape(bshape)
                    gvar = (gxhat * xc).sum(axis=axes) * (-0.5) * inv_std ** 3
                    gmu = (-(gxhat).sum(axis=axes) * inv_std
                           + gvar * (-2.0 / m) * xc.sum(axis=axes))
                    gx = (gxhat * istd
                          + (2.0 / m) * gvar.reshape(bshape) * xc
                          + gmu.reshape(bshape) / m)
                else:
                    gx = gxhat * inv_std.reshape(bshape)
                x._accumulate(gx)
        out._backward = bw
    return out


def relu(x: Tensor) -> Tensor:
    return as_tensor(x).relu()


def global_avg_pool(x: Tensor) -> Tensor:
    """Spatial mean per channel: (N, C, *S) -> (N, C)."""
    x = as_tensor(x)
    if x.ndim < 3:
        raise ValueError("global_avg_pool expects (N, C, *spatial)")
    return x.mean(axis=tuple(range(2, x.ndim)))


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Affine map: (N, F) @ (F, K) + (K,)."""
    x = as_tensor(x)
    if x.shape[-1] != w.shape[0]:
        raise ValueError(f"linear shape mismatch: {x.shape} vs {w.shape}")
    out = x @ w
    if b is not None:
        out = out + b
    return out


def softmax(x: Tensor, axis: int = 1) -> Tensor:
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(p, parents=(x,))
    if out.requires_grad:
        def bw(g):
            dot = (g * p).sum(axis=axis, keepdims=True)
            x._accumulate(p * (g - dot))
        out._backward = bw
    return out


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood over all positions.

    ``logits`` is (N, K) or dense (N, K, *S); ``labels`` holds integer class
    indices of shape (N,) or (N, *S).
    """
    logits = as_tensor(logits)
    labels = np.asarray(labels)
    k = logits.shape[1]
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError(f"label index out of range for {k} classes")
    expected = logits.shape[:1] + logits.shape[2:]
    if labels.shape != expected:
        raise ValueError(f"labels shape {labels.shape} != {expected}")

    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    onehot = np.zeros_like(logits.data)
    np.put_along_axis(onehot, np.expand_dims(labels, 1), 1.0, axis=1)
    count = labels.size
    loss = -(onehot * logp).sum() / count

    out = Tensor(loss, parents=(logits,))
    if out.requires_grad:
        def bw(g):
            p = np.exp(logp)
            logits._accumulate(g * (p - onehot) / count)
        out._backward = bw
    return out


def dice_loss(probs: Tensor, labels, smooth: float = 1e-5) -> Tensor:
    """1 - mean soft-Dice over foreground classes.

    ``probs`` is (N, K, *S) with values in [0, 1]; ``labels`` holds integer
    class indices (N, *S).  Class 0 is background and excluded.  Soft-Dice
    per class is (2*sum(p*y) + s) / (sum(p) + sum(y) + s).
    """
    probs = as_tensor(probs)
    labels = np.asarray(labels)
    k = probs.shape[1]
    if k < 2:
        raise ValueError("dice_loss needs at least one foreground class")
    total = None
    for c in range(1, k):
        y = (labels == c).astype(np.float64)
        p = probs[:, c]
        num = (p * y).sum() * 2.0 + smooth
        den = p.sum() + float(y.sum()) + smooth
        d = num / den
        total = d if total is None else total + d
    return 1.0 - total * (1.0 / (k - 1))


# -- parameter containers ------------------------------------------------


class Module:
    """Minimal parameter container with train/eval mode propagation."""

    def __init__(self):
        self.training = True

    def _items(self):
        """Flatten attributes, expanding one level of list/tuple nesting."""
        for name, value in vars(self).items():
            if isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    yield f"{name}.{i}", item
            else:
                yield name, value

    def _children(self):
        for name, value in self._items():
            if isinstance(value, Module):
                yield name, value

    def named_parameters(self, prefix=""):
        for name, value in self._items():
            if isinstance(value, Tensor) and value.requires_grad:
                yield (f"{prefix}{name}", value)
            elif isinstance(value, Module):
                yield from value.named_parameters(prefix=f"{prefix}{name}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def train(self, mode=True):
        self.training = mode
        for _, child in self._children():
            child.train(mode)
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def state_arrays(self, prefix=""):
        """All learnable and buffer arrays, for checkpointing."""
        for name, value in self._items():
            if isinstance(value, Tensor) and value.requires_grad:
                yield (f"{prefix}{name}", value.data)
            elif isinstance(value, np.ndarray) and value.dtype == np.float64:
                yield (f"{prefix}{name}", value)
            elif isinstance(value, Module):
                yield from value.state_arrays(prefix=f"{prefix}{name}.")

    def load_state_arrays(self, arrays, prefix=""):
        for name, value in self._items():
            key = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                if value.data.shape != arrays[key].shape:
                    raise ValueError(f"checkpoint shape mismatch at {key}")
                value.data = np.array(arrays[key], dtype=np.float64)
            elif isinstance(value, np.ndarray) and value.dtype == np.float64:
                value[...] = arrays[key]
            elif isinstance(value, Module):
                value.load_state_arrays(arrays, prefix=f"{prefix}{name}.")


def init_conv_weight(rng, c_out, c_in, kernel):
    """Fan-in scaled uniform initialization."""
    fan_in = c_in * int(np.prod(kernel))
    limit = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-limit, limit, size=(c_out, c_in) + tuple(kernel)),
                  requires_grad=True)


class Conv(Module):
    """Convolution layer without bias (absorbed by the following norm)."""

    def __init__(self, c_in, c_out, kernel, stride=1, rng=None):
        super().__init__()
        kernel = tuple(kernel)
        rng = rng if rng is not None else np.random.default_rng(0)
        self.c_in, self.c_out, self.kernel = c_in, c_out, kernel
        self.stride = _norm_tuple(stride, len(kernel), "stride")
        self.weight = init_conv_weight(rng, c_out, c_in, kernel)

    def forward(self, x):
        return conv_nd(x, self.weight, stride=self.stride, padding="same")


class BatchNorm(Module):
    def __init__(self, c, eps=1e-5, momentum=0.1):
        super().__init__()
        self.c, self.eps, self.momentum = c, eps, momentum
        self.scale = Tensor(np.ones(c), requires_grad=True)
        self.shift = Tensor(np.zeros(c), requires_grad=True)
        self.running_mean = np.zeros(c)
        self.running_var = np.ones(c)

    def forward(self, x):
        return batch_norm(x, self.scale, self.shift,
                          self.running_mean, self.running_var,
                          training=self.training, momentum=self.momentum,
                          eps=self.eps)

    def freeze_identity(self):
        """Pin eval-mode statistics so normalization is exactly pass-through."""
        self.running_mean[:] = 0.0
        self.running_var[:] = 1.0 - self.eps


class Linear(Module):
    def __init__(self, f_in, f_out, rng=None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        limit = 1.0 / np.sqrt(f_in)
        self.weight = Tensor(rng.uniform(-limit, limit, size=(f_in, f_out)),
                             requires_grad=True)
        self.bias = Tensor(np.zeros(f_out), requires_grad=True)

    def forward(self, x):
        return linear(x, self.weight, self.bias)
