"""Dense float32 tensors with a reverse-mode gradient tape and seeded sampling.

The tape is a module-level record of executed ops.  ``backward`` walks it once
in reverse, accumulates gradients into every reachable tensor that requires
them, and clears the tape (single use; no higher-order gradients).
"""
from __future__ import annotations

import zlib

import numpy as np

DTYPE = np.float32


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested op."""


class NonFiniteError(FloatingPointError):
    """An op produced or received NaN/Inf values."""


class TapeError(RuntimeError):
    """backward() called in an invalid state (non-scalar loss, empty tape)."""


# When True (default), every op verifies its output is finite.  Sampling and
# training loops leave it on; it can be dropped for benchmarking only.
finite_checks = True


class Tensor:
    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad=False):
        arr = np.asarray(data, dtype=DTYPE)
        if finite_checks and not np.isfinite(arr).all():
            raise NonFiniteError("tensor created from non-finite data")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self):
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.data.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data)

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = g.astype(DTYPE, copy=True)
        else:
            self.grad = self.grad + g.astype(DTYPE, copy=False)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # Convenience arithmetic; everything routes through the taped ops below.
    def __add__(self, other):
        return add(self, as_tensor(other))

    def __radd__(self, other):
        return add(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, as_tensor(other))

    def __rmul__(self, other):
        return mul(as_tensor(other), self)

    def __sub__(self, other):
        return add(self, mul(as_tensor(other), Tensor(-1.0)))

    def __rsub__(self, other):
        return add(as_tensor(other), mul(self, Tensor(-1.0)))

    def __neg__(self):
        return mul(self, Tensor(-1.0))

    def __matmul__(self, other):
        return matmul(self, as_tensor(other))


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


class _Node:
    __slots__ = ("out", "backward_fn")

    def __init__(self, out, backward_fn):
        self.out = out
        self.backward_fn = backward_fn


_tape: list[_Node] = []


def tape_size():
    return len(_tape)


def clear_tape():
    _tape.clear()


def _finalize(op_name, out_data, inputs, backward_fn):
    """Wrap an op result: finite check, requires_grad propagation, taping."""
    if finite_checks and not np.isfinite(out_data).all():
        raise NonFiniteError(f"op '{op_name}' produced non-finite values")
    out = Tensor.__new__(Tensor)
    out.data = out_data if out_data.dtype == DTYPE else out_data.astype(DTYPE)
    out.grad = None
    out.requires_grad = any(t.requires_grad for t in inputs)
    if out.requires_grad and backward_fn is not None:
        _tape.append(_Node(out, backward_fn))
    return out


def backward(loss):
    """Populate .grad on every requires_grad tensor reachable from ``loss``.

    The tape is cleared afterwards, so each recorded forward pass supports
    exactly one backward pass.
    """
    if not isinstance(loss, Tensor):
        raise TapeError("backward expects a Tensor")
    if loss.data.size != 1:
        raise TapeError(f"backward expects a scalar loss, got shape {loss.data.shape}")
    if not _tape:
        raise TapeError("backward called with an empty tape")
    loss.grad = np.ones_like(loss.data)
    try:
        for node in reversed(_tape):
            if node.out.grad is not None:
                node.backward_fn(node.out.grad)
    finally:
        clear_tape()


def _unbroadcast(g, shape):
    """Reduce gradient ``g`` back to ``shape`` after numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _require_same_tail(op, a, b):
    try:
        np.broadcast_shapes(a.data.shape, b.data.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.data.shape} and {b.data.shape} do not broadcast") from None


# ---------------------------------------------------------------------------
# elementwise / linear algebra ops


def add(a, b):
    _require_same_tail("add", a, b)
    out_data = a.data + b.data

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.data.shape))

    return _finalize("add", out_data, (a, b), bw)


def mul(a, b):
    _require_same_tail("mul", a, b)
    out_data = a.data * b.data

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.data.shape))

    return _finalize("mul", out_data, (a, b), bw)


def matmul(a, b):
    """Matrix product with numpy stacking semantics (2-D or batched N-D)."""
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError(f"matmul: operands must be >=2-D, got {a.data.shape} @ {b.data.shape}")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(f"matmul: inner dims differ, {a.data.shape} @ {b.data.shape}")
    out_data = np.matmul(a.data, b.data)

    def bw(g):
        if a.requires_grad:
            ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
            a._accumulate(_unbroadcast(ga, a.data.shape))
        if b.requires_grad:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
            b._accumulate(_unbroadcast(gb, b.data.shape))

    return _finalize("matmul", out_data, (a, b), bw)


def relu(x):
    out_data = np.maximum(x.data, 0)

    def bw(g):
        if x.requires_grad:
            x._accumulate(g * (x.data > 0))

    return _finalize("relu", out_data, (x,), bw)


def log(x):
    with np.errstate(divide="ignore", invalid="ignore"):
        out_data = np.log(x.data)

    def bw(g):
        if x.requires_grad:
            x._accumulate(g / x.data)

    return _finalize("log", out_data, (x,), bw)


def reshape(x, shape):
    out_data = x.data.reshape(shape)

    def bw(g):
        if x.requires_grad:
            x._accumulate(g.reshape(x.data.shape))

    return _finalize("reshape", out_data, (x,), bw)


def _norm_axis(axis, ndim):
    if axis is None:
        return None
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum_(x, axis=None, keepdims=False):
    axis = _norm_axis(axis, x.data.ndim)
    out_data = x.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if x.requires_grad:
            gg = g
            if not keepdims and axis is not None:
                gg = np.expand_dims(gg, axis)
            elif axis is None and not keepdims:
                gg = np.asarray(gg).reshape((1,) * x.data.ndim)
            x._accumulate(np.broadcast_to(gg, x.data.shape))

    return _finalize("sum", np.asarray(out_data), (x,), bw)


def mean(x, axis=None, keepdims=False):
    axis = _norm_axis(axis, x.data.ndim)
    if axis is None:
        count = x.data.size
    else:
        count = int(np.prod([x.data.shape[a] for a in axis]))
    out_data = x.data.mean(axis=axis, keepdims=keepdims, dtype=DTYPE)

    def bw(g):
        if x.requires_grad:
            gg = g / DTYPE(count)
            if not keepdims and axis is not None:
                gg = np.expand_dims(gg, axis)
            elif axis is None and not keepdims:
                gg = np.asarray(gg).reshape((1,) * x.data.ndim)
            x._accumulate(np.broadcast_to(gg, x.data.shape))

    return _finalize("mean", np.asarray(out_data), (x,), bw)


def softmax(x, axis=-1):
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        if x.requires_grad:
            s = out_data
            dot = (g * s).sum(axis=axis, keepdims=True)
            x._accumulate(s * (g - dot))

    return _finalize("softmax", out_data, (x,), bw)


def log_softmax(x, axis=-1):
    z = x.data - x.data.max(axis=axis, keepdims=True)
    out_data = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))

    def bw(g):
        if x.requires_grad:
            soft = np.exp(out_data)
            x._accumulate(g - soft * g.sum(axis=axis, keepdims=True))

    return _finalize("log_softmax", out_data, (x,), bw)


def cross_entropy(logits, labels):
    """Mean negative log-likelihood of integer ``labels`` under ``logits``."""
    labels = np.asarray(labels)
    if logits.data.ndim != 2:
        raise ShapeError(f"cross_entropy: logits must be 2-D, got {logits.data.shape}")
    n, k = logits.data.shape
    if labels.shape != (n,):
        raise ShapeError(f"cross_entropy: labels shape {labels.shape} vs batch {n}")
    if labels.min() < 0 or labels.max() >= k:
        raise ShapeError(f"cross_entropy: labels outside [0, {k})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    nll = (lse[:, 0] - z[np.arange(n), labels]).mean(dtype=DTYPE)

    def bw(g):
        if logits.requires_grad:
            soft = np.exp(z - lse)
            soft[np.arange(n), labels] -= 1.0
            logits._accumulate(g * soft / DTYPE(n))

    return _finalize("cross_entropy", np.asarray(nll, dtype=DTYPE), (logits,), bw)


def l2_norm_sq(x, axis=None, keepdims=False):
    axis_n = _norm_axis(axis, x.data.ndim)
    out_data = (x.data * x.data).sum(axis=axis_n, keepdims=keepdims)

    def bw(g):
        if x.requires_grad:
            gg = g
            if not keepdims and axis_n is not None:
                gg = np.expand_dims(gg, axis_n)
            elif axis_n is None and not keepdims:
                gg = np.asarray(gg).reshape((1,) * x.data.ndim)
            x._accumulate(2.0 * x.data * gg)

    return _finalize("l2_norm_sq", np.asarray(out_data), (x,), bw)


def _extreme(op_name, x, axis, keepdims, fn, argfn):
    axis_n = _norm_axis(axis, x.data.ndim)
    if axis_n is not None and len(axis_n) != 1:
        raise ShapeError(f"{op_name}: a single axis or None is supported")
    out_data = fn(x.data, axis=axis_n[0] if axis_n else None, keepdims=keepdims)

    def bw(g):
        if not x.requires_grad:
            return
        if axis_n is None:
            mask = np.zeros_like(x.data)
            mask.flat[argfn(x.data)] = 1.0
            x._accumulate(mask * g)
        else:
            ax = axis_n[0]
            idx = argfn(x.data, axis=ax)
            mask = np.zeros_like(x.data)
            np.put_along_axis(mask, np.expand_dims(idx, ax), 1.0, axis=ax)
            gg = g if keepdims else np.expand_dims(g, ax)
            x._accumulate(mask * gg)

    return _finalize(op_name, np.asarray(out_data), (x,), bw)


def max_(x, axis=None, keepdims=False):
    """Max reduction; gradient flows to the first maximal element."""
    return _extreme("max", x, axis, keepdims, np.max, np.argmax)


def min_(x, axis=None, keepdims=False):
    return _extreme("min", x, axis, keepdims, np.min, np.argmin)


def clip(x, lo=None, hi=None):
    """Clamp values to [lo, hi]; gradient passes where lo <= x <= hi."""
    if lo is not None and hi is not None and lo > hi:
        raise ShapeError(f"clip: lo={lo} > hi={hi}")
    out_data = np.clip(x.data, lo, hi)

    def bw(g):
        if x.requires_grad:
            mask = np.ones_like(x.data)
            if lo is not None:
                mask *= x.data >= lo
            if hi is not None:
                mask *= x.data <= hi
            x._accumulate(g * mask)

    return _finalize("clip", out_data, (x,), bw)


def concat(tensors, axis=0):
    if not tensors:
        raise ShapeError("concat: empty tensor list")
    axis = axis % tensors[0].data.ndim
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bw(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                t._accumulate(g[tuple(sl)])

    return _finalize("concat", out_data, tuple(tensors), bw)


def slice_(x, key=None, axis=None, indices=None):
    """Basic slicing via ``key`` (tuple of slices) or gather via axis+indices.

    The gather form takes an integer index array along one axis; its gradient
    scatter-adds, so repeated indices are handled correctly.
    """
    if (key is None) == (indices is None):
        raise ShapeError("slice: pass either key= or (axis=, indices=)")
    if key is not None:
        out_data = x.data[key]

        def bw(g):
            if x.requires_grad:
                gx = np.zeros_like(x.data)
                gx[key] = g
                x._accumulate(gx)

        return _finalize("slice", np.ascontiguousarray(out_data), (x,), bw)

    idx = np.asarray(indices)
    if idx.ndim != 1:
        raise ShapeError("slice: gather indices must be 1-D")
    ax = axis % x.data.ndim
    if idx.size and (idx.min() < 0 or idx.max() >= x.data.shape[ax]):
        raise ShapeError(f"slice: gather indices out of range for axis {ax} of {x.data.shape}")
    out_data = np.take(x.data, idx, axis=ax)

    def bw(g):
        if not x.requires_grad:
            return
        gx = np.zeros_like(x.data)
        if idx.size == np.unique(idx).size:
            sl = [slice(None)] * x.data.ndim
            sl[ax] = idx
            gx[tuple(sl)] = g
        else:
            np.add.at(gx, tuple([slice(None)] * ax + [idx]), g)
        x._accumulate(gx)

    return _finalize("slice", out_data, (x,), bw)


# ---------------------------------------------------------------------------
# convolution


def _resolve_pad(padding, k):
    if padding == "valid":
        return 0
    if padding == "same":
        if k % 2 == 0:
            raise ShapeError("conv2d: 'same' padding needs an odd kernel")
        return (k - 1) // 2
    if isinstance(padding, int) and padding >= 0:
        return padding
    raise ShapeError(f"conv2d: bad padding {padding!r}")


def _im2col(x, k, stride, pad):
    n, c, h, w = x.shape
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho = (h + 2 * pad - k) // stride + 1
    wo = (w + 2 * pad - k) // stride + 1
    cols = np.empty((n, c, k, k, ho, wo), dtype=x.dtype)
    for ki in range(k):
        for kj in range(k):
            cols[:, :, ki, kj] = x[:, :, ki : ki + ho * stride : stride, kj : kj + wo * stride : stride]
    return cols, ho, wo


def _col2im(gcols, x_shape, k, stride, pad):
    n, c, h, w = x_shape
    gx = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=gcols.dtype)
    ho, wo = gcols.shape[4], gcols.shape[5]
    for ki in range(k):
        for kj in range(k):
            gx[:, :, ki : ki + ho * stride : stride, kj : kj + wo * stride : stride] += gcols[:, :, ki, kj]
    if pad:
        gx = gx[:, :, pad : pad + h, pad : pad + w]
    return gx


def grouped_conv2d(x, w, stride=1, padding="valid", groups=1):
    """2-D cross-correlation, NCHW inputs, OIHW weights, channel groups."""
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError(f"conv2d: need 4-D x and w, got {x.data.shape}, {w.data.shape}")
    n, c, h, wd = x.data.shape
    o, cg, kh, kw = w.data.shape
    if kh != kw:
        raise ShapeError("conv2d: only square kernels supported")
    if c % groups or o % groups:
        raise ShapeError(f"conv2d: channels {c}/{o} not divisible by groups={groups}")
    if cg != c // groups:
        raise ShapeError(f"conv2d: weight expects {cg} in-channels per group, input has {c // groups}")
    pad = _resolve_pad(padding, kh)
    if h + 2 * pad < kh or wd + 2 * pad < kh:
        raise ShapeError(f"conv2d: kernel {kh} larger than padded input {x.data.shape}")

    cols, ho, wo = _im2col(x.data, kh, stride, pad)
    ckk = cg * kh * kw
    cols_g = cols.reshape(n, groups, ckk, ho * wo)
    w_g = w.data.reshape(groups, o // groups, ckk)
    out = np.matmul(w_g, cols_g)  # (n, groups, o/g, ho*wo)
    out_data = out.reshape(n, o, ho, wo)

    def bw(g):
        gg = g.reshape(n, groups, o // groups, ho * wo)
        if w.requires_grad:
            gw = np.einsum("ngol,ngcl->goc", gg, cols_g, optimize=True)
            w._accumulate(gw.reshape(o, cg, kh, kw))
        if x.requires_grad:
            gcols = np.matmul(np.swapaxes(w_g, -1, -2), gg)
            gcols = gcols.reshape(n, c, kh, kw, ho, wo)
            x._accumulate(_col2im(gcols, x.data.shape, kh, stride, pad))

    return _finalize("conv2d", out_data, (x, w), bw)


def conv2d(x, w, stride=1, padding="valid"):
    return grouped_conv2d(x, w, stride=stride, padding=padding, groups=1)


# ---------------------------------------------------------------------------
# generic dispatch (op registry mirrors the callable surface)

_OPS = {
    "matmul": matmul,
    "conv2d": conv2d,
    "grouped_conv2d": grouped_conv2d,
    "add": add,
    "mul": mul,
    "relu": relu,
    "reshape": reshape,
    "mean": mean,
    "sum": sum_,
    "softmax": softmax,
    "log_softmax": log_softmax,
    "cross_entropy": cross_entropy,
    "l2_norm_sq": l2_norm_sq,
    "max": max_,
    "min": min_,
    "clip": clip,
    "concat": concat,
    "slice": slice_,
    "log": log,
}


def forward_op(op_name, inputs, **attrs):
    """Dispatch an op by name; ``inputs`` is a list of Tensors."""
    if op_name not in _OPS:
        raise ShapeError(f"unknown op '{op_name}'")
    fn = _OPS[op_name]
    if op_name == "concat":
        return fn(list(inputs), **attrs)
    return fn(*inputs, **attrs)


# ---------------------------------------------------------------------------
# seeded sampling


def _label_key(label):
    return zlib.crc32(label.encode("utf-8"))


class RngState:
    """Deterministic sample stream: same seed + same call sequence = same draws.

    ``child(label)`` derives an independent, reproducible stream so that
    pipeline stages cannot perturb each other's randomness.
    """

    def __init__(self, seed, _spawn_key=()):
        self.seed = int(seed)
        self._spawn_key = tuple(_spawn_key)
        seq = np.random.SeedSequence(entropy=self.seed, spawn_key=self._spawn_key)
        self._gen = np.random.Generator(np.random.PCG64(seq))

    def child(self, label):
        return RngState(self.seed, self._spawn_key + (_label_key(label),))

    def clone(self):
        other = RngState(self.seed, self._spawn_key)
        other._gen.bit_generator.state = self._gen.bit_generator.state
        return other

    def uniform(self, shape, lo=0.0, hi=1.0):
        if lo > hi:
            raise ValueError(f"uniform: lo={lo} > hi={hi}")
        u = self._gen.random(size=shape, dtype=DTYPE)
        out = DTYPE(lo) + DTYPE(hi - lo) * u
        if lo < hi:
            # float32 rounding can land exactly on hi; keep the interval half open
            out = np.minimum(out, np.nextafter(DTYPE(hi), DTYPE(lo)))
        return out

    def rademacher(self, shape):
        bits = self._gen.integers(0, 2, size=shape)
        return (2 * bits - 1).astype(DTYPE)

    def integers(self, lo, hi, size=None):
        return self._gen.integers(lo, hi, size=size)

    def permutation(self, n):
        return self._gen.permutation(n)

    def normal(self, shape, std=1.0):
        return self._gen.standard_normal(size=shape, dtype=DTYPE) * DTYPE(std)


def sample_uniform(rng, shape, lo, hi):
    """Tensor of i.i.d. draws from U[lo, hi)."""
    return Tensor(rng.uniform(shape, lo, hi))


def sample_rademacher(rng, shape):
    """Tensor of i.i.d. +-1 draws."""
    return Tensor(rng.rademacher(shape))
