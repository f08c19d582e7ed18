"""Dense-tensor reverse-mode autodiff on numpy arrays.

Execution is define-by-run: every differentiable op appends a record to a
thread-local tape, and ``backward`` replays the tape in reverse, accumulating
gradients into leaf tensors. The tape is consumed by ``backward`` and rebuilt
on the next forward, so there is no graph caching.

Float32 is the working precision; float64 tensors exist for gradient
verification and propagate through every op unchanged.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager

import numpy as np
from scipy.special import erf, expit

DEFAULT_DTYPE = np.float32

_SQRT2 = float(np.sqrt(2.0))
_INV_SQRT_2PI = float(1.0 / np.sqrt(2.0 * np.pi))


class AutogradError(RuntimeError):
    """Base class for tensor-engine failures."""


class ShapeError(AutogradError):
    """Operands do not conform; message names the primitive and both shapes."""


class NumericError(AutogradError):
    """An op produced non-finite values."""


# --------------------------------------------------------------------------
# thread-local engine state: active tape, grad mode, MAC counter
# --------------------------------------------------------------------------

_state = threading.local()


def _st():
    if not hasattr(_state, "grad_enabled"):
        _state.tape = None
        _state.grad_enabled = True
        _state.mac_counter = None
        _state.finite_checks = True
    return _state


class Tape:
    """Wengert list: op records in execution order.

    Execution order is a topological order by construction (an op can only
    consume already-materialized tensors), and the reverse pass walks the list
    once back-to-front.
    """

    __slots__ = ("records", "replayed")

    def __init__(self):
        self.records = []
        self.replayed = 0


class _Record:
    __slots__ = ("out", "inputs", "fn", "tape")

    def __init__(self, out, inputs, fn, tape):
        self.out = out
        self.inputs = inputs
        self.fn = fn
        self.tape = tape


def _active_tape() -> Tape:
    st = _st()
    if st.tape is None:
        st.tape = Tape()
    return st.tape


def current_tape() -> Tape | None:
    """The tape currently accumulating records, if any (for instrumentation)."""
    return _st().tape


def clear_tape() -> None:
    _st().tape = None


@contextmanager
def no_grad():
    """Disable recording; forwards inside run tape-free."""
    st = _st()
    prev = st.grad_enabled
    st.grad_enabled = False
    try:
        yield
    finally:
        st.grad_enabled = prev


def grad_enabled() -> bool:
    return _st().grad_enabled


@contextmanager
def finite_checks(enabled: bool):
    """Toggle the per-op non-finite output check (default on)."""
    st = _st()
    prev = st.finite_checks
    st.finite_checks = enabled
    try:
        yield
    finally:
        st.finite_checks = prev


class MacCounter:
    """Counts scalar multiply-accumulates executed by the arithmetic kernels
    (matmul / batched matmul / conv) while active. Elementwise ops, bias adds,
    reductions and normalizations do not count."""

    __slots__ = ("total",)

    def __init__(self):
        self.total = 0


@contextmanager
def count_macs():
    st = _st()
    prev = st.mac_counter
    counter = MacCounter()
    st.mac_counter = counter
    try:
        yield counter
    finally:
        st.mac_counter = prev


def _add_macs(n: int) -> None:
    c = _st().mac_counter
    if c is not None:
        c.total += int(n)


# --------------------------------------------------------------------------
# Tensor
# --------------------------------------------------------------------------


class Tensor:
    """Dense n-d value with an optional gradient buffer.

    Tensors are value-semantic: ops never mutate operand data, so instances
    may be shared across threads. Only the training loop writes ``data`` (via
    the optimizer) and each tape lives on a single thread.
    """

    __slots__ = ("data", "grad", "requires_grad", "_record")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        keep = isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64)
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif not keep:
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._record = None

    # -- introspection -----------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"

    # -- operator sugar ------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, _as_tensor(other, self.dtype))

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return mul_scalar(self, -1.0)


def _as_tensor(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _make(out_data, inputs, fn, name: str) -> Tensor:
    """Wrap an op result, recording it on the tape when gradients are wanted."""
    st = _st()
    if st.finite_checks and not np.all(np.isfinite(out_data)):
        raise NumericError(f"{name}: produced non-finite values")
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.grad = None
    out._record = None
    out.requires_grad = st.grad_enabled and any(t.requires_grad for t in inputs)
    if out.requires_grad:
        tape = _active_tape()
        rec = _Record(out, inputs, fn, tape)
        out._record = rec
        tape.records.append(rec)
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=t.data.dtype)  # owned copy
    else:
        t.grad += g


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum g down to `shape` (the inverse of numpy broadcasting)."""
    if g.shape == tuple(shape):
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def backward(loss: Tensor) -> None:
    """Reverse pass from a scalar loss over the active tape.

    Gradients accumulate additively into every reachable tensor with
    ``requires_grad``. The tape is consumed: a new forward starts a new tape.
    """
    if loss.shape != ():
        raise AutogradError(f"backward: loss must be a scalar tensor, got shape {loss.shape}")
    st = _st()
    tape = st.tape
    if loss._record is None or tape is None or loss._record.tape is not tape:
        raise AutogradError("backward: loss is not on the active tape")
    loss.grad = np.ones((), dtype=loss.data.dtype)
    for rec in reversed(tape.records):
        if rec.out.grad is None:
            continue
        rec.fn(rec.out.grad)
        tape.replayed += 1
    st.tape = None


# --------------------------------------------------------------------------
# primitives
# --------------------------------------------------------------------------


def add(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a.dtype)
    try:
        out = a.data + b.data
    except ValueError:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} do not broadcast") from None

    def fn(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(g, b.shape))

    return _make(out, (a, b), fn, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = a.data - b.data
    except ValueError:
        raise ShapeError(f"sub: shapes {a.shape} and {b.shape} do not broadcast") from None

    def fn(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(-g, b.shape))

    return _make(out, (a, b), fn, "sub")


def mul(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a.dtype)
    try:
        out = a.data * b.data
    except ValueError:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} do not broadcast") from None
    ad, bd = a.data, b.data

    def fn(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g * bd, a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g * ad, b.shape))

    return _make(out, (a, b), fn, "mul")


def add_scalar(a: Tensor, s: float) -> Tensor:
    out = a.data + a.data.dtype.type(s)

    def fn(g):
        _accum(a, g)

    return _make(out, (a,), fn, "add_scalar")


def mul_scalar(a: Tensor, s: float) -> Tensor:
    s = a.data.dtype.type(s)
    out = a.data * s

    def fn(g):
        _accum(a, g * s)

    return _make(out, (a,), fn, "mul_scalar")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2-d matrix product (n,m) @ (m,p)."""
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not conform")
    n, m = a.shape
    p = b.shape[1]
    _add_macs(n * m * p)
    out = a.data @ b.data
    ad, bd = a.data, b.data

    def fn(g):
        if a.requires_grad:
            _accum(a, g @ bd.T)
        if b.requires_grad:
            _accum(b, ad.T @ g)

    return _make(out, (a, b), fn, "matmul")


def bmm(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product over broadcast leading dims: (..., n, m) @ (..., m, p).

    A 2-d right operand is applied as one flattened GEMM rather than a loop of
    per-batch products.
    """
    if a.data.ndim < 2 or b.data.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"bmm: shapes {a.shape} and {b.shape} do not conform")
    n, m = a.shape[-2], a.shape[-1]
    p = b.shape[-1]
    ad, bd = a.data, b.data

    if b.data.ndim == 2 and a.data.ndim > 2:
        lead = a.shape[:-1]
        flat = ad.reshape(-1, m)
        out = (flat @ bd).reshape(lead + (p,))
        _add_macs(flat.shape[0] * m * p)

        def fn(g):
            gf = g.reshape(-1, p)
            if a.requires_grad:
                _accum(a, (gf @ bd.T).reshape(a.shape))
            if b.requires_grad:
                _accum(b, flat.T @ gf)

        return _make(out, (a, b), fn, "bmm")

    try:
        out = np.matmul(ad, bd)
    except ValueError:
        raise ShapeError(f"bmm: shapes {a.shape} and {b.shape} do not broadcast") from None
    batch = int(np.prod(out.shape[:-2], dtype=np.int64)) if out.ndim > 2 else 1
    _add_macs(batch * n * m * p)

    def fn(g):
        if a.requires_grad:
            ga = np.matmul(g, np.swapaxes(bd, -1, -2))
            _accum(a, _unbroadcast(ga, a.shape))
        if b.requires_grad:
            gb = np.matmul(np.swapaxes(ad, -1, -2), g)
            _accum(b, _unbroadcast(gb, b.shape))

    return _make(out, (a, b), fn, "bmm")


def _conv_windows(xpad: np.ndarray, k: int, stride: int, out_len: int) -> np.ndarray:
    # (B, C, L, k) strided view over the padded input
    win = np.lib.stride_tricks.sliding_window_view(xpad, k, axis=2)
    return win[:, :, ::stride, :][:, :, :out_len, :]


def conv1d(x: Tensor, w: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """1-d convolution: x (B, C_in, T), w (C_out, C_in, k)."""
    if x.data.ndim != 3 or w.data.ndim != 3 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv1d: shapes {x.shape} and {w.shape} do not conform")
    bsz, cin, t = x.shape
    cout, _, k = w.shape
    out_len = (t + 2 * padding - k) // stride + 1
    if out_len < 1:
        raise ShapeError(f"conv1d: shapes {x.shape} and {w.shape} give empty output (stride={stride}, padding={padding})")
    xpad = np.pad(x.data, ((0, 0), (0, 0), (padding, padding))) if padding else x.data
    win = _conv_windows(xpad, k, stride, out_len)
    _add_macs(bsz * cout * cin * k * out_len)
    out = np.einsum("ock,bclk->bol", w.data, win, optimize=True)
    wd = w.data

    def fn(g):
        if w.requires_grad:
            _accum(w, np.einsum("bol,bclk->ock", g, win, optimize=True))
        if x.requires_grad:
            gxpad = np.zeros_like(xpad)
            for j in range(k):
                gxpad[:, :, j : j + stride * out_len : stride] += np.einsum(
                    "oc,bol->bcl", wd[:, :, j], g, optimize=True
                )
            _accum(x, gxpad[:, :, padding : padding + t] if padding else gxpad)

    return _make(out, (x, w), fn, "conv1d")


def depthwise_conv1d(x: Tensor, w: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Per-channel 1-d convolution: x (B, C, T), w (C, k)."""
    if x.data.ndim != 3 or w.data.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ShapeError(f"depthwise_conv1d: shapes {x.shape} and {w.shape} do not conform")
    bsz, c, t = x.shape
    k = w.shape[1]
    out_len = (t + 2 * padding - k) // stride + 1
    if out_len < 1:
        raise ShapeError(f"depthwise_conv1d: shapes {x.shape} and {w.shape} give empty output")
    xpad = np.pad(x.data, ((0, 0), (0, 0), (padding, padding))) if padding else x.data
    win = _conv_windows(xpad, k, stride, out_len)
    _add_macs(bsz * c * k * out_len)
    out = np.einsum("ck,bclk->bcl", w.data, win, optimize=True)
    wd = w.data

    def fn(g):
        if w.requires_grad:
            _accum(w, np.einsum("bcl,bclk->ck", g, win, optimize=True))
        if x.requires_grad:
            gxpad = np.zeros_like(xpad)
            for j in range(k):
                gxpad[:, :, j : j + stride * out_len : stride] += g * wd[None, :, j, None]
            _accum(x, gxpad[:, :, padding : padding + t] if padding else gxpad)

    return _make(out, (x, w), fn, "depthwise_conv1d")


def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.data, 0)
    pos = a.data > 0

    def fn(g):
        _accum(a, g * pos)

    return _make(out, (a,), fn, "relu")


def gelu(a: Tensor) -> Tensor:
    """Exact (erf) GELU: x * Phi(x)."""
    x = a.data
    phi = 0.5 * (1.0 + erf(x / _SQRT2))
    out = x * phi

    def fn(g):
        pdf = x.dtype.type(_INV_SQRT_2PI) * np.exp(-0.5 * x * x)
        _accum(a, g * (phi + x * pdf))

    return _make(out, (a,), fn, "gelu")


def sigmoid(a: Tensor) -> Tensor:
    out = expit(a.data)

    def fn(g):
        _accum(a, g * out * (1.0 - out))

    return _make(out, (a,), fn, "sigmoid")


def softmax(a: Tensor) -> Tensor:
    """Softmax along the last axis."""
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def fn(g):
        gs = g * out
        _accum(a, gs - out * gs.sum(axis=-1, keepdims=True))

    return _make(out, (a,), fn, "softmax")


def layer_norm(a: Tensor, scale: Tensor, offset: Tensor, eps: float = 1e-5) -> Tensor:
    """Layer normalization over the last axis with affine scale/offset."""
    d = a.shape[-1]
    if scale.shape != (d,) or offset.shape != (d,):
        raise ShapeError(f"layer_norm: shapes {a.shape} and {scale.shape} do not conform")
    mu = a.data.mean(axis=-1, keepdims=True)
    xc = a.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + a.data.dtype.type(eps))
    xhat = xc * inv
    out = xhat * scale.data + offset.data
    sd = scale.data

    def fn(g):
        if scale.requires_grad:
            _accum(scale, (g * xhat).reshape(-1, d).sum(axis=0))
        if offset.requires_grad:
            _accum(offset, g.reshape(-1, d).sum(axis=0))
        if a.requires_grad:
            gx = g * sd
            ga = inv * (gx - gx.mean(axis=-1, keepdims=True) - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
            _accum(a, ga)

    return _make(out, (a, scale, offset), fn, "layer_norm")


def mean(a: Tensor, axis: int | None = None) -> Tensor:
    out = a.data.mean(axis=axis)
    n = a.data.size if axis is None else a.shape[axis]

    def fn(g):
        if axis is None:
            _accum(a, np.full_like(a.data, g / n))
        else:
            _accum(a, np.broadcast_to(np.expand_dims(g, axis) / n, a.shape).copy())

    return _make(out, (a,), fn, "mean")


def sum_(a: Tensor, axis: int | None = None) -> Tensor:
    out = a.data.sum(axis=axis)

    def fn(g):
        if axis is None:
            _accum(a, np.full_like(a.data, g))
        else:
            _accum(a, np.broadcast_to(np.expand_dims(g, axis), a.shape).copy())

    return _make(out, (a,), fn, "sum")


def transpose(a: Tensor, axes=None) -> Tensor:
    out = np.transpose(a.data, axes)
    inv = None if axes is None else np.argsort(axes)

    def fn(g):
        _accum(a, np.transpose(g, inv))

    return _make(out, (a,), fn, "transpose")


def reshape(a: Tensor, shape) -> Tensor:
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: shapes {a.shape} and {tuple(shape)} are incompatible") from None
    src = a.shape

    def fn(g):
        _accum(a, g.reshape(src))

    return _make(out, (a,), fn, "reshape")


def slice_(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    """Contiguous range along one axis."""
    if not (0 <= start <= stop <= a.shape[axis]):
        raise ShapeError(f"slice: shapes {a.shape} and [{start}:{stop}] on axis {axis} do not conform")
    key = [slice(None)] * a.data.ndim
    key[axis] = slice(start, stop)
    key = tuple(key)
    out = a.data[key]

    def fn(g):
        buf = np.zeros_like(a.data)
        buf[key] = g
        _accum(a, buf)

    return _make(out, (a,), fn, "slice")


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = list(tensors)
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: shapes {[t.shape for t in tensors]} do not conform on axis {axis}") from None
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def fn(g):
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            _accum(t, piece)

    return _make(out, tuple(tensors), fn, "concat")


def gather_rows(a: Tensor, indices) -> Tensor:
    """Select rows (axis 0); duplicate indices accumulate gradient."""
    idx = np.asarray(indices, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[0]):
        raise ShapeError(f"gather_rows: shapes {a.shape} and index range [{idx.min()},{idx.max()}] do not conform")
    out = a.data[idx]

    def fn(g):
        buf = np.zeros_like(a.data)
        np.add.at(buf, idx, g)
        _accum(a, buf)

    return _make(out, (a,), fn, "gather_rows")


def sqrt(a: Tensor) -> Tensor:
    with np.errstate(invalid="ignore"):
        out = np.sqrt(a.data)

    def fn(g):
        _accum(a, g * (0.5 / out))

    return _make(out, (a,), fn, "sqrt")


def ste_round(a: Tensor) -> Tensor:
    """Hard threshold at 0.5 (ties round up) with a straight-through backward.

    Forward emits 1.0 where x >= 0.5 else 0.0; the backward passes the
    upstream gradient through unchanged (identity Jacobian).
    """
    out = (a.data >= 0.5).astype(a.data.dtype)

    def fn(g):
        _accum(a, g)

    return _make(out, (a,), fn, "ste_round")


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean softmax cross-entropy; logits (B, K), integer labels (B,)."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.data.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"cross_entropy: shapes {logits.shape} and {labels.shape} do not conform")
    bsz, k = logits.shape
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"cross_entropy: label {int(labels.max())} out of range for {k} classes")
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    probs = e / e.sum(axis=1, keepdims=True)
    nll = np.log(e.sum(axis=1)) - shifted[np.arange(bsz), labels]
    out = np.asarray(nll.mean(), dtype=logits.data.dtype)

    def fn(g):
        gl = probs.copy()
        gl[np.arange(bsz), labels] -= 1.0
        _accum(logits, g * gl / bsz)

    return _make(out, (logits,), fn, "cross_entropy")


def bce_with_logits(logits: Tensor, targets) -> Tensor:
    """Mean binary cross-entropy from logits; targets in [0, 1], same shape."""
    t = np.asarray(targets, dtype=logits.data.dtype)
    if t.shape != logits.shape:
        raise ShapeError(f"bce_with_logits: shapes {logits.shape} and {t.shape} do not conform")
    x = logits.data
    loss = np.maximum(x, 0) - x * t + np.log1p(np.exp(-np.abs(x)))
    out = np.asarray(loss.mean(), dtype=x.dtype)
    n = x.size

    def fn(g):
        _accum(logits, g * (expit(x) - t) / n)

    return _make(out, (logits,), fn, "bce_with_logits")
