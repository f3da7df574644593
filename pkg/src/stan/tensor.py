"""Dense float64 tensors with reverse-mode autodiff on an explicit tape.

Define-by-run: while a ``record()`` context is open, every op that touches a
tensor with ``requires_grad`` appends a backward closure to the active tape.
``Tape.backward(loss)`` replays the closures in reverse recording order, which
is a valid topological order by construction, visiting each node once.

Everything is float64 and row-major. Ops never mutate their inputs; a tensor
only changes through its ``grad`` buffer during a backward pass, so read-only
sharing across threads is safe. Tapes are thread-local.

``matmul`` delegates to numpy's BLAS: summation order is then
implementation-defined but fixed for a given build, which preserves the
run-to-run bitwise determinism the rest of the stack relies on.
"""

import threading

import numpy as np
from scipy.special import expit

from .errors import ContractError, DimensionError
from . import kernels


class Tensor:
    """A dense float64 array plus an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad=False):
        self.data = np.ascontiguousarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


class Tape:
    """Ordered record of differentiable ops for one forward pass."""

    def __init__(self):
        self._nodes = []  # (out_tensor, backward_fn), recording order
        self._leaf_ids = set()
        self._leaves = []

    def _record(self, out, fn, inputs):
        self._nodes.append((out, fn))
        for t in inputs:
            if t.requires_grad and id(t) not in self._leaf_ids:
                self._leaf_ids.add(id(t))
                self._leaves.append(t)

    def backward(self, loss):
        """Populate ``grad`` on every requires_grad tensor reachable from loss.

        Tensors that entered the tape but do not influence the loss receive
        zero gradients.
        """
        if loss.data.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.data.shape}")
        for t in self._leaves:
            if t.grad is None:
                t.grad = np.zeros_like(t.data)
        if loss.grad is None:
            loss.grad = np.ones_like(loss.data)
        else:
            loss.grad = loss.grad + np.ones_like(loss.data)
        for out, fn in reversed(self._nodes):
            if out.grad is not None:
                fn(out.grad)


_tls = threading.local()


def _active_tape():
    return getattr(_tls, "tape", None)


class record:
    """Context manager that opens a fresh tape for one forward pass."""

    def __enter__(self):
        self._prev = _active_tape()
        _tls.tape = Tape()
        return _tls.tape

    def __exit__(self, *exc):
        _tls.tape = self._prev
        return False


def _emit(data, fn, inputs):
    tape = _active_tape()
    grad_needed = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=grad_needed)
    if grad_needed:
        tape._record(out, fn, inputs)
    return out


def _acc(t, g):
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------


def matmul(a, b):
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise DimensionError(f"matmul shapes incompatible: {a.data.shape} x {b.data.shape}")
    out_data = a.data @ b.data

    def fn(g):
        if a.requires_grad:
            _acc(a, g @ b.data.T)
        if b.requires_grad:
            _acc(b, a.data.T @ g)

    return _emit(out_data, fn, (a, b))


def transpose(a):
    def fn(g):
        if a.requires_grad:
            _acc(a, g.T)

    return _emit(a.data.T, fn, (a,))


def affine(x, w, b):
    """x @ w + b with b broadcast over rows."""
    if x.data.ndim != 2 or x.data.shape[1] != w.data.shape[0] or b.data.shape != (w.data.shape[1],):
        raise DimensionError(
            f"affine shapes incompatible: x {x.data.shape}, w {w.data.shape}, b {b.data.shape}"
        )
    out_data = x.data @ w.data + b.data

    def fn(g):
        if x.requires_grad:
            _acc(x, g @ w.data.T)
        if w.requires_grad:
            _acc(w, x.data.T @ g)
        if b.requires_grad:
            _acc(b, g.sum(axis=0))

    return _emit(out_data, fn, (x, w, b))


def add(a, b):
    if a.data.shape != b.data.shape:
        raise DimensionError(f"add shapes differ: {a.data.shape} vs {b.data.shape}")

    def fn(g):
        if a.requires_grad:
            _acc(a, g)
        if b.requires_grad:
            _acc(b, g)

    return _emit(a.data + b.data, fn, (a, b))


def mul(a, b):
    if a.data.shape != b.data.shape:
        raise DimensionError(f"mul shapes differ: {a.data.shape} vs {b.data.shape}")

    def fn(g):
        if a.requires_grad:
            _acc(a, g * b.data)
        if b.requires_grad:
            _acc(b, g * a.data)

    return _emit(a.data * b.data, fn, (a, b))


def scale(x, s):
    s = float(s)

    def fn(g):
        if x.requires_grad:
            _acc(x, g * s)

    return _emit(x.data * s, fn, (x,))


def reshape(x, shape):
    def fn(g):
        if x.requires_grad:
            _acc(x, g.reshape(x.data.shape))

    return _emit(x.data.reshape(shape), fn, (x,))


def sum_all(x):
    def fn(g):
        if x.requires_grad:
            _acc(x, np.full_like(x.data, float(g)))

    return _emit(np.asarray(x.data.sum()), fn, (x,))


# ---------------------------------------------------------------------------
# nonlinearities and normalisation
# ---------------------------------------------------------------------------


def gelu(x):
    """Exact GELU: x * Phi(x), Phi the standard normal CDF."""
    out_data = kernels.gelu_forward(x.data)

    def fn(g):
        if x.requires_grad:
            _acc(x, kernels.gelu_grad(x.data, g))

    return _emit(out_data, fn, (x,))


def sigmoid(x):
    y = expit(x.data)

    def fn(g):
        if x.requires_grad:
            _acc(x, g * y * (1.0 - y))

    return _emit(y, fn, (x,))


def softmax_rows(m):
    """Row-wise softmax with max subtraction; each output row sums to 1."""
    z = m.data - m.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def fn(g):
        if m.requires_grad:
            _acc(m, y * (g - (g * y).sum(axis=-1, keepdims=True)))

    return _emit(y, fn, (m,))


def layer_norm(x, gamma, beta, eps=1e-5):
    """Normalise each row of x over the last dim, then scale/shift by gamma/beta."""
    d = x.data.shape[-1]
    if gamma.data.shape != (d,) or beta.data.shape != (d,):
        raise DimensionError(
            f"layer_norm affine shapes {gamma.data.shape}/{beta.data.shape} do not match last dim {d}"
        )
    if eps <= 0:
        raise ContractError("layer_norm eps must be positive")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out_data = xhat * gamma.data + beta.data

    def fn(g):
        if gamma.requires_grad:
            _acc(gamma, (g * xhat).sum(axis=tuple(range(g.ndim - 1))))
        if beta.requires_grad:
            _acc(beta, g.sum(axis=tuple(range(g.ndim - 1))))
        if x.requires_grad:
            dxhat = g * gamma.data
            term = dxhat.mean(axis=-1, keepdims=True) + xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
            _acc(x, inv * (dxhat - term))

    return _emit(out_data, fn, (x, gamma, beta))


def channel_norm(x, gamma, beta, eps=1e-5):
    """Normalise each channel map of (N,C,H,W) over its spatial extent."""
    c = x.data.shape[1]
    if gamma.data.shape != (c,) or beta.data.shape != (c,):
        raise DimensionError(f"channel_norm affine shapes do not match channels {c}")
    mu = x.data.mean(axis=(2, 3), keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=(2, 3), keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out_data = xhat * gamma.data[None, :, None, None] + beta.data[None, :, None, None]

    def fn(g):
        if gamma.requires_grad:
            _acc(gamma, (g * xhat).sum(axis=(0, 2, 3)))
        if beta.requires_grad:
            _acc(beta, g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            dxhat = g * gamma.data[None, :, None, None]
            term = dxhat.mean(axis=(2, 3), keepdims=True) + xhat * (dxhat * xhat).mean(
                axis=(2, 3), keepdims=True
            )
            _acc(x, inv * (dxhat - term))

    return _emit(out_data, fn, (x, gamma, beta))


# ---------------------------------------------------------------------------
# convolution and pooling (hot kernels live in kernels.py)
# ---------------------------------------------------------------------------


def conv2d(x, w, b, pad=1, pad_mode="zero"):
    """Same-size 2D convolution of (N,Cin,H,W) by (Cout,Cin,kh,kw).

    pad_mode "edge" replicates border pixels (useful for the first layer so a
    constant input stays constant); input gradients are only implemented for
    zero padding, which every differentiable-input call site uses.
    """
    if x.data.ndim != 4 or w.data.ndim != 4 or x.data.shape[1] != w.data.shape[1]:
        raise DimensionError(f"conv2d shapes incompatible: x {x.data.shape}, w {w.data.shape}")
    if x.requires_grad and pad_mode != "zero":
        raise ContractError("conv2d input gradients require zero padding")
    out_data = kernels.conv2d_forward(x.data, w.data, b.data, pad, pad_mode)

    def fn(g):
        if w.requires_grad or b.requires_grad:
            dw, db = kernels.conv2d_grad_w(x.data, g, w.data.shape, pad, pad_mode)
            if w.requires_grad:
                _acc(w, dw)
            if b.requires_grad:
                _acc(b, db)
        if x.requires_grad:
            _acc(x, kernels.conv2d_grad_x(g, w.data, pad))

    return _emit(out_data, fn, (x, w, b))


def tconv1d(x, w, b, pad=1):
    """Temporal convolution of (T,Cin,H,W) by (Cout,Cin,kt) along T."""
    if x.data.ndim != 4 or w.data.ndim != 3 or x.data.shape[1] != w.data.shape[1]:
        raise DimensionError(f"tconv1d shapes incompatible: x {x.data.shape}, w {w.data.shape}")
    out_data = kernels.tconv_forward(x.data, w.data, b.data, pad)

    def fn(g):
        if w.requires_grad or b.requires_grad:
            dw, db = kernels.tconv_grad_w(x.data, g, w.data.shape, pad)
            if w.requires_grad:
                _acc(w, dw)
            if b.requires_grad:
                _acc(b, db)
        if x.requires_grad:
            _acc(x, kernels.tconv_grad_x(g, w.data, pad))

    return _emit(out_data, fn, (x, w, b))


def avg_pool2d(x):
    """2x2 average pooling over the spatial dims of (N,C,H,W)."""
    n, c, h, w = x.data.shape
    if h % 2 or w % 2:
        raise DimensionError(f"avg_pool2d needs even spatial dims, got {h}x{w}")
    out_data = x.data.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))

    def fn(g):
        if x.requires_grad:
            _acc(x, np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) * 0.25)

    return _emit(out_data, fn, (x,))


def avg_pool_time(x):
    """Average pooling with window 2 over the leading time dim of (T,C,H,W)."""
    t = x.data.shape[0]
    if t % 2:
        raise DimensionError(f"avg_pool_time needs even T, got {t}")
    out_data = x.data.reshape(t // 2, 2, *x.data.shape[1:]).mean(axis=1)

    def fn(g):
        if x.requires_grad:
            _acc(x, np.repeat(g, 2, axis=0) * 0.5)

    return _emit(out_data, fn, (x,))


def global_avg_pool(x):
    """Mean over every axis of (N,C,H,W) except channels; returns (C,)."""
    n, c, h, w = x.data.shape
    out_data = x.data.mean(axis=(0, 2, 3))

    def fn(g):
        if x.requires_grad:
            _acc(x, np.broadcast_to(g[None, :, None, None] / (n * h * w), x.data.shape).copy())

    return _emit(out_data, fn, (x,))


# ---------------------------------------------------------------------------
# structural ops
# ---------------------------------------------------------------------------


def concat_rows(tensors):
    datas = [t.data for t in tensors]
    out_data = np.concatenate(datas, axis=0)
    offsets = np.cumsum([0] + [d.shape[0] for d in datas])

    def fn(g):
        for t, j0, j1 in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                _acc(t, g[j0:j1])

    return _emit(out_data, fn, tuple(tensors))


def concat_cols(tensors):
    datas = [t.data for t in tensors]
    out_data = np.concatenate(datas, axis=1)
    offsets = np.cumsum([0] + [d.shape[1] for d in datas])

    def fn(g):
        for t, j0, j1 in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                _acc(t, g[:, j0:j1])

    return _emit(out_data, fn, tuple(tensors))


def take_row(x, i):
    """Row i of a matrix as a (1,d) tensor."""

    def fn(g):
        if x.requires_grad:
            buf = np.zeros_like(x.data)
            buf[i] = g[0]
            _acc(x, buf)

    return _emit(x.data[i : i + 1].copy(), fn, (x,))


def cols(x, j0, j1):
    """Column slice [j0, j1) of a matrix."""

    def fn(g):
        if x.requires_grad:
            buf = np.zeros_like(x.data)
            buf[:, j0:j1] = g
            _acc(x, buf)

    return _emit(x.data[:, j0:j1].copy(), fn, (x,))


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def _softplus(z):
    return np.log1p(np.exp(-np.abs(z))) + np.maximum(z, 0.0)


def bce_with_logits(logits, targets):
    """Mean binary cross entropy over classes, computed from logits.

    Stable log-sum-exp form; never evaluates sigmoid of large magnitudes.
    targets is a constant 0/1 array of the same shape.
    """
    y = np.asarray(targets, dtype=np.float64).reshape(logits.data.shape)
    z = logits.data
    val = (_softplus(z) - z * y).mean()

    def fn(g):
        if logits.requires_grad:
            _acc(logits, float(g) * (expit(z) - y) / z.size)

    return _emit(np.asarray(val), fn, (logits,))


def distill_kl(student, teacher_logits, temperature):
    """Binary KL D(sigmoid(t/T) || sigmoid(s/T)) summed over classes.

    The teacher logits are a constant array: no gradient flows into them.
    """
    T = float(temperature)
    if T <= 0:
        raise ContractError("temperature must be positive")
    t = np.asarray(teacher_logits, dtype=np.float64).reshape(student.data.shape)
    s = student.data
    p = expit(t / T)
    val = (
        p * (_softplus(-s / T) - _softplus(-t / T))
        + (1.0 - p) * (_softplus(s / T) - _softplus(t / T))
    ).sum()

    def fn(g):
        if student.requires_grad:
            _acc(student, float(g) * (expit(s / T) - p) / T)

    return _emit(np.asarray(val), fn, (student,))
