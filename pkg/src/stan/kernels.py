"""Hot numeric kernels with two interchangeable backends.

The convolution, GELU and image-resize inner loops dominate runtime, so each
one has a numba ``@njit`` implementation and a vectorized pure-numpy fallback.
The backend is picked once at import from the ``STAN_KERNELS`` environment
variable (``numba`` or ``numpy``); when unset, numba is used if it imports.
``benchmarks/bench_kernels.py`` times the two paths against each other.

All kernels are float64 in / float64 out and deterministic: fixed loop order
on the numba path, fixed reduction order on the numpy path.
"""

import math
import os

import numpy as np
from scipy.special import erf as _sp_erf

try:
    from numba import njit

    _HAS_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    _HAS_NUMBA = False

    def njit(*args, **kwargs):
        def wrap(f):
            return f

        return wrap if not args or not callable(args[0]) else args[0]


_VALID_BACKENDS = ("numba", "numpy")
_env = os.environ.get("STAN_KERNELS", "").strip().lower()
if _env and _env not in _VALID_BACKENDS:
    raise ValueError(f"STAN_KERNELS must be one of {_VALID_BACKENDS}, got {_env!r}")
_BACKEND = _env or ("numba" if _HAS_NUMBA else "numpy")


def get_backend() -> str:
    return _BACKEND


def set_backend(name: str) -> None:
    """Switch kernel backend at runtime (used by tests and the benchmark)."""
    global _BACKEND
    if name not in _VALID_BACKENDS:
        raise ValueError(f"backend must be one of {_VALID_BACKENDS}, got {name!r}")
    if name == "numba" and not _HAS_NUMBA:
        raise RuntimeError("numba backend requested but numba is not importable")
    _BACKEND = name


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


# ---------------------------------------------------------------------------
# numba kernels
# ---------------------------------------------------------------------------


@njit(cache=True)
def _conv2d_fwd_nb(xp, w, b, out):
    # xp: (N, Cin, H+2p, W+2p) pre-padded, w: (Cout, Cin, kh, kw), out: (N, Cout, H, W)
    # Accumulates whole output planes; 2D views keep the inner x loop contiguous.
    n_, co_, h_, w_ = out.shape
    ci_, kh_, kw_ = w.shape[1], w.shape[2], w.shape[3]
    for n in range(n_):
        for co in range(co_):
            ov = out[n, co]
            for y in range(h_):
                for x in range(w_):
                    ov[y, x] = b[co]
            for ci in range(ci_):
                xv = xp[n, ci]
                for ky in range(kh_):
                    for kx in range(kw_):
                        wv = w[co, ci, ky, kx]
                        for y in range(h_):
                            xrow = xv[y + ky]
                            orow = ov[y]
                            for x in range(w_):
                                orow[x] += wv * xrow[x + kx]


@njit(cache=True, fastmath=True)
def _conv2d_gw_nb(xp, dy, dw, db):
    n_, co_, h_, w_ = dy.shape
    ci_, kh_, kw_ = dw.shape[1], dw.shape[2], dw.shape[3]
    for co in range(co_):
        for ci in range(ci_):
            for ky in range(kh_):
                for kx in range(kw_):
                    acc = 0.0
                    for n in range(n_):
                        dv = dy[n, co]
                        xv = xp[n, ci]
                        for y in range(h_):
                            drow = dv[y]
                            xrow = xv[y + ky]
                            for x in range(w_):
                                acc += drow[x] * xrow[x + kx]
                    dw[co, ci, ky, kx] = acc
    for co in range(co_):
        acc = 0.0
        for n in range(n_):
            for y in range(h_):
                for x in range(w_):
                    acc += dy[n, co, y, x]
        db[co] = acc


@njit(cache=True)
def _conv2d_gx_nb(dyp, w, dx):
    # dyp: dy padded by (kh-1-p, kw-1-p); full correlation with flipped kernel.
    n_, ci_, h_, w_ = dx.shape
    co_, kh_, kw_ = w.shape[0], w.shape[2], w.shape[3]
    for n in range(n_):
        for ci in range(ci_):
            dv = dx[n, ci]
            for y in range(h_):
                for x in range(w_):
                    dv[y, x] = 0.0
            for co in range(co_):
                yv = dyp[n, co]
                for ky in range(kh_):
                    for kx in range(kw_):
                        wv = w[co, ci, kh_ - 1 - ky, kw_ - 1 - kx]
                        for y in range(h_):
                            yrow = yv[y + ky]
                            drow = dv[y]
                            for x in range(w_):
                                drow[x] += wv * yrow[x + kx]


@njit(cache=True)
def _tconv_fwd_nb(xp, w, b, out):
    # xp: (T+2p, Cin, H, W), w: (Cout, Cin, kt), out: (T, Cout, H, W)
    t_, co_, h_, w_ = out.shape
    ci_, kt_ = w.shape[1], w.shape[2]
    for t in range(t_):
        for co in range(co_):
            ov = out[t, co]
            for y in range(h_):
                for x in range(w_):
                    ov[y, x] = b[co]
            for ci in range(ci_):
                for kt in range(kt_):
                    wv = w[co, ci, kt]
                    xv = xp[t + kt, ci]
                    for y in range(h_):
                        orow = ov[y]
                        xrow = xv[y]
                        for x in range(w_):
                            orow[x] += wv * xrow[x]


@njit(cache=True, fastmath=True)
def _tconv_gw_nb(xp, dy, dw, db):
    t_, co_, h_, w_ = dy.shape
    ci_, kt_ = dw.shape[1], dw.shape[2]
    for co in range(co_):
        for ci in range(ci_):
            for kt in range(kt_):
                acc = 0.0
                for t in range(t_):
                    dv = dy[t, co]
                    xv = xp[t + kt, ci]
                    for y in range(h_):
                        drow = dv[y]
                        xrow = xv[y]
                        for x in range(w_):
                            acc += drow[x] * xrow[x]
                dw[co, ci, kt] = acc
    for co in range(co_):
        acc = 0.0
        for t in range(t_):
            dv = dy[t, co]
            for y in range(h_):
                for x in range(w_):
                    acc += dv[y, x]
        db[co] = acc


@njit(cache=True)
def _tconv_gx_nb(dyp, w, dx):
    t_, ci_, h_, w_ = dx.shape
    co_, kt_ = w.shape[0], w.shape[2]
    for t in range(t_):
        for ci in range(ci_):
            dv = dx[t, ci]
            for y in range(h_):
                for x in range(w_):
                    dv[y, x] = 0.0
            for co in range(co_):
                for kt in range(kt_):
                    wv = w[co, ci, kt_ - 1 - kt]
                    yv = dyp[t + kt, co]
                    for y in range(h_):
                        drow = dv[y]
                        yrow = yv[y]
                        for x in range(w_):
                            drow[x] += wv * yrow[x]


@njit(cache=True)
def _gelu_fwd_nb(x, out):
    for i in range(x.size):
        v = x.flat[i]
        out.flat[i] = v * 0.5 * (1.0 + math.erf(v * _INV_SQRT2))


@njit(cache=True)
def _gelu_grad_nb(x, dy, dx):
    for i in range(x.size):
        v = x.flat[i]
        phi = 0.5 * (1.0 + math.erf(v * _INV_SQRT2))
        pdf = _INV_SQRT2PI * math.exp(-0.5 * v * v)
        dx.flat[i] = dy.flat[i] * (phi + v * pdf)


@njit(cache=True)
def _resize_bilinear_nb(src, dst, ys, xs):
    # Corner-aligned: ys/xs hold fractional source coords per output row/col.
    oh, ow, c_ = dst.shape
    sh, sw = src.shape[0], src.shape[1]
    for i in range(oh):
        fy = ys[i]
        y0 = int(fy)
        if y0 > sh - 2:
            y0 = sh - 2
        if y0 < 0:
            y0 = 0
        wy = fy - y0
        for j in range(ow):
            fx = xs[j]
            x0 = int(fx)
            if x0 > sw - 2:
                x0 = sw - 2
            if x0 < 0:
                x0 = 0
            wx = fx - x0
            for c in range(c_):
                v00 = src[y0, x0, c]
                v01 = src[y0, x0 + 1, c]
                v10 = src[y0 + 1, x0, c]
                v11 = src[y0 + 1, x0 + 1, c]
                top = v00 + (v01 - v00) * wx
                bot = v10 + (v11 - v10) * wx
                dst[i, j, c] = top + (bot - top) * wy


# ---------------------------------------------------------------------------
# numpy fallbacks
# ---------------------------------------------------------------------------


def _im2col(xp, kh, kw, oh, ow):
    # (N, Cin, Hp, Wp) -> (N*oh*ow, Cin*kh*kw), windows in row-major output order
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, :oh, :ow]  # (N, Cin, oh, ow, kh, kw)
    win = win.transpose(0, 2, 3, 1, 4, 5)
    return win.reshape(xp.shape[0] * oh * ow, -1)


def _conv2d_fwd_np(xp, w, b, out):
    n, co, oh, ow = out.shape
    cols = _im2col(xp, w.shape[2], w.shape[3], oh, ow)
    res = cols @ w.reshape(co, -1).T + b
    out[...] = res.reshape(n, oh, ow, co).transpose(0, 3, 1, 2)


def _conv2d_gw_np(xp, dy, dw, db):
    n, co, oh, ow = dy.shape
    cols = _im2col(xp, dw.shape[2], dw.shape[3], oh, ow)
    dyr = dy.transpose(0, 2, 3, 1).reshape(-1, co)
    dw[...] = (dyr.T @ cols).reshape(dw.shape)
    db[...] = dy.sum(axis=(0, 2, 3))


def _conv2d_gx_np(dyp, w, dx):
    n, ci, h, w_ = dx.shape
    co, kh, kw = w.shape[0], w.shape[2], w.shape[3]
    wf = w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)  # (Cin, Cout, kh, kw)
    cols = _im2col(dyp, kh, kw, h, w_)
    res = cols @ wf.reshape(ci, -1).T
    dx[...] = res.reshape(n, h, w_, ci).transpose(0, 3, 1, 2)


def _tconv_fwd_np(xp, w, b, out):
    t, co, h, w_ = out.shape
    kt = w.shape[2]
    acc = np.zeros_like(out)
    for k in range(kt):
        acc += np.tensordot(xp[k : k + t], w[:, :, k], axes=([1], [1])).transpose(0, 3, 1, 2)
    out[...] = acc + b[None, :, None, None]


def _tconv_gw_np(xp, dy, dw, db):
    t, co, h, w_ = dy.shape
    for k in range(dw.shape[2]):
        dw[:, :, k] = np.tensordot(dy, xp[k : k + t], axes=([0, 2, 3], [0, 2, 3]))
    db[...] = dy.sum(axis=(0, 2, 3))


def _tconv_gx_np(dyp, w, dx):
    t, ci, h, w_ = dx.shape
    kt = w.shape[2]
    acc = np.zeros_like(dx)
    for k in range(kt):
        acc += np.tensordot(dyp[k : k + t], w[:, :, kt - 1 - k], axes=([1], [0])).transpose(0, 3, 1, 2)
    dx[...] = acc


def _gelu_fwd_np(x, out):
    out[...] = x * 0.5 * (1.0 + _sp_erf(x * _INV_SQRT2))


def _gelu_grad_np(x, dy, dx):
    phi = 0.5 * (1.0 + _sp_erf(x * _INV_SQRT2))
    pdf = _INV_SQRT2PI * np.exp(-0.5 * x * x)
    dx[...] = dy * (phi + x * pdf)


def _resize_bilinear_np(src, dst, ys, xs):
    sh, sw = src.shape[0], src.shape[1]
    y0 = np.clip(ys.astype(np.int64), 0, sh - 2)
    x0 = np.clip(xs.astype(np.int64), 0, sw - 2)
    wy = (ys - y0)[:, None, None]
    wx = (xs - x0)[None, :, None]
    v00 = src[y0[:, None], x0[None, :]]
    v01 = src[y0[:, None], x0[None, :] + 1]
    v10 = src[y0[:, None] + 1, x0[None, :]]
    v11 = src[y0[:, None] + 1, x0[None, :] + 1]
    top = v00 + (v01 - v00) * wx
    bot = v10 + (v11 - v10) * wx
    dst[...] = top + (bot - top) * wy


# ---------------------------------------------------------------------------
# public dispatchers
# ---------------------------------------------------------------------------


def _pad2d(x, p, mode="zero"):
    if p == 0:
        return x
    if mode == "edge":
        return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)), mode="edge")
    n, c, h, w = x.shape
    out = np.zeros((n, c, h + 2 * p, w + 2 * p), dtype=x.dtype)
    out[:, :, p : p + h, p : p + w] = x
    return out


def _pad_time(x, p):
    if p == 0:
        return x
    t, c, h, w = x.shape
    out = np.zeros((t + 2 * p, c, h, w), dtype=x.dtype)
    out[p : p + t] = x
    return out


def conv2d_forward(x, w, b, pad, pad_mode="zero"):
    """Same-resolution 2D convolution. x (N,Cin,H,W), w (Cout,Cin,kh,kw)."""
    n, ci, h, wd = x.shape
    out = np.empty((n, w.shape[0], h, wd), dtype=np.float64)
    xp = _pad2d(x, pad, pad_mode)
    (_conv2d_fwd_nb if _BACKEND == "numba" else _conv2d_fwd_np)(xp, w, b, out)
    return out


def conv2d_grad_w(x, dy, kshape, pad, pad_mode="zero"):
    dw = np.empty(kshape, dtype=np.float64)
    db = np.empty(kshape[0], dtype=np.float64)
    xp = _pad2d(x, pad, pad_mode)
    (_conv2d_gw_nb if _BACKEND == "numba" else _conv2d_gw_np)(xp, dy, dw, db)
    return dw, db


def conv2d_grad_x(dy, w, pad):
    n, co, h, wd = dy.shape
    dx = np.empty((n, w.shape[1], h, wd), dtype=np.float64)
    dyp = _pad2d(dy, w.shape[2] - 1 - pad)
    (_conv2d_gx_nb if _BACKEND == "numba" else _conv2d_gx_np)(dyp, w, dx)
    return dx


def tconv_forward(x, w, b, pad):
    """1D temporal convolution with channel mixing. x (T,Cin,H,W), w (Cout,Cin,kt)."""
    t, ci, h, wd = x.shape
    out = np.empty((t, w.shape[0], h, wd), dtype=np.float64)
    xp = _pad_time(x, pad)
    (_tconv_fwd_nb if _BACKEND == "numba" else _tconv_fwd_np)(xp, w, b, out)
    return out


def tconv_grad_w(x, dy, kshape, pad):
    dw = np.empty(kshape, dtype=np.float64)
    db = np.empty(kshape[0], dtype=np.float64)
    xp = _pad_time(x, pad)
    (_tconv_gw_nb if _BACKEND == "numba" else _tconv_gw_np)(xp, dy, dw, db)
    return dw, db


def tconv_grad_x(dy, w, pad):
    t, co, h, wd = dy.shape
    dx = np.empty((t, w.shape[1], h, wd), dtype=np.float64)
    dyp = _pad_time(dy, w.shape[2] - 1 - pad)
    (_tconv_gx_nb if _BACKEND == "numba" else _tconv_gx_np)(dyp, w, dx)
    return dx


def gelu_forward(x):
    """Exact GELU x * Phi(x) (no tanh approximation).

    scipy's vectorized erf outruns a scalar jit loop here, so both backends
    share the numpy implementation.
    """
    out = np.empty_like(x)
    _gelu_fwd_np(x, out)
    return out


def gelu_grad(x, dy):
    dx = np.empty_like(x)
    _gelu_grad_np(x, dy, dx)
    return dx


def resize_bilinear(src, oh, ow):
    """Corner-aligned bilinear resize of an (H,W,3) float64 image."""
    sh, sw = src.shape[0], src.shape[1]
    if (sh, sw) == (oh, ow):
        return src.copy()
    src = np.ascontiguousarray(src, dtype=np.float64)
    if sh == 1 or sw == 1:  # degenerate source: replicate
        src = np.broadcast_to(src, (max(sh, 2), max(sw, 2), src.shape[2])).copy()
        sh, sw = src.shape[0], src.shape[1]
    ys = np.arange(oh, dtype=np.float64) * ((sh - 1) / (oh - 1) if oh > 1 else 0.0)
    xs = np.arange(ow, dtype=np.float64) * ((sw - 1) / (ow - 1) if ow > 1 else 0.0)
    dst = np.empty((oh, ow, src.shape[2]), dtype=np.float64)
    (_resize_bilinear_nb if _BACKEND == "numba" else _resize_bilinear_np)(src, dst, ys, xs)
    return dst
