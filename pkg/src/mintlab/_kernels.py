"""Hot loops behind the tensor ops.

Each kernel exists twice: a numba ``@njit`` version and a pure-numpy one.
Setting ``MINTLAB_DISABLE_NUMBA=1`` (or running without numba installed)
selects the numpy path.  Both paths must agree exactly; the benchmark in
``benchmarks/bench_kernels.py`` times them side by side.

All arrays are channel-last: (N, H, W, C).
"""
import os

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

try:
    import numba
except ImportError:  # pragma: no cover
    numba = None

USE_NUMBA = numba is not None and os.environ.get("MINTLAB_DISABLE_NUMBA", "0") in ("", "0")


# -- numpy reference path ----------------------------------------------------

def im2col_np(xp, kh, kw, stride):
    """(n, H, W, C) padded input -> (n*Ho*Wo, kh*kw*C) patch matrix."""
    v = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
    n, ho, wo = v.shape[:3]
    # window axes come last; move channels behind them to match K.reshape(-1, Cout)
    return np.ascontiguousarray(v.transpose(0, 1, 2, 4, 5, 3)).reshape(n * ho * wo, -1)


def col2im_np(cols, out, kh, kw, stride, ho, wo):
    """Scatter-add a patch-gradient matrix back into ``out`` (n, Hp, Wp, C)."""
    n, _, _, c = out.shape
    g = cols.reshape(n, ho, wo, kh, kw, c)
    span_h = stride * (ho - 1) + 1
    span_w = stride * (wo - 1) + 1
    for i in range(kh):
        for j in range(kw):
            out[:, i:i + span_h:stride, j:j + span_w:stride, :] += g[:, :, :, i, j, :]
    return out


def maxpool_fwd_np(x, window, stride):
    n, h, w, c = x.shape
    v = sliding_window_view(x, (window, window), axis=(1, 2))[:, ::stride, ::stride]
    ho, wo = v.shape[1:3]
    flat = v.reshape(n, ho, wo, c, window * window)
    # argmax returns the first maximum in row-major window order
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    return np.ascontiguousarray(out), arg.astype(np.int64)


def maxpool_bwd_np(grad, arg, in_shape, window, stride):
    n, h, w, c = in_shape
    _, ho, wo, _ = grad.shape
    dx = np.zeros(in_shape, dtype=grad.dtype)
    di, dj = np.divmod(arg, window)
    rows = np.arange(ho)[None, :, None, None] * stride + di
    cols = np.arange(wo)[None, None, :, None] * stride + dj
    nn = np.broadcast_to(np.arange(n)[:, None, None, None], arg.shape)
    cc = np.broadcast_to(np.arange(c)[None, None, None, :], arg.shape)
    np.add.at(dx, (nn, rows, cols, cc), grad)
    return dx


def channel_max_np(x):
    return x.max(axis=(1, 2))


# -- numba path --------------------------------------------------------------

if numba is not None:
    @numba.njit(cache=True)
    def _im2col_nb(xp, kh, kw, stride, ho, wo):
        n, _, _, c = xp.shape
        cols = np.empty((n, ho, wo, kh, kw, c), dtype=xp.dtype)
        for b in range(n):
            for oi in range(ho):
                for i in range(kh):
                    row = xp[b, oi * stride + i]
                    for oj in range(wo):
                        # kw*c contiguous values per (output pixel, kernel row)
                        cols[b, oi, oj, i] = row[oj * stride:oj * stride + kw]
        return cols.reshape(n * ho * wo, kh * kw * c)

    @numba.njit(cache=True)
    def _col2im_nb(cols, out, kh, kw, stride, ho, wo):
        n, _, _, c = out.shape
        g = cols.reshape(n, ho, wo, kh, kw, c)
        for b in range(n):
            for oi in range(ho):
                for i in range(kh):
                    row = out[b, oi * stride + i]
                    for oj in range(wo):
                        src = g[b, oi, oj, i]
                        for j in range(kw):
                            for ch in range(c):
                                row[oj * stride + j, ch] += src[j, ch]
        return out

    @numba.njit(cache=True)
    def _maxpool_fwd_nb(x, window, stride, ho, wo):
        n, _, _, c = x.shape
        out = np.empty((n, ho, wo, c), dtype=x.dtype)
        arg = np.empty((n, ho, wo, c), dtype=np.int64)
        for b in range(n):
            for oi in range(ho):
                for oj in range(wo):
                    for ch in range(c):
                        best = x[b, oi * stride, oj * stride, ch]
                        besti = 0
                        for i in range(window):
                            for j in range(window):
                                v = x[b, oi * stride + i, oj * stride + j, ch]
                                if v > best:
                                    best = v
                                    besti = i * window + j
                        out[b, oi, oj, ch] = best
                        arg[b, oi, oj, ch] = besti
        return out, arg

    @numba.njit(cache=True)
    def _maxpool_bwd_nb(grad, arg, dx, window, stride):
        n, ho, wo, c = grad.shape
        for b in range(n):
            for oi in range(ho):
                for oj in range(wo):
                    for ch in range(c):
                        a = arg[b, oi, oj, ch]
                        i = a // window
                        j = a - i * window
                        dx[b, oi * stride + i, oj * stride + j, ch] += grad[b, oi, oj, ch]
        return dx

    @numba.njit(cache=True)
    def _channel_max_nb(x):
        n, h, w, c = x.shape
        out = np.empty((n, c), dtype=x.dtype)
        for b in range(n):
            for ch in range(c):
                out[b, ch] = x[b, 0, 0, ch]
            for i in range(h):
                for j in range(w):
                    for ch in range(c):
                        v = x[b, i, j, ch]
                        if v > out[b, ch]:
                            out[b, ch] = v
        return out

    def im2col_nb(xp, kh, kw, stride):
        ho = (xp.shape[1] - kh) // stride + 1
        wo = (xp.shape[2] - kw) // stride + 1
        return _im2col_nb(np.ascontiguousarray(xp), kh, kw, stride, ho, wo)

    def col2im_nb(cols, out, kh, kw, stride, ho, wo):
        return _col2im_nb(np.ascontiguousarray(cols), out, kh, kw, stride, ho, wo)

    def maxpool_fwd_nb(x, window, stride):
        ho = (x.shape[1] - window) // stride + 1
        wo = (x.shape[2] - window) // stride + 1
        return _maxpool_fwd_nb(np.ascontiguousarray(x), window, stride, ho, wo)

    def maxpool_bwd_nb(grad, arg, in_shape, window, stride):
        dx = np.zeros(in_shape, dtype=grad.dtype)
        return _maxpool_bwd_nb(np.ascontiguousarray(grad), arg, dx, window, stride)

    def channel_max_nb(x):
        return _channel_max_nb(np.ascontiguousarray(x))


def select(use_numba, numba_im2col=False):
    """Return the kernel namespace for one backend.

    The numpy strided copy beats the jitted gather for im2col on every shape
    we train with, so the numba backend keeps the numpy im2col unless
    ``numba_im2col`` is set (the benchmark sets it).
    """
    if use_numba and numba is not None:
        return dict(im2col=im2col_nb if numba_im2col else im2col_np, col2im=col2im_nb, maxpool_fwd=maxpool_fwd_nb,
                    maxpool_bwd=maxpool_bwd_nb, channel_max=channel_max_nb)
    return dict(im2col=im2col_np, col2im=col2im_np, maxpool_fwd=maxpool_fwd_np,
                maxpool_bwd=maxpool_bwd_np, channel_max=channel_max_np)


_active = select(USE_NUMBA)
im2col = _active["im2col"]
col2im = _active["col2im"]
maxpool_fwd = _active["maxpool_fwd"]
maxpool_bwd = _active["maxpool_bwd"]
channel_max = _active["channel_max"]
