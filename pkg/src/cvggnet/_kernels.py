"""Window-selection kernels for complex max-pooling.

Two interchangeable implementations exist for each kernel: a numba
``@njit`` loop nest and a vectorized numpy version.  The numba path is used
when numba imports and ``CVGGNET_NUMBA`` is not set to ``0``.  Both paths
give bit-identical results, including the first-index tie-break.
"""
from __future__ import annotations

import os

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

try:
    from numba import njit

    NUMBA_AVAILABLE = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    NUMBA_AVAILABLE = False

# selection modes
AMPLITUDE = 0
AREA = 1
REAL_SPLIT = 2


def use_numba() -> bool:
    return NUMBA_AVAILABLE and os.environ.get("CVGGNET_NUMBA", "1") != "0"


def out_extent(n: int, window: int, stride: int) -> int:
    return (n - window) // stride + 1


# ---------------------------------------------------------------------------
# numpy path


def _windows(plane: np.ndarray, window: int, stride: int) -> np.ndarray:
    w = sliding_window_view(plane, (window, window), axis=(2, 3))[:, :, ::stride, ::stride]
    return w.reshape(w.shape[:4] + (window * window,))


def pool_forward_numpy(re, im, window, stride, mode):
    wr = _windows(re, window, stride)
    wi = _windows(im, window, stride)
    if mode == REAL_SPLIT:
        idx_re = np.argmax(wr, axis=-1)
        idx_im = np.argmax(wi, axis=-1)
    else:
        if mode == AMPLITUDE:
            score = np.sqrt(wr * wr + wi * wi)
        else:
            score = np.abs(wr * wi)
        idx_re = np.argmax(score, axis=-1)
        idx_im = idx_re
    out_re = np.take_along_axis(wr, idx_re[..., None], axis=-1)[..., 0]
    out_im = np.take_along_axis(wi, idx_im[..., None], axis=-1)[..., 0]
    return out_re, out_im, idx_re.astype(np.int64), np.array(idx_im, dtype=np.int64)


def pool_backward_numpy(g_re, g_im, idx_re, idx_im, in_shape, window, stride):
    n, c, h, w = in_shape
    ho, wo = g_re.shape[2:]
    dre = np.zeros(in_shape, dtype=g_re.dtype)
    dim = np.zeros(in_shape, dtype=g_im.dtype)
    for a in range(window):
        for b in range(window):
            k = a * window + b
            rows = slice(a, a + stride * (ho - 1) + 1, stride)
            cols = slice(b, b + stride * (wo - 1) + 1, stride)
            dre[:, :, rows, cols] += np.where(idx_re == k, g_re, 0)
            dim[:, :, rows, cols] += np.where(idx_im == k, g_im, 0)
    return dre, dim


# ---------------------------------------------------------------------------
# numba path

if NUMBA_AVAILABLE:

    @njit(cache=True, nogil=True)
    def _pool_forward_jit(re, im, window, stride, mode):
        n, c, h, w = re.shape
        ho = (h - window) // stride + 1
        wo = (w - window) // stride + 1
        out_re = np.empty((n, c, ho, wo), dtype=re.dtype)
        out_im = np.empty((n, c, ho, wo), dtype=re.dtype)
        idx_re = np.empty((n, c, ho, wo), dtype=np.int64)
        idx_im = np.empty((n, c, ho, wo), dtype=np.int64)
        for i in range(n):
            for ch in range(c):
                for y in range(ho):
                    for x in range(wo):
                        y0 = y * stride
                        x0 = x * stride
                        if mode == 2:
                            best_r = re[i, ch, y0, x0]
                            best_i = im[i, ch, y0, x0]
                            kr = 0
                            ki = 0
                            for a in range(window):
                                for b in range(window):
                                    vr = re[i, ch, y0 + a, x0 + b]
                                    vi = im[i, ch, y0 + a, x0 + b]
                                    if vr > best_r:
                                        best_r = vr
                                        kr = a * window + b
                                    if vi > best_i:
                                        best_i = vi
                                        ki = a * window + b
                            out_re[i, ch, y, x] = best_r
                            out_im[i, ch, y, x] = best_i
                            idx_re[i, ch, y, x] = kr
                            idx_im[i, ch, y, x] = ki
                        else:
                            best = -1.0
                            k = 0
                            for a in range(window):
                                for b in range(window):
                                    vr = re[i, ch, y0 + a, x0 + b]
                                    vi = im[i, ch, y0 + a, x0 + b]
                                    if mode == 0:
                                        s = np.sqrt(vr * vr + vi * vi)
                                    else:
                                        s = np.abs(vr * vi)
                                    if s > best:
                                        best = s
                                        k = a * window + b
                            a = k // window
                            b = k - a * window
                            out_re[i, ch, y, x] = re[i, ch, y0 + a, x0 + b]
                            out_im[i, ch, y, x] = im[i, ch, y0 + a, x0 + b]
                            idx_re[i, ch, y, x] = k
                            idx_im[i, ch, y, x] = k
        return out_re, out_im, idx_re, idx_im

    @njit(cache=True, nogil=True)
    def _pool_backward_jit(g_re, g_im, idx_re, idx_im, dre, dim, window, stride):
        n, c, ho, wo = g_re.shape
        for i in range(n):
            for ch in range(c):
                for y in range(ho):
                    for x in range(wo):
                        k = idx_re[i, ch, y, x]
                        a = k // window
                        dre[i, ch, y * stride + a, x * stride + k - a * window] += g_re[i, ch, y, x]
                        k = idx_im[i, ch, y, x]
                        a = k // window
                        dim[i, ch, y * stride + a, x * stride + k - a * window] += g_im[i, ch, y, x]
        return dre, dim


def pool_forward_numba(re, im, window, stride, mode):
    return _pool_forward_jit(np.ascontiguousarray(re), np.ascontiguousarray(im), window, stride, mode)


def pool_backward_numba(g_re, g_im, idx_re, idx_im, in_shape, window, stride):
    dre = np.zeros(in_shape, dtype=g_re.dtype)
    dim = np.zeros(in_shape, dtype=g_im.dtype)
    return _pool_backward_jit(
        np.ascontiguousarray(g_re), np.ascontiguousarray(g_im),
        np.ascontiguousarray(idx_re), np.ascontiguousarray(idx_im),
        dre, dim, window, stride,
    )


def pool_forward(re, im, window, stride, mode):
    """Select one element per window; returns (out_re, out_im, idx_re, idx_im).

    Indices are flat row-major offsets inside each window.  For amplitude
    and area modes both index maps are the same array contents.
    """
    if use_numba():
        return pool_forward_numba(re, im, window, stride, mode)
    return pool_forward_numpy(re, im, window, stride, mode)


def pool_backward(g_re, g_im, idx_re, idx_im, in_shape, window, stride):
    """Route each output gradient to the input element its window selected."""
    if use_numba():
        return pool_backward_numba(g_re, g_im, idx_re, idx_im, in_shape, window, stride)
    return pool_backward_numpy(g_re, g_im, idx_re, idx_im, in_shape, window, stride)
