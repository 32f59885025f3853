"""Low-level array kernels with two interchangeable backends.

Every kernel exists as a numba ``@njit`` loop nest and as a vectorised numpy
routine. The backend is picked once at import from ``R2UPP_NUMBA``:

* ``R2UPP_NUMBA=0`` forces the numpy path,
* ``R2UPP_NUMBA=1`` forces numba (import error if it is missing),
* unset: numba when importable, numpy otherwise.

Both paths return identical results for the copy-style kernels (im2col,
maxpool) and agree to rounding for the accumulating ones (col2im, stitch).
"""
from __future__ import annotations

import os

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

_flag = os.environ.get("R2UPP_NUMBA", "").strip().lower()

if _flag in ("0", "false", "off", "no"):
    HAVE_NUMBA = False
else:
    try:
        from numba import njit

        HAVE_NUMBA = True
    except ImportError:  # pragma: no cover - numba is a declared dependency
        if _flag in ("1", "true", "on", "yes"):
            raise
        HAVE_NUMBA = False

BACKEND = "numba" if HAVE_NUMBA else "numpy"


# ---------------------------------------------------------------------------
# numpy reference path
# ---------------------------------------------------------------------------

def im2col_numpy(xp, kh, kw, stride):
    """Unfold padded ``xp`` [N,C,H,W] into columns [N, C*kh*kw, OH*OW]."""
    n, c, h, w = xp.shape
    oh = (h - kh) // stride + 1
    ow = (w - kw) // stride + 1
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))  # N,C,H',W',kh,kw
    win = win[:, :, : (oh - 1) * stride + 1 : stride, : (ow - 1) * stride + 1 : stride]
    cols = win.transpose(0, 1, 4, 5, 2, 3)  # N,C,kh,kw,OH,OW
    return np.ascontiguousarray(cols).reshape(n, c * kh * kw, oh * ow)


def col2im_numpy(cols, shape, kh, kw, stride):
    """Adjoint of :func:`im2col_numpy`; ``shape`` is the padded input shape."""
    n, c, h, w = shape
    oh = (h - kh) // stride + 1
    ow = (w - kw) // stride + 1
    cols = cols.reshape(n, c, kh, kw, oh, ow)
    out = np.zeros(shape, dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += cols[:, :, i, j]
    return out


def maxpool2x2_numpy(x):
    n, c, h, w = x.shape
    win = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    win = win.reshape(n, c, h // 2, w // 2, 4)
    # argmax returns the first maximum, i.e. row-major tie-break inside the window
    idx = np.argmax(win, axis=-1).astype(np.int8)
    out = np.take_along_axis(win, idx[..., None].astype(np.intp), axis=-1)[..., 0]
    return out, idx


def maxpool2x2_backward_numpy(g, idx):
    n, c, oh, ow = g.shape
    onehot = idx[..., None] == np.arange(4, dtype=np.int8)
    dx = np.where(onehot, g[..., None], 0.0)  # N,C,OH,OW,4
    dx = dx.reshape(n, c, oh, ow, 2, 2).transpose(0, 1, 2, 4, 3, 5)
    return np.ascontiguousarray(dx).reshape(n, c, oh * 2, ow * 2)


def stitch_accumulate_numpy(patches, anchors, height, width):
    acc = np.zeros((height, width), dtype=np.float64)
    cnt = np.zeros((height, width), dtype=np.int64)
    ph, pw = patches.shape[1], patches.shape[2]
    for k in range(anchors.shape[0]):
        r, c = anchors[k]
        acc[r : r + ph, c : c + pw] += patches[k]
        cnt[r : r + ph, c : c + pw] += 1
    return acc, cnt


# ---------------------------------------------------------------------------
# numba path
# ---------------------------------------------------------------------------

if HAVE_NUMBA:

    @njit(cache=True)
    def _im2col_nb(xp, kh, kw, stride):
        n, c, h, w = xp.shape
        oh = (h - kh) // stride + 1
        ow = (w - kw) // stride + 1
        cols = np.empty((n, c * kh * kw, oh * ow), dtype=xp.dtype)
        for b in range(n):
            for ch in range(c):
                for i in range(kh):
                    for j in range(kw):
                        row = (ch * kh + i) * kw + j
                        for y in range(oh):
                            src = y * stride + i
                            base = y * ow
                            for x in range(ow):
                                cols[b, row, base + x] = xp[b, ch, src, x * stride + j]
        return cols

    @njit(cache=True)
    def _col2im_nb(cols, n, c, h, w, kh, kw, stride):
        oh = (h - kh) // stride + 1
        ow = (w - kw) // stride + 1
        out = np.zeros((n, c, h, w), dtype=cols.dtype)
        for b in range(n):
            for ch in range(c):
                for i in range(kh):
                    for j in range(kw):
                        row = (ch * kh + i) * kw + j
                        for y in range(oh):
                            dst = y * stride + i
                            base = y * ow
                            for x in range(ow):
                                out[b, ch, dst, x * stride + j] += cols[b, row, base + x]
        return out

    @njit(cache=True)
    def _maxpool_nb(x):
        n, c, h, w = x.shape
        oh, ow = h // 2, w // 2
        out = np.empty((n, c, oh, ow), dtype=x.dtype)
        idx = np.empty((n, c, oh, ow), dtype=np.int8)
        for b in range(n):
            for ch in range(c):
                for y in range(oh):
                    for xx in range(ow):
                        best = x[b, ch, 2 * y, 2 * xx]
                        k = 0
                        v = x[b, ch, 2 * y, 2 * xx + 1]
                        if v > best:
                            best = v
                            k = 1
                        v = x[b, ch, 2 * y + 1, 2 * xx]
                        if v > best:
                            best = v
                            k = 2
                        v = x[b, ch, 2 * y + 1, 2 * xx + 1]
                        if v > best:
                            best = v
                            k = 3
                        out[b, ch, y, xx] = best
                        idx[b, ch, y, xx] = k
        return out, idx

    @njit(cache=True)
    def _maxpool_backward_nb(g, idx):
        n, c, oh, ow = g.shape
        dx = np.zeros((n, c, 2 * oh, 2 * ow), dtype=g.dtype)
        for b in range(n):
            for ch in range(c):
                for y in range(oh):
                    for xx in range(ow):
                        k = idx[b, ch, y, xx]
                        dx[b, ch, 2 * y + k // 2, 2 * xx + k % 2] = g[b, ch, y, xx]
        return dx

    @njit(cache=True)
    def _stitch_nb(patches, anchors, height, width):
        acc = np.zeros((height, width), dtype=np.float64)
        cnt = np.zeros((height, width), dtype=np.int64)
        ph, pw = patches.shape[1], patches.shape[2]
        for k in range(anchors.shape[0]):
            r0 = anchors[k, 0]
            c0 = anchors[k, 1]
            for i in range(ph):
                for j in range(pw):
                    acc[r0 + i, c0 + j] += patches[k, i, j]
                    cnt[r0 + i, c0 + j] += 1
        return acc, cnt

    def im2col_numba(xp, kh, kw, stride):
        return _im2col_nb(np.ascontiguousarray(xp), kh, kw, stride)

    def col2im_numba(cols, shape, kh, kw, stride):
        n, c, h, w = shape
        return _col2im_nb(np.ascontiguousarray(cols), n, c, h, w, kh, kw, stride)

    def maxpool2x2_numba(x):
        return _maxpool_nb(np.ascontiguousarray(x))

    def maxpool2x2_backward_numba(g, idx):
        return _maxpool_backward_nb(np.ascontiguousarray(g), np.ascontiguousarray(idx))

    def stitch_accumulate_numba(patches, anchors, height, width):
        return _stitch_nb(
            np.ascontiguousarray(patches, dtype=np.float64),
            np.ascontiguousarray(anchors, dtype=np.int64),
            height,
            width,
        )

    im2col = im2col_numba
    col2im = col2im_numba
    maxpool2x2 = maxpool2x2_numba
    maxpool2x2_backward = maxpool2x2_backward_numba
    stitch_accumulate = stitch_accumulate_numba
else:
    im2col = im2col_numpy
    col2im = col2im_numpy
    maxpool2x2 = maxpool2x2_numpy
    maxpool2x2_backward = maxpool2x2_backward_numpy
    stitch_accumulate = stitch_accumulate_numpy
