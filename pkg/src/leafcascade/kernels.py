"""Hot inner loops: 3x3 im2col/col2im and 2x2/stride-2 pooling.

Each kernel exists twice, a numba ``_nb_*`` loop version and a vectorised
``_np_*`` version. The public names dispatch on ``_accel.USE_NUMBA``; the
benchmark calls both variants directly.

Layouts: images are NCHW. Column matrices are ``(N*H*W, C*9)`` with the
column index ordered ``(c, ki, kj)`` so a kernel of shape ``(O, C, 3, 3)``
reshaped to ``(O, C*9)`` contracts against them directly.
"""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ._accel import USE_NUMBA, njit


# -- numba ----------------------------------------------------------------


@njit(cache=True)
def _nb_im2col3x3(x):
    n, c, h, w = x.shape
    cols = np.zeros((n * h * w, c * 9), dtype=x.dtype)
    for b in range(n):
        for i in range(h):
            for j in range(w):
                row = (b * h + i) * w + j
                for ch in range(c):
                    base = ch * 9
                    for di in range(3):
                        ii = i + di - 1
                        if ii < 0 or ii >= h:
                            continue
                        for dj in range(3):
                            jj = j + dj - 1
                            if jj < 0 or jj >= w:
                                continue
                            cols[row, base + di * 3 + dj] = x[b, ch, ii, jj]
    return cols


@njit(cache=True)
def _nb_col2im3x3(cols, n, c, h, w):
    out = np.zeros((n, c, h, w), dtype=cols.dtype)
    for b in range(n):
        for i in range(h):
            for j in range(w):
                row = (b * h + i) * w + j
                for ch in range(c):
                    base = ch * 9
                    for di in range(3):
                        ii = i + di - 1
                        if ii < 0 or ii >= h:
                            continue
                        for dj in range(3):
                            jj = j + dj - 1
                            if jj < 0 or jj >= w:
                                continue
                            out[b, ch, ii, jj] += cols[row, base + di * 3 + dj]
    return out


@njit(cache=True)
def _nb_maxpool2(x):
    n, c, h, w = x.shape
    ho, wo = h // 2, w // 2
    out = np.empty((n, c, ho, wo), dtype=x.dtype)
    for b in range(n):
        for ch in range(c):
            for i in range(ho):
                for j in range(wo):
                    best = x[b, ch, 2 * i, 2 * j]
                    for di in range(2):
                        for dj in range(2):
                            v = x[b, ch, 2 * i + di, 2 * j + dj]
                            if v > best:
                                best = v
                    out[b, ch, i, j] = best
    return out


@njit(cache=True)
def _nb_maxpool2_backward(x, grad_out):
    n, c, h, w = x.shape
    ho, wo = h // 2, w // 2
    dx = np.zeros_like(x)
    for b in range(n):
        for ch in range(c):
            for i in range(ho):
                for j in range(wo):
                    bi, bj = 2 * i, 2 * j
                    best = x[b, ch, bi, bj]
                    for di in range(2):
                        for dj in range(2):
                            v = x[b, ch, 2 * i + di, 2 * j + dj]
                            if v > best:
                                best = v
                                bi, bj = 2 * i + di, 2 * j + dj
                    dx[b, ch, bi, bj] += grad_out[b, ch, i, j]
    return dx


@njit(cache=True)
def _nb_avgpool2(x):
    n, c, h, w = x.shape
    ho, wo = h // 2, w // 2
    out = np.empty((n, c, ho, wo), dtype=x.dtype)
    for b in range(n):
        for ch in range(c):
            for i in range(ho):
                for j in range(wo):
                    s = (x[b, ch, 2 * i, 2 * j] + x[b, ch, 2 * i, 2 * j + 1]
                         + x[b, ch, 2 * i + 1, 2 * j] + x[b, ch, 2 * i + 1, 2 * j + 1])
                    out[b, ch, i, j] = s * 0.25
    return out


@njit(cache=True)
def _nb_avgpool2_backward(grad_out, h, w):
    n, c, ho, wo = grad_out.shape
    dx = np.zeros((n, c, h, w), dtype=grad_out.dtype)
    for b in range(n):
        for ch in range(c):
            for i in range(ho):
                for j in range(wo):
                    g = grad_out[b, ch, i, j] * 0.25
                    dx[b, ch, 2 * i, 2 * j] = g
                    dx[b, ch, 2 * i, 2 * j + 1] = g
                    dx[b, ch, 2 * i + 1, 2 * j] = g
                    dx[b, ch, 2 * i + 1, 2 * j + 1] = g
    return dx


# -- numpy ----------------------------------------------------------------


def _np_im2col3x3(x):
    n, c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    win = sliding_window_view(xp, (3, 3), axis=(2, 3))  # (n, c, h, w, 3, 3)
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * h * w, c * 9)


def _np_col2im3x3(cols, n, c, h, w):
    blocks = cols.reshape(n, h, w, c, 3, 3).transpose(0, 3, 4, 5, 1, 2)
    out = np.zeros((n, c, h + 2, w + 2), dtype=cols.dtype)
    for di in range(3):
        for dj in range(3):
            out[:, :, di:di + h, dj:dj + w] += blocks[:, :, di, dj]
    return np.ascontiguousarray(out[:, :, 1:-1, 1:-1])


def _windows2(x):
    n, c, h, w = x.shape
    ho, wo = h // 2, w // 2
    xr = x[:, :, :2 * ho, :2 * wo].reshape(n, c, ho, 2, wo, 2)
    return xr.transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, 4)


def _np_maxpool2(x):
    return _windows2(x).max(axis=-1)


def _np_maxpool2_backward(x, grad_out):
    n, c, h, w = x.shape
    ho, wo = h // 2, w // 2
    arg = _windows2(x).argmax(axis=-1)  # first max in row-major window order
    onehot = np.zeros((n, c, ho, wo, 4), dtype=x.dtype)
    np.put_along_axis(onehot, arg[..., None], grad_out[..., None], axis=-1)
    block = onehot.reshape(n, c, ho, wo, 2, 2).transpose(0, 1, 2, 4, 3, 5)
    dx = np.zeros_like(x)
    dx[:, :, :2 * ho, :2 * wo] = block.reshape(n, c, 2 * ho, 2 * wo)
    return dx


def _np_avgpool2(x):
    return (_windows2(x).sum(axis=-1) * 0.25).astype(x.dtype, copy=False)


def _np_avgpool2_backward(grad_out, h, w):
    n, c, ho, wo = grad_out.shape
    g = (grad_out * 0.25).astype(grad_out.dtype, copy=False)
    dx = np.zeros((n, c, h, w), dtype=grad_out.dtype)
    dx[:, :, :2 * ho, :2 * wo] = np.repeat(np.repeat(g, 2, axis=2), 2, axis=3)
    return dx


# -- dispatch -------------------------------------------------------------

if USE_NUMBA:
    im2col3x3 = _nb_im2col3x3
    col2im3x3 = _nb_col2im3x3
    maxpool2 = _nb_maxpool2
    maxpool2_backward = _nb_maxpool2_backward
    avgpool2 = _nb_avgpool2
    avgpool2_backward = _nb_avgpool2_backward
else:
    im2col3x3 = _np_im2col3x3
    col2im3x3 = _np_col2im3x3
    maxpool2 = _np_maxpool2
    maxpool2_backward = _np_maxpool2_backward
    avgpool2 = _np_avgpool2
    avgpool2_backward = _np_avgpool2_backward

BACKEND = "numba" if USE_NUMBA else "numpy"
