"""Hot loops of the conv/pool stack, NHWC layout.

Every kernel has a vectorised numpy version and a loop version compiled
with numba. The module-level names dispatch on :data:`acnorm._backend.USE_NUMBA`;
``NUMPY`` and ``NUMBA`` expose each family explicitly for tests and benchmarks.
"""
from types import SimpleNamespace

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ._backend import HAVE_NUMBA, USE_NUMBA, jit


def _out_size(n, k, stride):
    return (n - k) // stride + 1


# numpy


def _im2col_np(xp, kh, kw, stride):
    """(N, Hp, Wp, C) -> (N, Ho, Wo, kh, kw, C)."""
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))  # N, Ho', Wo', C, kh, kw
    win = win[:, ::stride, ::stride]
    return np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3))


def _col2im_np(dcols, hp, wp, stride):
    n, ho, wo, kh, kw, c = dcols.shape
    dxp = np.zeros((n, hp, wp, c), dtype=dcols.dtype)
    for a in range(kh):
        for b in range(kw):
            dxp[:, a:a + stride * (ho - 1) + 1:stride,
                b:b + stride * (wo - 1) + 1:stride, :] += dcols[:, :, :, a, b, :]
    return dxp


def _maxpool2_np(x):
    n, h, w, c = x.shape
    blocks = x.reshape(n, h // 2, 2, w // 2, 2, c).transpose(0, 1, 3, 5, 2, 4)
    blocks = blocks.reshape(n, h // 2, w // 2, c, 4)
    idx = np.argmax(blocks, axis=-1).astype(np.int8)
    out = np.take_along_axis(blocks, idx[..., None].astype(np.intp), axis=-1)[..., 0]
    return out, idx


def _maxpool2_backward_np(grad, idx):
    n, ho, wo, c = grad.shape
    onehot = idx[..., None] == np.arange(4, dtype=np.int8)
    blocks = np.where(onehot, grad[..., None], 0).astype(grad.dtype)
    blocks = blocks.reshape(n, ho, wo, c, 2, 2).transpose(0, 1, 4, 2, 5, 3)
    return np.ascontiguousarray(blocks.reshape(n, 2 * ho, 2 * wo, c))


# numba loop bodies


@jit
def _im2col_loops(xp, kh, kw, stride):
    n, hp, wp, c = xp.shape
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    cols = np.empty((n, ho, wo, kh, kw, c), dtype=xp.dtype)
    for s in range(n):
        for i in range(ho):
            for j in range(wo):
                for a in range(kh):
                    for b in range(kw):
                        for ch in range(c):
                            cols[s, i, j, a, b, ch] = xp[s, i * stride + a, j * stride + b, ch]
    return cols


@jit
def _col2im_loops(dcols, hp, wp, stride):
    n, ho, wo, kh, kw, c = dcols.shape
    dxp = np.zeros((n, hp, wp, c), dtype=dcols.dtype)
    for s in range(n):
        for i in range(ho):
            for j in range(wo):
                for a in range(kh):
                    for b in range(kw):
                        for ch in range(c):
                            dxp[s, i * stride + a, j * stride + b, ch] += dcols[s, i, j, a, b, ch]
    return dxp


@jit
def _maxpool2_loops(x):
    n, h, w, c = x.shape
    ho = h // 2
    wo = w // 2
    out = np.empty((n, ho, wo, c), dtype=x.dtype)
    idx = np.empty((n, ho, wo, c), dtype=np.int8)
    for s in range(n):
        for i in range(ho):
            for j in range(wo):
                for ch in range(c):
                    best = x[s, 2 * i, 2 * j, ch]
                    arg = 0
                    for k in range(1, 4):
                        v = x[s, 2 * i + k // 2, 2 * j + k % 2, ch]
                        if v > best:
                            best = v
                            arg = k
                    out[s, i, j, ch] = best
                    idx[s, i, j, ch] = arg
    return out, idx


@jit
def _maxpool2_backward_loops(grad, idx):
    n, ho, wo, c = grad.shape
    dx = np.zeros((n, 2 * ho, 2 * wo, c), dtype=grad.dtype)
    for s in range(n):
        for i in range(ho):
            for j in range(wo):
                for ch in range(c):
                    k = idx[s, i, j, ch]
                    dx[s, 2 * i + k // 2, 2 * j + k % 2, ch] = grad[s, i, j, ch]
    return dx


NUMPY = SimpleNamespace(
    im2col=_im2col_np,
    col2im=_col2im_np,
    maxpool2=_maxpool2_np,
    maxpool2_backward=_maxpool2_backward_np,
)

NUMBA = SimpleNamespace(
    im2col=_im2col_loops,
    col2im=_col2im_loops,
    maxpool2=_maxpool2_loops,
    maxpool2_backward=_maxpool2_backward_loops,
) if HAVE_NUMBA else None

_ACTIVE = NUMBA if USE_NUMBA else NUMPY


def im2col(xp, kh, kw, stride=1):
    """Gather conv patches from a padded NHWC tensor into (N, Ho, Wo, kh, kw, C)."""
    return _ACTIVE.im2col(xp, kh, kw, stride)


def col2im(dcols, hp, wp, stride=1):
    """Scatter-add patch gradients back onto the padded input grid."""
    return _ACTIVE.col2im(dcols, hp, wp, stride)


def maxpool2(x):
    """2x2/2 max pool. Returns (pooled, argmax-in-window); ties go to the first element."""
    return _ACTIVE.maxpool2(x)


def maxpool2_backward(grad, idx):
    return _ACTIVE.maxpool2_backward(grad, idx)
