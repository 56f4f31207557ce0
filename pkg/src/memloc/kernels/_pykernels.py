"""Pure numpy versions of the compiled kernels.

Accumulation order in :func:`col2im` is the same as the compiled loop so the
two backends produce identical bits.
"""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def im2col(x, kh, kw, stride, pad):
    N, C, H, W = x.shape
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    # (N, C, OH', OW', kh, kw) then subsample for stride
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    OH, OW = win.shape[2], win.shape[3]
    cols = win.transpose(1, 4, 5, 0, 2, 3).reshape(C * kh * kw, N * OH * OW)
    return np.ascontiguousarray(cols)


def col2im(cols, shape, kh, kw, stride, pad):
    N, C, H, W = shape
    OH = (H + 2 * pad - kh) // stride + 1
    OW = (W + 2 * pad - kw) // stride + 1
    c6 = cols.reshape(C, kh, kw, N, OH, OW)
    padded = np.zeros((N, C, H + 2 * pad, W + 2 * pad), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            padded[:, :, i:i + stride * OH:stride, j:j + stride * OW:stride] += (
                c6[:, i, j].transpose(1, 0, 2, 3)
            )
    if pad == 0:
        return padded
    return np.ascontiguousarray(padded[:, :, pad:pad + H, pad:pad + W])


def maxpool2x2(x):
    N, C, H, W = x.shape
    OH, OW = H // 2, W // 2
    win = x[:, :, :2 * OH, :2 * OW].reshape(N, C, OH, 2, OW, 2)
    win = win.transpose(0, 1, 2, 4, 3, 5).reshape(N, C, OH, OW, 4)
    idx = win.argmax(axis=-1).astype(np.int8)
    out = np.take_along_axis(win, idx[..., None].astype(np.intp), axis=-1)[..., 0]
    return np.ascontiguousarray(out), idx


def maxpool2x2_backward(grad, idx, shape):
    N, C, OH, OW = grad.shape
    dx = np.zeros(tuple(shape), dtype=grad.dtype)
    # window-local layout (N, C, OH, OW, 4) -> scatter the single winner
    local = np.zeros((N, C, OH, OW, 4), dtype=grad.dtype)
    np.put_along_axis(local, idx[..., None].astype(np.intp), grad[..., None], axis=-1)
    local = local.reshape(N, C, OH, OW, 2, 2).transpose(0, 1, 2, 4, 3, 5)
    dx[:, :, :2 * OH, :2 * OW] = local.reshape(N, C, 2 * OH, 2 * OW)
    return dx
