"""Batched NCHW tensor primitives with their reverse-mode counterparts.

Reductions accumulate in float64 and results are stored in the dtype of
the input activations (float32 in normal use, float64 for gradient checks).
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import ShapeError

PROB_EPS = 1e-7


def _windows(x, kernel, stride, padding, fill=0.0):
    """(N, C, Ho, Wo, k, k) strided view over a padded input."""
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)), constant_values=fill)
    if x.shape[2] < kernel or x.shape[3] < kernel:
        raise ShapeError(f"kernel {kernel} larger than padded input {x.shape[2:]}")
    return sliding_window_view(x, (kernel, kernel), axis=(2, 3))[:, :, ::stride, ::stride]


def conv2d(x, weight, bias, stride=1, padding=0):
    """Cross-correlation; weight is (C_out, C_in, k, k)."""
    n, c, _, _ = x.shape
    c_out, c_in, k, _ = weight.shape
    if c != c_in:
        raise ShapeError(f"conv expects {c_in} input channels, got {c}")
    win = _windows(x, k, stride, padding)
    ho, wo = win.shape[2:4]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * k * k).astype(np.float64)
    out = cols @ weight.reshape(c_out, -1).astype(np.float64).T + bias.astype(np.float64)
    return out.reshape(n, ho, wo, c_out).transpose(0, 3, 1, 2).astype(x.dtype), cols


def conv2d_backward(dy, x_shape, cols, weight, stride=1, padding=0):
    """Return (dx, dweight, dbias) given the im2col matrix from the forward pass."""
    n, c, h, w = x_shape
    c_out, _, k, _ = weight.shape
    ho, wo = dy.shape[2:]
    dy_mat = dy.transpose(0, 2, 3, 1).reshape(-1, c_out).astype(np.float64)
    dweight = (dy_mat.T @ cols).reshape(weight.shape)
    dbias = dy_mat.sum(axis=0)
    dcols = (dy_mat @ weight.reshape(c_out, -1).astype(np.float64)).reshape(n, ho, wo, c, k, k)
    dxp = np.zeros((n, c, h + 2 * padding, w + 2 * padding))
    for i in range(k):
        for j in range(k):
            dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += dcols[..., i, j].transpose(0, 3, 1, 2)
    dx = dxp[:, :, padding:padding + h, padding:padding + w]
    return dx.astype(dy.dtype), dweight.astype(weight.dtype), dbias.astype(weight.dtype)


def maxpool(x, kernel=2, stride=2, padding=0):
    win = _windows(x, kernel, stride, padding, fill=-np.inf)
    return win.max(axis=(4, 5)), win


def maxpool_backward(dy, x_shape, win, kernel=2, stride=2, padding=0):
    """Route each gradient to the first maximal element of its window."""
    n, c, h, w = x_shape
    ho, wo = dy.shape[2:]
    flat = win.reshape(n, c, ho, wo, kernel * kernel)
    arg = flat.argmax(axis=-1)
    dxp = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=np.float64)
    for idx in range(kernel * kernel):
        i, j = divmod(idx, kernel)
        dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += np.where(arg == idx, dy, 0.0)
    return dxp[:, :, padding:padding + h, padding:padding + w].astype(dy.dtype)


def relu(x):
    return np.maximum(x, 0)


def relu_backward(dy, x):
    return np.where(x > 0, dy, 0).astype(dy.dtype)


def fully_connected(x, weight, bias):
    """x is (N, F); weight is (units, F)."""
    if x.shape[1] != weight.shape[1]:
        raise ShapeError(f"fully connected expects {weight.shape[1]} features, got {x.shape[1]}")
    out = x.astype(np.float64) @ weight.astype(np.float64).T + bias.astype(np.float64)
    return out.astype(x.dtype)


def fully_connected_backward(dy, x, weight):
    dy64 = dy.astype(np.float64)
    dx = dy64 @ weight.astype(np.float64)
    dweight = dy64.T @ x.astype(np.float64)
    return dx.astype(dy.dtype), dweight.astype(weight.dtype), dy64.sum(axis=0).astype(weight.dtype)


def sigmoid(x):
    z = x.astype(np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out.astype(x.dtype)


def sigmoid_backward(dy, y):
    y64 = y.astype(np.float64)
    return (dy.astype(np.float64) * y64 * (1.0 - y64)).astype(dy.dtype)
