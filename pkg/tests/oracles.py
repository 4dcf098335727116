"""Independent scalar-loop oracles for the weighted kernels.

These are written directly from the operator definitions, element by
element, sharing nothing with the engine implementation except the
documented accumulation order (input channel, kernel row, kernel column
for convolution; ascending contraction index for matmul). Because both
sides round each multiply-accumulate in the tensor dtype, agreement must
be bit-exact, not approximate. Frozen: change these only if the
documented contract changes.
"""

from __future__ import annotations

import numpy as np


def conv2d_scalar(x: np.ndarray, w: np.ndarray, bias: np.ndarray | None = None,
                  *, stride: int = 1, padding: int = 0) -> np.ndarray:
    """Quadruple-loop cross-correlation with zero padding."""
    n, c_in, h, wd = x.shape
    c_out, c_in_w, kh, kw = w.shape
    assert c_in_w == c_in
    if padding:
        xp = np.zeros((n, c_in, h + 2 * padding, wd + 2 * padding), dtype=x.dtype)
        xp[:, :, padding:padding + h, padding:padding + wd] = x
    else:
        xp = x
    h_out = (h + 2 * padding - kh) // stride + 1
    w_out = (wd + 2 * padding - kw) // stride + 1
    y = np.zeros((n, c_out, h_out, w_out), dtype=x.dtype)
    for ni in range(n):
        for co in range(c_out):
            for oh in range(h_out):
                for ow in range(w_out):
                    acc = x.dtype.type(0)
                    for ci in range(c_in):
                        for r in range(kh):
                            for c in range(kw):
                                acc += w[co, ci, r, c] * xp[ni, ci, oh * stride + r,
                                                            ow * stride + c]
                    y[ni, co, oh, ow] = acc
    if bias is not None:
        for co in range(c_out):
            y[:, co] = y[:, co] + bias[co]
    return y


def matmul_scalar(x: np.ndarray, w: np.ndarray,
                  bias: np.ndarray | None = None) -> np.ndarray:
    """Row-by-column dot products, contraction index ascending."""
    d_in, d_out = w.shape
    lead = x.shape[:-1]
    y = np.zeros(lead + (d_out,), dtype=x.dtype)
    flat_x = x.reshape(-1, d_in)
    flat_y = y.reshape(-1, d_out)
    for i in range(flat_x.shape[0]):
        for j in range(d_out):
            acc = x.dtype.type(0)
            for k in range(d_in):
                acc += flat_x[i, k] * w[k, j]
            flat_y[i, j] = acc
    if bias is not None:
        flat_y += bias  # one rounded add per element, same as the kernel
    return flat_y.reshape(lead + (d_out,))


def layer_norm_reference(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray,
                         *, eps: float, axis: int) -> np.ndarray:
    """Population-statistics normalization, plain formula.

    Not bit-exact against the engine (reduction order may differ);
    compare with a tight tolerance.
    """
    mean = x.mean(axis=axis, keepdims=True)
    var = ((x - mean) ** 2).mean(axis=axis, keepdims=True)
    normed = (x - mean) / np.sqrt(var + x.dtype.type(eps))
    shape = [1] * x.ndim
    shape[axis] = x.shape[axis]
    return gamma.reshape(shape) * normed + beta.reshape(shape)


def group_norm_reference(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray,
                         *, groups: int, eps: float, axis: int) -> np.ndarray:
    """Per-group normalization by slicing the channel axis."""
    c = x.shape[axis]
    size = c // groups
    out = np.empty_like(x)
    for g in range(groups):
        sl = [slice(None)] * x.ndim
        sl[axis] = slice(g * size, (g + 1) * size)
        sl = tuple(sl)
        out[sl] = layer_norm_reference(x[sl], gamma[g * size:(g + 1) * size],
                                       beta[g * size:(g + 1) * size], eps=eps, axis=axis)
    return out


def batch_norm_reference(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray,
                         mean: np.ndarray, var: np.ndarray, *, eps: float,
                         axis: int) -> np.ndarray:
    """Inference-mode normalization with running statistics."""
    shape = [1] * x.ndim
    shape[axis] = x.shape[axis]
    rs = lambda v: v.reshape(shape)
    return rs(gamma) * (x - rs(mean)) / np.sqrt(rs(var) + x.dtype.type(eps)) + rs(beta)


def softmax_reference(x: np.ndarray, *, axis: int) -> np.ndarray:
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)
