"""Compiled kernels for 2-D cross-correlation and its two adjoints.

Layouts: input ``[N, C, H, W]``, kernel ``[K, C, kH, kW]``, output
``[N, K, H', W']``.  All three functions are linear in each argument, which is
what lets the autodiff layer express their derivatives in terms of each other.
"""

import numpy as np
from numba import njit

from .errors import DimensionError


def out_size(size, k, stride, padding):
    span = size + 2 * padding - k
    if span < 0 or span % stride:
        return None
    return span // stride + 1


def check_conv_shapes(xshape, wshape, stride, padding):
    if len(xshape) != 4 or len(wshape) != 4:
        raise DimensionError(
            f"conv2d expects rank-4 input and kernel, got {tuple(xshape)} and {tuple(wshape)}")
    if stride < 1 or padding < 0:
        raise DimensionError(f"conv2d needs stride >= 1 and padding >= 0, got {stride}, {padding}")
    if xshape[1] != wshape[1]:
        raise DimensionError(
            f"conv2d channel axis mismatch: input axis 1 = {xshape[1]}, kernel axis 1 = {wshape[1]}")
    ho = out_size(xshape[2], wshape[2], stride, padding)
    wo = out_size(xshape[3], wshape[3], stride, padding)
    if ho is None or ho < 1:
        raise DimensionError(
            f"conv2d height axis: (H + 2p - kH)/stride + 1 is not a positive integer "
            f"for H={xshape[2]}, kH={wshape[2]}, stride={stride}, padding={padding}")
    if wo is None or wo < 1:
        raise DimensionError(
            f"conv2d width axis: (W + 2p - kW)/stride + 1 is not a positive integer "
            f"for W={xshape[3]}, kW={wshape[3]}, stride={stride}, padding={padding}")
    return ho, wo


@njit(cache=True)
def _im2col_kernel(x, kh, kw, stride, pad, ho, wo):
    n, c, h, w = x.shape
    out = np.zeros((n, c * kh * kw, ho * wo))
    for b in range(n):
        for ci in range(c):
            for i in range(kh):
                for j in range(kw):
                    row = (ci * kh + i) * kw + j
                    for oi in range(ho):
                        r = oi * stride + i - pad
                        if r < 0 or r >= h:
                            continue
                        for oj in range(wo):
                            q = oj * stride + j - pad
                            if 0 <= q < w:
                                out[b, row, oi * wo + oj] = x[b, ci, r, q]
    return out


@njit(cache=True)
def _col2im_kernel(cols, n, c, h, w, kh, kw, stride, pad, ho, wo):
    out = np.zeros((n, c, h, w))
    for b in range(n):
        for ci in range(c):
            for i in range(kh):
                for j in range(kw):
                    row = (ci * kh + i) * kw + j
                    for oi in range(ho):
                        r = oi * stride + i - pad
                        if r < 0 or r >= h:
                            continue
                        for oj in range(wo):
                            q = oj * stride + j - pad
                            if 0 <= q < w:
                                out[b, ci, r, q] += cols[b, row, oi * wo + oj]
    return out


def im2col(x, kh, kw, stride, padding):
    """Patch matrix ``[N, C*kh*kw, H'*W']`` of ``x``; returns it with H', W'."""
    n, c, h, w = x.shape
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    x = np.ascontiguousarray(x, dtype=np.float64)
    return _im2col_kernel(x, kh, kw, stride, padding, ho, wo), ho, wo


def conv2d(x, w, stride=1, padding=0):
    k, _, kh, kw = w.shape
    cols, ho, wo = im2col(x, kh, kw, stride, padding)
    out = np.matmul(w.reshape(k, -1), cols)
    return out.reshape(x.shape[0], k, ho, wo)


def conv2d_weight_grad(x, g, kshape, stride=1, padding=0):
    """Adjoint of ``conv2d`` with respect to the kernel."""
    cols, _, _ = im2col(x, kshape[2], kshape[3], stride, padding)
    n, k = g.shape[0], g.shape[1]
    gm = g.reshape(n, k, -1)
    if n == 1:
        out = gm[0] @ cols[0].T
    else:
        out = np.tensordot(gm, cols, axes=([0, 2], [0, 2]))
    return out.reshape(kshape)


def conv2d_input_grad(g, w, xshape, stride=1, padding=0):
    """Adjoint of ``conv2d`` with respect to the input (a transposed convolution)."""
    n, c, h, wd = xshape
    k, _, kh, kw = w.shape
    cols = np.matmul(w.reshape(k, -1).T, g.reshape(n, k, -1))  # N, C*kh*kw, Ho*Wo
    return col2im(cols, xshape, kh, kw, stride, padding)


def col2im(cols, xshape, kh, kw, stride=1, padding=0):
    """Scatter-add a patch matrix back onto an image (adjoint of ``im2col``)."""
    n, c, h, w = xshape
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    cols = np.ascontiguousarray(cols, dtype=np.float64).reshape(n, c * kh * kw, ho * wo)
    return _col2im_kernel(cols, n, c, h, w, kh, kw, stride, padding, ho, wo)


def avgpool2d(x, k):
    n, c, h, w = x.shape
    return x.reshape(n, c, h // k, k, w // k, k).mean(axis=(3, 5))


def avgpool2d_input_grad(g, k):
    """Adjoint of non-overlapping average pooling: spread each cell over its window."""
    return np.repeat(np.repeat(g, k, axis=2), k, axis=3) / (k * k)
