"""Differentiable layer primitives and losses built on the autodiff core."""

import numpy as np

from . import _conv
from .autodiff import Tensor, as_tensor, concat, make, sigmoid, softplus  # noqa: F401
from .errors import DegenerateInputError, DimensionError


def conv2d(x, kernel, stride=1, padding=0):
    """Cross-correlation of ``x [N,C,H,W]`` with ``kernel [K,C,kH,kW]`` (no flip)."""
    x, kernel = as_tensor(x), as_tensor(kernel)
    _conv.check_conv_shapes(x.shape, kernel.shape, stride, padding)

    def bw(g):
        gx = conv2d_input_grad(g, kernel, x.shape, stride, padding) if x.requires_grad else None
        gk = conv2d_weight_grad(x, g, kernel.shape, stride, padding) if kernel.requires_grad else None
        return gx, gk

    return make(_conv.conv2d(x.data, kernel.data, stride, padding), (x, kernel), bw, "conv2d")


def conv2d_input_grad(g, kernel, xshape, stride=1, padding=0):
    """Transposed convolution: the input-side adjoint of ``conv2d``."""
    xshape = tuple(xshape)

    def bw(u):
        gg = conv2d(u, kernel, stride, padding) if g.requires_grad else None
        gk = conv2d_weight_grad(u, g, kernel.shape, stride, padding) if kernel.requires_grad else None
        return gg, gk

    out = _conv.conv2d_input_grad(g.data, kernel.data, xshape, stride, padding)
    return make(out, (g, kernel), bw, "conv2d_input_grad")


def conv2d_weight_grad(x, g, kshape, stride=1, padding=0):
    """Kernel-side adjoint of ``conv2d``."""
    kshape = tuple(kshape)

    def bw(v):
        gx = conv2d_input_grad(g, v, x.shape, stride, padding) if x.requires_grad else None
        gg = conv2d(x, v, stride, padding) if g.requires_grad else None
        return gx, gg

    out = _conv.conv2d_weight_grad(x.data, g.data, kshape, stride, padding)
    return make(out, (x, g), bw, "conv2d_weight_grad")


def add_channel_bias(x, b):
    """Add a per-channel bias ``b [K]`` to ``x [N,K,H,W]``."""
    return x + as_tensor(b).reshape(1, -1, 1, 1)


def linear(x, weight, bias=None):
    """``x [N,in] @ weight[out,in]^T + bias[out]``."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise DimensionError(
            f"linear: input {x.shape} does not conform to weight {weight.shape} on the feature axis")
    out = x @ weight.T
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (weight.shape[0],):
            raise DimensionError(f"linear: bias shape {bias.shape} != ({weight.shape[0]},)")
        out = out + bias
    return out


def avgpool2d(x, k):
    """Non-overlapping ``k x k`` average pooling."""
    x = as_tensor(x)
    if x.ndim != 4:
        raise DimensionError(f"avgpool2d expects rank 4, got {x.shape}")
    if k < 1 or x.shape[2] % k or x.shape[3] % k:
        raise DimensionError(f"avgpool2d: spatial dims {x.shape[2:]} not divisible by k={k}")
    return make(_conv.avgpool2d(x.data, k), (x,), lambda g: (_avgpool_input_grad(g, k),), "avgpool2d")


def _avgpool_input_grad(g, k):
    return make(_conv.avgpool2d_input_grad(g.data, k), (g,),
                lambda u: (avgpool2d(u, k),), "avgpool2d_input_grad")


def relu(x):
    return as_tensor(x).relu()


def batchnorm_inference(x, mean, var, gamma, beta, eps=1e-5):
    """Normalize ``x [N,C,...]`` per channel with stored statistics."""
    x = as_tensor(x)
    c = x.shape[1]
    shape = (1, c) + (1,) * (x.ndim - 2)
    parts = []
    for name, p in (("mean", mean), ("var", var), ("gamma", gamma), ("beta", beta)):
        p = as_tensor(p)
        if p.shape != (c,):
            raise DimensionError(f"batchnorm {name} shape {p.shape} != ({c},)")
        parts.append(p.reshape(shape))
    m, v, g, b = parts
    return (x - m) / (v + eps).sqrt() * g + b


def reshape(x, shape):
    return as_tensor(x).reshape(tuple(shape))


def flatten(x):
    x = as_tensor(x)
    return x.reshape(x.shape[0], -1)


def logsumexp(z):
    """Log-sum-exp over the last axis of a rank-1 or rank-2 tensor."""
    m = Tensor._wrap(z.data.max(axis=-1, keepdims=True))
    return ((z - m).exp().sum(axis=-1, keepdims=True)).log() + m


def cross_entropy(logits, label):
    """``-log softmax(logits)[label]`` for a single logit vector.

    ``label`` may also be a sequence of class indices, in which case the
    per-label cross-entropies are summed.
    """
    z = as_tensor(logits).reshape(-1)
    labels = [int(label)] if np.isscalar(label) else [int(v) for v in label]
    n = z.shape[0]
    for lab in labels:
        if not 0 <= lab < n:
            raise DimensionError(f"label {lab} out of range for {n} logits")
    lse = logsumexp(z.reshape(1, n)).reshape(1)
    target = np.zeros(n)
    for lab in labels:
        target[lab] += 1.0
    return (lse * float(len(labels))).sum() - (z * target).sum()


def multi_hot_bce(logits, label_set):
    """Binary cross-entropy with logits against a multi-hot target, summed over classes."""
    z = as_tensor(logits).reshape(-1)
    n = z.shape[0]
    y = np.zeros(n)
    for lab in label_set:
        if not 0 <= int(lab) < n:
            raise DimensionError(f"label {lab} out of range for {n} logits")
        y[int(lab)] = 1.0
    return (softplus(z) - z * y).sum()


def cosine_similarity(a, b):
    a, b = as_tensor(a).reshape(-1), as_tensor(b).reshape(-1)
    if a.shape != b.shape:
        raise DimensionError(f"cosine_similarity: length {a.shape[0]} vs {b.shape[0]}")
    na = float(np.linalg.norm(a.data))
    nb = float(np.linalg.norm(b.data))
    if na == 0.0 or nb == 0.0:
        raise DegenerateInputError("cosine_similarity of a zero-norm vector is undefined")
    return (a * b).sum() / ((a * a).sum().sqrt() * (b * b).sum().sqrt())


def probabilities(logits):
    return sigmoid(as_tensor(logits))
