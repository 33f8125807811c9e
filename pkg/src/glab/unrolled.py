"""Hand-unrolled second-order pass for sequential classifiers.

The attack differentiates a function of the parameter gradients with respect
to the input.  For graphs made only of conv / relu / avgpool / flatten /
linear layers this can be written out explicitly:

1. forward pass, keeping every layer input;
2. backward pass, producing the parameter gradients and the per-layer deltas;
3. given adjoints of the parameter gradients, sweep the backward pass in
   reverse (forward direction), push the result through the loss Hessian at
   the logits, then sweep the forward pass in reverse to reach the pixels.

ReLU masks are piecewise constant, so they contribute no second-order terms.
The autodiff tape computes the same quantity generically; tests compare both.
"""

from dataclasses import dataclass

import numpy as np

from . import _conv
from .errors import ConfigurationError, ContractError

SUPPORTED = {"conv", "relu", "avgpool", "flatten", "linear"}


def target_vector(labels, class_count):
    y = np.zeros(class_count)
    for lab in labels:
        y[int(lab)] += 1.0
    return y


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def loss_value_and_grad(z, y, loss_kind):
    """Loss summed over the batch, and its gradient with respect to the logits."""
    if loss_kind == "ce":
        m = z.max(axis=1, keepdims=True)
        e = np.exp(z - m)
        s = e.sum(axis=1, keepdims=True)
        p = e / s
        k = y.sum(axis=1, keepdims=True)
        lse = np.log(s) + m
        return float((k * lse).sum() - (y * z).sum()), k * p - y, p
    if loss_kind == "bce":
        sp = np.maximum(z, 0.0) + np.log1p(np.exp(-np.abs(z)))
        sig = _sigmoid(z)
        return float((sp - y * z).sum()), sig - y, sig
    raise ContractError(f"unknown loss kind {loss_kind!r}")


def loss_hvp(v, y, probs, loss_kind):
    """Hessian of the loss at the logits applied to ``v``."""
    if loss_kind == "ce":
        k = y.sum(axis=1, keepdims=True)
        return k * (probs * v - probs * (probs * v).sum(axis=1, keepdims=True))
    return probs * (1.0 - probs) * v


@dataclass
class Pass:
    inputs: list       # input of every layer
    cols: dict         # conv layer index -> im2col patches of its input
    masks: dict        # relu layer index -> float mask
    logits: np.ndarray
    probs: np.ndarray
    y: np.ndarray
    loss: float
    deltas: dict       # layer index -> d loss / d output of that layer
    grads: dict        # "layer.param" -> gradient


class SequentialPass:
    """Compiled view of a classifier for repeated first/second-order passes
    on a single sample."""

    def __init__(self, model, loss_kind):
        for layer in model.layers:
            if layer.kind not in SUPPORTED:
                raise ConfigurationError(f"unrolled pass does not support layer kind {layer.kind!r}")
        if loss_kind not in ("ce", "bce"):
            raise ContractError(f"unknown loss kind {loss_kind!r}")
        self.model = model
        self.layers = model.layers
        self.loss_kind = loss_kind
        self.names = model.trainable_names()
        # Deltas are only needed down to the first layer that owns parameters.
        self.first_param = min(i for i, l in enumerate(self.layers) if l.kind in ("conv", "linear"))
        self._wmat = {i: l.params["weight"].reshape(l.params["weight"].shape[0], -1)
                      for i, l in enumerate(self.layers) if l.kind == "conv"}

    def _conv_geom(self, i):
        layer = self.layers[i]
        kshape = layer.params["weight"].shape
        return kshape[2], kshape[3], layer.hyper["stride"], layer.hyper["padding"]

    def run(self, x, labels):
        """Forward + backward for one sample; returns a Pass with parameter gradients."""
        a = np.asarray(x, dtype=np.float64).reshape((1,) + self.model.input_shape)
        inputs, cols, masks = [], {}, {}
        for i, layer in enumerate(self.layers):
            inputs.append(a)
            k = layer.kind
            if k == "conv":
                kh, kw, s, pad = self._conv_geom(i)
                c, ho, wo = _conv.im2col(a, kh, kw, s, pad)
                cols[i] = c[0]
                a = (self._wmat[i] @ c[0] + layer.params["bias"][:, None]).reshape(1, -1, ho, wo)
            elif k == "relu":
                m = (a > 0).astype(np.float64)
                masks[i] = m
                a = a * m
            elif k == "avgpool":
                a = _conv.avgpool2d(a, layer.hyper["k"])
            elif k == "flatten":
                a = a.reshape(a.shape[0], -1)
            else:
                a = a @ layer.params["weight"].T + layer.params["bias"]
        y = target_vector(labels, self.model.class_count)[None, :]
        loss, d, probs = loss_value_and_grad(a, y, self.loss_kind)
        deltas, grads = {}, {}
        for i in range(len(self.layers) - 1, self.first_param - 1, -1):
            layer = self.layers[i]
            deltas[i] = d
            k = layer.kind
            if k == "conv":
                dm = d.reshape(d.shape[1], -1)
                grads[f"{layer.name}.weight"] = (dm @ cols[i].T).reshape(layer.params["weight"].shape)
                grads[f"{layer.name}.bias"] = dm.sum(axis=1)
            elif k == "linear":
                grads[f"{layer.name}.weight"] = d.T @ inputs[i]
                grads[f"{layer.name}.bias"] = d.sum(axis=0)
            if i > self.first_param:
                d = self._vjp(i, d, inputs, masks)
        return Pass(inputs, cols, masks, a, probs, y, loss, deltas, grads)

    def _vjp(self, i, g, inputs, masks, extra=None):
        """Transpose-Jacobian of layer ``i``; ``extra=(delta, kernel_adjoint)`` fuses
        a second transposed convolution into the same scatter."""
        layer = self.layers[i]
        k = layer.kind
        if k == "conv":
            kh, kw, s, pad = self._conv_geom(i)
            cols = self._wmat[i].T @ g.reshape(g.shape[1], -1)
            if extra is not None:
                d, gw = extra
                cols = cols + gw.reshape(gw.shape[0], -1).T @ d.reshape(d.shape[1], -1)
            return _conv.col2im(cols[None], inputs[i].shape, kh, kw, s, pad)
        if k == "relu":
            return g * masks[i]
        if k == "avgpool":
            return _conv.avgpool2d_input_grad(g, layer.hyper["k"])
        if k == "flatten":
            return g.reshape(inputs[i].shape)
        out = g @ layer.params["weight"]
        if extra is not None:
            d, gw = extra
            out = out + d @ gw
        return out

    def _jvp(self, i, v, masks):
        layer = self.layers[i]
        k = layer.kind
        if k == "conv":
            kh, kw, s, pad = self._conv_geom(i)
            c, ho, wo = _conv.im2col(v, kh, kw, s, pad)
            return (self._wmat[i] @ c[0]).reshape(1, -1, ho, wo)
        if k == "relu":
            return v * masks[i]
        if k == "avgpool":
            return _conv.avgpool2d(v, layer.hyper["k"])
        if k == "flatten":
            return v.reshape(v.shape[0], -1)
        return v @ layer.params["weight"].T

    def pullback(self, p, grad_adjoints, logit_adjoint=None):
        """Pixel gradient of a scalar whose sensitivities to the parameter
        gradients are ``grad_adjoints`` (and to the logits ``logit_adjoint``)."""
        extras = {}
        carry = None  # adjoint of the delta entering layer i from above
        for i in range(self.first_param, len(self.layers)):
            layer = self.layers[i]
            if carry is not None:
                carry = self._jvp(i, carry, p.masks)
            k = layer.kind
            if k in ("conv", "linear"):
                gw = grad_adjoints[f"{layer.name}.weight"]
                gb = grad_adjoints[f"{layer.name}.bias"]
                if k == "conv":
                    shape = p.deltas[i].shape
                    term = (gw.reshape(gw.shape[0], -1) @ p.cols[i] + gb[:, None]).reshape(shape)
                else:
                    term = p.inputs[i] @ gw.T + gb
                extras[i] = (p.deltas[i], gw)
                carry = term if carry is None else carry + term
        a_bar = loss_hvp(carry, p.y, p.probs, self.loss_kind)
        if logit_adjoint is not None:
            a_bar = a_bar + logit_adjoint
        for i in range(len(self.layers) - 1, -1, -1):
            a_bar = self._vjp(i, a_bar, p.inputs, p.masks, extras.get(i))
        return a_bar.reshape(self.model.input_shape)
