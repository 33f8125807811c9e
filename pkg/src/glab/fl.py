"""FedSGD simulation at batch size 1: the server-side view of one client step."""

import struct
from dataclasses import dataclass
from types import MappingProxyType

import numpy as np

from . import container
from . import functional as F
from .autodiff import Tensor, grad
from .errors import ContractError, FormatError, MismatchError

CAPTURE_MAGIC = b"MGIG"
LOSS_KINDS = ("ce", "bce")


@dataclass(frozen=True)
class GradientCapture:
    """What an honest-but-curious server stores from one upload.

    There is deliberately no field for pixels or labels.
    """

    grads: MappingProxyType
    arch_fingerprint: bytes
    loss_kind: str
    class_count: int

    def __post_init__(self):
        frozen = {}
        for name, arr in dict(self.grads).items():
            arr = np.array(arr, dtype=np.float64)
            arr.setflags(write=False)
            frozen[name] = arr
        object.__setattr__(self, "grads", MappingProxyType(frozen))
        if self.loss_kind not in LOSS_KINDS:
            raise ContractError(f"loss_kind must be one of {LOSS_KINDS}, got {self.loss_kind!r}")

    def flat(self, names=None):
        names = list(self.grads) if names is None else names
        return np.concatenate([self.grads[n].reshape(-1) for n in names])

    def scaled(self, factor):
        return GradientCapture({k: v * factor for k, v in self.grads.items()},
                               self.arch_fingerprint, self.loss_kind, self.class_count)


def sample_loss(logits, labels, loss_kind):
    """Client training loss for one sample (summed per-label CE, or multi-hot BCE)."""
    if loss_kind == "ce":
        return F.cross_entropy(logits, list(labels))
    if loss_kind == "bce":
        return F.multi_hot_bce(logits, list(labels))
    raise ContractError(f"unknown loss kind {loss_kind!r}")


def _labels(label_or_set, class_count):
    labels = [int(label_or_set)] if np.isscalar(label_or_set) else [int(v) for v in label_or_set]
    if not labels:
        raise ContractError("at least one label is required")
    for lab in labels:
        if not 0 <= lab < class_count:
            raise ContractError(f"label {lab} out of range [0, {class_count})")
    return labels


def client_step(model, image, label_or_set, loss_kind="ce"):
    """Exact gradients of the client loss at one sample; the model is untouched."""
    image = np.asarray(image, dtype=np.float64)
    if image.shape != model.input_shape:
        raise ContractError(f"image shape {image.shape} != model input {model.input_shape}")
    labels = _labels(label_or_set, model.class_count)
    params = model.param_tensors(requires_grad=True)
    names = model.trainable_names()
    loss = sample_loss(model.forward(Tensor(image), params), labels, loss_kind)
    grads = grad(loss, [params[n] for n in names])
    return GradientCapture({n: g.data for n, g in zip(names, grads)},
                           model.fingerprint(), loss_kind, model.class_count)


def average_captures(captures):
    """Element-wise FedSGD mean of several uploads for the same model."""
    captures = list(captures)
    if not captures:
        raise ContractError("nothing to average")
    first = captures[0]
    for c in captures[1:]:
        if c.arch_fingerprint != first.arch_fingerprint:
            raise ContractError("cannot average captures from different models")
        if c.loss_kind != first.loss_kind or set(c.grads) != set(first.grads):
            raise ContractError("cannot average captures with different layouts")
    if len(captures) == 1:
        return first
    n = len(captures)
    return GradientCapture({k: sum(c.grads[k] for c in captures) / n for k in first.grads},
                           first.arch_fingerprint, first.loss_kind, first.class_count)


def check_capture(model, capture):
    if capture.arch_fingerprint != model.fingerprint():
        raise MismatchError("capture fingerprint does not match the model")
    expected = {n: a.shape for n, a in model.parameters().items() if n in model.trainable_names()}
    got = {n: a.shape for n, a in capture.grads.items()}
    if expected != got:
        raise MismatchError("capture gradient layout does not match the model parameters")


def save_capture(capture, path):
    header = struct.pack("<B", LOSS_KINDS.index(capture.loss_kind))
    header += struct.pack("<B", len(capture.arch_fingerprint)) + capture.arch_fingerprint
    header += struct.pack("<I", capture.class_count)
    container.write(path, CAPTURE_MAGIC, list(capture.grads.items()), header)


def load_capture(path):
    r = container.open_reader(path, CAPTURE_MAGIC)
    kind = r.u8("loss kind")
    if kind >= len(LOSS_KINDS):
        raise FormatError(f"unknown loss kind code {kind}", r.pos - 1)
    fp = r.take(r.u8("fingerprint length"), "fingerprint")
    class_count = r.u32("class count")
    entries = container.read_entries(r)
    return GradientCapture(dict(entries), fp, LOSS_KINDS[kind], class_count)
