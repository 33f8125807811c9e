"""Model zoo: the desk-scale classifier, the gradient-fed label block (NCB),
training, and bit-exact weight files."""

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from . import container
from . import functional as F
from .autodiff import Tensor, backward, no_grad, softplus
from .errors import ConfigurationError, DimensionError, FormatError, NumericError
from .optim import Adam

WEIGHTS_MAGIC = b"MGIC"

# Ordered hyperparameter keys per layer kind, as stored in weight files.
HYPER_KEYS = {
    "conv": ("stride", "padding"),
    "relu": (),
    "avgpool": ("k",),
    "flatten": (),
    "linear": (),
    "batchnorm": ("eps",),
    "diag": (),
}
PARAM_KEYS = {
    "conv": ("weight", "bias"),
    "linear": ("weight", "bias"),
    "batchnorm": ("mean", "var", "gamma", "beta"),
}
# Batch-norm statistics are stored parameters but never trained or attacked.
FROZEN = {"mean", "var"}


@dataclass
class Layer:
    name: str
    kind: str
    params: dict = field(default_factory=dict)
    hyper: dict = field(default_factory=dict)

    def forward(self, x, params):
        k = self.kind
        if k == "conv":
            y = F.conv2d(x, params[f"{self.name}.weight"], self.hyper["stride"], self.hyper["padding"])
            return F.add_channel_bias(y, params[f"{self.name}.bias"])
        if k == "relu":
            return x.relu()
        if k == "avgpool":
            return F.avgpool2d(x, self.hyper["k"])
        if k == "flatten":
            return F.flatten(x)
        if k == "linear":
            return F.linear(x, params[f"{self.name}.weight"], params[f"{self.name}.bias"])
        if k == "batchnorm":
            p = [params[f"{self.name}.{n}"] for n in PARAM_KEYS["batchnorm"]]
            return F.batchnorm_inference(x, *p, eps=self.hyper["eps"])
        if k == "diag":
            if x.ndim != 2 or x.shape[0] != x.shape[1]:
                raise DimensionError(f"diag layer needs a square matrix, got {x.shape}")
            idx = np.arange(x.shape[0])
            return x[idx, idx]
        raise ConfigurationError(f"unknown layer kind {k!r}")


class ModelGraph:
    """An ordered sequence of named layers ending in a fully-connected head."""

    graph_kind = "classifier"

    def __init__(self, layers, input_shape, class_count, feature_shape=None, trained=False):
        names = [l.name for l in layers]
        if len(set(names)) != len(names):
            raise ConfigurationError(f"layer names must be unique: {names}")
        self.layers = list(layers)
        self.input_shape = tuple(int(v) for v in input_shape)
        self.class_count = int(class_count)
        self.feature_shape = tuple(int(v) for v in feature_shape) if feature_shape is not None and len(feature_shape) else None
        self.trained = bool(trained)
        self._validate()

    def _validate(self):
        head = self.head
        if head.kind != "linear" or head.params["weight"].shape[0] != self.class_count:
            raise ConfigurationError("final layer must be fully connected with class_count outputs")

    @property
    def head(self):
        return self.layers[-1]

    @property
    def feature_count(self):
        return self.head.params["weight"].shape[1]

    def parameters(self):
        """Ordered ``{"layer.param": array}`` for every stored parameter."""
        out = {}
        for layer in self.layers:
            for pname in PARAM_KEYS.get(layer.kind, ()):
                out[f"{layer.name}.{pname}"] = layer.params[pname]
        return out

    def trainable_names(self):
        return [n for n in self.parameters() if n.rsplit(".", 1)[1] not in FROZEN]

    def param_tensors(self, requires_grad=False):
        return {n: Tensor(a, requires_grad=requires_grad and n.rsplit(".", 1)[1] not in FROZEN)
                for n, a in self.parameters().items()}

    def forward(self, x, params=None):
        """Run the graph on ``x``; ``params`` overrides stored weights with Tensors."""
        if params is None:
            params = self.param_tensors()
        x = x if isinstance(x, Tensor) else Tensor(x)
        if x.ndim == len(self.input_shape):
            x = x.reshape((1,) + x.shape)
        if tuple(x.shape[1:]) != self.input_shape:
            raise DimensionError(f"input shape {x.shape[1:]} != model input {self.input_shape}")
        for layer in self.layers:
            x = layer.forward(x, params)
        return x

    def predict(self, x):
        with no_grad():
            return self.forward(x).data

    def fingerprint(self):
        h = hashlib.sha256()
        h.update(self.graph_kind.encode())
        h.update(json.dumps([self.input_shape, self.class_count]).encode())
        for layer in self.layers:
            h.update(json.dumps([layer.name, layer.kind, sorted(layer.hyper.items())]).encode())
            for pname in PARAM_KEYS.get(layer.kind, ()):
                arr = np.ascontiguousarray(layer.params[pname], dtype="<f8")
                h.update(json.dumps(arr.shape).encode())
                h.update(arr.tobytes())
        return h.digest()

    def checksum(self):
        return hashlib.sha256(b"".join(
            np.ascontiguousarray(a, dtype="<f8").tobytes() for a in self.parameters().values())).hexdigest()

    def copy(self):
        layers = [Layer(l.name, l.kind, {k: v.copy() for k, v in l.params.items()}, dict(l.hyper))
                  for l in self.layers]
        return type(self)(layers, self.input_shape, self.class_count, self.feature_shape, self.trained)

    def load_parameters(self, values):
        for layer in self.layers:
            for pname in PARAM_KEYS.get(layer.kind, ()):
                key = f"{layer.name}.{pname}"
                if key in values:
                    layer.params[pname] = np.array(values[key], dtype=np.float64)

    def param_count(self):
        return sum(a.size for a in self.parameters().values())


class NCBGraph(ModelGraph):
    """Label-scoring block fed with a scaled, reshaped head-weight gradient.

    The input ``[class_count, feature_count, 1, 1]`` is read as one sample per
    gradient row.  Stages: 1x1 convolution (the linear stage), average pooling,
    batch normalization with stored statistics, a fully-connected layer, and a
    diagonal read-out so that label ``i`` is scored from gradient row ``i``.
    """

    graph_kind = "ncb"

    def _validate(self):
        if self.layers[-1].kind != "diag":
            raise ConfigurationError("NCB must end with its diagonal read-out")
        fc = self.fc
        if fc.params["weight"].shape[0] != self.class_count:
            raise ConfigurationError("NCB fully-connected stage must emit class_count scores")

    @property
    def fc(self):
        return [l for l in self.layers if l.kind == "linear"][-1]

    @property
    def head(self):
        return self.fc

    def forward(self, x, params=None):
        x = x if isinstance(x, Tensor) else Tensor(x)
        x = x.reshape(self.input_shape)
        params = self.param_tensors() if params is None else params
        for layer in self.layers:
            x = layer.forward(x, params)
        return x

    def scores(self, gradient):
        """Per-label probabilities in (0, 1)."""
        with no_grad():
            return F.probabilities(self.forward(gradient)).data


def _he(rng, shape, fan_in):
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


def build_micro_cnn(input_shape=(1, 32, 32), class_count=8, seed=0, widths=(4, 8, 8)):
    """Three conv+relu stages, one 2x2 average pool and a fully-connected head.

    The second convolution (4x4 kernel) has stride 2, so spatial size shrinks by 4 before
    the head.  Height and width must be at least 16 and divisible by 4.
    """
    c, h, w = (int(v) for v in input_shape)
    if h < 16 or w < 16 or h % 4 or w % 4:
        raise ConfigurationError(
            f"MicroCNN needs height/width >= 16 and divisible by 4 for its pooling plan, got {h}x{w}")
    if class_count < 1:
        raise ConfigurationError("class_count must be positive")
    rng = np.random.default_rng(seed)
    w1, w2, w3 = widths
    # (name, in, out, kernel, stride); the 4x4 stride-2 stage halves H and W exactly.
    plan = [("conv1", c, w1, 3, 1), ("conv2", w1, w2, 4, 2), ("conv3", w2, w3, 3, 1)]
    layers = []
    for i, (name, cin, cout, k, stride) in enumerate(plan, start=1):
        layers.append(Layer(name, "conv",
                            {"weight": _he(rng, (cout, cin, k, k), cin * k * k), "bias": np.zeros(cout)},
                            {"stride": stride, "padding": 1}))
        layers.append(Layer(f"relu{i}", "relu"))
    layers.append(Layer("pool", "avgpool", hyper={"k": 2}))
    layers.append(Layer("flatten", "flatten"))
    feature_shape = (w3, h // 4, w // 4)
    nfeat = int(np.prod(feature_shape))
    layers.append(Layer("fc", "linear",
                        {"weight": rng.normal(0.0, np.sqrt(1.0 / nfeat), size=(class_count, nfeat)),
                         "bias": np.zeros(class_count)}))
    return ModelGraph(layers, (c, h, w), class_count, feature_shape)


def build_linear_model(input_shape, class_count, seed=0):
    """Flatten followed by a single fully-connected layer."""
    rng = np.random.default_rng(seed)
    nfeat = int(np.prod(input_shape))
    layers = [Layer("flatten", "flatten"),
              Layer("fc", "linear", {"weight": rng.normal(0.0, np.sqrt(1.0 / nfeat), size=(class_count, nfeat)),
                                     "bias": rng.normal(0.0, 0.1, size=class_count)})]
    return ModelGraph(layers, input_shape, class_count)


def _ncb_layers(feature_count, hidden, class_count, eps):
    return [
        Layer("ncb_linear", "conv", {"weight": None, "bias": np.zeros(hidden)}, {"stride": 1, "padding": 0}),
        Layer("ncb_pool", "avgpool", hyper={"k": 1}),
        Layer("ncb_bn", "batchnorm", {"mean": np.zeros(hidden), "var": np.ones(hidden),
                                      "gamma": np.ones(hidden), "beta": np.zeros(hidden)}, {"eps": eps}),
        Layer("ncb_flatten", "flatten"),
        Layer("ncb_fc", "linear", {"weight": None, "bias": np.zeros(class_count)}),
        Layer("ncb_diag", "diag"),
    ]


def build_ncb(model, mode="copy-weights", captures=None, label_sets=None, scale=7e8,
              hidden=16, epochs=60, lr=0.01, seed=0, eps=1e-5):
    """Build the label block for ``model``.

    ``copy-weights`` uses an identity linear stage, identity normalization and
    the model's own head weights.  ``train-on-gradients`` fits the block on
    ``captures`` (GradientCapture objects) paired with their true label sets.
    """
    cc, nf = model.class_count, model.feature_count
    input_shape = (cc, nf, 1, 1)
    if mode == "copy-weights":
        if not model.trained:
            raise ConfigurationError("copy-weights mode needs a trained model")
        layers = _ncb_layers(nf, nf, cc, eps)
        layers[0].params["weight"] = np.eye(nf).reshape(nf, nf, 1, 1)
        layers[4].params["weight"] = model.head.params["weight"].copy()
        layers[4].params["bias"] = model.head.params["bias"].copy()
        return NCBGraph(layers, input_shape, cc, trained=True)
    if mode != "train-on-gradients":
        raise ConfigurationError(f"unknown NCB mode {mode!r}")
    if not captures or label_sets is None or len(captures) != len(label_sets):
        raise ConfigurationError("train-on-gradients mode needs captures paired with label sets")
    rng = np.random.default_rng(seed)
    layers = _ncb_layers(nf, hidden, cc, eps)
    layers[0].params["weight"] = rng.normal(0.0, np.sqrt(1.0 / nf), size=(hidden, nf, 1, 1))
    layers[4].params["weight"] = rng.normal(0.0, np.sqrt(1.0 / hidden), size=(cc, hidden))
    ncb = NCBGraph(layers, input_shape, cc)
    head = model.head.name + ".weight"
    inputs = [np.asarray(c.grads[head]) * scale for c in captures]
    targets = np.zeros((len(captures), cc))
    for i, labels in enumerate(label_sets):
        targets[i, list(labels)] = 1.0
    _fit_ncb(ncb, inputs, targets, epochs, lr, rng)
    ncb.trained = True
    return ncb


def _refresh_bn_stats(ncb, inputs):
    lin = ncb.layers[0]
    w = lin.params["weight"].reshape(lin.params["weight"].shape[0], -1)
    hidden = np.concatenate([g.reshape(g.shape[0], -1) @ w.T + lin.params["bias"] for g in inputs])
    bn = ncb.layers[2]
    bn.params["mean"] = hidden.mean(axis=0)
    bn.params["var"] = hidden.var(axis=0)


def _fit_ncb(ncb, inputs, targets, epochs, lr, rng):
    names = ncb.trainable_names()
    values = ncb.parameters()
    opt = Adam([values[n] for n in names], lr=lr)
    order = np.arange(len(inputs))
    for epoch in range(epochs):
        _refresh_bn_stats(ncb, inputs)
        rng.shuffle(order)
        for i in order:
            params = ncb.param_tensors(requires_grad=True)
            logits = ncb.forward(Tensor(inputs[i]), params)
            loss = F.multi_hot_bce(logits, np.flatnonzero(targets[i]))
            if not np.isfinite(loss.data).all():
                raise NumericError(f"NCB training diverged in epoch {epoch}")
            backward(loss)
            opt.step([params[n].grad for n in names])
    _refresh_bn_stats(ncb, inputs)


def batch_loss(logits, label_sets, loss_kind):
    """Mean per-sample loss for a batch of logits ``[B, classes]``."""
    b, n = logits.shape
    y = np.zeros((b, n))
    for i, labels in enumerate(label_sets):
        y[i, list(labels)] = 1.0
    if loss_kind == "ce":
        k = y.sum(axis=1, keepdims=True)
        lse = F.logsumexp(logits)
        total = (lse * k).sum() - (logits * y).sum()
    elif loss_kind == "bce":
        total = (softplus(logits) - logits * y).sum()
    else:
        raise ConfigurationError(f"unknown loss kind {loss_kind!r}")
    return total * (1.0 / b)


def train(model, images, label_sets, loss_kind="ce", epochs=30, lr=0.01, seed=0, batch_size=16):
    """Train a copy of ``model`` with Adam; returns ``(trained_model, loss_trace)``.

    The trace holds the mean training loss of every epoch in order.
    """
    if len(images) == 0:
        raise ConfigurationError("training set is empty")
    model = model.copy()
    rng = np.random.default_rng(seed)
    names = model.trainable_names()
    values = model.parameters()
    opt = Adam([values[n] for n in names], lr=lr)
    images = np.asarray(images, dtype=np.float64)
    order = np.arange(len(images))
    trace = []
    for epoch in range(epochs):
        rng.shuffle(order)
        total = 0.0
        for start in range(0, len(order), batch_size):
            idx = order[start:start + batch_size]
            params = model.param_tensors(requires_grad=True)
            try:
                logits = model.forward(Tensor(images[idx]), params)
                loss = batch_loss(logits, [label_sets[i] for i in idx], loss_kind)
            except NumericError as exc:
                raise NumericError(f"training diverged in epoch {epoch}: {exc}") from exc
            backward(loss)
            with np.errstate(over="ignore", invalid="ignore"):
                opt.step([params[n].grad for n in names])
            total += loss.item() * len(idx)
        mean = total / len(images)
        if not np.isfinite(mean) or not all(np.isfinite(values[n]).all() for n in names):
            raise NumericError(f"training diverged in epoch {epoch}")
        trace.append(mean)
    model.trained = True
    return model, np.array(trace)


def accuracy(model, images, label_sets, loss_kind="ce"):
    """Single-label top-1 accuracy (ce) or exact label-set match at 0.5 (bce)."""
    logits = model.predict(np.asarray(images))
    hits = 0
    for z, labels in zip(logits, label_sets):
        if loss_kind == "ce":
            hits += int(np.argmax(z)) in labels
        else:
            hits += set(np.flatnonzero(z > 0).tolist()) == set(labels)
    return hits / len(label_sets)


# -- weight files ---------------------------------------------------------------

def _model_entries(model):
    entries = [("#graph", np.array([0.0 if model.graph_kind == "classifier" else 1.0])),
               ("#input", np.array(model.input_shape, dtype=float)),
               ("#classes", np.array([model.class_count], dtype=float)),
               ("#trained", np.array([1.0 if model.trained else 0.0])),
               ("#features", np.array(model.feature_shape or (), dtype=float))]
    for layer in model.layers:
        hyper = [float(layer.hyper[k]) for k in HYPER_KEYS[layer.kind]]
        entries.append((f"#layer:{layer.kind}:{layer.name}", np.array(hyper)))
        for pname in PARAM_KEYS.get(layer.kind, ()):
            entries.append((f"{layer.name}.{pname}", layer.params[pname]))
    return entries


def save_weights(model, path):
    container.write(path, WEIGHTS_MAGIC, _model_entries(model))


def load_weights(path):
    r = container.open_reader(path, WEIGHTS_MAGIC)
    entries = container.read_entries(r)
    meta = {}
    layers = []
    for name, arr in entries:
        if name.startswith("#layer:"):
            _, kind, lname = name.split(":", 2)
            if kind not in HYPER_KEYS:
                raise FormatError(f"unknown layer kind {kind!r} in weight file")
            keys = HYPER_KEYS[kind]
            if arr.shape != (len(keys),):
                raise FormatError(f"layer {lname!r} carries {arr.size} hyperparameters, expected {len(keys)}")
            hyper = {k: (float(v) if k == "eps" else int(v)) for k, v in zip(keys, arr)}
            layers.append(Layer(lname, kind, {}, hyper))
        elif name.startswith("#"):
            meta[name] = arr
        else:
            lname, pname = name.rsplit(".", 1)
            if not layers or layers[-1].name != lname:
                raise FormatError(f"parameter {name!r} does not follow its layer record")
            layers[-1].params[pname] = arr
    try:
        cls = NCBGraph if meta["#graph"][0] == 1.0 else ModelGraph
        model = cls(layers, meta["#input"].astype(int), int(meta["#classes"][0]),
                    meta["#features"].astype(int) if meta["#features"].size else None,
                    bool(meta["#trained"][0]))
    except KeyError as exc:
        raise FormatError(f"weight file lacks metadata entry {exc}") from exc
    return model
