"""Experiment configuration: ``key=value`` lines with dotted keys and ``#`` comments."""

import hashlib
from dataclasses import fields

from .attack import AttackConfig
from .errors import ConfigurationError
from .sprites import SpriteConfig

_ATTACK = {f"attack.{f.name}": f.default for f in fields(AttackConfig)}

DEFAULTS = {
    # images
    "data.height": 32,
    "data.width": 32,
    "data.channels": 1,
    "data.class_count": 8,
    "data.mode": "multi",
    "data.max_sprites": 3,
    # model and client training
    "model.kind": "micro_cnn",
    "model.widths": (4, 8, 8),
    "model.seed": 0,
    "model.loss": "bce",
    "train.count": 0,
    "train.epochs": 30,
    "train.lr": 0.01,
    "train.batch_size": 16,
    "train.seed": 1,
    # victim samples whose gradients are captured
    "capture.count": 20,
    "capture.seed": 2,
    # label block
    "ncb.mode": "train-on-gradients",
    "ncb.count": 300,
    "ncb.seed": 3,
    "ncb.hidden": 16,
    "ncb.epochs": 60,
    "ncb.lr": 0.01,
    **_ATTACK,
    "bench.strategies": ("GGI", "MGIC"),
    "output.dir": "glab-out",
    "output.figures": True,
}

_CHOICES = {
    "data.mode": ("single", "multi"),
    "model.kind": ("micro_cnn", "linear"),
    "model.loss": ("ce", "bce"),
    "ncb.mode": ("none", "copy-weights", "train-on-gradients"),
}


def _coerce(key, text, default):
    text = text.strip()
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            items = [t.strip() for t in text.split(",") if t.strip()]
            kind = type(default[0]) if default else str
            return tuple(kind(t) for t in items)
    except ValueError as exc:
        raise ConfigurationError(f"bad value for {key}: {text!r}") from exc
    return text


def _format(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


class ExperimentConfig:
    """Fully defaulted settings; unknown keys are rejected."""

    def __init__(self, values=None):
        self.values = dict(DEFAULTS)
        for key, value in (values or {}).items():
            self.set(key, value)

    def set(self, key, value):
        if key not in DEFAULTS:
            raise ConfigurationError(f"unknown config key {key!r}")
        if isinstance(value, str):
            value = _coerce(key, value, DEFAULTS[key])
        if key in _CHOICES and value not in _CHOICES[key]:
            raise ConfigurationError(f"{key} must be one of {_CHOICES[key]}, got {value!r}")
        self.values[key] = value

    def __getitem__(self, key):
        return self.values[key]

    def apply(self, assignments):
        for item in assignments:
            if "=" not in item:
                raise ConfigurationError(f"override {item!r} is not key=value")
            key, value = item.split("=", 1)
            self.set(key.strip(), value)
        self.validate()
        return self

    def validate(self):
        self.sprites("capture")
        self.attack()
        for name in self.values["bench.strategies"]:
            self.attack(name)
        return self

    def text(self):
        """Canonical text form: every key, sorted, one per line."""
        return "".join(f"{k}={_format(self.values[k])}\n" for k in sorted(self.values))

    def digest(self):
        return hashlib.sha256(self.text().encode()).hexdigest()

    def sprites(self, role):
        v = self.values
        count = v["ncb.count"] if role == "ncb" else v[f"{role}.count"]
        return SpriteConfig(count=count, height=v["data.height"], width=v["data.width"],
                            channels=v["data.channels"], class_count=v["data.class_count"],
                            mode=v["data.mode"], max_sprites=v["data.max_sprites"])

    def attack(self, strategy=None):
        kwargs = {f.name: self.values[f"attack.{f.name}"] for f in fields(AttackConfig)}
        if strategy is not None:
            kwargs["strategy"] = strategy
        return AttackConfig(**kwargs)


def parse(text, source="<config>"):
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split(" #", 1)[0].strip() if not raw.lstrip().startswith("#") else ""
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"{source}:{lineno}: expected key=value, got {raw!r}")
        key, value = line.split("=", 1)
        key = key.strip()
        if key in values:
            raise ConfigurationError(f"{source}:{lineno}: duplicate key {key!r}")
        if key not in DEFAULTS:
            raise ConfigurationError(f"{source}:{lineno}: unknown config key {key!r}")
        values[key] = value
    return ExperimentConfig(values)


def load(path):
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc.strerror}") from exc
    return parse(text, str(path))
