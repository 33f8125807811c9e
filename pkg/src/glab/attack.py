"""Gradient inversion: label inference, regularizers, objectives and the
reconstruction loop.

Nothing here ever sees a training image or label; the only inputs are the
model, an optional label block, and a GradientCapture.
"""

import math
import time
from dataclasses import dataclass, field, fields, replace

import numpy as np

from . import functional as F
from . import imaging
from .autodiff import Tensor, grad
from .errors import (AmbiguousLabelError, AttackError, ConfigurationError, DegenerateInputError,
                     NumericError)
from .fl import check_capture, sample_loss
from .models import NCBGraph
from .optim import Adam
from .unrolled import SequentialPass, target_vector

STRATEGIES = ("DLG", "GGI", "CPL", "MGIC")
ENGINES = ("unrolled", "tape")
CA_MODES = ("nudge", "value")
LABEL_MODES = ("joint", "per_label")
CA_VIEWS = ("spatial", "matrix")
SIGN_TOL = 1e-12


@dataclass(frozen=True)
class AttackConfig:
    strategy: str = "MGIC"
    alpha_tv: float = 1e-1
    alpha_l2: float = 1e-5
    alpha_ca: float = 1e-6
    alpha_cpl: float = 1e-2
    lr: float = 0.01
    max_iterations: int = 20000
    restarts: int = 1
    seed: int = 0
    max_labels: int = 0            # 0 = 2 for single-label captures, 3 for multi-hot ones
    label_threshold_factor: float = 0.99
    ncb_scale: float = 7e8
    clamp_pixels: bool = True
    engine: str = "unrolled"
    ca_mode: str = "nudge"
    ca_nudge: float = 0.05         # blend weight of the one-pixel shift
    ca_window: int = 4             # half-size of the shifted window
    ca_fraction: float = 0.6       # gradient selection threshold within the value range
    ca_view: str = "spatial"
    label_mode: str = "joint"

    def __post_init__(self):
        strategy = str(self.strategy).upper()
        object.__setattr__(self, "strategy", strategy)
        if strategy not in STRATEGIES:
            raise ConfigurationError(f"strategy must be one of {STRATEGIES}, got {self.strategy!r}")
        for name in ("alpha_tv", "alpha_l2", "alpha_ca", "alpha_cpl"):
            if not getattr(self, name) >= 0:
                raise ConfigurationError(f"{name} must be nonnegative")
        if not self.lr > 0 or not self.ncb_scale > 0:
            raise ConfigurationError("lr and ncb_scale must be positive")
        if self.max_iterations < 1 or self.restarts < 1:
            raise ConfigurationError("max_iterations and restarts must be positive")
        if self.seed < 0 or self.max_labels < 0:
            raise ConfigurationError("seed and max_labels must be nonnegative")
        if not 0 < self.label_threshold_factor <= 1:
            raise ConfigurationError("label_threshold_factor must lie in (0, 1]")
        if not 0 <= self.ca_nudge <= 1 or self.ca_window < 0 or not 0 <= self.ca_fraction < 1:
            raise ConfigurationError("ca_nudge in [0,1], ca_window >= 0, ca_fraction in [0,1) required")
        for name, allowed in (("engine", ENGINES), ("ca_mode", CA_MODES),
                              ("label_mode", LABEL_MODES), ("ca_view", CA_VIEWS)):
            if getattr(self, name) not in allowed:
                raise ConfigurationError(f"{name} must be one of {allowed}, got {getattr(self, name)!r}")

    def label_cap(self, loss_kind):
        if self.max_labels:
            return self.max_labels
        return 3 if loss_kind == "bce" else 2

    @classmethod
    def keys(cls):
        return [f.name for f in fields(cls)]


@dataclass(frozen=True)
class LabelHypothesis:
    labels: tuple
    scores: tuple
    method: str  # "cross-entropy-sign" or "NCB"


@dataclass
class AttackReport:
    reconstruction: np.ndarray
    objective_trace: np.ndarray
    final_objective: float
    restart_index: int
    labels: LabelHypothesis
    ca_g: imaging.BaselinePoint
    ca_t: imaging.BaselinePoint
    baseline_flags: tuple
    terms: dict
    nudge_count: int = 0
    failed_restarts: tuple = ()
    psnr: float = None
    ssim: float = None
    wall_time: float = 0.0
    restart_objectives: tuple = field(default_factory=tuple)

    @property
    def baseline_error(self):
        """Euclidean distance between the final reconstruction's edge point and CA_g."""
        return math.sqrt(self.ca_t.distance2(self.ca_g))


# -- label inference ----------------------------------------------------------------

def _head_bias(capture):
    biases = [n for n in capture.grads if n.endswith(".bias")]
    if not biases:
        raise ConfigurationError("label inference needs a final layer with a bias")
    g = np.asarray(capture.grads[biases[-1]])
    if g.shape != (capture.class_count,):
        raise ConfigurationError("final bias gradient does not have one entry per class")
    return g


def infer_single_label(capture):
    """Label of a single-label cross-entropy capture: the unique class whose
    final-layer bias gradient is negative."""
    g = _head_bias(capture)
    neg = np.flatnonzero(g < -SIGN_TOL)
    if capture.loss_kind != "ce" or len(neg) != 1:
        raise AmbiguousLabelError(
            f"expected exactly one negative bias gradient for a single-label capture, found {len(neg)}",
            [int(i) for i in neg])
    lab = int(neg[0])
    return LabelHypothesis((lab,), (float(g[lab]),), "cross-entropy-sign")


def sign_label(capture):
    """Most negative final-bias gradient entry (lowest index on ties); usable
    on any capture, including saturated ones with no clearly negative entry."""
    g = _head_bias(capture)
    lab = int(np.argmin(g))
    return LabelHypothesis((lab,), (float(g[lab]),), "cross-entropy-sign")


def head_gradient(capture, ncb):
    """The captured gradient entry matching the label block's input layout."""
    want = ncb.input_shape[:2]
    names = [n for n, a in capture.grads.items() if a.shape == want]
    if not names:
        raise ConfigurationError(f"no captured gradient of shape {want} for the label block")
    return np.asarray(capture.grads[names[-1]])


def select_labels(scores, factor, cap, anchor=None, forced=None):
    """Threshold ``scores`` at ``factor * anchor`` and keep at most ``cap``
    labels by descending score (ties: lowest index first)."""
    s = np.asarray(scores, dtype=np.float64)
    anchor = s.max() if anchor is None else anchor
    order = sorted(range(len(s)), key=lambda i: (-s[i], i))
    chosen = [i for i in order if s[i] > factor * anchor][:cap]
    if forced is not None and forced not in chosen:
        chosen = [forced] + chosen[:cap - 1]
    if not chosen:
        chosen = [order[0]]
    chosen.sort()
    return chosen


def infer_multi_label(capture, ncb, cfg):
    """Label set from the label block's scores on the scaled head gradient."""
    if not isinstance(ncb, NCBGraph):
        raise ConfigurationError("infer_multi_label needs an NCB graph")
    g = head_gradient(capture, ncb) * cfg.ncb_scale
    scores = ncb.scores(g.reshape(ncb.input_shape))
    forced, anchor = None, None
    if capture.loss_kind == "ce":
        forced = sign_label(capture).labels[0]
        anchor = scores[forced]
    chosen = select_labels(scores, cfg.label_threshold_factor, cfg.label_cap(capture.loss_kind),
                           anchor, forced)
    return LabelHypothesis(tuple(chosen), tuple(float(scores[i]) for i in chosen), "NCB")


def hypothesis_for(strategy, capture, ncb, cfg):
    if strategy == "MGIC":
        if ncb is not None:
            return infer_multi_label(capture, ncb, cfg)
        if capture.loss_kind == "bce":
            raise ConfigurationError("MGIC on a multi-hot capture needs a label block (NCB)")
    if capture.loss_kind == "ce":
        try:
            return infer_single_label(capture)
        except AmbiguousLabelError:
            pass
    return sign_label(capture)


# -- regularizers ---------------------------------------------------------------------

def r_tv(x):
    """Total variation normalized by the pixel count; Tensor in, Tensor out."""
    if isinstance(x, Tensor):
        return imaging.total_variation(x) * (1.0 / x.size)
    x = np.asarray(x)
    return imaging.total_variation(x) / x.size


def r_tv_grad(x):
    return imaging.total_variation_grad(x) / x.size


def r_l2(x):
    if isinstance(x, Tensor):
        return (x * x).sum()
    return float(np.sum(np.asarray(x) ** 2))


def edge_point(x):
    """CA_t: Canny baseline point of the grayscale reconstruction."""
    x = x.data if isinstance(x, Tensor) else np.asarray(x)
    top = float(x.max())
    thr = max(top, 0.0)
    edges = imaging.canny(imaging.to_gray(np.clip(x, 0.0, 1.0)), 0.8 * thr, 0.9 * thr)
    return imaging.baseline_from_edges(edges)


def r_ca(x, ca_g):
    """Squared distance between the reconstruction's edge point and ``ca_g``;
    returns ``(value, ca_t)``."""
    ca_t = edge_point(x)
    return float(ca_t.distance2(ca_g)), ca_t


def _spatial_shape(model):
    if model.feature_shape is not None:
        return tuple(model.feature_shape)
    if model.head.params["weight"].shape[1] == int(np.prod(model.input_shape)):
        return tuple(model.input_shape)
    return None


def gradient_view(capture, model, view="spatial"):
    """2-D gradient matrix used for CA_g.

    ``spatial`` folds the head-weight gradient back onto the feature map
    (``[classes, C, H', W']``) and sums magnitudes over classes and channels;
    ``matrix`` uses the plain ``[classes, features]`` matrix.
    """
    g = np.asarray(capture.grads[model.head.name + ".weight"])
    shape = _spatial_shape(model)
    if view == "spatial" and shape is not None and len(shape) == 3:
        return np.abs(g.reshape((g.shape[0],) + shape)).sum(axis=(0, 1))
    return imaging.matrix_view(g)


def gradient_point(capture, model, cfg):
    view = gradient_view(capture, model, cfg.ca_view)
    return imaging.baseline_from_gradients(view, model.input_shape[1:], cfg.ca_fraction)


# -- objectives -----------------------------------------------------------------------

def _uses(strategy):
    return {
        "DLG": ("l2dist",),
        "GGI": ("cos", "tv"),
        "CPL": ("l2dist", "cpl"),
        "MGIC": ("cos", "tv", "l2", "ca"),
    }[strategy]


class Objective:
    """Attack objective for one label hypothesis.

    ``evaluate(x)`` returns ``(total, pixel_gradient, terms, ca_t)``; the
    gradient omits the R_CA term, whose coordinates are piecewise constant.
    """

    def __init__(self, strategy, model, capture, labels, cfg, ca_g=None):
        self.strategy = strategy
        self.model = model
        self.capture = capture
        self.labels = [int(v) for v in labels]
        self.cfg = cfg
        self.ca_g = ca_g
        self.uses = _uses(strategy)
        self.names = model.trainable_names()
        self.target = {n: np.asarray(capture.grads[n]) for n in self.names}
        self.target_flat = np.concatenate([self.target[n].ravel() for n in self.names])
        self.target_norm = math.sqrt(float(self.target_flat @ self.target_flat))
        self.slices, start = {}, 0
        for n in self.names:
            size = self.target[n].size
            self.slices[n] = (start, start + size, self.target[n].shape)
            start += size
        if "cos" in self.uses and self.target_norm == 0.0:
            raise DegenerateInputError("captured gradient has zero norm; cosine matching undefined")
        self.y = target_vector(self.labels, model.class_count)
        if cfg.engine == "unrolled":
            self.pass_ = SequentialPass(model, capture.loss_kind)

    def _match(self, grads):
        """Gradient-matching value and its adjoints with respect to ``grads``."""
        flat = np.concatenate([grads[n].ravel() for n in self.names])
        if "l2dist" in self.uses:
            d = flat - self.target_flat
            val, adj = float(d @ d), 2.0 * d
        else:
            n1 = math.sqrt(float(flat @ flat))
            if n1 == 0.0:
                raise DegenerateInputError("dummy gradient has zero norm; cosine matching undefined")
            n2 = self.target_norm
            c = float(flat @ self.target_flat) / (n1 * n2)
            val, adj = 1.0 - c, c / (n1 * n1) * flat - self.target_flat / (n1 * n2)
        return val, {n: adj[a:b].reshape(shape) for n, (a, b, shape) in self.slices.items()}

    def evaluate(self, x, need_grad=True):
        if self.cfg.engine == "tape":
            return self._evaluate_tape(x, need_grad)
        cfg = self.cfg
        p = self.pass_.run(x, self.labels)
        terms = {}
        match, adj = self._match(p.grads)
        terms["match"] = match
        logit_adj = None
        if "cpl" in self.uses:
            diff = p.logits[0] - self.y
            terms["cpl"] = float(diff @ diff)
            logit_adj = (2.0 * cfg.alpha_cpl * diff)[None, :]
        g = self.pass_.pullback(p, adj, logit_adj) if need_grad else None
        if "tv" in self.uses:
            terms["tv"] = r_tv(x)
            if need_grad:
                g = g + cfg.alpha_tv * r_tv_grad(x)
        if "l2" in self.uses:
            terms["l2"] = r_l2(x)
            if need_grad:
                g = g + 2.0 * cfg.alpha_l2 * x
        return self._finish(x, terms, g)

    def _finish(self, x, terms, g):
        ca_t = None
        if "ca" in self.uses:
            terms["ca"], ca_t = r_ca(x, self.ca_g)
        total = self.combine(terms)
        return total, g, terms, ca_t

    def combine(self, terms):
        cfg = self.cfg
        weights = {"match": 1.0, "tv": cfg.alpha_tv, "l2": cfg.alpha_l2, "ca": cfg.alpha_ca,
                   "cpl": cfg.alpha_cpl}
        return float(sum(weights[k] * v for k, v in terms.items()))

    def tensor_terms(self, xt):
        """Differentiable terms (all but R_CA) as Tensors of ``xt``."""
        params = self.model.param_tensors(requires_grad=True)
        logits = self.model.forward(xt, params)
        loss = sample_loss(logits, self.labels, self.capture.loss_kind)
        grads = grad(loss, [params[n] for n in self.names], create_graph=True)
        flat = F.concat([gr.reshape(-1) for gr in grads])
        target = self.target_flat
        terms = {}
        if "l2dist" in self.uses:
            d = flat - target
            terms["match"] = (d * d).sum()
        else:
            terms["match"] = 1.0 - F.cosine_similarity(flat, target)
        if "cpl" in self.uses:
            d = logits.reshape(-1) - self.y
            terms["cpl"] = (d * d).sum()
        if "tv" in self.uses:
            terms["tv"] = r_tv(xt)
        if "l2" in self.uses:
            terms["l2"] = r_l2(xt)
        return terms

    def _evaluate_tape(self, x, need_grad):
        xt = Tensor(np.array(x, dtype=np.float64), requires_grad=need_grad)
        tt = self.tensor_terms(xt)
        cfg = self.cfg
        weights = {"match": 1.0, "tv": cfg.alpha_tv, "l2": cfg.alpha_l2, "cpl": cfg.alpha_cpl}
        g = None
        if need_grad:
            total = None
            for k, v in tt.items():
                total = v * weights[k] if total is None else total + v * weights[k]
            (gx,) = grad(total, [xt])
            g = gx.data
        terms = {k: float(v.item()) for k, v in tt.items()}
        return self._finish(x, terms, g)


def objective(strategy, x, labels, capture, model, cfg, ca_g=None):
    """Objective value at ``x`` for a label hypothesis; returns ``(total, terms)``."""
    cfg = replace(cfg, strategy=strategy)
    if ca_g is None and strategy == "MGIC":
        ca_g = gradient_point(capture, model, cfg)
    obj = Objective(cfg.strategy, model, capture, labels, cfg, ca_g)
    total, _, terms, _ = obj.evaluate(np.asarray(x, dtype=np.float64), need_grad=False)
    return total, terms


# -- reconstruction loop ----------------------------------------------------------------

def _step_toward(a, b):
    return (b > a) - (b < a)


def nudge(x, ca_t, ca_g, weight, half):
    """Blend a one-pixel shift of the window around ``ca_t`` toward ``ca_g`` into ``x``."""
    dr, dc = _step_toward(ca_t.row, ca_g.row), _step_toward(ca_t.col, ca_g.col)
    if (dr, dc) == (0, 0) or weight == 0:
        return False
    h, w = x.shape[-2:]
    r0, r1 = max(ca_t.row - half, 0), min(ca_t.row + half + 1, h)
    c0, c1 = max(ca_t.col - half, 0), min(ca_t.col + half + 1, w)
    # destination window, clipped to the image
    t0, t1 = max(r0 + dr, 0), min(r1 + dr, h)
    u0, u1 = max(c0 + dc, 0), min(c1 + dc, w)
    src = x[:, t0 - dr:t1 - dr, u0 - dc:u1 - dc].copy()
    x[:, t0:t1, u0:u1] = (1.0 - weight) * x[:, t0:t1, u0:u1] + weight * src
    return True


@dataclass
class _Run:
    x: np.ndarray
    trace: list
    terms: dict
    ca_t: object
    nudges: int
    labels: tuple


def _one_run(obj, x, cfg, use_nudge):
    opt = Adam([x], lr=cfg.lr)
    trace, nudges = [], 0
    for _ in range(cfg.max_iterations):
        total, g, _, ca_t = obj.evaluate(x)
        if not math.isfinite(total) or not np.isfinite(g).all():
            raise NumericError("objective became non-finite")
        trace.append(total)
        opt.step([g])
        if cfg.clamp_pixels:
            np.clip(x, 0.0, 1.0, out=x)
        if use_nudge and ca_t is not None and nudge(x, ca_t, obj.ca_g, cfg.ca_nudge, cfg.ca_window):
            nudges += 1
    total, _, terms, ca_t = obj.evaluate(x, need_grad=False)
    if not math.isfinite(total):
        raise NumericError("objective became non-finite")
    trace.append(total)
    return _Run(x, trace, terms, ca_t, nudges, tuple(obj.labels))


def _narrow(hyp, labels):
    if tuple(labels) == tuple(hyp.labels):
        return hyp
    keep = [hyp.labels.index(lab) for lab in labels]
    return LabelHypothesis(tuple(labels), tuple(hyp.scores[i] for i in keep), hyp.method)


def run_attack(model, ncb, capture, cfg, initial=None):
    """Reconstruct an input from ``capture``.

    Each restart ``r`` starts from N(0, 1) pixels drawn with seed
    ``cfg.seed + r`` and runs Adam for ``cfg.max_iterations`` steps; the
    restart with the lowest final objective wins (earliest on ties).
    ``initial`` replaces the random start and exists for tests only.
    """
    start = time.perf_counter()
    check_capture(model, capture)
    hyp = hypothesis_for(cfg.strategy, capture, ncb, cfg)
    ca_g = gradient_point(capture, model, cfg)
    if cfg.label_mode == "per_label" and len(hyp.labels) > 1:
        label_runs = [(lab,) for lab in hyp.labels]
    else:
        label_runs = [hyp.labels]
    use_nudge = cfg.strategy == "MGIC" and cfg.ca_mode == "nudge" and cfg.alpha_ca > 0
    runs, failed = [], []
    for r in range(cfg.restarts):
        for labels in label_runs:
            idx = len(runs)
            if initial is not None:
                x = np.array(initial, dtype=np.float64).reshape(model.input_shape)
            else:
                x = np.random.default_rng(cfg.seed + r).standard_normal(model.input_shape)
            try:
                obj = Objective(cfg.strategy, model, capture, labels, cfg, ca_g)
                runs.append(_one_run(obj, x, cfg, use_nudge))
            except (NumericError, DegenerateInputError, FloatingPointError):
                failed.append(idx)
                runs.append(None)
    finals = [run.trace[-1] if run is not None else math.inf for run in runs]
    if all(run is None for run in runs):
        raise AttackError(f"all {len(runs)} restarts failed")
    best = int(np.argmin(finals))
    run = runs[best]
    ca_t = run.ca_t if run.ca_t is not None else edge_point(run.x)
    flags = []
    if ca_g.fallback:
        flags.append("ca_g_center")
    if ca_t.fallback:
        flags.append("ca_t_center")
    return AttackReport(
        reconstruction=run.x,
        objective_trace=np.array(run.trace),
        final_objective=float(run.trace[-1]),
        restart_index=best,
        labels=_narrow(hyp, run.labels),
        ca_g=ca_g,
        ca_t=ca_t,
        baseline_flags=tuple(flags),
        terms=dict(run.terms),
        nudge_count=run.nudges,
        failed_restarts=tuple(failed),
        wall_time=time.perf_counter() - start,
        restart_objectives=tuple(finals),
    )
