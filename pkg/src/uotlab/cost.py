"""Entropy functions, feature extractor, forget anchor and the unlearning cost."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import NONE, nearest_mode
from .flowmap import generate
from .nn import AdamState, Mlp, MlpSpec, ShapeError, adam_step

ENTROPY_KINDS = ("kl", "chi2")


@dataclass
class EntropyFn:
    """Marginal penalty ``scale * psi_1(r)`` and its convex conjugate.

    ``kl``:   psi_1(r) = r log r - r + 1,  psi_1*(s) = exp(s) - 1
    ``chi2``: psi_1(r) = (r - 1)^2,        psi_1*(s) = s + s^2/4 for s >= -2, else -1

    Conjugate inputs above ``clamp`` (default ``20 * scale``) are clamped
    and counted in ``clamp_count``.
    """

    kind: str = "kl"
    scale: float = 1.0
    clamp: float | None = None
    clamp_count: int = field(default=0, compare=False)

    def __post_init__(self):
        if self.kind not in ENTROPY_KINDS:
            raise ValueError(f"unknown entropy kind {self.kind!r}; choose from {ENTROPY_KINDS}")
        if self.scale <= 0:
            raise ValueError("entropy scale must be positive")
        if self.clamp is None:
            self.clamp = 20.0 * self.scale

    def psi(self, r):
        r = np.asarray(r, dtype=np.float64)
        if np.any(r < 0):
            raise ValueError("entropy function is only defined for r >= 0")
        if self.kind == "kl":
            with np.errstate(divide="ignore", invalid="ignore"):
                v = np.where(r > 0, r * np.log(np.where(r > 0, r, 1.0)) - r + 1.0, 1.0)
        else:
            v = (r - 1.0) ** 2
        return self.scale * v

    def dpsi(self, r):
        """Derivative of ``psi`` for r > 0."""
        r = np.asarray(r, dtype=np.float64)
        if self.kind == "kl":
            return self.scale * np.log(r)
        return self.scale * 2.0 * (r - 1.0)

    def _clamped(self, s):
        s = np.asarray(s, dtype=np.float64)
        over = s > self.clamp
        n = int(np.count_nonzero(over))
        if n:
            self.clamp_count += n
            s = np.where(over, self.clamp, s)
        return s, over

    def psi_star(self, s):
        s, _ = self._clamped(s)
        u = s / self.scale
        if self.kind == "kl":
            v = np.expm1(u)
        else:
            v = np.where(u >= -2.0, u + 0.25 * u * u, -1.0)
        return self.scale * v

    def psi_star_grad(self, s):
        """Derivative of ``psi_star``; zero beyond the clamp."""
        s = np.asarray(s, dtype=np.float64)
        over = s > self.clamp
        u = np.minimum(s, self.clamp) / self.scale
        if self.kind == "kl":
            g = np.exp(u)
        else:
            g = np.where(u >= -2.0, 1.0 + 0.5 * u, 0.0)
        return np.where(over, 0.0, g)

    def to_dict(self):
        return {"kind": self.kind, "scale": self.scale, "clamp": self.clamp}


def psi(fn, r):
    return fn.psi(r)


def psi_star(fn, s):
    return fn.psi_star(s)


# --- features --------------------------------------------------------------

class FeatureExtractor:
    """Raw coordinates, or the penultimate activations of a trained classifier."""

    def __init__(self, kind="classifier", classifier=None, dimension=2, accuracy=None):
        if kind not in ("raw", "classifier"):
            raise ValueError(f"unknown feature kind {kind!r}")
        if kind == "classifier" and classifier is None:
            raise ValueError("classifier features require a trained classifier")
        self.kind = kind
        self.classifier = classifier
        self.accuracy = accuracy
        if kind == "classifier":
            spec = classifier.spec
            body = MlpSpec(spec.layer_widths[:-1], spec.activation, spec.activation, spec.slope)
            p = classifier.params
            from .nn import ParamStore
            self._body = Mlp(body, ParamStore(p.weights[:-1], p.biases[:-1]))
            self.feature_dim = body.d_out
            self.dimension = spec.d_in
        else:
            self._body = None
            self.feature_dim = dimension
            self.dimension = dimension

    def __call__(self, x):
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if self.kind == "raw":
            return x.copy()
        return self._body(x)

    def forward(self, x):
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if self.kind == "raw":
            return x.copy(), None
        return self._body.forward(x)

    def input_grad(self, x, grad_features, cache=None):
        """Pull a gradient w.r.t. features back to the input (parameters stay frozen)."""
        if self.kind == "raw":
            return np.asarray(grad_features, dtype=np.float64)
        _, gx = self._body.backward(x, grad_features, cache)
        return gx

    def logits(self, x):
        if self.kind != "classifier":
            raise ValueError("raw features have no classifier head")
        return self.classifier(x)


@dataclass
class FeatureConfig:
    kind: str = "classifier"
    hidden: tuple = (32, 32)
    n_samples: int = 20000
    holdout_frac: float = 0.2
    iters: int = 3000
    batch_size: int = 256
    lr: float = 1e-3
    min_accuracy: float = 0.98
    seed: int = 0


class AccuracyError(RuntimeError):
    def __init__(self, accuracy, floor):
        self.accuracy = accuracy
        super().__init__(f"feature classifier reached accuracy {accuracy:.4f} < {floor}")


def _softmax_xent(logits, labels):
    z = logits - logits.max(axis=1, keepdims=True)
    p = np.exp(z)
    p /= p.sum(axis=1, keepdims=True)
    n = len(labels)
    loss = -np.log(p[np.arange(n), labels] + 1e-300).mean()
    g = p.copy()
    g[np.arange(n), labels] -= 1.0
    return loss, g / n


def train_feature_classifier(gen, spec, config):
    """Classify G_pre samples by nearest mode and wrap the classifier's penultimate layer.

    Samples outside every mode's 3-sigma ball are dropped from training.
    Raises :class:`AccuracyError` when held-out accuracy stays below the floor.
    """
    if config.kind == "raw":
        return FeatureExtractor("raw", dimension=spec.dimension)
    rng = np.random.default_rng(config.seed)
    x = generate(gen, config.n_samples, int(rng.integers(2**63)))
    y = nearest_mode(x, spec, 3.0)
    keep = y != NONE
    x, y = x[keep], y[keep]
    n_ho = int(len(x) * config.holdout_frac)
    x_ho, y_ho, x_tr, y_tr = x[:n_ho], y[:n_ho], x[n_ho:], y[n_ho:]
    mspec = MlpSpec((spec.dimension, *config.hidden, spec.n_modes), activation="leaky_relu")
    clf = Mlp(mspec, seed=int(rng.integers(2**63)))
    opt = AdamState.for_params(clf.params, lr=config.lr)
    for _ in range(config.iters):
        idx = rng.integers(0, len(x_tr), size=config.batch_size)
        xb = x_tr[idx]
        out, cache = clf.forward(xb)
        _, g = _softmax_xent(out, y_tr[idx])
        grads, _ = clf.backward(xb, g, cache)
        adam_step(clf.params, grads, opt)
    acc = float((clf(x_ho).argmax(axis=1) == y_ho).mean())
    if acc < config.min_accuracy:
        raise AccuracyError(acc, config.min_accuracy)
    return FeatureExtractor("classifier", clf, accuracy=acc)


@dataclass
class ForgetAnchor:
    mu_f: np.ndarray
    source_sample_count: int

    def __post_init__(self):
        self.mu_f = np.asarray(self.mu_f, dtype=np.float64).ravel()
        if not np.all(np.isfinite(self.mu_f)):
            raise ValueError("anchor must be finite")
        if self.source_sample_count < 1:
            raise ValueError("anchor needs at least one source sample")


def compute_anchor(extractor, forget_samples):
    """Mean feature vector of the forget samples."""
    x = np.asarray(forget_samples, dtype=np.float64)
    if x.size == 0:
        raise ValueError("cannot compute an anchor from zero forget samples")
    x = np.atleast_2d(x)
    return ForgetAnchor(extractor(x).mean(axis=0), len(x))


# --- distances and the cost ------------------------------------------------

@dataclass
class CostConfig:
    lam: float = 1.0
    tau: float = 0.01
    margin: float = 0.34
    distance: str = "cosine"

    def __post_init__(self):
        if self.distance not in ("cosine", "euclidean"):
            raise ValueError(f"unknown distance {self.distance!r}")
        # margin None means "calibrate before use"
        if self.lam < 0 or self.tau < 0 or (self.margin is not None and self.margin < 0):
            raise ValueError("lam, tau and margin must be non-negative")
        if self.distance == "cosine" and self.margin is not None and self.margin > 2:
            raise ValueError("cosine margin cannot exceed 2")


def cosine_distance(a, b):
    """``1 - a.b / (|a| |b|)``; rows of ``a`` are compared to ``b``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na = np.linalg.norm(a, axis=-1)
    nb = np.linalg.norm(b, axis=-1)
    if np.any(na == 0) or np.any(nb == 0):
        raise ValueError("cosine distance is undefined for zero-norm vectors")
    d = 1.0 - (a * b).sum(axis=-1) / (na * nb)
    return np.clip(d, 0.0, 2.0)


def feature_distance(feats, anchor, distance, with_grad=False):
    """Distance of each feature row to the anchor, optionally with d(dist)/d(feature)."""
    mu = anchor.mu_f
    if feats.shape[-1] != mu.shape[0]:
        raise ShapeError("features", ("n", mu.shape[0]), feats.shape)
    if distance == "cosine":
        d = cosine_distance(feats, mu)
        if not with_grad:
            return d
        nf = np.linalg.norm(feats, axis=1, keepdims=True)
        nm = np.linalg.norm(mu)
        cos = (feats @ mu)[:, None] / (nf[:, 0:1] * nm)
        grad = -(mu[None, :] / (nf * nm) - cos * feats / nf ** 2)
        return d, grad
    diff = feats - mu
    d = np.linalg.norm(diff, axis=1)
    if not with_grad:
        return d
    safe = np.where(d > 0, d, 1.0)[:, None]
    return d, np.where(d[:, None] > 0, diff / safe, 0.0)


def in_forget_region(x, extractor, anchor, cfg):
    """True where ``distance(f(x), mu_f) < margin`` (strict)."""
    if cfg.margin is None:
        raise ValueError("cost margin has not been calibrated")
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    d = feature_distance(extractor(np.atleast_2d(x)), anchor, cfg.distance)
    r = d < cfg.margin
    return bool(r[0]) if single else r


def unlearn_cost(x_pre, x_cur, extractor, anchor, cfg, with_grad=False):
    """Per-sample unlearning cost.

    Inside the forget region the cost is the hinge ``lam * (m - d(f(x_cur), mu_f))``;
    elsewhere it is ``tau * |x_pre - x_cur|^2``. Membership depends on
    ``x_cur`` only and is returned as a boolean array. With ``with_grad``
    the gradient w.r.t. ``x_cur`` is returned as a third value; membership
    itself is treated as a constant.
    """
    if cfg.margin is None:
        raise ValueError("cost margin has not been calibrated")
    x_pre = np.atleast_2d(np.asarray(x_pre, dtype=np.float64))
    x_cur = np.atleast_2d(np.asarray(x_cur, dtype=np.float64))
    if x_pre.shape != x_cur.shape:
        raise ShapeError("x_cur", x_pre.shape, x_cur.shape)
    feats, cache = extractor.forward(x_cur)
    if with_grad:
        d, dd = feature_distance(feats, anchor, cfg.distance, with_grad=True)
    else:
        d = feature_distance(feats, anchor, cfg.distance)
    region = d < cfg.margin
    diff = x_cur - x_pre
    cost = np.where(region, cfg.lam * (cfg.margin - d), cfg.tau * (diff ** 2).sum(axis=1))
    if not with_grad:
        return cost, region
    grad = 2.0 * cfg.tau * diff
    if np.any(region):
        gf = np.where(region[:, None], -cfg.lam * dd, 0.0)
        gx = extractor.input_grad(x_cur, gf, cache)
        grad = np.where(region[:, None], gx, grad)
    return cost, region, grad


def calibrate_margin(extractor, anchor, heldout_forget, distance, q=95.0, lo=0.05, hi=1.0,
                     retain=None, gap_frac=0.9, retain_q=5.0):
    """Pick the region margin from anchor distances.

    Without ``retain`` this is the ``q``-th percentile of held-out forget
    distances clamped to ``[lo, hi]``. With ``retain`` samples the margin is
    placed ``gap_frac`` of the way from that percentile to the
    ``retain_q``-th percentile of retain distances, so the region reaches
    up to the edge of the retain supports.
    """
    d_f = np.percentile(feature_distance(extractor(heldout_forget), anchor, distance), q)
    if retain is None:
        return float(np.clip(d_f, lo, hi))
    if not 0.0 <= gap_frac <= 1.0:
        raise ValueError("gap_frac must lie in [0, 1]")
    d_r = np.percentile(feature_distance(extractor(retain), anchor, distance), retain_q)
    if d_r <= d_f:
        raise ValueError(f"retain distances ({d_r:.4f}) do not clear the forget band ({d_f:.4f})")
    m = d_f + gap_frac * (d_r - d_f)
    return float(min(m, 2.0) if distance == "cosine" else m)
