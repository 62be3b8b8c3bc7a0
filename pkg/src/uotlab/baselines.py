"""Comparison unlearning methods adapted to a one-step generator.

The "training loss" of the generator is its distillation regression
``|G(z) - teacher(z)|^2`` against the frozen teacher ODE. Forget data is
realised as prior noise whose G_pre output falls in the forget region.

* ``ga``    gradient ascent on the forget training loss
* ``vdu``   ascent plus a quadratic pull toward parameter statistics
* ``sa``    noise mapping on forget noise, regression on pseudo-retain
            noise and a diagonal-Fisher EWC anchor
* ``salun`` the same base loss restricted to the top saliency entries
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .cost import in_forget_region
from .flowmap import integrate_ode
from .nn import AdamState, ParamStore, adam_step, mlp_backward

log = logging.getLogger(__name__)

METHODS = ("ga", "vdu", "sa", "salun")


@dataclass
class BaselineConfig:
    method: str = "vdu"
    iterations: int = 1000
    lr: float = 1.6e-4
    batch_size: int = 256
    gamma: float = 0.005
    alpha: float = 0.1
    beta: float = 5.0
    lambda_sa: float = 5.0
    sparsity: float = 0.95
    n_pseudo: int = 8192
    n_fisher: int = 512
    stats_segments: int = 4
    stats_steps: int = 500
    stats_lr: float = 1e-2
    stats_batch: int = 128
    stats_pool: int = 8192
    sigma_floor: float = 1e-6
    teacher_steps: int = 50
    seed: int = 0
    eval_every: int = 50

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown baseline {self.method!r}; choose from {METHODS}")
        if not 0.0 < self.gamma < 1.0:
            raise ValueError("gamma must lie in (0, 1)")
        if not 0.0 < self.sparsity < 1.0:
            raise ValueError("sparsity must lie in (0, 1)")
        if self.alpha < 0 or self.beta < 0 or self.lambda_sa < 0:
            raise ValueError("alpha, beta and lambda_sa must be non-negative")
        if self.iterations < 0 or self.batch_size < 1:
            raise ValueError("iterations must be >= 0 and batch_size >= 1")


# --- training loss ----------------------------------------------------------

def teacher_targets(teacher, z, n_steps=50):
    return integrate_ode(teacher, z, n_steps)


def per_sample_train_loss(gen, teacher, z, n_steps=50, targets=None):
    """``|G(z) - teacher(z)|^2`` per noise row."""
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    y = teacher_targets(teacher, z, n_steps) if targets is None else targets
    return ((gen(z) - y) ** 2).sum(axis=1)


def _regression(gen, z, y):
    """Mean regression loss and its parameter gradient."""
    out, cache = gen.mlp.forward(z)
    resid = out - y
    loss = float((resid ** 2).sum(axis=1).mean())
    grads, _ = gen.mlp.backward(z, 2.0 * resid / len(z), cache)
    return loss, grads


def _axpy(acc, scale, other):
    for a, b in zip(acc.arrays(), other.arrays()):
        a += scale * b
    return acc


# --- pseudo sets ------------------------------------------------------------

@dataclass
class PseudoSets:
    """Forget noise and pseudo-retain noise with their teacher targets."""
    forget_noise: np.ndarray
    forget_targets: np.ndarray
    retain_noise: np.ndarray
    retain_samples: np.ndarray
    retain_targets: np.ndarray
    seed: int


def build_pseudo_sets(g_pre, teacher, extractor, anchor, cost_cfg, n, seed, n_steps=50):
    """Split ``n`` prior draws by whether G_pre lands in the forget region."""
    z = np.random.default_rng(seed).standard_normal((n, g_pre.dimension))
    x = g_pre(z)
    region = in_forget_region(x, extractor, anchor, cost_cfg)
    if not region.any():
        raise ValueError(f"no forget-region samples among {n} draws; increase n or the margin")
    y = teacher_targets(teacher, z, n_steps)
    return PseudoSets(z[region], y[region], z[~region], x[~region], y[~region], seed)


# --- VDU statistics -----------------------------------------------------------

@dataclass
class ParamStatistics:
    mean: ParamStore
    std: ParamStore
    count: int


def compute_param_statistics(g_pre, teacher, config):
    """Mean and spread of the parameters over short fine-tuning snapshots.

    Fine-tunes a copy of ``g_pre`` on the full distillation task for
    ``stats_segments`` segments of ``stats_steps`` Adam steps, snapshotting
    before the first and after each segment. ``sigma_floor`` is added to
    the standard deviation.
    """
    rng = np.random.default_rng(config.seed + 11)
    z_pool = rng.standard_normal((config.stats_pool, g_pre.dimension))
    y_pool = teacher_targets(teacher, z_pool, config.teacher_steps)
    gen = g_pre.copy()
    opt = AdamState.for_params(gen.params, lr=config.stats_lr)
    snaps = [gen.params.flat()]
    for _ in range(config.stats_segments):
        for _ in range(config.stats_steps):
            idx = rng.integers(0, config.stats_pool, size=config.stats_batch)
            _, g = _regression(gen, z_pool[idx], y_pool[idx])
            adam_step(gen.params, g, opt)
        snaps.append(gen.params.flat())
    snaps = np.stack(snaps)
    template = g_pre.params
    return ParamStatistics(template.unflat(snaps.mean(axis=0)),
                           template.unflat(snaps.std(axis=0) + config.sigma_floor), len(snaps))


def vdu_gradient(gen, stats, z_forget, y_forget, gamma):
    """Gradient of ``-(1-gamma) L_forget + gamma sum (theta - mu)^2 / (2 sigma^2)``."""
    loss, g = _regression(gen, z_forget, y_forget)
    total = 0.0
    for gi, th, mu, sd in zip(g.arrays(), gen.params.arrays(), stats.mean.arrays(),
                              stats.std.arrays()):
        diff = th - mu
        total += float((diff ** 2 / (2.0 * sd ** 2)).sum())
        gi *= -(1.0 - gamma)
        gi += gamma * diff / sd ** 2
    return -(1.0 - gamma) * loss + gamma * total, g


# --- SA / SalUn -------------------------------------------------------------

def fisher_diagonal(gen, z, y):
    """Mean squared per-sample gradient of the regression loss."""
    acc = gen.params.zeros_like()
    for i in range(len(z)):
        zi, yi = z[i:i + 1], y[i:i + 1]
        out, cache = gen.mlp.forward(zi)
        g, _ = mlp_backward(gen.spec, gen.params, zi, 2.0 * (out - yi), cache)
        for a, b in zip(acc.arrays(), g.arrays()):
            a += b * b
    for a in acc.arrays():
        a /= len(z)
    return acc


def _base_loss(gen, sets, config, rng):
    """``alpha |G(z_f) - eps|^2 + beta L_train(z_r)`` on fresh minibatches."""
    n = config.batch_size
    loss = 0.0
    grads = gen.params.zeros_like()
    if config.alpha > 0:
        zf = sets.forget_noise[rng.integers(0, len(sets.forget_noise), size=n)]
        eps = rng.standard_normal(zf.shape)
        lf, gf = _regression(gen, zf, eps)
        loss += config.alpha * lf
        _axpy(grads, config.alpha, gf)
    if config.beta > 0:
        idx = rng.integers(0, len(sets.retain_noise), size=n)
        lr_, gr = _regression(gen, sets.retain_noise[idx], sets.retain_targets[idx])
        loss += config.beta * lr_
        _axpy(grads, config.beta, gr)
    return loss, grads


def saliency_mask(gen, z_forget, y_forget, sparsity):
    """Boolean mask of the top ``1 - sparsity`` entries of |grad L_forget|."""
    _, g = _regression(gen, z_forget, y_forget)
    flat = np.abs(g.flat())
    # floor so the frozen share never drops below ``sparsity``
    k = max(1, int(np.floor((1.0 - sparsity) * flat.size + 1e-9)))
    # stable sort so ties resolve by position and the count is exact
    order = np.argsort(-flat, kind="stable")
    m = np.zeros(flat.size, dtype=bool)
    m[order[:k]] = True
    store = gen.params.unflat(m.astype(np.float64))
    return ParamStore([w.astype(bool) for w in store.weights],
                      [b.astype(bool) for b in store.biases])


# --- runners ----------------------------------------------------------------

def _run(gen, step_fn, config, eval_fn, mask=None):
    opt = AdamState.for_params(gen.params, lr=config.lr)
    rows = []
    window = []

    def record(it):
        row = {"iter": it, "dual_loss": None,
               "gen_loss": float(np.mean(window)) if window else None,
               "region_hit_rate": None, "clamp_count": 0}
        if eval_fn is not None:
            row.update(eval_fn(gen))
        rows.append(row)

    record(0)
    for it in range(1, config.iterations + 1):
        loss, grads = step_fn()
        adam_step(gen.params, grads, opt, mask=mask)
        window.append(loss)
        if config.eval_every and it % config.eval_every == 0 or it == config.iterations:
            record(it)
            window = []
    return gen, rows


def ga_unlearn(g_pre, sets, config, eval_fn=None):
    """Ascend the training loss on the forget noise."""
    gen = g_pre.copy()
    rng = np.random.default_rng(config.seed)

    def step():
        idx = rng.integers(0, len(sets.forget_noise), size=config.batch_size)
        loss, g = _regression(gen, sets.forget_noise[idx], sets.forget_targets[idx])
        for a in g.arrays():
            a *= -1.0
        return -loss, g

    return _run(gen, step, config, eval_fn)


def vdu_unlearn(g_pre, stats, sets, config, eval_fn=None):
    """Forget-loss ascent regularised toward the parameter statistics."""
    if stats.count != 5:
        raise ValueError(f"VDU expects 5 statistics snapshots, got {stats.count}")
    gen = g_pre.copy()
    rng = np.random.default_rng(config.seed)

    def step():
        idx = rng.integers(0, len(sets.forget_noise), size=config.batch_size)
        return vdu_gradient(gen, stats, sets.forget_noise[idx], sets.forget_targets[idx],
                            config.gamma)

    return _run(gen, step, config, eval_fn)


def sa_unlearn(g_pre, sets, config, eval_fn=None, fisher=None):
    """Noise mapping plus pseudo-retain regression plus diagonal-Fisher EWC."""
    gen = g_pre.copy()
    rng = np.random.default_rng(config.seed)
    if fisher is None:
        k = min(config.n_fisher, len(sets.retain_noise))
        fisher = fisher_diagonal(g_pre, sets.retain_noise[:k], sets.retain_targets[:k])
    theta_pre = g_pre.params.copy()

    def step():
        loss, grads = _base_loss(gen, sets, config, rng)
        for g, th, t0, f in zip(grads.arrays(), gen.params.arrays(), theta_pre.arrays(),
                                fisher.arrays()):
            diff = th - t0
            loss += 0.5 * config.lambda_sa * float((f * diff ** 2).sum())
            g += config.lambda_sa * f * diff
        return loss, grads

    return _run(gen, step, config, eval_fn)


def salun_unlearn(g_pre, sets, config, eval_fn=None):
    """SA base loss (no EWC) with updates confined to the saliency mask."""
    gen = g_pre.copy()
    rng = np.random.default_rng(config.seed)
    mask = saliency_mask(g_pre, sets.forget_noise, sets.forget_targets, config.sparsity)

    def step():
        return _base_loss(gen, sets, config, rng)

    gen, rows = _run(gen, step, config, eval_fn, mask=mask)
    return gen, rows, mask
