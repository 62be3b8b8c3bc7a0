"""Data-free class unlearning by semi-dual unbalanced optimal transport.

Each iteration draws three independent prior batches. A scalar potential
``v`` is updated on::

    mean_B1 psi1*(v(G(z)) - c(G_pre(z), G(z))) + mean_B2 psi2*(-v(G_pre(z)))

with the generator outputs held fixed, then the generator ``G`` (started
from ``G_pre``) is updated on ``mean_B3 [c(G_pre(z), G(z)) - v(G(z))]``
with the potential held fixed. ``c`` is the forget-hinge / retain-L2
cost from :mod:`uotlab.cost`. Only prior noise, ``G_pre`` outputs, the
frozen extractor and the precomputed anchor are touched.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .cost import CostConfig, EntropyFn, unlearn_cost
from .flowmap import OneStepGenerator
from .nn import (AdamState, Mlp, MlpSpec, NonFiniteError, adam_step, ema_update,
                 input_grad_penalty)

log = logging.getLogger(__name__)

RUN_COLUMNS = ("iter", "dual_loss", "gen_loss", "region_hit_rate", "clamp_count",
               "pul", "frechet_retain", "oos_mass")
CSV_HEADER = "# uotlab run record v1"


@dataclass
class UnlearnConfig:
    cost: CostConfig = field(default_factory=CostConfig)
    psi1: EntropyFn = field(default_factory=EntropyFn)
    # a weaker target penalty lets the bounded forget hinge win against the
    # log-density-ratio pull back toward the forget mode
    psi2: EntropyFn = field(default_factory=lambda: EntropyFn("kl", 0.2))
    batch1: int = 256
    batch2: int = 256
    batch3: int = 256
    gen_lr: float = 1.6e-4
    pot_lr: float = 1.0e-4
    iterations: int = 5000
    ema_decay: float | None = None
    seed: int = 0
    eval_every: int = 500
    potential_hidden: tuple = (128, 128)
    max_nonfinite: int = 5
    r1_gamma: float = 0.0
    # low-momentum Adam keeps the alternating updates from overshooting off support
    adam_betas: tuple = (0.5, 0.9)

    def __post_init__(self):
        if min(self.batch1, self.batch2, self.batch3) < 1:
            raise ValueError("batch sizes must be >= 1")
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if self.ema_decay is not None and not 0.0 < self.ema_decay < 1.0:
            raise ValueError("ema_decay must lie in (0, 1)")
        if self.r1_gamma < 0:
            raise ValueError("r1_gamma must be >= 0")
        if len(self.adam_betas) != 2 or not all(0.0 <= b < 1.0 for b in self.adam_betas):
            raise ValueError("adam_betas must be two values in [0, 1)")


@dataclass
class UnlearnState:
    g_pre: OneStepGenerator
    g_theta: OneStepGenerator
    v_phi: Mlp
    extractor: object
    anchor: object
    config: UnlearnConfig
    opt_g: AdamState
    opt_v: AdamState
    rng: np.random.Generator
    iteration: int = 0
    pre_digest: str = ""
    nonfinite_streak: int = 0
    history: list = field(default_factory=list)

    @classmethod
    def create(cls, g_pre, extractor, anchor, config):
        rng = np.random.default_rng(config.seed)
        d = g_pre.dimension
        v_spec = MlpSpec((d, *config.potential_hidden, 1), activation="leaky_relu", slope=0.2)
        v_phi = Mlp(v_spec, seed=int(rng.integers(2**63)))
        g_theta = OneStepGenerator(g_pre.mlp.copy())
        if config.ema_decay is not None:
            g_theta.ema_params = g_pre.params.copy()
        return cls(
            g_pre=g_pre, g_theta=g_theta, v_phi=v_phi, extractor=extractor, anchor=anchor,
            config=config,
            opt_g=AdamState.for_params(g_theta.params, config.gen_lr, *config.adam_betas),
            opt_v=AdamState.for_params(v_phi.params, config.pot_lr, *config.adam_betas),
            rng=rng, pre_digest=g_pre.params.digest(),
        )

    def output_generator(self):
        """The generator to evaluate and persist: EMA weights when enabled."""
        if self.g_theta.ema_params is None:
            return self.g_theta
        return OneStepGenerator(Mlp(self.g_theta.spec, self.g_theta.ema_params.copy()))

    def check_g_pre(self):
        if self.g_pre.params.digest() != self.pre_digest:
            raise RuntimeError("the frozen pretrained generator was modified")


def _cost(state, z, with_grad=False):
    x_pre = state.g_pre(z)
    y, cache = state.g_theta.mlp.forward(z)
    out = unlearn_cost(x_pre, y, state.extractor, state.anchor, state.config.cost,
                       with_grad=with_grad)
    return (y, cache, x_pre) + tuple(out)


def dual_loss(state, b1, b2, with_grad=False):
    """Potential objective on batches ``b1`` (through G) and ``b2`` (through G_pre).

    Returns the loss, or ``(loss, grads, parts)`` when ``with_grad`` is
    set; ``parts`` holds the per-sample potentials and costs.
    """
    cfg = state.config
    y1, _, _, c1, region = _cost(state, b1)
    p2 = state.g_pre(b2)
    inp = np.concatenate([y1, p2])
    out, vcache = state.v_phi.forward(inp)
    v1, v2 = out[:len(b1), 0], out[len(b1):, 0]
    s1 = v1 - c1
    loss = float(cfg.psi1.psi_star(s1).mean() + cfg.psi2.psi_star(-v2).mean())
    r1 = 0.0
    if cfg.r1_gamma > 0:
        # gradient penalty on the potential at target (G_pre) samples
        r1, r1_grads = input_grad_penalty(state.v_phi.spec, state.v_phi.params, p2)
        loss += cfg.r1_gamma * r1
    if not with_grad:
        return loss
    up = np.concatenate([cfg.psi1.psi_star_grad(s1) / len(b1),
                         -cfg.psi2.psi_star_grad(-v2) / len(b2)])[:, None]
    grads, _ = state.v_phi.backward(inp, up, vcache)
    parts = {"v1": v1, "c1": c1, "v2": v2, "region1": region}
    if cfg.r1_gamma > 0:
        grads = grads.unflat(grads.flat() + cfg.r1_gamma * r1_grads.flat())
        parts["r1"] = r1
    return loss, grads, parts


def generator_loss(state, b3, with_grad=False):
    """Generator objective ``mean [c(G_pre(z), G(z)) - v(G(z))]`` on batch ``b3``."""
    y3, gcache, _, c3, region, gc = _cost(state, b3, with_grad=True)
    v3, vcache = state.v_phi.forward(y3)
    loss = float((c3 - v3[:, 0]).mean())
    if not with_grad:
        return loss
    n = len(b3)
    _, dv_dy = state.v_phi.backward(y3, np.full((n, 1), 1.0 / n), vcache)
    grad_y = gc / n - dv_dy
    grads, _ = state.g_theta.mlp.backward(b3, grad_y, gcache)
    parts = {"c3": c3, "v3": v3[:, 0], "region3": region}
    return loss, grads, parts


def sample_batches(state):
    cfg = state.config
    d = state.g_pre.dimension
    return (state.rng.standard_normal((cfg.batch1, d)),
            state.rng.standard_normal((cfg.batch2, d)),
            state.rng.standard_normal((cfg.batch3, d)))


def unlearn_step(state):
    """One potential update followed by one generator update."""
    cfg = state.config
    b1, b2, b3 = sample_batches(state)
    clamp_before = cfg.psi1.clamp_count + cfg.psi2.clamp_count
    ld, gv, dparts = dual_loss(state, b1, b2, with_grad=True)
    finite = np.isfinite(ld)
    if finite:
        adam_step(state.v_phi.params, gv, state.opt_v)
        lg, gg, gparts = generator_loss(state, b3, with_grad=True)
        finite = np.isfinite(lg)
        if finite:
            adam_step(state.g_theta.params, gg, state.opt_g)
            if cfg.ema_decay is not None:
                ema_update(state.g_theta.ema_params, state.g_theta.params, cfg.ema_decay)
    if not finite:
        state.nonfinite_streak += 1
        if state.nonfinite_streak >= cfg.max_nonfinite:
            raise NonFiniteError(f"{state.nonfinite_streak} consecutive non-finite losses "
                                 f"at iteration {state.iteration}")
        state.iteration += 1
        return state
    state.nonfinite_streak = 0
    state.iteration += 1
    state.history.append({
        "dual_loss": ld, "gen_loss": lg,
        "region_hit_rate": float(gparts["region3"].mean()),
        "clamp_count": cfg.psi1.clamp_count + cfg.psi2.clamp_count - clamp_before,
    })
    return state


def region_hit_rate(gen, extractor, anchor, cost_cfg, n=4096, seed=12345):
    from .cost import in_forget_region
    from .flowmap import generate
    return float(in_forget_region(generate(gen, n, seed), extractor, anchor, cost_cfg).mean())


def _row(state, window, eval_fn):
    row = {"iter": state.iteration}
    if window:
        for k in ("dual_loss", "gen_loss", "region_hit_rate"):
            row[k] = float(np.mean([h[k] for h in window]))
        row["clamp_count"] = int(sum(h["clamp_count"] for h in window))
    else:
        b1, b2, b3 = sample_batches(state)
        gl, _, gparts = generator_loss(state, b3, with_grad=True)
        row.update(dual_loss=dual_loss(state, b1, b2), gen_loss=gl,
                   region_hit_rate=float(gparts["region3"].mean()), clamp_count=0)
    if eval_fn is not None:
        row.update(eval_fn(state.output_generator()))
    return row


def run_unlearn(g_pre, extractor, anchor, config, eval_fn=None, callback=None):
    """Run the full alternating optimisation.

    ``eval_fn(generator) -> dict`` (e.g. PUL / Frechet / out-of-support
    mass) is called at iteration 0 and every ``eval_every`` iterations.
    ``callback(state)`` fires at the same points (checkpointing).
    Returns ``(g_theta, rows, state)`` where ``rows`` follow
    :data:`RUN_COLUMNS`.
    """
    state = UnlearnState.create(g_pre, extractor, anchor, config)
    rows = [_row(state, [], eval_fn)]
    if callback:
        callback(state)
    start = 0
    for _ in range(config.iterations):
        unlearn_step(state)
        if config.eval_every and state.iteration % config.eval_every == 0 \
                or state.iteration == config.iterations:
            state.check_g_pre()
            rows.append(_row(state, state.history[start:], eval_fn))
            start = len(state.history)
            if callback:
                callback(state)
            log.info("unlearn iter %d %s", state.iteration, rows[-1])
    state.check_g_pre()
    return state.output_generator(), rows, state


def write_run_csv(path, rows):
    with open(path, "w") as fh:
        fh.write(CSV_HEADER + "\n")
        fh.write(",".join(RUN_COLUMNS) + "\n")
        for r in rows:
            fh.write(",".join(_fmt(r.get(c, "")) for c in RUN_COLUMNS) + "\n")


def read_run_csv(path):
    with open(path) as fh:
        lines = [ln.strip() for ln in fh if not ln.startswith("#")]
    cols = lines[0].split(",")
    out = []
    for ln in lines[1:]:
        out.append({c: (float(v) if v != "" else None) for c, v in zip(cols, ln.split(","))})
    return out


def _fmt(v):
    if v is None or v == "":
        return ""
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


# --- UOTM pretraining (noise -> data) --------------------------------------

@dataclass
class UotmConfig:
    psi1: EntropyFn = field(default_factory=EntropyFn)
    psi2: EntropyFn = field(default_factory=EntropyFn)
    tau: float = 1.0
    batch_size: int = 256
    gen_lr: float = 1.6e-4
    pot_lr: float = 1.0e-4
    iterations: int = 5000
    generator_hidden: tuple = (128, 128, 128)
    potential_hidden: tuple = (128, 128)
    seed: int = 0


def uotm_pretrain(data_sampler, config, dimension=2):
    """Learn a noise-to-data map by semi-dual UOT with cost ``tau/2 |z - T(z)|^2``.

    ``data_sampler(n, rng)`` supplies real data; this route is for
    pretraining only. Returns ``(generator, losses)``.
    """
    rng = np.random.default_rng(config.seed)
    gen = OneStepGenerator.create(dimension, config.generator_hidden, seed=int(rng.integers(2**63)))
    v_spec = MlpSpec((dimension, *config.potential_hidden, 1), activation="leaky_relu")
    v = Mlp(v_spec, seed=int(rng.integers(2**63)))
    opt_g = AdamState.for_params(gen.params, lr=config.gen_lr, beta1=0.5, beta2=0.9)
    opt_v = AdamState.for_params(v.params, lr=config.pot_lr, beta1=0.5, beta2=0.9)
    n = config.batch_size
    losses = []
    for it in range(config.iterations):
        z = rng.standard_normal((n, dimension))
        y = data_sampler(n, rng)
        tz = gen(z)
        c = 0.5 * config.tau * ((z - tz) ** 2).sum(1)
        inp = np.concatenate([tz, y])
        out, cache = v.forward(inp)
        s1 = out[:n, 0] - c
        ld = float(config.psi1.psi_star(s1).mean() + config.psi2.psi_star(-out[n:, 0]).mean())
        up = np.concatenate([config.psi1.psi_star_grad(s1) / n,
                             -config.psi2.psi_star_grad(-out[n:, 0]) / n])[:, None]
        gv, _ = v.backward(inp, up, cache)
        adam_step(v.params, gv, opt_v)

        z = rng.standard_normal((n, dimension))
        tz, gcache = gen.mlp.forward(z)
        vz, vcache = v.forward(tz)
        lg = float((0.5 * config.tau * ((z - tz) ** 2).sum(1) - vz[:, 0]).mean())
        if not (np.isfinite(ld) and np.isfinite(lg)):
            raise NonFiniteError(f"UOTM loss became non-finite at iteration {it}")
        _, dv = v.backward(tz, np.full((n, 1), 1.0 / n), vcache)
        grad_y = config.tau * (tz - z) / n - dv
        gg, _ = gen.mlp.backward(z, grad_y, gcache)
        adam_step(gen.params, gg, opt_g)
        losses.append((ld, lg))
    return gen, np.array(losses).reshape(-1, 2)
