"""Pretraining of a one-step generator.

A velocity field is fitted by conditional flow matching on straight
noise-to-data interpolants, its ODE is integrated from t=0 to t=1, and
the resulting solution map is regressed into a single-pass generator.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .data import sample_prior
from .nn import AdamState, Mlp, MlpSpec, NonFiniteError, adam_step

log = logging.getLogger(__name__)


@dataclass
class PretrainConfig:
    cfm_iters: int = 30000
    distill_iters: int = 20000
    batch_size: int = 256
    cfm_lr: float = 1e-3
    distill_lr: float = 3e-3
    final_lr_frac: float = 0.05
    teacher_steps: int = 50
    scheme: str = "heun"
    distill_pool: int = 65536
    distill_holdout: int = 4096
    velocity_hidden: tuple = (128, 128, 128)
    generator_hidden: tuple = (128, 128, 128, 128)
    seed: int = 0
    log_every: int = 500


class VelocityField:
    """Time-dependent field ``v(x, t)``; the network input is ``[x, t]``."""

    def __init__(self, mlp):
        if mlp.spec.d_in != mlp.spec.d_out + 1:
            raise ValueError("velocity field input width must be data dimension + 1")
        self.mlp = mlp

    @classmethod
    def create(cls, dimension, hidden=(64, 64), seed=0):
        spec = MlpSpec((dimension + 1, *hidden, dimension), activation="tanh")
        return cls(Mlp(spec, seed=seed))

    @property
    def dimension(self):
        return self.mlp.spec.d_out

    def _inp(self, x, t):
        x = np.asarray(x, dtype=np.float64)
        t = np.broadcast_to(np.asarray(t, dtype=np.float64).reshape(-1, 1), (len(x), 1))
        return np.concatenate([x, t], axis=1)

    def __call__(self, x, t):
        return self.mlp(self._inp(x, t))


class ConstantField:
    """``v(x, t) = c``; handy as an analytic teacher."""

    def __init__(self, c):
        self.c = np.asarray(c, dtype=np.float64).ravel()

    @property
    def dimension(self):
        return self.c.shape[0]

    def __call__(self, x, t):
        return np.broadcast_to(self.c, np.shape(x)).copy()


class OneStepGenerator:
    """Maps noise to data in one forward pass, optionally with EMA weights."""

    def __init__(self, mlp, ema_params=None):
        if mlp.spec.d_in != mlp.spec.d_out:
            raise ValueError("generator input and output widths must match")
        self.mlp = mlp
        self.ema_params = ema_params

    @classmethod
    def create(cls, dimension, hidden=(128, 128, 128), seed=0):
        spec = MlpSpec((dimension, *hidden, dimension), activation="leaky_relu", slope=0.2)
        return cls(Mlp(spec, seed=seed))

    @property
    def spec(self):
        return self.mlp.spec

    @property
    def params(self):
        return self.mlp.params

    @property
    def dimension(self):
        return self.mlp.spec.d_in

    def __call__(self, x0, use_ema=False):
        if use_ema:
            if self.ema_params is None:
                raise ValueError("EMA weights requested but the generator has none")
            return Mlp(self.spec, self.ema_params)(x0)
        return self.mlp(x0)

    def copy(self):
        ema = self.ema_params.copy() if self.ema_params is not None else None
        return OneStepGenerator(self.mlp.copy(), ema)


def _lr_at(base, it, total, final_frac):
    # linear decay from base to base * final_frac
    if total <= 1:
        return base
    return base * (1.0 - (1.0 - final_frac) * it / (total - 1))


def cfm_train_velocity(data_sampler, config, field=None, prior_sampler=None):
    """Fit a velocity field by flow matching on straight interpolants.

    ``data_sampler(n, rng)`` returns ``n`` data points; ``prior_sampler``
    has the same signature and defaults to a standard normal. Returns
    ``(field, losses)`` where ``losses`` holds the per-iteration batch loss.
    """
    rng = np.random.default_rng(config.seed)
    if field is None:
        probe = np.asarray(data_sampler(1, np.random.default_rng(0)))
        field = VelocityField.create(probe.shape[1], config.velocity_hidden,
                                     seed=rng.integers(2**63))
    d = field.dimension
    opt = AdamState.for_params(field.mlp.params, lr=config.cfm_lr)
    losses = np.empty(config.cfm_iters)
    n = config.batch_size
    for it in range(config.cfm_iters):
        x1 = data_sampler(n, rng)
        x0 = prior_sampler(n, rng) if prior_sampler else rng.standard_normal((n, d))
        t = rng.uniform(size=(n, 1))
        xt = (1 - t) * x0 + t * x1
        inp = np.concatenate([xt, t], axis=1)
        out, cache = field.mlp.forward(inp)
        resid = out - (x1 - x0)
        loss = float((resid ** 2).sum(axis=1).mean())
        if not np.isfinite(loss):
            raise NonFiniteError(f"flow-matching loss became non-finite at iteration {it}")
        losses[it] = loss
        grads, _ = field.mlp.backward(inp, 2.0 * resid / n, cache)
        opt.lr = _lr_at(config.cfm_lr, it, config.cfm_iters, config.final_lr_frac)
        adam_step(field.mlp.params, grads, opt)
        if config.log_every and it % config.log_every == 0:
            log.info("cfm iter %d loss %.5f", it, loss)
    return field, losses


def integrate_ode(field, x0, n_steps=50, scheme="heun"):
    """Integrate ``dx = v(x, t) dt`` from t=0 to t=1 with uniform steps."""
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    if scheme not in ("euler", "heun"):
        raise ValueError(f"unknown scheme {scheme!r}")
    x = np.array(x0, dtype=np.float64, copy=True)
    dt = 1.0 / n_steps
    for k in range(n_steps):
        t = k * dt
        v = field(x, t)
        if scheme == "euler":
            x = x + dt * v
        else:
            xe = x + dt * v
            x = x + 0.5 * dt * (v + field(xe, t + dt))
        if not np.all(np.isfinite(x)):
            raise NonFiniteError(f"ODE state became non-finite at step {k}")
    return x


def distill_flowmap(field, config, generator=None):
    """Regress a one-step generator onto the ODE solution map of ``field``.

    Teacher targets are computed once for a fixed pool of prior noise; a
    held-out slice of the pool measures generalisation. Returns
    ``(generator, info)`` with ``info`` holding the loss trace and the
    final train / held-out residuals.
    """
    rng = np.random.default_rng(config.seed + 1)
    d = field.dimension
    if generator is None:
        generator = OneStepGenerator.create(d, config.generator_hidden, seed=rng.integers(2**63))
    pool = config.distill_pool
    z = rng.standard_normal((pool + config.distill_holdout, d))
    targets = integrate_ode(field, z, config.teacher_steps, config.scheme)
    z_tr, y_tr = z[:pool], targets[:pool]
    z_ho, y_ho = z[pool:], targets[pool:]
    opt = AdamState.for_params(generator.params, lr=config.distill_lr)
    losses = np.empty(config.distill_iters)
    n = config.batch_size
    for it in range(config.distill_iters):
        idx = rng.integers(0, pool, size=n)
        xb, yb = z_tr[idx], y_tr[idx]
        out, cache = generator.mlp.forward(xb)
        resid = out - yb
        loss = float((resid ** 2).sum(axis=1).mean())
        if not np.isfinite(loss):
            raise NonFiniteError(f"distillation loss became non-finite at iteration {it}")
        losses[it] = loss
        grads, _ = generator.mlp.backward(xb, 2.0 * resid / n, cache)
        opt.lr = _lr_at(config.distill_lr, it, config.distill_iters, config.final_lr_frac)
        adam_step(generator.params, grads, opt)
        if config.log_every and it % config.log_every == 0:
            log.info("distill iter %d loss %.5f", it, loss)
    info = {
        "losses": losses,
        "train_residual": float(((generator(z_tr) - y_tr) ** 2).sum(1).mean()),
        "holdout_residual": float(((generator(z_ho) - y_ho) ** 2).sum(1).mean()),
    }
    return generator, info


def generate(gen, n, seed, use_ema=False):
    """Sample prior noise with ``seed`` and push it through ``gen``."""
    x0 = sample_prior(gen.dimension, n, seed)
    return gen(x0, use_ema=use_ema)
