"""Discrete unbalanced OT: primal value, two independent solvers, semi-dual value.

The entropic primal solved by both solvers is::

    sum_ij c_ij pi_ij + sum_i mu_i psi1(pi0_i / mu_i) + sum_j nu_j psi2(pi1_j / nu_j)
        + eps * sum_ij pi_ij (log pi_ij - 1)

``solve_uot_sinkhorn`` uses generalized Sinkhorn scaling (KL marginals
only); ``solve_uot_bruteforce`` runs damped Newton steps on ``log pi``
directly and supports chi-square marginals too.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .cost import EntropyFn
from .nn import ShapeError


class ConvergenceError(RuntimeError):
    def __init__(self, msg, residual):
        self.residual = residual
        super().__init__(f"{msg} (final residual {residual:.3e})")


@dataclass
class DiscreteMeasure:
    points: np.ndarray
    masses: np.ndarray

    def __post_init__(self):
        self.points = np.atleast_2d(np.asarray(self.points, dtype=np.float64))
        self.masses = np.asarray(self.masses, dtype=np.float64).ravel()
        if len(self.points) != len(self.masses):
            raise ShapeError("masses", (len(self.points),), self.masses.shape)
        if np.any(self.masses < 0) or not np.any(self.masses > 0):
            raise ValueError("masses must be non-negative with at least one positive entry")


@dataclass
class TransportPlan:
    pi: np.ndarray
    iterations: int = 0
    residual: float = 0.0

    @property
    def row_marginal(self):
        return self.pi.sum(axis=1)

    @property
    def col_marginal(self):
        return self.pi.sum(axis=0)


def squared_euclidean_cost(x, y):
    x, y = np.atleast_2d(x), np.atleast_2d(y)
    return ((x[:, None, :] - y[None, :, :]) ** 2).sum(-1)


def _check(mu, nu, cost):
    mu = np.asarray(mu, dtype=np.float64).ravel()
    nu = np.asarray(nu, dtype=np.float64).ravel()
    cost = np.asarray(cost, dtype=np.float64)
    if cost.shape != (len(mu), len(nu)):
        raise ShapeError("cost matrix", (len(mu), len(nu)), cost.shape)
    return mu, nu, cost


def divergence(fn, marg, ref):
    """``sum_k ref_k * psi(marg_k / ref_k)`` with the r -> infinity limit for zero ref."""
    marg = np.asarray(marg, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    pos = ref > 0
    total = float(np.sum(ref[pos] * fn.psi(marg[pos] / ref[pos])))
    if np.any(marg[~pos] > 0):
        return np.inf
    return total


def uot_primal_value(plan, cost, mu, nu, psi1, psi2):
    """Transport cost plus the two marginal divergences (no entropy term)."""
    pi = plan.pi if isinstance(plan, TransportPlan) else np.asarray(plan, dtype=np.float64)
    mu, nu, cost = _check(mu, nu, cost)
    if pi.shape != cost.shape:
        raise ShapeError("plan", cost.shape, pi.shape)
    return float((cost * pi).sum() + divergence(psi1, pi.sum(1), mu)
                 + divergence(psi2, pi.sum(0), nu))


def entropic_primal_value(plan, cost, mu, nu, psi1, psi2, epsilon):
    pi = plan.pi if isinstance(plan, TransportPlan) else np.asarray(plan, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        ent = np.where(pi > 0, pi * (np.log(np.where(pi > 0, pi, 1.0)) - 1.0), 0.0)
    return uot_primal_value(pi, cost, mu, nu, psi1, psi2) + epsilon * float(ent.sum())


def _lse_rows(a):
    # scipy's logsumexp carries too much overhead for a 3x4 inner loop
    m = a.max(axis=1)
    m = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        return m + np.log(np.exp(a - m[:, None]).sum(axis=1))


def solve_uot_sinkhorn(mu, nu, cost, epsilon=1e-3, psi1=None, psi2=None,
                       max_iters=200000, tol=1e-12):
    """Generalized Sinkhorn scaling for KL-penalised entropic UOT.

    Scalings are kept in the log domain throughout, so tiny ``epsilon``
    does not overflow. Stops once both log-scalings move by less than
    ``tol`` in sup-norm.
    """
    psi1 = psi1 or EntropyFn("kl")
    psi2 = psi2 or EntropyFn("kl")
    if psi1.kind != "kl" or psi2.kind != "kl":
        raise ValueError("Sinkhorn scaling requires KL marginal penalties")
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    mu, nu, cost = _check(mu, nu, cost)
    with np.errstate(divide="ignore"):
        log_mu, log_nu = np.log(mu), np.log(nu)
    a1 = psi1.scale / (psi1.scale + epsilon)
    a2 = psi2.scale / (psi2.scale + epsilon)
    logk = -cost / epsilon
    lu = np.zeros(len(mu))
    lv = np.zeros(len(nu))
    lu[mu == 0] = -np.inf
    lv[nu == 0] = -np.inf
    res = np.inf
    for it in range(1, max_iters + 1):
        lu_new = a1 * (log_mu - _lse_rows(logk + lv[None, :]))
        lv_new = a2 * (log_nu - _lse_rows((logk + lu_new[:, None]).T))
        fin_u, fin_v = np.isfinite(lu_new), np.isfinite(lv_new)
        res = max(np.max(np.abs(lu_new[fin_u] - lu[fin_u]), initial=0.0),
                  np.max(np.abs(lv_new[fin_v] - lv[fin_v]), initial=0.0))
        lu, lv = lu_new, lv_new
        if res < tol:
            pi = np.exp(lu[:, None] + logk + lv[None, :])
            return TransportPlan(pi, it, res)
    raise ConvergenceError(f"Sinkhorn did not converge in {max_iters} iterations", res)


def _marginal_terms(fn, logm, ref):
    """Value, first and second derivative (w.r.t. the marginal) of ``ref * psi(m / ref)``."""
    m = np.exp(logm)
    if fn.kind == "kl":
        val = fn.scale * (m * (logm - np.log(ref)) - m + ref)
        d1 = fn.scale * (logm - np.log(ref))
        # second derivative is scale / m; returned as a factor to multiply by pi entries
        return val, d1, None
    r = m / ref
    return fn.scale * ref * (r - 1.0) ** 2, 2.0 * fn.scale * (r - 1.0), 2.0 * fn.scale / ref


def solve_uot_bruteforce(mu, nu, cost, epsilon=1e-3, psi1=None, psi2=None,
                         iters=500, tol=1e-10):
    """Minimise the entropic UOT primal directly over ``log pi``.

    Each step solves the Newton system of the objective in ``pi`` and
    applies it multiplicatively (``pi <- pi * exp(t * d)``), with
    backtracking on the objective. The problem is strictly convex in
    ``pi``, so the minimiser is unique. Meant for at most 16 entries.
    """
    psi1 = psi1 or EntropyFn("kl")
    psi2 = psi2 or EntropyFn("kl")
    mu, nu, cost = _check(mu, nu, cost)
    if cost.size > 16:
        raise ValueError("brute-force oracle is limited to 16 plan entries")
    rows = np.flatnonzero(mu > 0)
    cols = np.flatnonzero(nu > 0)
    c = cost[np.ix_(rows, cols)]
    m_, n_ = c.shape
    mu_a, nu_a = mu[rows], nu[cols]
    z = np.log(np.outer(mu_a, nu_a) / max(mu_a.sum(), nu_a.sum()))

    def objective(z):
        lr = logsumexp(z, axis=1)
        lc = logsumexp(z, axis=0)
        v1, _, _ = _marginal_terms(psi1, lr, mu_a)
        v2, _, _ = _marginal_terms(psi2, lc, nu_a)
        pi = np.exp(z)
        return float((c * pi).sum() + v1.sum() + v2.sum() + epsilon * (pi * (z - 1.0)).sum())

    def newton_dir(z):
        pi = np.exp(z)
        lr = logsumexp(z, axis=1)
        lc = logsumexp(z, axis=0)
        _, d1r, h1 = _marginal_terms(psi1, lr, mu_a)
        _, d1c, h2 = _marginal_terms(psi2, lc, nu_a)
        g = c + d1r[:, None] + d1c[None, :] + epsilon * z
        # M = eps*I + R diag(pi), with R the marginal-penalty Hessian in pi
        n = m_ * n_
        mat = epsilon * np.eye(n)
        ii, jj = np.divmod(np.arange(n), n_)
        if h1 is None:
            row_w = np.exp(z - lr[:, None]) * psi1.scale   # scale * pi_kl / pi0_k
        else:
            row_w = h1[:, None] * pi
        if h2 is None:
            col_w = np.exp(z - lc[None, :]) * psi2.scale
        else:
            col_w = h2[None, :] * pi
        same_row = ii[:, None] == ii[None, :]
        same_col = jj[:, None] == jj[None, :]
        mat += same_row * row_w.ravel()[None, :] + same_col * col_w.ravel()[None, :]
        d = np.linalg.solve(mat, -g.ravel()).reshape(m_, n_)
        return d, g, pi

    f = objective(z)
    res = np.inf
    for it in range(1, iters + 1):
        d, g, pi = newton_dir(z)
        res = float(np.max(np.abs(pi * g)))
        if res < tol and np.max(np.abs(d)) < 1e-9:
            break
        slope = float((pi * g * d).sum())
        t = 1.0
        while True:
            z_new = z + t * d
            f_new = objective(z_new)
            # slack for roundoff once the decrease is below machine precision
            if f_new <= f + 1e-4 * t * slope + 1e-15 * (1.0 + abs(f)) or t < 1e-12:
                break
            t *= 0.5
        if t < 1e-12:
            break
        z, f = z_new, f_new
    else:
        _, g, pi = newton_dir(z)
        res = float(np.max(np.abs(pi * g)))
    if res > tol:
        raise ConvergenceError("brute-force oracle hit its iteration cap", res)
    full = np.zeros(cost.shape)
    full[np.ix_(rows, cols)] = np.exp(z)
    return TransportPlan(full, it, res)


def semidual_value(v, mu, nu, cost, psi1, psi2):
    """``sum_i mu_i psi1*(-min_j (c_ij - v_j)) + sum_j nu_j psi2*(-v_j)``.

    Its minimum over ``v`` equals minus the unregularised UOT cost.
    """
    mu, nu, cost = _check(mu, nu, cost)
    v = np.asarray(v, dtype=np.float64).ravel()
    if v.shape != nu.shape:
        raise ShapeError("potential", nu.shape, v.shape)
    inner = (cost - v[None, :]).min(axis=1)
    return float((mu * psi1.psi_star(-inner)).sum() + (nu * psi2.psi_star(-v)).sum())


def marginal_deviation(plan, mu, nu):
    return float(np.abs(plan.row_marginal - mu).sum() + np.abs(plan.col_marginal - nu).sum())


def random_instance(rng, m, n):
    """Random points in the unit square with squared-distance cost and masses in [0.2, 1]."""
    x = rng.uniform(size=(m, 2))
    y = rng.uniform(size=(n, 2))
    return rng.uniform(0.2, 1.0, m), rng.uniform(0.2, 1.0, n), squared_euclidean_cost(x, y)
