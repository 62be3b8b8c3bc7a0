"""2-D evaluation: forget counts, PUL, Gaussian Frechet distance, mode masses."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .data import NONE, nearest_mode, sample_gmm
from .flowmap import generate

EVAL_SEED = 20240917


@dataclass
class EvalReport:
    pul_percent: float
    frechet_full: float
    frechet_retain: float
    mode_masses: list
    oos_mass: float
    n_samples: int
    seed: int
    n_forget: int

    def __post_init__(self):
        total = sum(self.mode_masses) + self.oos_mass
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"mode masses and out-of-support mass sum to {total}, not 1")
        if self.pul_percent > 100.0 + 1e-9:
            raise ValueError("PUL cannot exceed 100%")

    def to_dict(self):
        return asdict(self)

    def csv_fields(self):
        return {"pul": self.pul_percent, "frechet_retain": self.frechet_retain,
                "oos_mass": self.oos_mass}


def count_forget(samples, spec, forget_index, k_sigma=3.0):
    """Number of samples whose nearest mode (within k_sigma) is ``forget_index``."""
    if not 0 <= forget_index < spec.n_modes:
        raise IndexError(f"forget index {forget_index} out of range for {spec.n_modes} modes")
    samples = np.atleast_2d(samples)
    if len(samples) == 0:
        return 0
    return int(np.count_nonzero(nearest_mode(samples, spec, k_sigma) == forget_index))


def pul(n_pre, n_unl):
    """Percentage reduction of forget-class generations, ``(n_pre - n_unl) / n_pre * 100``."""
    if n_pre <= 0:
        raise ValueError("PUL is undefined when the pretrained model generates no forget samples")
    return (n_pre - n_unl) / n_pre * 100.0


def _psd_sqrt(m):
    w, v = np.linalg.eigh(0.5 * (m + m.T))
    if w.min() < -1e-8:
        raise np.linalg.LinAlgError(f"matrix not PSD (min eigenvalue {w.min():.3e})")
    w = np.clip(w, 0.0, None)
    return (v * np.sqrt(w)) @ v.T


def frechet_from_moments(mu_x, cov_x, mu_y, cov_y):
    """``|mu_x - mu_y|^2 + tr(cov_x + cov_y - 2 (cov_x cov_y)^(1/2))``."""
    mu_x, mu_y = np.asarray(mu_x, float), np.asarray(mu_y, float)
    cov_x, cov_y = np.atleast_2d(cov_x), np.atleast_2d(cov_y)
    sx = _psd_sqrt(cov_x)
    # tr((Cx Cy)^(1/2)) = tr((Cx^(1/2) Cy Cx^(1/2))^(1/2)), which is symmetric
    inner = _psd_sqrt(sx @ cov_y @ sx)
    val = float(((mu_x - mu_y) ** 2).sum() + np.trace(cov_x) + np.trace(cov_y)
                - 2.0 * np.trace(inner))
    return max(val, 0.0)


def frechet_gaussian(x, y):
    """Frechet distance between Gaussians fitted to two sample sets."""
    x, y = np.atleast_2d(x), np.atleast_2d(y)
    d = x.shape[1]
    if len(x) < d + 1 or len(y) < d + 1:
        raise ValueError(f"each sample set needs at least {d + 1} points")
    jitter = 1e-10 * np.eye(d)
    cx = np.cov(x, rowvar=False).reshape(d, d) + jitter
    cy = np.cov(y, rowvar=False).reshape(d, d) + jitter
    return frechet_from_moments(x.mean(0), cx, y.mean(0), cy)


@dataclass
class EvalConfig:
    n_samples: int = 30000
    seed: int = EVAL_SEED
    k_sigma: float = 3.0
    use_ema: bool = False


def eval_reference(spec, forget_index, n, seed):
    """Real full-mixture and retain-only samples used as Frechet references."""
    full, _ = sample_gmm(spec, n, seed, purpose="eval")
    retain, _ = sample_gmm(spec.without(forget_index), n, seed + 1, purpose="eval")
    return full, retain


def evaluate_samples(samples, spec, forget_index, n_pre, cfg, reference):
    """Build an :class:`EvalReport` for an already generated batch.

    ``reference`` is the ``(full, retain)`` pair from :func:`eval_reference`.
    """
    n = len(samples)
    labels = nearest_mode(samples, spec, cfg.k_sigma)
    masses = [float(np.count_nonzero(labels == k)) / n for k in range(spec.n_modes)]
    n_unl = int(np.count_nonzero(labels == forget_index))
    full, retain = reference
    return EvalReport(
        pul_percent=pul(n_pre, n_unl) if n_pre is not None else 0.0,
        frechet_full=frechet_gaussian(samples, full),
        frechet_retain=frechet_gaussian(samples, retain),
        mode_masses=masses,
        oos_mass=1.0 - sum(masses),
        n_samples=n,
        seed=cfg.seed,
        n_forget=n_unl,
    )


def evaluate(gen, g_pre_report, spec, forget_index, cfg=None, reference=None):
    """Sample ``gen`` with the fixed evaluation seed and score it.

    ``g_pre_report`` is the pretrained model's report (its ``n_forget`` is
    the PUL baseline); pass ``None`` to evaluate a model against itself.
    Labelling uses nearest-mode assignment only, never the training-time
    feature extractor. Pass a precomputed ``reference`` to avoid drawing
    fresh real samples on every call.
    """
    cfg = cfg or EvalConfig()
    samples = generate(gen, cfg.n_samples, cfg.seed, use_ema=cfg.use_ema)
    if g_pre_report is None:
        n_pre = count_forget(samples, spec, forget_index, cfg.k_sigma)
    else:
        n_pre = g_pre_report.n_forget
    if reference is None:
        reference = eval_reference(spec, forget_index, cfg.n_samples, cfg.seed + 7)
    return evaluate_samples(samples, spec, forget_index, n_pre, cfg, reference)
