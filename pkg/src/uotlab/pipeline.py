"""End-to-end experiment steps shared by the CLI, the demos and the tests.

Real data is read only by :func:`pretrain_generator`, by the one-time
forget-set preparation in :func:`prepare_forget`, and when building the
evaluation reference. The unlearning loop itself sees none of it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .cost import (CostConfig, FeatureConfig, calibrate_margin, compute_anchor,
                   train_feature_classifier)
from .data import NONE, derive_seed, nearest_mode, sample_gmm
from .flowmap import cfm_train_velocity, distill_flowmap, generate
from .metrics import EvalConfig, eval_reference, evaluate
from .unlearn import run_unlearn


def gmm_sampler(spec, purpose="pretrain"):
    """``sampler(n, rng)`` drawing from ``spec``; every call is access-logged."""
    def sampler(n, rng):
        return sample_gmm(spec, n, int(rng.integers(2**63)), purpose=purpose)[0]
    return sampler


def pretrain_generator(spec, config):
    """Flow matching followed by distillation. Returns ``(generator, info)``."""
    field, cfm_losses = cfm_train_velocity(gmm_sampler(spec), config)
    gen, info = distill_flowmap(field, config)
    info["cfm_losses"] = cfm_losses
    info["field"] = field
    return gen, info


@dataclass
class ForgetSetup:
    """Frozen extractor, anchor and calibrated margin for one forget mode."""
    extractor: object
    anchor: object
    margin: float
    forget_index: int
    distance: str = "cosine"

    def cost_config(self, lam=1.0, tau=CostConfig.tau, margin=None):
        return CostConfig(lam=lam, tau=tau, distance=self.distance,
                          margin=self.margin if margin is None else margin)


def prepare_forget(g_pre, spec, forget_index, feature_cfg=None, distance="cosine",
                   n_anchor=512, n_heldout=512, calibration="gap", seed=0):
    """Train the extractor, compute the anchor and calibrate the margin.

    ``calibration="gap"`` places the margin 90% of the way from the forget
    band to the nearest retain distances (retain points are G_pre samples
    labelled outside the forget mode); ``"quantile"`` uses the 95th forget
    percentile clamped to ``[0.05, 1]``.
    """
    feature_cfg = feature_cfg or FeatureConfig(seed=derive_seed(seed, "features"))
    extractor = train_feature_classifier(g_pre, spec, feature_cfg)
    forget_spec = spec.only(forget_index)
    xf, _ = sample_gmm(forget_spec, n_anchor, derive_seed(seed, "anchor"), purpose="anchor")
    anchor = compute_anchor(extractor, xf)
    xh, _ = sample_gmm(forget_spec, n_heldout, derive_seed(seed, "calibration"),
                       purpose="calibration")
    if calibration == "gap":
        xg = generate(g_pre, 8192, derive_seed(seed, "retain-probe"))
        lab = nearest_mode(xg, spec)
        retain = xg[(lab != forget_index) & (lab != NONE)]
        margin = calibrate_margin(extractor, anchor, xh, distance, retain=retain)
    elif calibration == "quantile":
        margin = calibrate_margin(extractor, anchor, xh, distance)
    else:
        raise ValueError(f"unknown calibration rule {calibration!r}")
    return ForgetSetup(extractor, anchor, margin, forget_index, distance)


class Evaluator:
    """Scores generators against a fixed real reference and the G_pre baseline."""

    def __init__(self, g_pre, spec, forget_index, cfg=None):
        self.spec = spec
        self.forget_index = forget_index
        self.cfg = cfg or EvalConfig()
        self.reference = eval_reference(spec, forget_index, self.cfg.n_samples, self.cfg.seed + 7)
        self.pre_report = self.report(g_pre, baseline=None)

    def report(self, gen, baseline="pre"):
        base = self.pre_report if baseline == "pre" else None
        return evaluate(gen, base, self.spec, self.forget_index, self.cfg, self.reference)

    def __call__(self, gen):
        r = self.report(gen)
        return {"pul": r.pul_percent, "frechet_retain": r.frechet_retain, "oos_mass": r.oos_mass}


def unlearn_experiment(g_pre, setup, config, evaluator=None, callback=None):
    """Run UOT unlearning with per-checkpoint metrics. Returns ``(g_theta, rows, state)``."""
    return run_unlearn(g_pre, setup.extractor, setup.anchor, config,
                       eval_fn=evaluator, callback=callback)


def first_crossing(rows, key, threshold):
    """Index of the first row whose ``key`` is at least ``threshold``, else ``None``."""
    for i, r in enumerate(rows):
        v = r.get(key)
        if v is not None and np.isfinite(v) and v >= threshold:
            return i
    return None
