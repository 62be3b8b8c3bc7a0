"""Shared fixtures: a small, quickly trained pretrained generator and its forget setup."""

import numpy as np
import pytest

from uotlab.cost import FeatureConfig
from uotlab.data import default_spec
from uotlab.flowmap import PretrainConfig
from uotlab.pipeline import prepare_forget, pretrain_generator

TINY_PRETRAIN = PretrainConfig(cfm_iters=1500, distill_iters=1500, batch_size=256,
                               cfm_lr=3e-3, distill_lr=3e-3, distill_pool=8192,
                               distill_holdout=1024, teacher_steps=20,
                               velocity_hidden=(64, 64), generator_hidden=(64, 64),
                               seed=5, log_every=0)
TINY_FEATURES = FeatureConfig(n_samples=8000, iters=1500, seed=6)


@pytest.fixture(scope="session")
def tiny_pretrained():
    """``(generator, info, spec)`` from a short flow-matching + distillation run."""
    spec = default_spec()
    gen, info = pretrain_generator(spec, TINY_PRETRAIN)
    return gen, info, spec


@pytest.fixture(scope="session")
def tiny_forget(tiny_pretrained):
    gen, _, spec = tiny_pretrained
    setup = prepare_forget(gen, spec, 0, TINY_FEATURES, n_anchor=256, n_heldout=256, seed=7)
    return gen, spec, setup


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# --- acceptance report ---------------------------------------------------------

ACCEPTANCE = {}
N_CRITERIA = 10


@pytest.fixture(scope="session")
def acceptance():
    """Record ``acceptance(n, ok, detail)``; lines are printed in the terminal summary."""
    def record(n, ok, detail):
        ACCEPTANCE[n] = (bool(ok), detail)
        print(f"criterion {n}: {'PASS' if ok else 'FAIL'} {detail}")
    return record


def pytest_terminal_summary(terminalreporter):
    ran = any("test_acceptance" in r.nodeid
              for k in ("passed", "failed", "error") for r in terminalreporter.stats.get(k, []))
    if not ran:
        return
    terminalreporter.section("acceptance criteria")
    for n in range(1, N_CRITERIA + 1):
        ok, detail = ACCEPTANCE.get(n, (False, "(not reached)"))
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
