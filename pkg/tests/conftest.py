import math

import numpy as np
import pytest
from hypothesis import settings

from sfada.domains import DomainSpec, gen_gaussian_ring
from sfada.harness import ExperimentConfig, pretrain_source

settings.register_profile("default", deadline=None, max_examples=100)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def small_config(seed=0, **kw):
    cfg = ExperimentConfig(seed=seed, budget=20, rounds=4, **kw)
    cfg.dataset.n_classes = 4
    cfg.dataset.n_source = 400
    cfg.dataset.n_target = 300
    cfg.dataset.rotation = math.radians(20)
    cfg.pretrain.epochs = 10
    cfg.adapt.epochs_per_round = 3
    return cfg


@pytest.fixture(scope="session")
def ring_source_model():
    cfg = small_config()
    src, _ = gen_gaussian_ring(DomainSpec(n_classes=4, n_source=400, n_target=300,
                                          rotation=math.radians(20), seed=0))
    return pretrain_source(src, cfg)


ACCEPTANCE: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[key]
        terminalreporter.write_line(f"criterion {key}: {'PASS' if ok else 'FAIL'}  {detail}")
