# SPDX-FileCopyrightText: 2026 DeltaDeno contributors
# SPDX-License-Identifier: GPL-3.0-only

import hashlib
from pathlib import Path

import numpy as np
import pytest

from lib.backends.analytic import AnalyticGaussianBackend
from lib.backends.toy import HashEmbedder, PoolCodec
from lib.config import FOREGROUND_CMD_ENV, DeltaDenoConfig
from lib.evalkit import ToyScenario, make_rect_scenario
from lib.pipeline import plan_stages
from lib.schedule import Schedule, build_schedule


@pytest.fixture(autouse=True)
def no_foreground_env(monkeypatch: pytest.MonkeyPatch) -> None:
    monkeypatch.delenv(FOREGROUND_CMD_ENV, raising=False)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture
def schedule() -> Schedule:
    # Default warm start: 30 of 100 steps.
    return build_schedule(1000, 100, 70)


@pytest.fixture
def fast_cfg() -> DeltaDenoConfig:
    # 10 executed steps, mask taken after 5.
    return DeltaDenoConfig(num_steps=20, gamma=0.5)


@pytest.fixture
def rect_scenario() -> ToyScenario:
    return make_rect_scenario(0)


@pytest.fixture
def synthetic_scenario() -> ToyScenario:
    return make_rect_scenario(0, kind='synthetic')


@pytest.fixture
def small_backend() -> AnalyticGaussianBackend:
    """8x8 image, 4x4x4 latent, one registered prompt."""
    codec = PoolCodec(8)
    rng = np.random.default_rng(7)
    mean = rng.uniform(0.2, 0.8, size=codec.latent_shape)
    return AnalyticGaussianBackend(
        build_schedule(1000, 10, 0),
        {'a photo of a bottle': mean},
        mean,
        data_std=0.05,
        codec=codec,
        embedder=HashEmbedder(),
    )


def _scenario_backend(scenario: ToyScenario, cfg: DeltaDenoConfig):
    return scenario.backend(plan_stages(scenario.configure(cfg)).schedule)


@pytest.fixture
def backend_for():
    return _scenario_backend


def _tree_digest(root: Path) -> dict[str, str]:
    """Relative path -> sha256 for every file under root."""
    return {
        str(p.relative_to(root)): hashlib.sha256(p.read_bytes()).hexdigest()
        for p in sorted(root.rglob('*'))
        if p.is_file()
    }


@pytest.fixture
def tree_digest():
    return _tree_digest
