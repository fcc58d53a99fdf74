from __future__ import annotations

import warnings

import pytest

from hetfed.config import ExperimentConfig
from hetfed.sim import DeviceProfile


def make_config(mode: str, **overrides) -> ExperimentConfig:
    """Small, fast configuration for functional tests."""
    defaults = dict(
        mode=mode,
        per_class=20,
        batch_size=4,
        seeds=(0,),
        seed=0,
        max_aggregations=60,
        stop_on_target=False,
        max_virtual_time=2500.0,
    )
    defaults.update(overrides)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return ExperimentConfig(**defaults)


def two_tier_profiles(fast: float = 70.0, slow: float = 140.0, jitter: float = 0.05) -> tuple[DeviceProfile, ...]:
    return (
        DeviceProfile("slow", slow, jitter, 0.05, 0.0),
        DeviceProfile("fast", fast, jitter, 0.025, 0.0),
    )


@pytest.fixture
def tiny_async():
    return make_config("async")


@pytest.fixture
def tiny_sync():
    return make_config("sync")
