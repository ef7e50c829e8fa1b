import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from layerplan.model import ModelSpec, build_toy_model
from layerplan.profiler import synthetic_calibration

settings.register_profile(
    "layerplan", deadline=None, max_examples=60, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("layerplan")


@pytest.fixture
def small_spec():
    return ModelSpec(num_layers=4, hidden_dim=8, ffn_dim=16, num_heads=2, vocab_size=32, seed=7)


@pytest.fixture
def small_model(small_spec):
    return build_toy_model(small_spec)


@pytest.fixture
def quant_spec():
    # dimensions divisible by the 32-element block size
    return ModelSpec(num_layers=4, hidden_dim=32, ffn_dim=64, num_heads=4, vocab_size=64, seed=3)


@pytest.fixture
def quant_model(quant_spec):
    return build_toy_model(quant_spec)


@pytest.fixture
def calib_small():
    return synthetic_calibration(32, count=6, seed=1)


@pytest.fixture(autouse=True)
def _isolated_cache(tmp_path, monkeypatch):
    monkeypatch.setenv("LAYERPLAN_CACHE_DIR", str(tmp_path / "cache"))


def rng(seed=0):
    return np.random.default_rng(seed)
