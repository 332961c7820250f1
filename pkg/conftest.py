import numpy as np
import pytest

from config import settings
from trainer import HashingModel, ModelSpec


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long end-to-end runs (set XMH_RUN_SLOW=1)")


def pytest_collection_modifyitems(config, items):
    if settings.XMH_RUN_SLOW:
        return
    skip = pytest.mark.skip(reason="set XMH_RUN_SLOW=1 to run")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def quiet(monkeypatch):
    monkeypatch.setattr(settings, "XMH_VERBOSE", False)


@pytest.fixture
def tiny_spec():
    """4 x 4 feature grid, 3 channels, 8-bit codes."""
    return ModelSpec(image_shape=(8, 8, 3), vocab=12, feature_channels=3, patch_size=2,
                     text_hidden=6, text_features=5, hash_hidden=10, q=8)


@pytest.fixture
def tiny_model(tiny_spec):
    return HashingModel(tiny_spec, seed=3)
