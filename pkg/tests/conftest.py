"""
Shared fixtures: small worlds, tiny configs and an in-memory ledger.
"""
import numpy as np
import pytest
from sqlalchemy.orm import sessionmaker

from lab.app.config import ExperimentConfig, WorldConfig, build_config
from lab.app.db import create_tables, make_engine


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run pilot training tests")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: pilot training runs, enabled with --runslow")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def world() -> WorldConfig:
    """Default 32px world"""
    return WorldConfig()


@pytest.fixture
def small_world() -> WorldConfig:
    """8px canvas on a 4x4 map, small splits"""
    return WorldConfig(canvas=8, channels=1, audio_dim=4, num_classes=4, map_size=4,
                       size_mix={"medium": 0.4, "large": 0.3, "huge": 0.3},
                       labeled_pool_size=40, labeled_ratio=0.5, unlabeled_size=24,
                       val_size=8, test_size=10, instrumented_size=12, universe_size=200)


@pytest.fixture
def tiny_config(small_world) -> ExperimentConfig:
    """Trains in well under a second per epoch"""
    return build_config({
        "world": small_world.model_dump(),
        "dmt": {"embed_dim": 4, "batch_size": 8, "warmup_epochs": 1, "epochs": 2,
                "lr": 0.01, "temperature": 0.5, "tau": 0.3},
    })


@pytest.fixture
def session_factory():
    engine = make_engine("sqlite://")
    create_tables(bind=engine)
    factory = sessionmaker(autocommit=False, autoflush=False, bind=engine)
    yield factory
    engine.dispose()
