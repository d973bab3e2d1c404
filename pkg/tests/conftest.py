import numpy as np
import pytest

from captrfuse.data import SyntheticSpec, generate_synthetic, synthetic_vocabulary
from captrfuse.tensor import precision
from captrfuse.training import TrainConfig, pretrain_captioner


@pytest.fixture
def f64():
    with precision("f64"):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture(scope="session")
def synthetic():
    """Small synthetic corpus: (captions, train, test)."""
    return generate_synthetic(0, SyntheticSpec(n_captions=24, n_train=32, n_test=24))


@pytest.fixture(scope="session")
def trained_captioner(synthetic):
    """Phase-1 checkpoint that has learned the colour-to-word mapping."""
    captions, _, _ = synthetic
    cfg = TrainConfig(caption_epochs=40, caption_learning_rate=2e-3, dropout=0.0, max_length=16)
    ckpt, model, history = pretrain_captioner(captions, synthetic_vocabulary(), cfg)
    return ckpt, model, history


SESSION = {}


def pytest_sessionstart(session):
    import time

    SESSION["start"] = time.perf_counter()


def pytest_collection_modifyitems(session, config, items):
    """Run the whole-suite runtime check after everything else."""
    last = [it for it in items if it.get_closest_marker("runs_last")]
    items[:] = [it for it in items if it not in last] + last


def pytest_configure(config):
    config.addinivalue_line("markers", "runs_last: schedule after all other tests")
