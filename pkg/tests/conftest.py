import numpy as np
import pytest

from itd_tool.audio import MonoClip, StereoClip
from itd_tool.embedder import ArchConfig, init_model


def pytest_addoption(parser):
    parser.addoption("--run-training", action="store_true",
                     help="run full-size training checks, which take tens of minutes")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: checks over hundreds of simulated scenes or random inputs")
    config.addinivalue_line("markers", "training: full-size training runs, skipped without --run-training")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--run-training"):
        return
    skip = pytest.mark.skip(reason="needs --run-training")
    for item in items:
        if "training" in item.keywords:
            item.add_marker(skip)


@pytest.fixture
def shifted_noise():
    """White-noise stereo clip whose left channel lags the right by `shift` samples."""
    def _make(shift=3, n=4096, seed=0, rate=16000):
        rng = np.random.default_rng(seed)
        source = rng.standard_normal(n + 64) * 0.1
        right = source[32:32 + n]
        left = source[32 - shift:32 - shift + n]
        return StereoClip(MonoClip(left, rate), MonoClip(right, rate))
    return _make


@pytest.fixture
def dual_mono():
    """Stereo clip with the same noise on both channels."""
    def _make(n=1220, seed=0, rate=16000):
        samples = np.random.default_rng(seed).standard_normal(n) * 0.1
        return StereoClip(MonoClip(samples, rate), MonoClip(samples.copy(), rate))
    return _make


@pytest.fixture
def tiny_arch():
    return ArchConfig(channels=(4, 8), embed_dim=8)


@pytest.fixture
def tiny_params(tiny_arch):
    return init_model(tiny_arch, seed=0)


@pytest.fixture
def unit_rows():
    """Random unit-norm embedding rows."""
    def _make(n, d, seed=0):
        rows = np.random.default_rng(seed).standard_normal((n, d))
        return rows / np.linalg.norm(rows, axis=1, keepdims=True)
    return _make
