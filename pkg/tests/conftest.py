import numpy as np
import pytest

from pmuge.dataio import ToyConfig, standardize, toy_events
from pmuge.epdecomp import decompose_event, fit_inter_event_basis


@pytest.fixture(scope="session")
def small_corpus():
    cfg = ToyConfig(voltage=5, frequency=2, n_pmus=40, n_samples=96, event_start=40)
    return [standardize(e) for e in toy_events(cfg, seed=3)]


@pytest.fixture(scope="session")
def small_basis(small_corpus):
    return fit_inter_event_basis(small_corpus, sample_per_event=10, seed=0)


@pytest.fixture(scope="session")
def small_decomps(small_corpus, small_basis):
    return [decompose_event(e, small_basis) for e in small_corpus]


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
