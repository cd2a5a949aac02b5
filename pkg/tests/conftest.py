"""Shared fixtures and helpers for the test suite."""

import numpy as np
import pytest

from covariance import ModelParams, stationary_covariance
from sampler import CovSequence, SamplingGrid
from utils import get_settings


@pytest.fixture(autouse=True)
def fresh_settings():
    """Settings are cached per process; tests that touch the env need a clean read."""
    get_settings.cache_clear()
    yield
    get_settings.cache_clear()


@pytest.fixture
def fou1_params():
    return ModelParams.fou1(theta=1.0, hurst=0.6)


@pytest.fixture
def fou2_params():
    return ModelParams.fou2(mu=1.0, hurst=0.75)


@pytest.fixture
def fou1_cov(fou1_params):
    return stationary_covariance(fou1_params)


@pytest.fixture
def fou2_cov(fou2_params):
    return stationary_covariance(fou2_params)


def random_psd_sequence(rng: np.random.Generator, n: int, delta: float = 1.0) -> CovSequence:
    """Covariance sequence rho_k = sum_j w_j cos(omega_j k) with w_j >= 0.

    A nonnegative spectral measure makes every Toeplitz section PSD.
    """
    weights = rng.uniform(0.1, 1.0, size=5)
    frequencies = rng.uniform(0.0, np.pi, size=5)
    lags = np.arange(n)
    values = (weights[:, None] * np.cos(frequencies[:, None] * lags[None, :])).sum(axis=0)
    return CovSequence(grid=SamplingGrid(n, delta), values=values)


def sequence_of(values, delta: float = 1.0) -> CovSequence:
    values = np.asarray(values, dtype=float)
    return CovSequence(grid=SamplingGrid(len(values), delta), values=values)
