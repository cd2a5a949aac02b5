import math

import mpmath
import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings, strategies as st
from pydantic import ValidationError
from scipy.linalg import toeplitz

from covariance import (
    ModelParams,
    _rho_fou1_near,
    _rho_fou1_spectral,
    decay_metadata,
    fou2_h,
    rho0_fou1,
    rho0_fou2,
    rho_fou1,
    rho_fou2,
    sigma_sq,
    sigma_sq_fou1,
    stationary_covariance,
    write_covariance_csv,
)
from utils import DomainError, ToleranceError


def fou1_sigma_sq_closed(theta, hurst):
    """2 pi c^2 theta^(-1-4H) Gamma(3/2-2H) Gamma(1/2+2H) / 2."""
    c = math.gamma(2 * hurst + 1) * math.sin(math.pi * hurst) / math.pi
    return (
        2 * math.pi * c**2 * theta ** (-1 - 4 * hurst)
        * math.gamma(1.5 - 2 * hurst) * math.gamma(0.5 + 2 * hurst) / 2
    )


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------


class TestModelParams:
    def test_fou1_rejects_high_hurst(self):
        with pytest.raises(ValidationError):
            ModelParams.fou1(theta=1.0, hurst=0.75)

    def test_fou2_rejects_low_hurst(self):
        with pytest.raises(ValidationError):
            ModelParams.fou2(mu=1.0, hurst=0.5)

    def test_rates_must_be_positive(self):
        with pytest.raises(ValidationError):
            ModelParams.fou1(theta=0.0, hurst=0.5)
        with pytest.raises(ValidationError):
            ModelParams.fou2(mu=-1.0, hurst=0.7)

    def test_custom_sequence_bounded_by_variance(self):
        with pytest.raises(ValidationError):
            ModelParams.custom([1.0, 1.5])

    def test_params_are_hashable(self, fou1_params):
        assert hash(fou1_params) == hash(ModelParams.fou1(theta=1.0, hurst=0.6))

    def test_custom_has_no_rate(self):
        with pytest.raises(DomainError):
            ModelParams.custom([1.0]).rate


# ---------------------------------------------------------------------------
# fOU1
# ---------------------------------------------------------------------------


class TestFou1:
    @pytest.mark.parametrize(
        "theta, hurst, expected",
        [(1.0, 0.5, 0.5), (2.0, 0.5, 0.25), (1.0, 0.6, float(0.6 * mpmath.gamma(1.2)))],
    )
    def test_rho0(self, theta, hurst, expected):
        assert rho0_fou1(theta, hurst) == pytest.approx(expected, rel=1e-12)

    def test_rho0_domain(self):
        with pytest.raises(DomainError):
            rho0_fou1(1.0, 0.8)

    @pytest.mark.parametrize("theta", [0.5, 1.0, 2.0])
    @pytest.mark.parametrize("hurst", [0.55, 0.6, 0.7])
    def test_anchor_at_zero(self, theta, hurst):
        rho0 = rho0_fou1(theta, hurst)
        assert abs(rho_fou1(0.0, theta, hurst) - rho0) / rho0 <= 1e-6

    @pytest.mark.parametrize("hurst", [0.55, 0.6, 0.7, 0.74])
    @pytest.mark.parametrize("t", [1e-7, 1e-6, 1e-5])
    def test_continuous_at_zero(self, t, hurst):
        rho0 = rho0_fou1(1.0, hurst)
        gap = rho0 - rho_fou1(t, 1.0, hurst)
        assert 0 < gap <= 1e-3 * rho0

    def test_small_lag_leading_order(self):
        # rho(0) - rho(t) ~ c t^(2H) Gamma(1-2H) cos(pi H) / (2H)
        hurst, t = 0.6, 1e-6
        c = math.gamma(2 * hurst + 1) * math.sin(math.pi * hurst) / math.pi
        leading = c * math.gamma(1 - 2 * hurst) * math.cos(math.pi * hurst) / (2 * hurst)
        gap = rho0_fou1(1.0, hurst) - rho_fou1(t, 1.0, hurst)
        assert gap / t ** (2 * hurst) == pytest.approx(leading, rel=1e-3)

    @pytest.mark.parametrize("hurst", [0.3, 0.6, 0.74])
    @pytest.mark.parametrize("t", [0.5, 2.0, 4.0, 6.0])
    def test_near_and_spectral_forms_agree(self, t, hurst):
        near = _rho_fou1_near(t, 1.0, hurst)
        spectral = _rho_fou1_spectral(t, 1.0, hurst)
        assert abs(near - spectral) <= 1e-7 * rho0_fou1(1.0, hurst)

    def test_known_lag(self):
        assert rho_fou1(2.0, 1.0, 0.5) == pytest.approx(math.exp(-2) / 2, abs=1e-8)
        assert rho_fou1(-2.0, 1.0, 0.5) == rho_fou1(2.0, 1.0, 0.5)

    @pytest.mark.parametrize("theta", [0.5, 1.0, 2.0])
    def test_half_hurst_matches_classical_ou(self, theta):
        lags = np.linspace(0.0, 10.0, 41)
        errors = [abs(rho_fou1(t, theta, 0.5) - math.exp(-theta * t) / (2 * theta)) for t in lags]
        assert max(errors) <= 1e-8

    @settings(max_examples=40, deadline=None)
    @given(st.floats(min_value=0.0, max_value=50.0, allow_nan=False))
    def test_even(self, t):
        assert abs(rho_fou1(t, 1.0, 0.6) - rho_fou1(-t, 1.0, 0.6)) <= 1e-12

    def test_bounded_by_variance(self, fou1_cov):
        for t in np.linspace(0.05, 30.0, 25):
            assert abs(fou1_cov(t)) <= fou1_cov.rho0 * (1 + 1e-10)

    def test_low_hurst_becomes_negative(self):
        # H < 1/2 gives anti-persistent increments and negative far lags
        assert rho_fou1(20.0, 1.0, 0.3) < 0

    def test_decay_envelope(self, fou1_cov):
        for t in np.linspace(fou1_cov.m0, 100.0, 25):
            assert abs(fou1_cov(t)) * t**fou1_cov.gamma <= 1.5 * fou1_cov.decay_const


# ---------------------------------------------------------------------------
# fOU2
# ---------------------------------------------------------------------------


class TestFou2:
    def test_rho0(self):
        assert rho0_fou2(1.0, 0.75) == pytest.approx(0.6495190528383290, rel=1e-12)
        expected = 0.5 * 0.75**1.5 * float(mpmath.beta(1.75, 0.5)) / 2
        assert rho0_fou2(2.0, 0.75) == pytest.approx(expected, rel=1e-12)

    def test_rho0_domain(self):
        with pytest.raises(DomainError):
            rho0_fou2(1.0, 0.5)

    def test_h_vanishes_at_zero(self):
        assert fou2_h(0.0, 1.0, 0.75) == 0.0

    @pytest.mark.parametrize("mu", [0.5, 1.0, 2.0])
    @pytest.mark.parametrize("hurst", [0.55, 0.6, 0.7])
    def test_anchor_at_zero(self, mu, hurst):
        rho0 = rho0_fou2(mu, hurst)
        assert abs(rho_fou2(0.0, mu, hurst) - rho0) / rho0 <= 1e-6

    def test_continuous_at_zero(self):
        rho0 = rho0_fou2(1.0, 0.75)
        assert rho_fou2(1e-6, 1.0, 0.75) == pytest.approx(rho0, rel=1e-5)

    def test_flat_at_zero(self):
        # Paths are Holder-H with H > 1/2, so rho(0) - rho(t) = o(t)
        slopes = [(rho0_fou2(1.0, 0.75) - rho_fou2(t, 1.0, 0.75)) / t for t in (1e-2, 1e-4)]
        assert slopes[0] > 0
        assert slopes[1] < 0.3 * slopes[0]

    def test_far_lag_is_small(self):
        assert abs(rho_fou2(60.0, 1.0, 0.75)) <= 1e-6

    def test_even(self):
        assert rho_fou2(-1.0, 1.0, 0.75) == rho_fou2(1.0, 1.0, 0.75)

    def test_large_lag_branch_agrees(self):
        # Around the switch from the incomplete Beta form to quadrature
        assert abs(rho_fou2(700.0, 1.0, 0.75)) < 1e-90

    def test_bounded_by_variance(self, fou2_cov):
        for t in np.linspace(0.01, 20.0, 25):
            assert abs(fou2_cov(t)) <= fou2_cov.rho0 * (1 + 1e-10)

    def test_decay_envelope(self, fou2_cov):
        for t in np.linspace(fou2_cov.m0, 100.0, 25):
            assert abs(fou2_cov(t)) / fou2_cov.envelope(t) <= 1.5 * fou2_cov.decay_const


# ---------------------------------------------------------------------------
# Positive definiteness
# ---------------------------------------------------------------------------


@pytest.mark.parametrize("params", [ModelParams.fou1(1.0, 0.6), ModelParams.fou2(1.0, 0.75)], ids=["fou1", "fou2"])
@pytest.mark.parametrize("delta", [0.1, 0.5, 1.0])
def test_toeplitz_is_psd(params, delta):
    cov = stationary_covariance(params)
    values = [cov(k * delta) for k in range(64)]
    assert np.linalg.eigvalsh(toeplitz(values)).min() >= -1e-10 * cov.rho0


# ---------------------------------------------------------------------------
# sigma^2 and decay metadata
# ---------------------------------------------------------------------------


class TestSigmaSq:
    @pytest.mark.parametrize("theta", [0.5, 1.0, 2.0])
    def test_half_hurst_closed_form(self, theta):
        value, _ = sigma_sq(stationary_covariance(ModelParams.fou1(theta, 0.5)))
        assert value == pytest.approx(1 / (2 * theta**3), rel=1e-6)

    @pytest.mark.parametrize("theta, hurst", [(1.0, 0.6), (2.0, 0.3), (0.5, 0.7)])
    def test_fou1_parseval_matches_closed_form(self, theta, hurst):
        value, error = sigma_sq_fou1(theta, hurst)
        assert value == pytest.approx(fou1_sigma_sq_closed(theta, hurst), rel=1e-8)
        assert error <= 1e-6 * value

    def test_fou2_time_domain(self, fou2_cov):
        value, error = sigma_sq(fou2_cov)
        lags = np.arange(0.0, 60.0, 0.02)
        squares = np.array([fou2_cov(t) ** 2 for t in lags])
        riemann = 4 * 0.02 * (squares.sum() - squares[0] / 2)
        assert value == pytest.approx(riemann, rel=2e-3)
        assert error <= 1e-6 * value

    def test_slow_envelope_is_reported(self):
        with pytest.raises(ToleranceError):
            sigma_sq(stationary_covariance(ModelParams.fou1(1.0, 0.5)), method="time")

    def test_custom_discrete_sum(self):
        cov = stationary_covariance(ModelParams.custom([1.0, 0.0, 0.0]))
        assert sigma_sq(cov, delta=0.5) == (1.0, 0.0)
        cov = stationary_covariance(ModelParams.custom([1.0, 0.5]))
        assert sigma_sq(cov, delta=1.0)[0] == pytest.approx(2 * (1 + 2 * 0.25))


class TestDecayMetadata:
    def test_fou1(self):
        assert decay_metadata(ModelParams.fou1(1.0, 0.6)) == (pytest.approx(0.8), 2.0)
        assert decay_metadata(ModelParams.fou1(1.0, 0.7))[0] == pytest.approx(0.6)

    def test_fou2_is_exponential(self, fou2_cov):
        assert decay_metadata(ModelParams.fou2(3.0, 0.9)) == (1.0, 2.0)
        assert fou2_cov.exponential
        assert fou2_cov.decay_rate == pytest.approx(0.5 * min(1.0, 1 / 0.75 - 1))


def test_covariance_csv_export(tmp_path):
    path = write_covariance_csv(np.array([1.0, 0.5, 0.25]), 0.5, str(tmp_path / "out" / "cov.csv"))
    frame = pd.read_csv(path)
    assert list(frame.columns) == ["lag_index", "lag_time", "rho"]
    assert frame["lag_time"].tolist() == [0.0, 0.5, 1.0]
