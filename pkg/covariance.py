"""
covariance.py
-------------
Stationary covariance functions of the fractional Ornstein-Uhlenbeck
processes of the first (fOU1) and second (fOU2) kind, their variances
rho(0), the limiting variance sigma^2 of the normalized second-moment
statistic, and decay metadata.

fOU1 uses the spectral representation

    rho(t) = Gamma(2H+1) sin(pi H) / pi * int_0^inf cos(tx) x^(1-2H) / (theta^2 + x^2) dx

and fOU2 the decomposition rho(t) = e^(-mu t) rho(0) + (2H-1) H^(2H-1) (m + l - k)(t).
"""

import math
import logging
from dataclasses import dataclass, field
from enum import Enum
from functools import lru_cache
from typing import Callable, List, Optional, Tuple

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, model_validator
from scipy.special import beta as beta_fn
from scipy.special import betainc, gamma as gamma_fn

from utils import DomainError, ToleranceError, ensure_parent_dir, integrate

logger = logging.getLogger(__name__)

# Decay onset used by both models
DEFAULT_M0 = 2.0

# Effective decay exponent reported for exponentially decaying covariances
EXPONENTIAL_GAMMA = 1.0

# Relative target for the sigma^2 tail bound and the largest horizon tried
SIGMA_TAIL_TOL = 1e-8
SIGMA_MAX_DOUBLINGS = 16

ENVELOPE_PROBES = 17

# fOU1 lags with theta |t| at or below this are computed around rho(0)
NEAR_LAG_SCALE = 4.0


class ModelVariant(str, Enum):
    FOU1 = "fou1"
    FOU2 = "fou2"
    CUSTOM = "custom"


class ModelParams(BaseModel):
    """Model selection and parameters.

    ``sequence`` is only used by the custom variant; its entries are the
    covariances at lags 0, 1, 2, ... in grid-step units.
    """

    model_config = ConfigDict(frozen=True)

    variant: ModelVariant
    theta: Optional[float] = None
    mu: Optional[float] = None
    hurst: Optional[float] = None
    sequence: Optional[Tuple[float, ...]] = None
    lag_step: float = 1.0

    @model_validator(mode="after")
    def _check_domain(self) -> "ModelParams":
        if self.variant is ModelVariant.FOU1:
            if self.theta is None or self.hurst is None:
                raise ValueError("fou1 requires theta and hurst")
            _check_fou1(self.theta, self.hurst)
        elif self.variant is ModelVariant.FOU2:
            if self.mu is None or self.hurst is None:
                raise ValueError("fou2 requires mu and hurst")
            _check_fou2(self.mu, self.hurst)
        else:
            if not self.sequence:
                raise ValueError("custom covariance requires a non-empty sequence")
            if not self.sequence[0] > 0:
                raise ValueError("custom covariance must have rho(0) > 0")
            if any(abs(value) > self.sequence[0] for value in self.sequence):
                raise ValueError("custom covariance violates |rho(k)| <= rho(0)")
            if not self.lag_step > 0:
                raise ValueError("lag_step must be positive")
        return self

    @classmethod
    def fou1(cls, theta: float, hurst: float) -> "ModelParams":
        return cls(variant=ModelVariant.FOU1, theta=theta, hurst=hurst)

    @classmethod
    def fou2(cls, mu: float, hurst: float) -> "ModelParams":
        return cls(variant=ModelVariant.FOU2, mu=mu, hurst=hurst)

    @classmethod
    def custom(cls, sequence: List[float], lag_step: float = 1.0) -> "ModelParams":
        return cls(variant=ModelVariant.CUSTOM, sequence=tuple(float(v) for v in sequence), lag_step=lag_step)

    @property
    def rate(self) -> float:
        """Drift rate used by the non-stationary map (theta or mu)."""
        if self.variant is ModelVariant.FOU1:
            return self.theta
        if self.variant is ModelVariant.FOU2:
            return self.mu
        raise DomainError("custom covariances have no drift rate")


@dataclass
class StationaryCovariance:
    """A stationary covariance function with its anchor and decay metadata.

    ``gamma`` is the polynomial decay exponent, or the effective exponent
    used for rate formulas when ``exponential`` is set.
    """

    rho0: float
    evaluator: Callable[[float], float]
    gamma: float
    exponential: bool = False
    decay_rate: Optional[float] = None
    m0: float = DEFAULT_M0
    decay_const: float = 0.0
    params: Optional[ModelParams] = None
    sigma_sq_spectral: Optional[Callable[[], Tuple[float, float]]] = field(default=None, repr=False)

    def __call__(self, t: float) -> float:
        return self.evaluator(t)

    def envelope(self, t: float) -> float:
        """Decay envelope without its constant: t^-gamma or e^(-rate t)."""
        if self.exponential:
            return math.exp(-self.decay_rate * t)
        return t ** (-self.gamma)


# ---------------------------------------------------------------------------
# Parameter checks
# ---------------------------------------------------------------------------


def _check_fou1(theta: float, hurst: float) -> None:
    if not theta > 0:
        raise DomainError(f"theta must be positive, got {theta}")
    if not 0 < hurst < 0.75:
        raise DomainError(f"fou1 requires H in (0, 3/4), got {hurst}")


def _check_fou2(mu: float, hurst: float) -> None:
    if not mu > 0:
        raise DomainError(f"mu must be positive, got {mu}")
    if not 0.5 < hurst < 1:
        raise DomainError(f"fou2 requires H in (1/2, 1), got {hurst}")


# ---------------------------------------------------------------------------
# fOU1
# ---------------------------------------------------------------------------


def rho0_fou1(theta: float, hurst: float) -> float:
    """Stationary variance theta^(-2H) H Gamma(2H) of fOU1."""
    _check_fou1(theta, hurst)
    return theta ** (-2 * hurst) * hurst * gamma_fn(2 * hurst)


def _fou1_spectral_const(hurst: float) -> float:
    return gamma_fn(2 * hurst + 1) * math.sin(math.pi * hurst) / math.pi


def _rho_fou1_spectral(t: float, theta: float, hurst: float) -> float:
    """rho(t) for t > 0 by direct Fourier quadrature; stable once theta t is not small."""
    exponent = 1 - 2 * hurst
    theta_sq = theta * theta
    split = min(1.0, math.pi / t)
    head, _ = integrate(
        lambda x: math.cos(t * x) / (theta_sq + x * x), 0.0, split, weight="alg", wvar=(exponent, 0.0)
    )
    tail, _ = integrate(
        lambda x: x**exponent / (theta_sq + x * x),
        split,
        np.inf,
        epsabs=1e-14,
        weight="cos",
        wvar=t,
        limlst=200,
    )
    return _fou1_spectral_const(hurst) * (head + tail)


def _rho_fou1_near(t: float, theta: float, hurst: float) -> float:
    """rho(t) as rho(0) - c int_0^inf (1 - cos tx) x^(1-2H) / (theta^2 + x^2) dx.

    With u = t x the defect is t^(2H) int_0^inf (1 - cos u) u^(1-2H) / (u^2 + (theta t)^2) du,
    whose integrand no longer depends on the size of t.
    """
    rho0 = rho0_fou1(theta, hurst)
    if t == 0.0:
        return rho0
    exponent = 1 - 2 * hurst
    a_sq = (theta * t) ** 2

    def head_fn(u: float) -> float:
        if u == 0.0:
            return 0.0 if a_sq > 0 else 0.5
        half_sin = math.sin(0.5 * u)
        return 2 * half_sin * half_sin / (u * u + a_sq)

    head, _ = integrate(head_fn, 0.0, math.pi, weight="alg", wvar=(exponent, 0.0))
    # int_pi^inf u^(1-2H) / (u^2 + a^2) du with u = 1/y
    mass, _ = integrate(lambda y: 1.0 / (1.0 + a_sq * y * y), 0.0, 1 / math.pi, weight="alg", wvar=(-exponent, 0.0))
    oscillating, _ = integrate(
        lambda u: u**exponent / (u * u + a_sq),
        math.pi,
        np.inf,
        epsabs=1e-14,
        weight="cos",
        wvar=1.0,
        limlst=200,
    )
    defect = t ** (2 * hurst) * (head + mass - oscillating)
    return rho0 - _fou1_spectral_const(hurst) * defect


def rho_fou1(t: float, theta: float, hurst: float) -> float:
    """Covariance E[Z_0 Z_t] of the stationary fOU1 process.

    Lags with theta |t| <= NEAR_LAG_SCALE go through the defect form around
    rho(0); longer lags use Fourier quadrature of the spectral density.

    Args:
        t: Lag in time units (any sign)
        theta: Drift rate
        hurst: Hurst index in (0, 3/4)

    Returns:
        The covariance at lag ``t``

    Raises:
        DomainError: On invalid parameters
        QuadratureError: If QUADPACK does not converge
    """
    _check_fou1(theta, hurst)
    t = abs(float(t))
    if theta * t <= NEAR_LAG_SCALE:
        return _rho_fou1_near(t, theta, hurst)
    return _rho_fou1_spectral(t, theta, hurst)


def sigma_sq_fou1(theta: float, hurst: float) -> Tuple[float, float]:
    """Limiting variance 4 int_0^inf rho^2 of fOU1 via Parseval.

    With the one-sided density s, 4 int_0^inf rho^2 = 2 pi int_0^inf s^2.
    """
    _check_fou1(theta, hurst)
    theta_sq = theta * theta
    exponent = 2 - 4 * hurst
    head, head_err = integrate(
        lambda x: 1.0 / (theta_sq + x * x) ** 2, 0.0, 1.0, weight="alg", wvar=(exponent, 0.0)
    )
    # x = 1/y on [1, inf)
    tail, tail_err = integrate(lambda y: y ** (4 * hurst) / (1.0 + theta_sq * y * y) ** 2, 0.0, 1.0)
    scale = 2 * math.pi * _fou1_spectral_const(hurst) ** 2
    return scale * (head + tail), scale * (head_err + tail_err)


# ---------------------------------------------------------------------------
# fOU2
# ---------------------------------------------------------------------------


def rho0_fou2(mu: float, hurst: float) -> float:
    """Stationary variance (2H-1) H^(2H) B(1-H+mu H, 2H-1) / mu of fOU2."""
    _check_fou2(mu, hurst)
    return (2 * hurst - 1) * hurst ** (2 * hurst) * beta_fn(1 - hurst + mu * hurst, 2 * hurst - 1) / mu


def _kernel_ratio(u: float, hurst: float) -> float:
    """(2 sinh(u/2H) / u)^(2H-2), continuous at u = 0."""
    power = 2 * hurst - 2
    x = u / (2 * hurst)
    if u == 0.0:
        return (1.0 / hurst) ** power
    if x < 20.0:
        return (2 * math.sinh(x) / u) ** power
    return math.exp(power * (x - math.log(u)))


def _kernel(u: float, hurst: float) -> float:
    """(e^(u/2H) - e^(-u/2H))^(2H-2) for u > 0."""
    return u ** (2 * hurst - 2) * _kernel_ratio(u, hurst)


def _fou2_tail(t: float, mu: float, hurst: float) -> float:
    """int_t^inf e^(-mu u) (e^(u/2H) - e^(-u/2H))^(2H-2) du as an incomplete Beta."""
    a = 1 - hurst + mu * hurst
    b = 2 * hurst - 1
    return hurst * beta_fn(a, b) * betainc(a, b, math.exp(-t / hurst))


def _fou2_l(t: float, mu: float, hurst: float) -> float:
    """l(t) = e^(mu t) / (2 mu) * int_t^inf e^(-mu u) kernel(u) du."""
    a = 1 - hurst + mu * hurst
    if mu * t < 600.0 and a * t / hurst < 600.0:
        return math.exp(mu * t) * _fou2_tail(t, mu, hurst) / (2 * mu)
    # Shifted form int_0^inf e^(-mu v) kernel(t + v) dv avoids overflow
    value, _ = integrate(lambda v: math.exp(-mu * v) * _kernel(t + v, hurst), 0.0, np.inf)
    return value / (2 * mu)


def _fou2_m(t: float, mu: float, hurst: float) -> float:
    """m(t) = 1/(2 mu) int_0^t (e^(-mu(t-u)) - e^(-mu(t+u))) kernel(u) du."""

    def integrand(u: float) -> float:
        return (math.exp(-mu * (t - u)) - math.exp(-mu * (t + u))) * _kernel_ratio(u, hurst)

    value, _ = integrate(integrand, 0.0, t, weight="alg", wvar=(2 * hurst - 2, 0.0))
    return value / (2 * mu)


def fou2_h(t: float, mu: float, hurst: float) -> float:
    """h(t) = m(t) + l(t) - k(t) with k(t) = e^(-2 mu t) l(t)."""
    _check_fou2(mu, hurst)
    t = abs(float(t))
    if t == 0.0:
        return 0.0
    l_value = _fou2_l(t, mu, hurst)
    return _fou2_m(t, mu, hurst) + l_value * (1.0 - math.exp(-2 * mu * t))


def rho_fou2(t: float, mu: float, hurst: float) -> float:
    """Covariance E[Z_0 Z_t] of the stationary fOU2 process.

    Raises:
        DomainError: On invalid parameters
        QuadratureError: If QUADPACK does not converge
    """
    _check_fou2(mu, hurst)
    t = abs(float(t))
    rho0 = rho0_fou2(mu, hurst)
    if t == 0.0:
        return rho0
    prefactor = (2 * hurst - 1) * hurst ** (2 * hurst - 1)
    return math.exp(-mu * t) * rho0 + prefactor * fou2_h(t, mu, hurst)


# ---------------------------------------------------------------------------
# Custom sequences
# ---------------------------------------------------------------------------


def _custom_evaluator(sequence: Tuple[float, ...], lag_step: float) -> Callable[[float], float]:
    lags = np.arange(len(sequence)) * lag_step
    values = np.asarray(sequence, dtype=float)

    def evaluate(t: float) -> float:
        t = abs(float(t))
        if t > lags[-1]:
            return 0.0
        return float(np.interp(t, lags, values))

    return evaluate


# ---------------------------------------------------------------------------
# Covariance objects
# ---------------------------------------------------------------------------


def decay_metadata(params: ModelParams) -> Tuple[float, float]:
    """Return (gamma, m0); exponential covariances report the effective gamma."""
    if params.variant is ModelVariant.FOU1:
        return 2 - 2 * params.hurst, DEFAULT_M0
    return EXPONENTIAL_GAMMA, DEFAULT_M0


def _fit_decay_const(cov: StationaryCovariance) -> float:
    probes = np.linspace(cov.m0, 2 * cov.m0, ENVELOPE_PROBES)
    return max(abs(cov(t)) / cov.envelope(t) for t in probes)


@lru_cache(maxsize=64)
def stationary_covariance(params: ModelParams) -> StationaryCovariance:
    """Build the covariance object for ``params`` with a fitted decay constant."""
    gamma, m0 = decay_metadata(params)

    if params.variant is ModelVariant.FOU1:
        theta, hurst = params.theta, params.hurst
        cov = StationaryCovariance(
            rho0=rho0_fou1(theta, hurst),
            evaluator=lambda t: rho_fou1(t, theta, hurst),
            gamma=gamma,
            m0=m0,
            params=params,
            sigma_sq_spectral=lambda: sigma_sq_fou1(theta, hurst),
        )
    elif params.variant is ModelVariant.FOU2:
        mu, hurst = params.mu, params.hurst
        cov = StationaryCovariance(
            rho0=rho0_fou2(mu, hurst),
            evaluator=lambda t: rho_fou2(t, mu, hurst),
            gamma=gamma,
            exponential=True,
            decay_rate=0.5 * min(mu, 1 / hurst - 1),
            m0=m0,
            params=params,
        )
    else:
        cov = StationaryCovariance(
            rho0=params.sequence[0],
            evaluator=_custom_evaluator(params.sequence, params.lag_step),
            gamma=gamma,
            exponential=True,
            decay_rate=1.0,
            m0=m0,
            params=params,
        )

    cov.decay_const = _fit_decay_const(cov)
    logger.debug("Built %s covariance: rho0=%.6g decay_const=%.3g", params.variant.value, cov.rho0, cov.decay_const)
    return cov


# ---------------------------------------------------------------------------
# sigma^2
# ---------------------------------------------------------------------------


def _tail_bound(cov: StationaryCovariance, horizon: float) -> float:
    """Bound on 4 int_T^inf rho^2 from the fitted envelope."""
    c_sq = cov.decay_const**2
    if cov.exponential:
        return 2 * c_sq * math.exp(-2 * cov.decay_rate * horizon) / cov.decay_rate
    return 4 * c_sq * horizon ** (1 - 2 * cov.gamma) / (2 * cov.gamma - 1)


def sigma_sq(cov: StationaryCovariance, delta: Optional[float] = None, method: str = "auto") -> Tuple[float, float]:
    """Limiting variance of sqrt(Tn) (v_n - rho(0)), i.e. 4 int_0^inf rho^2.

    Args:
        cov: Stationary covariance
        delta: Grid step, required for custom sequences which use the
            discrete analogue 2 delta sum_k rho_k^2
        method: "auto", "spectral" or "time"

    Returns:
        Tuple of (value, error estimate)

    Raises:
        ToleranceError: If the envelope tail cannot be driven below the
            relative tolerance within the horizon cap
    """
    params = cov.params
    if params is not None and params.variant is ModelVariant.CUSTOM:
        step = delta if delta is not None else params.lag_step
        values = np.asarray(params.sequence, dtype=float)
        return 2 * step * (values[0] ** 2 + 2 * np.sum(values[1:] ** 2)), 0.0

    if method in ("auto", "spectral") and cov.sigma_sq_spectral is not None:
        return cov.sigma_sq_spectral()
    if method == "spectral":
        raise DomainError("covariance has no spectral representation")

    def integrand(r: float) -> float:
        return cov(r) ** 2

    head, error = integrate(integrand, 0.0, cov.m0, epsrel=1e-10)
    lower = 4 * head

    # Pick the horizon before integrating past m0
    horizon = cov.m0
    for _ in range(SIGMA_MAX_DOUBLINGS):
        if _tail_bound(cov, horizon) <= SIGMA_TAIL_TOL * lower:
            break
        horizon *= 2
    else:
        raise ToleranceError(
            f"sigma^2 tail bound {_tail_bound(cov, horizon):.3e} above {SIGMA_TAIL_TOL:.0e} relative "
            f"at horizon {horizon:g}"
        )

    total = head
    start = cov.m0
    while start < horizon:
        piece, piece_err = integrate(integrand, start, 2 * start, epsrel=1e-10)
        total += piece
        error += piece_err
        start *= 2

    tail = _tail_bound(cov, horizon)
    logger.debug("sigma^2 by time-domain quadrature: horizon=%g tail<=%.3e", horizon, tail)
    return 4 * total, 4 * error + tail


# ---------------------------------------------------------------------------
# Export
# ---------------------------------------------------------------------------


def covariance_frame(values: np.ndarray, delta: float) -> pd.DataFrame:
    """Tabulate a covariance sequence as lag_index, lag_time, rho."""
    lags = np.arange(len(values))
    return pd.DataFrame({"lag_index": lags, "lag_time": lags * delta, "rho": np.asarray(values, dtype=float)})


def write_covariance_csv(values: np.ndarray, delta: float, path: str) -> str:
    """Write a covariance sequence to CSV and return the path."""
    covariance_frame(values, delta).to_csv(ensure_parent_dir(path), index=False)
    return path
