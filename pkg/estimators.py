"""
estimators.py
-------------
Second-moment estimator v_n, the normalized fluctuation V_n, the drift maps
f_H (fOU1, closed form) and f_mu (fOU2, inverse of g_mu), standardization
constants, and the monotonicity checker for drift maps.
"""

import math
import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, NamedTuple, Optional, Tuple, Union

import numpy as np
from scipy.optimize import bisect
from scipy.special import beta as beta_fn
from scipy.special import digamma, gamma as gamma_fn, polygamma

from utils import DomainError, NonPositiveMomentError, OutOfRangeError, ToleranceError, integrate

logger = logging.getLogger(__name__)

ArrayLike = Union[float, np.ndarray]

BRACKET_LOW = 2.0**-20
BRACKET_CAP = 2.0**40
BISECT_XTOL = 1e-10
NEWTON_RTOL = 1e-12
NEWTON_MAX_ITER = 50
THIRD_DERIVATIVE_STEP = 1e-4


class GDerivatives(NamedTuple):
    value: float
    d1: float
    d2: float


@dataclass
class EstimatorResult:
    v: float
    V: float
    drift_hat: Optional[float] = None
    standardized: Optional[float] = None


@dataclass(frozen=True)
class StandardizationConstants:
    """sigma_limit * |f'(rho(0))| scales the drift CLT statistic."""

    sigma_limit: float
    fprime_abs: float
    scale: float

    def __post_init__(self):
        if not (self.sigma_limit > 0 and self.fprime_abs > 0 and self.scale > 0):
            raise DomainError("standardization constants must be positive")


@dataclass
class ConditionResult:
    passed: bool
    worst_x: float
    worst_value: float


@dataclass
class HypothesisReport:
    interval: Tuple[float, float]
    probe_count: int
    conditions: Dict[str, ConditionResult] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(result.passed for result in self.conditions.values())


# ---------------------------------------------------------------------------
# Second moment
# ---------------------------------------------------------------------------


def second_moment(path: ArrayLike) -> ArrayLike:
    """Mean of squared observations along the last axis."""
    values = np.asarray(path, dtype=float)
    if values.ndim == 0 or values.shape[-1] == 0:
        raise DomainError("second moment of an empty path")
    result = np.mean(values * values, axis=-1)
    return float(result) if result.ndim == 0 else result


def normalized_fluct(v: ArrayLike, rho0: float, Tn: float) -> ArrayLike:
    """V = sqrt(Tn) * (v - rho0)."""
    if not Tn > 0:
        raise DomainError(f"Tn must be positive, got {Tn}")
    fluct = math.sqrt(Tn) * (np.asarray(v, dtype=float) - rho0)
    return float(fluct) if fluct.ndim == 0 else fluct


# ---------------------------------------------------------------------------
# fOU1 drift map
# ---------------------------------------------------------------------------


def f_H(x: ArrayLike, hurst: float) -> ArrayLike:
    """f_H(x) = (H Gamma(2H) / x)^(1/2H), inverse of theta -> rho0_fou1(theta, H)."""
    if not 0 < hurst < 0.75:
        raise DomainError(f"f_H requires H in (0, 3/4), got {hurst}")
    values = np.asarray(x, dtype=float)
    if np.any(~(values > 0)):
        raise NonPositiveMomentError("f_H is defined for positive second moments only")
    result = (hurst * gamma_fn(2 * hurst) / values) ** (1 / (2 * hurst))
    return float(result) if result.ndim == 0 else result


# ---------------------------------------------------------------------------
# fOU2 drift map
# ---------------------------------------------------------------------------


def _check_g_domain(x: float, hurst: float) -> None:
    if not 0.5 < hurst < 1:
        raise DomainError(f"g_mu requires H in (1/2, 1), got {hurst}")
    if not x > 0:
        raise DomainError(f"g_mu requires x > 0, got {x}")


def _log_moments_quad(x: float, hurst: float) -> Tuple[float, float, float]:
    """int_0^1 log^j(t) t^(xH-H) (1-t)^(2H-2) dt for j = 0, 1, 2.

    [0, 1/2] goes to QAGS, which copes with the t^(xH-H) log^j t endpoint;
    [1/2, 1] uses the algebraic QAWS weight for (1-t)^(2H-2).
    """
    alpha = x * hurst - hurst
    beta_exp = 2 * hurst - 2
    moments = []
    for j in range(3):
        left, _ = integrate(lambda t: math.log(t) ** j * t**alpha * (1 - t) ** beta_exp, 0.0, 0.5)
        right, _ = integrate(lambda t: math.log(t) ** j * t**alpha, 0.5, 1.0, weight="alg", wvar=(0.0, beta_exp))
        moments.append(left + right)
    return moments[0], moments[1], moments[2]


def _log_moments_closed(x: float, hurst: float) -> Tuple[float, float, float]:
    """Same integrals through B(a, b) and its a-derivatives."""
    a = x * hurst - hurst + 1
    b = 2 * hurst - 1
    base = beta_fn(a, b)
    psi = digamma(a) - digamma(a + b)
    return base, base * psi, base * (psi * psi + polygamma(1, a) - polygamma(1, a + b))


def g_mu(x: float, hurst: float, method: str = "quad") -> GDerivatives:
    """g(x) = (2H-1) H^(2H) B(1-H+xH, 2H-1) / x and its first two derivatives.

    Args:
        x: Drift value mu > 0
        hurst: Hurst index in (1/2, 1)
        method: "quad" integrates the log-moment integrals with QUADPACK,
            "closed" evaluates them with Beta and polygamma functions

    Returns:
        GDerivatives(value, d1, d2)
    """
    _check_g_domain(x, hurst)
    if method == "quad":
        i0, i1, i2 = _log_moments_quad(x, hurst)
    elif method == "closed":
        i0, i1, i2 = _log_moments_closed(x, hurst)
    else:
        raise DomainError(f"unknown g_mu method {method!r}")

    c = (2 * hurst - 1) * hurst ** (2 * hurst)
    value = c * i0 / x
    d1 = c * (-i0 / x**2 + hurst * i1 / x)
    d2 = c * (2 * i0 / x**3 - 2 * hurst * i1 / x**2 + hurst**2 * i2 / x)
    return GDerivatives(value, d1, d2)


def _g_value(x: float, hurst: float) -> float:
    return (2 * hurst - 1) * hurst ** (2 * hurst) * beta_fn(1 - hurst + x * hurst, 2 * hurst - 1) / x


def invert_f_mu(x: float, hurst: float, method: str = "closed") -> float:
    """Solve g_mu(mu) = x for mu, i.e. evaluate f_mu(x).

    Raises:
        OutOfRangeError: If x <= 0 or x lies above g_mu(2^-20)
        ToleranceError: If Newton polishing does not reach the residual target
    """
    if not 0.5 < hurst < 1:
        raise DomainError(f"f_mu requires H in (1/2, 1), got {hurst}")
    if not (x > 0 and math.isfinite(x)):
        raise OutOfRangeError(f"f_mu is defined for positive moments, got {x}")

    def residual(mu: float) -> float:
        return _g_value(mu, hurst) - x

    low = BRACKET_LOW
    if residual(low) < 0:
        raise OutOfRangeError(f"{x} exceeds g_mu({low:g}); no root in range")
    high = 1.0
    while residual(high) > 0:
        high *= 2
        if high > BRACKET_CAP:
            raise OutOfRangeError(f"{x} is below g_mu({BRACKET_CAP:g}); no root in range")

    mu = bisect(residual, low, high, xtol=BISECT_XTOL) if residual(high) != 0 else high

    target = NEWTON_RTOL * max(1.0, x)
    for _ in range(NEWTON_MAX_ITER):
        value, d1, _ = g_mu(mu, hurst, method=method)
        error = value - x
        if abs(error) <= target:
            return mu
        mu -= error / d1
    raise ToleranceError(f"f_mu inversion stalled at mu={mu:.12g}, residual {error:.3e}")


# ---------------------------------------------------------------------------
# Standardization
# ---------------------------------------------------------------------------


def standardize_fou1(theta: float, hurst: float, sigma_limit: float) -> StandardizationConstants:
    """|f_H'(rho(0))| = theta^(2H+1) / (2 H^2 Gamma(2H))."""
    if not sigma_limit > 0:
        raise DomainError("sigma must be positive")
    fprime_abs = theta ** (2 * hurst + 1) / (2 * hurst**2 * gamma_fn(2 * hurst))
    return StandardizationConstants(sigma_limit, fprime_abs, sigma_limit * fprime_abs)


def standardize_fou2(mu: float, hurst: float, sigma_limit: float, method: str = "quad") -> StandardizationConstants:
    """|f_mu'(rho(0))| = 1 / |g_mu'(mu)|."""
    if not sigma_limit > 0:
        raise DomainError("sigma must be positive")
    fprime_abs = 1.0 / abs(g_mu(mu, hurst, method=method).d1)
    return StandardizationConstants(sigma_limit, fprime_abs, sigma_limit * fprime_abs)


# ---------------------------------------------------------------------------
# Monotonicity checker
# ---------------------------------------------------------------------------


def hypothesis_check(
    g_evaluator: Callable[[float], Tuple[float, float, float]],
    interval: Tuple[float, float],
    probe_count: int = 64,
) -> HypothesisReport:
    """Check g' < 0, g'' > 0 and g''' < 0 on a probe grid.

    ``g_evaluator`` returns (value, d1, d2); g''' is a central difference of
    d2 with step 1e-4 x.
    """
    low, high = interval
    if probe_count < 3:
        raise DomainError("probe_count must be at least 3")
    if not 0 < low < high:
        raise DomainError(f"invalid probe interval {interval}")

    probes = np.linspace(low, high, probe_count)
    d1 = np.empty(probe_count)
    d2 = np.empty(probe_count)
    d3 = np.empty(probe_count)
    for i, x in enumerate(probes):
        _, d1[i], d2[i] = g_evaluator(x)
        step = THIRD_DERIVATIVE_STEP * x
        d3[i] = (g_evaluator(x + step)[2] - g_evaluator(x - step)[2]) / (2 * step)

    report = HypothesisReport(interval=(low, high), probe_count=probe_count)
    # Each condition is checked as sign * derivative < 0
    for name, values, sign in (("g1_negative", d1, 1.0), ("g2_positive", d2, -1.0), ("g3_negative", d3, 1.0)):
        worst = int(np.argmax(sign * values))
        report.conditions[name] = ConditionResult(
            passed=bool(np.all(sign * values < 0)),
            worst_x=float(probes[worst]),
            worst_value=float(values[worst]),
        )
    return report


def estimate(
    path: np.ndarray,
    rho0: float,
    Tn: float,
    drift_map: Optional[Callable[[float], float]] = None,
    drift_true: Optional[float] = None,
    scale: Optional[float] = None,
) -> EstimatorResult:
    """Evaluate v_n, V_n and, when a drift map is given, the drift statistic."""
    v = second_moment(path)
    result = EstimatorResult(v=v, V=normalized_fluct(v, rho0, Tn))
    if drift_map is not None and v > 0:
        result.drift_hat = drift_map(v)
        if drift_true is not None and scale is not None:
            result.standardized = math.sqrt(Tn) * (result.drift_hat - drift_true) / scale
    return result
