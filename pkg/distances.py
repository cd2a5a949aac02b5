"""
distances.py
------------
Empirical Kolmogorov and 1-Wasserstein distances from a sample to N(0, 1),
and the theoretical bound curves with constants set to 1.
"""

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr, ndtri

from covariance import ModelParams, ModelVariant, decay_metadata
from cumulants import psi_n
from utils import DomainError

HIGH_HURST_BRANCH = 5 / 8


@dataclass(frozen=True)
class DistanceEstimate:
    d_kol: float
    d_w: float
    sample_size: int
    se_kol: float
    censored_count: int = 0


@dataclass(frozen=True)
class BoundCurves:
    d_kol_bound: float
    d_w_bound: float
    d_tv_bound: float


def _sorted_sample(sample: np.ndarray) -> np.ndarray:
    values = np.asarray(sample, dtype=float).ravel()
    if values.size < 2:
        raise DomainError(f"distance estimates need at least 2 values, got {values.size}")
    if not np.all(np.isfinite(values)):
        raise DomainError("sample contains non-finite values")
    return np.sort(values)


def d_kol_empirical(sample: np.ndarray) -> float:
    """sup_x |F_m(x) - Phi(x)|, attained at the ECDF jumps."""
    x = _sorted_sample(sample)
    m = x.size
    cdf = ndtr(x)
    ranks = np.arange(1, m + 1)
    distance = max(np.max(ranks / m - cdf), np.max(cdf - (ranks - 1) / m))
    return float(min(max(distance, 0.0), 1.0))


def _phi_antiderivative(x: np.ndarray) -> np.ndarray:
    """G(x) = x Phi(x) + phi(x), so G' = Phi and G(-inf) = 0."""
    return x * ndtr(x) + np.exp(-0.5 * x * x) / math.sqrt(2 * math.pi)


def d_w_empirical(sample: np.ndarray) -> float:
    """int |F_m(x) - Phi(x)| dx, integrated exactly between order statistics."""
    x = _sorted_sample(sample)
    m = x.size

    left_tail = _phi_antiderivative(x[0])
    # int_{x_m}^inf (1 - Phi) = G(-x_m)
    right_tail = _phi_antiderivative(-x[-1])

    a = x[:-1]
    b = x[1:]
    level = np.arange(1, m) / m
    crossing = np.clip(ndtri(level), a, b)

    g_a = _phi_antiderivative(a)
    g_b = _phi_antiderivative(b)
    g_c = _phi_antiderivative(crossing)
    # F_m = level on [a, b); below the crossing Phi < level, above it Phi > level
    below = level * (crossing - a) - (g_c - g_a)
    above = (g_b - g_c) - level * (b - crossing)
    middle = np.sum(np.abs(below) + np.abs(above))

    return float(left_tail + middle + right_tail)


def distance_estimate(sample: np.ndarray, censored: int = 0) -> DistanceEstimate:
    """Both distances with the Kolmogorov noise floor 1/sqrt(2m)."""
    values = np.asarray(sample, dtype=float).ravel()
    return DistanceEstimate(
        d_kol=d_kol_empirical(values),
        d_w=d_w_empirical(values),
        sample_size=values.size,
        se_kol=1 / math.sqrt(2 * values.size),
        censored_count=censored,
    )


def bound_curves(params: ModelParams, n: int, delta: float) -> BoundCurves:
    """Right-hand sides of the Berry-Esseen bounds for (n, delta), constants 1.

    fOU1 switches to the (n delta)^-(3-4H) branch above H = 5/8; fOU2 uses
    delta + 1/sqrt(n delta); custom covariances use 1/sqrt(Tn) + psi_n.
    The total-variation bound Tn^(-1/4) + psi_n is reported for every model.
    """
    Tn = n * delta
    if not (delta > 0 and Tn > 1):
        raise DomainError(f"bound curves need delta > 0 and Tn > 1, got Tn={Tn}")
    gamma, _ = decay_metadata(params)
    psi = psi_n(delta, Tn, gamma)

    if params.variant is ModelVariant.FOU1:
        if params.hurst <= HIGH_HURST_BRANCH:
            kol = delta + 1 / math.sqrt(Tn)
        else:
            kol = delta + Tn ** -(3 - 4 * params.hurst)
    elif params.variant is ModelVariant.FOU2:
        kol = delta + 1 / math.sqrt(Tn)
    else:
        kol = 1 / math.sqrt(Tn) + psi

    return BoundCurves(d_kol_bound=kol, d_w_bound=kol, d_tv_bound=Tn**-0.25 + psi)
