"""
cumulants.py
------------
Exact cumulants of V_n(Z) = sqrt(Tn) (v_n - rho(0)) for a stationary Gaussian
sequence, and the rate functions they are compared against.

V_n(Z) is a Gaussian quadratic form with weight a = sqrt(Tn) / n on the
identity, so kappa_m = 2^(m-1) (m-1)! a^m tr(C^m) with C the Toeplitz
covariance matrix.
"""

import math
import logging
from typing import Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel
from scipy.linalg import toeplitz

from sampler import CovSequence
from utils import DomainError, ScaleCapError

logger = logging.getLogger(__name__)

EXACT_MAX_N = 8192
BRUTE_MAX_N = 32
ROW_BLOCK = 2048
NZ_CAPS = {2: 256, 3: 48}

REPORT_KEYS = ("n", "delta", "Tn", "kappa2", "kappa3", "kappa4", "variance_defect", "psi", "k3_rate", "k4_rate")

BOUNDARY_TOL = 1e-12


class CumulantReport(BaseModel):
    n: int
    delta: float
    Tn: float
    kappa2: float
    kappa3: float
    kappa4: float
    variance_defect: Optional[float] = None
    variance_bound_rate: Optional[float] = None
    k3_rate: Optional[float] = None
    k4_rate: Optional[float] = None
    psi: Optional[float] = None

    def to_json_dict(self) -> dict:
        return self.model_dump(include=set(REPORT_KEYS))


# ---------------------------------------------------------------------------
# Exact and brute-force cumulants
# ---------------------------------------------------------------------------


def _traces(cov_matrix: np.ndarray) -> Tuple[float, float, float]:
    """tr C^2, tr C^3 and tr C^4 of a symmetric matrix, C^2 built by row blocks."""
    tr2 = float(np.sum(cov_matrix * cov_matrix))
    tr3 = 0.0
    tr4 = 0.0
    n = cov_matrix.shape[0]
    for start in range(0, n, ROW_BLOCK):
        rows = cov_matrix[start : start + ROW_BLOCK]
        square_rows = rows @ cov_matrix
        tr3 += float(np.sum(square_rows * rows))
        tr4 += float(np.sum(square_rows * square_rows))
    return tr2, tr3, tr4


def exact_cumulants(
    seq: CovSequence,
    sigma2: Optional[float] = None,
    gamma: Optional[float] = None,
    max_n: int = EXACT_MAX_N,
) -> CumulantReport:
    """Exact kappa_2, kappa_3, kappa_4 of V_n(Z) with the matching rate values.

    Args:
        seq: Covariance sequence on the grid
        sigma2: Limiting variance; fills variance_defect when given
        gamma: Decay exponent for the rate values (defaults to the
            covariance's own)
        max_n: Largest n accepted

    Returns:
        CumulantReport

    Raises:
        ScaleCapError: If n exceeds ``max_n``
    """
    grid = seq.grid
    if grid.n > max_n:
        raise ScaleCapError(f"exact cumulants capped at n={max_n}, got {grid.n}")

    tr2, tr3, tr4 = _traces(toeplitz(seq.values))
    a = math.sqrt(grid.horizon) / grid.n
    report = CumulantReport(
        n=grid.n,
        delta=grid.delta,
        Tn=grid.horizon,
        kappa2=2 * a**2 * tr2,
        kappa3=8 * a**3 * tr3,
        kappa4=48 * a**4 * tr4,
    )

    if gamma is None and seq.covariance is not None:
        gamma = seq.covariance.gamma
    if sigma2 is not None:
        report.variance_defect = abs(report.kappa2 - sigma2)
    if gamma is not None and grid.horizon > 1:
        report.variance_bound_rate = variance_defect_bound(grid.horizon, grid.delta, gamma)
        report.k3_rate, report.k4_rate, _ = cumulant_rate_bounds(grid.horizon, gamma)
        report.psi = psi_n(grid.delta, grid.horizon, gamma)
    return report


def brute_cumulants(seq: CovSequence) -> Tuple[float, float, float]:
    """Cumulants from the literal index sums, for n <= 32."""
    grid = seq.grid
    n = grid.n
    if n > BRUTE_MAX_N:
        raise ScaleCapError(f"brute-force cumulants capped at n={BRUTE_MAX_N}, got {n}")

    c = toeplitz(seq.values)
    Tn = grid.horizon
    kappa2 = 2 * (Tn / n**2) * np.einsum("ij,ij->", c, c, optimize=False)
    kappa3 = 8 * (Tn**1.5 / n**3) * np.einsum("ij,ik,jk->", c, c, c, optimize=False)
    kappa4 = 48 * (Tn**2 / n**4) * np.einsum("ij,jk,kl,li->", c, c, c, c, optimize=False)
    return float(kappa2), float(kappa3), float(kappa4)


# ---------------------------------------------------------------------------
# Rate functions (constants set to 1)
# ---------------------------------------------------------------------------


def _at(gamma: float, boundary: float) -> bool:
    return abs(gamma - boundary) <= BOUNDARY_TOL


def _check_rate_args(Tn: float, gamma: float, delta: Optional[float] = None, min_tn: float = 1.0) -> None:
    if not Tn > min_tn:
        raise DomainError(f"Tn must exceed {min_tn:g}, got {Tn}")
    if not gamma > 0.5:
        raise DomainError(f"gamma must exceed 1/2, got {gamma}")
    if delta is not None and not delta > 0:
        raise DomainError(f"delta must be positive, got {delta}")


def variance_defect_bound(Tn: float, delta: float, gamma: float) -> float:
    """delta + {1/Tn, log(Tn)/Tn, Tn^(1-2 gamma)} for gamma >, =, < 1."""
    _check_rate_args(Tn, gamma, delta)
    if _at(gamma, 1.0):
        return delta + math.log(Tn) / Tn
    if gamma > 1:
        return delta + 1 / Tn
    return delta + Tn ** (1 - 2 * gamma)


def cumulant_rate_bounds(Tn: float, gamma: float) -> Tuple[float, float, float]:
    """Rates for |kappa_3| and kappa_4 and their maximum."""
    _check_rate_args(Tn, gamma)
    if _at(gamma, 2 / 3):
        k3 = math.log(Tn) ** 2 / math.sqrt(Tn)
    elif gamma > 2 / 3:
        k3 = 1 / math.sqrt(Tn)
    else:
        k3 = Tn ** (1.5 - 3 * gamma)

    if _at(gamma, 0.75):
        k4 = math.log(Tn) ** 3 / Tn
    elif gamma > 0.75:
        k4 = 1 / Tn
    else:
        k4 = Tn ** (2 - 4 * gamma)
    return k3, k4, max(k3, k4)


def psi_n(delta: float, Tn: float, gamma: float) -> float:
    """delta + (1/sqrt(Tn) if gamma >= 3/4 else Tn^(1-2 gamma))."""
    _check_rate_args(Tn, gamma, delta, min_tn=0.0)
    if gamma >= 0.75 or _at(gamma, 0.75):
        return delta + 1 / math.sqrt(Tn)
    return delta + Tn ** (1 - 2 * gamma)


# ---------------------------------------------------------------------------
# Sum-inequality diagnostic
# ---------------------------------------------------------------------------


def nz_diagnostic(seq: CovSequence, M: int, v: Sequence[int], n: Optional[int] = None) -> Tuple[float, float]:
    """Both sides of the sum inequality with lags in index units.

    lhs = sum_{|k_j| <= n} |rho(k . v)| prod_j |rho(k_j)|
    rhs = (sum_{|k| <= n} |rho(k)|^(1 + 1/M))^M

    rho(k) is read from ``seq`` and taken as zero past its last lag. ``n``
    defaults to the largest range whose lags k . v stay inside ``seq``.
    """
    if M not in NZ_CAPS:
        raise DomainError(f"M must be 2 or 3, got {M}")
    signs = np.asarray(v, dtype=int)
    if signs.shape != (M,) or not np.all(np.abs(signs) == 1):
        raise DomainError(f"v must be a vector of {M} entries equal to +-1")
    if n is None:
        n = (seq.grid.n - 1) // M
    if n > NZ_CAPS[M]:
        raise ScaleCapError(f"diagnostic with M={M} capped at n={NZ_CAPS[M]}, got {n}")

    magnitudes = np.abs(seq.values)

    def rho(lag: np.ndarray) -> np.ndarray:
        lag = np.abs(lag)
        inside = lag < len(magnitudes)
        return np.where(inside, magnitudes[np.minimum(lag, len(magnitudes) - 1)], 0.0)

    k = np.arange(-n, n + 1)
    grids = np.meshgrid(*([k] * M), indexing="ij")
    combined = sum(sign * grid for sign, grid in zip(signs, grids))
    product = rho(combined)
    for grid in grids:
        product = product * rho(grid)
    lhs = float(np.sum(product))
    rhs = float(np.sum(rho(k) ** (1 + 1 / M)) ** M)
    return lhs, rhs
