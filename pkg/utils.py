"""Shared helpers: errors, settings, quadrature, random streams, block-parallel maps and IO."""

import os
import logging
from functools import lru_cache
from typing import Any, Callable, List, Optional, Sequence, Tuple, TypeVar

import numpy as np
import psutil
from joblib import Parallel, delayed
from more_itertools import batched
from pydantic_settings import BaseSettings, SettingsConfigDict
from scipy.integrate import quad
from scipy.special import ndtri
from threadpoolctl import threadpool_limits

logger = logging.getLogger(__name__)

T = TypeVar("T")


# ---------------------------------------------------------------------------
# Errors
# ---------------------------------------------------------------------------


class OusmeError(Exception):
    """Base class for every error raised by this package."""


class DomainError(OusmeError, ValueError):
    """A parameter or input lies outside the admissible domain."""


class NonPositiveMomentError(DomainError):
    """A drift map was applied to a non-positive second moment."""


class OutOfRangeError(DomainError):
    """An inversion target lies outside the range of the mapped function."""


class ScaleCapError(OusmeError, ValueError):
    """The requested size exceeds the cap of an exact or brute-force routine."""


class NumericalError(OusmeError, ArithmeticError):
    """A numerical routine did not reach its tolerance."""


class QuadratureError(NumericalError):
    """QUADPACK returned an error estimate outside the acceptance band."""

    def __init__(self, message: str, value: float, abserr: float):
        super().__init__(f"{message} (value={value:.6e}, abserr={abserr:.3e})")
        self.value = value
        self.abserr = abserr


class EmbeddingError(NumericalError):
    """The circulant embedding has too much negative spectral mass."""

    def __init__(self, message: str, fft_length: int, min_eigenvalue: float, clipped_mass: float):
        super().__init__(
            f"{message} (M={fft_length}, min eigenvalue={min_eigenvalue:.3e}, "
            f"clipped mass={clipped_mass:.3e})"
        )
        self.fft_length = fft_length
        self.min_eigenvalue = min_eigenvalue
        self.clipped_mass = clipped_mass


class ToleranceError(NumericalError):
    """An iterative procedure or tail bound did not reach its target."""


class ReportError(OusmeError):
    """A report could not be produced or written."""


# ---------------------------------------------------------------------------
# Settings
# ---------------------------------------------------------------------------


class OusmeSettings(BaseSettings):
    """Process-level settings read from ``OUSME_*`` environment variables."""

    model_config = SettingsConfigDict(env_prefix="OUSME_", extra="ignore")

    threads: int = 1
    block_size: int = 64
    log_level: str = "INFO"


@lru_cache(maxsize=1)
def get_settings() -> OusmeSettings:
    """Return the cached process settings."""
    return OusmeSettings()


# ---------------------------------------------------------------------------
# Quadrature
# ---------------------------------------------------------------------------


def integrate(
    func: Callable[[float], float],
    a: float,
    b: float,
    epsabs: float = 1e-13,
    epsrel: float = 1e-11,
    accept: float = 1e-8,
    limit: int = 200,
    **kwargs: Any,
) -> Tuple[float, float]:
    """Integrate ``func`` over [a, b] with QUADPACK and check the outcome.

    Any ``weight``/``wvar`` keyword selects the weighted QUADPACK routines
    (QAWS for algebraic-logarithmic endpoint weights, QAWF for Fourier
    integrals on a half line).

    Args:
        func: Scalar integrand
        a: Lower limit
        b: Upper limit (may be ``np.inf``)
        epsabs: Absolute tolerance handed to QUADPACK
        epsrel: Relative tolerance handed to QUADPACK
        accept: Largest error estimate, relative to max(1, |value|), accepted
            when QUADPACK flags a non-zero return code
        limit: Maximum number of subintervals

    Returns:
        Tuple of (value, error estimate)

    Raises:
        QuadratureError: If the integral is not finite or the error estimate
            is outside the acceptance band
    """
    result = quad(func, a, b, full_output=1, epsabs=epsabs, epsrel=epsrel, limit=limit, **kwargs)
    value, abserr = float(result[0]), float(result[1])

    if not np.isfinite(value):
        raise QuadratureError(f"non-finite integral on [{a}, {b}]", value, abserr)

    # QUADPACK appends a message when ier != 0
    if len(result) > 3:
        if abserr > accept * max(1.0, abs(value)):
            raise QuadratureError(str(result[3]).splitlines()[0], value, abserr)
        logger.debug("Accepted flagged quadrature on [%s, %s]: abserr=%.3e", a, b, abserr)

    return value, abserr


# ---------------------------------------------------------------------------
# Random streams
# ---------------------------------------------------------------------------

_STREAM_SHIFT = 192


def replication_generator(seed: int, index: int) -> np.random.Generator:
    """Return the generator for replication ``index`` under ``seed``.

    Philox is counter based: the root seed is the key and the replication
    index occupies the top word of the 256-bit counter, so stream ``index``
    never overlaps another stream and does not depend on scheduling.
    """
    if seed < 0 or index < 0:
        raise DomainError("seed and replication index must be non-negative")
    bit_generator = np.random.Philox(key=seed % (1 << 128), counter=index << _STREAM_SHIFT)
    return np.random.Generator(bit_generator)


def standard_normals(rng: np.random.Generator, size: int) -> np.ndarray:
    """Draw standard normals by the inverse-CDF transform of Philox uniforms."""
    uniforms = rng.random(size)
    tiny = np.finfo(float).tiny
    return ndtri(np.clip(uniforms, tiny, 1.0 - np.finfo(float).epsneg))


# ---------------------------------------------------------------------------
# Block-parallel execution
# ---------------------------------------------------------------------------


def replication_blocks(count: int, block_size: int) -> List[Tuple[int, ...]]:
    """Split ``range(count)`` into consecutive blocks of ``block_size`` indices."""
    if block_size < 1:
        raise DomainError("block_size must be at least 1")
    return list(batched(range(count), block_size))


def map_blocks(
    func: Callable[[Sequence[int]], T],
    count: int,
    block_size: int,
    threads: int = 1,
    prefer: str = "threads",
) -> List[T]:
    """Apply ``func`` to fixed index blocks and return results in block order.

    The partition depends only on ``count`` and ``block_size``, so serial and
    parallel runs see the same blocks. BLAS pools are pinned to one thread
    while the workers run.

    Args:
        func: Callable taking a tuple of indices
        count: Number of indices
        block_size: Indices per block
        threads: Number of joblib workers
        prefer: joblib backend preference ("threads" or "processes")

    Returns:
        List of per-block results, ordered by block
    """
    blocks = replication_blocks(count, block_size)
    if threads <= 1 or len(blocks) <= 1:
        with threadpool_limits(limits=1):
            return [func(block) for block in blocks]

    with threadpool_limits(limits=1):
        return Parallel(n_jobs=threads, prefer=prefer)(delayed(func)(block) for block in blocks)


# ---------------------------------------------------------------------------
# Memory and IO
# ---------------------------------------------------------------------------


class MemoryTracker:
    """Tracks current and peak resident memory of this process."""

    def __init__(self):
        self.process = psutil.Process(os.getpid())
        self.peak = 0

    def log(self, prefix: str = "") -> int:
        """Log current and peak RSS in MB and return the current RSS in bytes."""
        current = self.process.memory_info().rss
        self.peak = max(self.peak, current)
        logger.info(
            "%s current memory: %d MB, peak: %d MB",
            prefix,
            current // (1024 * 1024),
            self.peak // (1024 * 1024),
        )
        return current


def ensure_parent_dir(path: str) -> str:
    """Create the parent directory of ``path`` if needed and return ``path``."""
    parent = os.path.dirname(os.path.abspath(path))
    try:
        os.makedirs(parent, exist_ok=True)
    except OSError as exc:
        raise ReportError(f"cannot create directory {parent}: {exc}") from exc
    return path


def sibling_path(path: str, suffix: str, extension: Optional[str] = None) -> str:
    """Return ``path`` with ``suffix`` appended to its stem."""
    stem, ext = os.path.splitext(path)
    return f"{stem}{suffix}{extension if extension is not None else ext}"
