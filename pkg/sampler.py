"""
sampler.py
----------
Exact simulation of stationary Gaussian sequences by circulant embedding,
and the non-stationary paths X_t = Z_t - e^(-rate t) Z_0 derived from them.

Replication i draws its normals from its own Philox stream, so a batch is
a pure function of (seed, replication index) whatever the worker count.
"""

import math
import struct
import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import pandas as pd
from scipy import fft

from covariance import ModelVariant, StationaryCovariance
from utils import (
    DomainError,
    EmbeddingError,
    ReportError,
    ensure_parent_dir,
    get_settings,
    map_blocks,
    replication_generator,
    standard_normals,
)

logger = logging.getLogger(__name__)

MAX_DOUBLINGS = 4
NEGATIVE_EIGEN_TOL = 1e-8
MAX_CLIPPED_MASS = 1e-4

BINARY_MAGIC = b"OUSME1"
BINARY_HEADER = struct.Struct("<6sIId")

PATH_KINDS = ("Z", "X", "S")


@dataclass(frozen=True)
class SamplingGrid:
    """Observation times t_k = k * delta for k = 0..n-1."""

    n: int
    delta: float

    def __post_init__(self):
        if self.n < 1:
            raise DomainError(f"grid needs n >= 1, got {self.n}")
        if not self.delta > 0:
            raise DomainError(f"grid needs delta > 0, got {self.delta}")

    @property
    def horizon(self) -> float:
        """Observation window Tn = n * delta."""
        return self.n * self.delta

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.n) * self.delta


@dataclass
class CovSequence:
    grid: SamplingGrid
    values: np.ndarray
    covariance: Optional[StationaryCovariance] = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != (self.grid.n,):
            raise DomainError(f"expected {self.grid.n} covariance values, got {self.values.shape}")
        if not self.values[0] > 0:
            raise DomainError("covariance sequence must have rho(0) > 0")

    @property
    def rho0(self) -> float:
        return float(self.values[0])

    def lag_values(self, count: int) -> np.ndarray:
        """Covariances at lags 0..count-1, extending past the grid if needed."""
        if count <= self.grid.n:
            return self.values[:count]
        if self.covariance is None:
            return np.concatenate([self.values, np.zeros(count - self.grid.n)])
        extra = covariance_values(self.covariance, self.grid.delta, count, start=self.grid.n)
        return np.concatenate([self.values, extra])


@dataclass
class EmbeddingPlan:
    """Square-root circulant spectrum ready for sampling a grid."""

    grid: SamplingGrid
    fft_length: int
    sqrt_eigenvalues: np.ndarray
    min_eigenvalue: float
    clipped_mass: float
    doublings: int


@dataclass
class PathBatch:
    """A batch of simulated paths, one row per replication."""

    grid: SamplingGrid
    data: np.ndarray
    seed: int
    first_replication: int = 0
    kind: str = "Z"
    embedding: Optional[EmbeddingPlan] = field(default=None, repr=False)

    def __post_init__(self):
        if self.kind not in PATH_KINDS:
            raise DomainError(f"unknown path kind {self.kind!r}")
        if self.data.ndim != 2 or self.data.shape[1] != self.grid.n:
            raise DomainError(f"path data shape {self.data.shape} does not match n={self.grid.n}")

    @property
    def reps(self) -> int:
        return self.data.shape[0]

    @property
    def substreams(self) -> range:
        """Replication indices whose Philox streams produced the rows."""
        return range(self.first_replication, self.first_replication + self.reps)


# ---------------------------------------------------------------------------
# Covariance sequences
# ---------------------------------------------------------------------------


def covariance_values(cov: StationaryCovariance, delta: float, count: int, start: int = 0) -> np.ndarray:
    """Evaluate rho(k * delta) for k = start..count-1.

    Custom covariances are indexed by lag and padded with zeros.
    """
    if cov.params is not None and cov.params.variant is ModelVariant.CUSTOM:
        padded = np.zeros(count)
        sequence = np.asarray(cov.params.sequence[:count], dtype=float)
        padded[: len(sequence)] = sequence
        return padded[start:]
    return np.array([cov(k * delta) for k in range(start, count)], dtype=float)


def build_cov_sequence(cov: StationaryCovariance, grid: SamplingGrid) -> CovSequence:
    """Discretize ``cov`` on ``grid``."""
    return CovSequence(grid=grid, values=covariance_values(cov, grid.delta, grid.n), covariance=cov)


# ---------------------------------------------------------------------------
# Circulant embedding
# ---------------------------------------------------------------------------


def _initial_fft_length(n: int) -> int:
    target = max(2 * (n - 1), 1)
    return 1 << (target - 1).bit_length()


def embedding_plan(seq: CovSequence) -> EmbeddingPlan:
    """Compute the circulant spectrum for ``seq``.

    The FFT length starts at the smallest power of two >= 2(n-1) and is
    doubled until the smallest eigenvalue is >= -1e-8 rho(0). Remaining
    negative eigenvalues are clipped to zero.

    Raises:
        EmbeddingError: If the clipped mass exceeds 1e-4 of the total
    """
    rho0 = seq.rho0
    length = _initial_fft_length(seq.grid.n)

    for doublings in range(MAX_DOUBLINGS + 1):
        lags = seq.lag_values(length // 2 + 1)
        first_row = np.concatenate([lags, lags[1 : length - length // 2][::-1]])[:length]
        eigenvalues = fft.fft(first_row).real
        min_eigenvalue = float(eigenvalues.min())
        if min_eigenvalue >= -NEGATIVE_EIGEN_TOL * rho0 or doublings == MAX_DOUBLINGS:
            break
        logger.debug("Circulant length %d has min eigenvalue %.3e; doubling", length, min_eigenvalue)
        length *= 2

    positive = np.clip(eigenvalues, 0.0, None)
    clipped_mass = float(-np.sum(np.clip(eigenvalues, None, 0.0)) / np.sum(positive))
    if clipped_mass > MAX_CLIPPED_MASS:
        raise EmbeddingError("circulant embedding is not nonnegative definite", length, min_eigenvalue, clipped_mass)
    if clipped_mass > 0:
        logger.info("Clipped %.3e of circulant spectral mass at M=%d", clipped_mass, length)

    return EmbeddingPlan(
        grid=seq.grid,
        fft_length=length,
        sqrt_eigenvalues=np.sqrt(positive / length),
        min_eigenvalue=min_eigenvalue,
        clipped_mass=clipped_mass,
        doublings=doublings,
    )


def simulate_block(plan: EmbeddingPlan, replications: Sequence[int], seed: int) -> PathBatch:
    """Simulate the given replication indices, which must be consecutive."""
    length = plan.fft_length
    noise = np.empty((len(replications), length), dtype=complex)
    for row, index in enumerate(replications):
        normals = standard_normals(replication_generator(seed, index), 2 * length)
        noise[row].real = normals[:length]
        noise[row].imag = normals[length:]

    paths = fft.fft(noise * plan.sqrt_eigenvalues, axis=1).real[:, : plan.grid.n]
    first = replications[0] if len(replications) else 0
    return PathBatch(grid=plan.grid, data=np.ascontiguousarray(paths), seed=seed, first_replication=first, embedding=plan)


def circulant_sample(
    seq: CovSequence,
    reps: int,
    seed: int,
    threads: int = 1,
    block_size: Optional[int] = None,
) -> PathBatch:
    """Draw ``reps`` exact stationary Gaussian paths with covariance ``seq``.

    Args:
        seq: Covariance sequence on the sampling grid
        reps: Number of replications
        seed: Root seed
        threads: Number of workers
        block_size: Replications per work block (default from settings)

    Returns:
        PathBatch of kind Z
    """
    if reps < 1:
        raise DomainError("reps must be at least 1")
    block_size = block_size or get_settings().block_size
    plan = embedding_plan(seq)
    blocks = map_blocks(lambda rows: simulate_block(plan, rows, seed).data, reps, block_size, threads)
    return PathBatch(grid=seq.grid, data=np.vstack(blocks), seed=seed, embedding=plan)


def z_to_x(batch: PathBatch, rate: float, kind: str = "X") -> PathBatch:
    """Map stationary paths Z to X_t = Z_t - e^(-rate t) Z_0."""
    if batch.kind != "Z":
        raise DomainError(f"z_to_x expects a Z batch, got kind {batch.kind!r}")
    if kind not in ("X", "S"):
        raise DomainError(f"z_to_x produces X or S paths, not {kind!r}")
    if not rate > 0:
        raise DomainError(f"rate must be positive, got {rate}")

    decay = np.exp(-rate * batch.grid.times)
    data = batch.data - np.outer(batch.data[:, 0], decay)
    data[:, 0] = 0.0
    return PathBatch(
        grid=batch.grid,
        data=data,
        seed=batch.seed,
        first_replication=batch.first_replication,
        kind=kind,
        embedding=batch.embedding,
    )


# ---------------------------------------------------------------------------
# Export
# ---------------------------------------------------------------------------


def write_path_batch(batch: PathBatch, path: str) -> str:
    """Write ``batch`` in the flat binary layout (header then row-major f64 LE)."""
    header = BINARY_HEADER.pack(BINARY_MAGIC, batch.grid.n, batch.reps, batch.grid.delta)
    try:
        with open(ensure_parent_dir(path), "wb") as handle:
            handle.write(header)
            handle.write(np.ascontiguousarray(batch.data, dtype="<f8").tobytes())
    except OSError as exc:
        raise ReportError(f"cannot write path batch to {path}: {exc}") from exc
    return path


def read_path_batch(path: str, seed: int = 0, kind: str = "Z") -> PathBatch:
    """Read a batch written by ``write_path_batch``."""
    try:
        with open(path, "rb") as handle:
            raw = handle.read()
    except OSError as exc:
        raise ReportError(f"cannot read path batch {path}: {exc}") from exc

    magic, n, reps, delta = BINARY_HEADER.unpack_from(raw)
    if magic != BINARY_MAGIC:
        raise ReportError(f"{path} is not a path batch (magic {magic!r})")
    data = np.frombuffer(raw, dtype="<f8", offset=BINARY_HEADER.size)
    if data.size != n * reps:
        raise ReportError(f"{path} holds {data.size} values, expected {n * reps}")
    return PathBatch(grid=SamplingGrid(n, delta), data=data.reshape(reps, n).astype(float), seed=seed, kind=kind)


def write_path_csv(batch: PathBatch, path: str) -> str:
    """Write a small batch to CSV with one row per replication."""
    frame = pd.DataFrame(batch.data, columns=[f"t{k}" for k in range(batch.grid.n)])
    frame.insert(0, "replication", list(batch.substreams))
    frame.to_csv(ensure_parent_dir(path), index=False)
    return path


def sample_autocovariance(batch: PathBatch, max_lag: int) -> np.ndarray:
    """Pooled sample autocovariances at lags 0..max_lag (known zero mean)."""
    data = batch.data
    n = batch.grid.n
    return np.array([np.mean(data[:, : n - lag] * data[:, lag:]) for lag in range(min(max_lag, n - 1) + 1)])
