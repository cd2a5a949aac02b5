"""
harness.py
----------
Monte Carlo experiments over a schedule delta_n = c0 * n^(-alpha): empirical
distances of V_n / sigma and of the standardized drift statistic to N(0, 1),
the coupling check between V_n(X) and V_n(Z), log-log rate fits and report
emission.

Every experiment walks replications in fixed blocks and reduces them in
block order, so tables do not depend on the worker count.
"""

import json
import math
import logging
from datetime import datetime, timezone
from enum import Enum
from functools import lru_cache, partial
from typing import Callable, List, Optional, Sequence, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel, Field, field_validator, model_validator
from scipy.stats import linregress

from covariance import ModelParams, ModelVariant, sigma_sq, stationary_covariance
from cumulants import psi_n
from distances import HIGH_HURST_BRANCH, bound_curves, distance_estimate
from estimators import (
    f_H,
    invert_f_mu,
    normalized_fluct,
    second_moment,
    standardize_fou1,
    standardize_fou2,
)
from sampler import EmbeddingPlan, PathBatch, SamplingGrid, build_cov_sequence, embedding_plan, simulate_block, z_to_x
from utils import (
    DomainError,
    MemoryTracker,
    OusmeError,
    OutOfRangeError,
    ReportError,
    ensure_parent_dir,
    get_settings,
    map_blocks,
    sibling_path,
)

logger = logging.getLogger(__name__)

SCHEMA = "ousme/v1"

CSV_COLUMNS = ["n", "delta", "Tn", "statistic", "d_kol", "d_w", "se_kol", "psi", "bound_kol", "bound_w", "censored"]

CENSORED_FLAG_FRACTION = 0.01
NOISE_FLOOR_MULTIPLE = 3.0
MIN_FIT_ROWS = 3


class Statistic(str, Enum):
    VN_Z = "Vn_Z"
    VN_X = "Vn_X"
    DRIFT = "drift"


# ---------------------------------------------------------------------------
# Configuration and tables
# ---------------------------------------------------------------------------


class ExperimentConfig(BaseModel):
    """One experiment: model, schedule, replications and outputs."""

    model: ModelParams
    c0: float = Field(1.0, gt=0)
    alpha: float = Field(0.5, gt=0, lt=1)
    n_list: List[int] = Field(min_length=1)
    reps: int = Field(ge=1)
    seed: int = Field(0, ge=0)
    statistic: Statistic = Statistic.VN_X
    threads: int = Field(default_factory=lambda: get_settings().threads, ge=1)
    block_size: int = Field(default_factory=lambda: get_settings().block_size, ge=1)
    drift_true: Optional[float] = Field(None, gt=0)
    out: Optional[str] = None

    @field_validator("n_list")
    @classmethod
    def _increasing(cls, values: List[int]) -> List[int]:
        if any(n < 1 for n in values):
            raise ValueError("every n must be at least 1")
        if any(b <= a for a, b in zip(values, values[1:])):
            raise ValueError("n_list must be strictly increasing")
        return values

    @model_validator(mode="after")
    def _statistic_fits_model(self) -> "ExperimentConfig":
        if self.model.variant is ModelVariant.CUSTOM and self.statistic is not Statistic.VN_Z:
            raise ValueError("custom covariances only support the Vn_Z statistic")
        return self

    def delta_for(self, n: int) -> float:
        return self.c0 * n ** (-self.alpha)

    def grid_for(self, n: int) -> SamplingGrid:
        return SamplingGrid(n, self.delta_for(n))


class DistanceRow(BaseModel):
    n: int
    delta: float
    Tn: float
    statistic: str
    d_kol: float
    d_w: float
    se_kol: float
    psi: float
    bound_kol: float
    bound_w: float
    censored: int


class RowFailure(BaseModel):
    n: int
    reason: str


class DistanceTable(BaseModel):
    rows: List[DistanceRow] = []
    failures: List[RowFailure] = []
    flags: List[str] = []
    config: Optional[ExperimentConfig] = None

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame([row.model_dump() for row in self.rows], columns=CSV_COLUMNS)


class CouplingRow(BaseModel):
    n: int
    Tn: float
    mse: float
    product: float


class CouplingTable(BaseModel):
    rows: List[CouplingRow] = []
    failures: List[RowFailure] = []
    config: Optional[ExperimentConfig] = None

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame([row.model_dump() for row in self.rows], columns=["n", "Tn", "mse", "product"])


class RateFit(BaseModel):
    column: str
    slope: float
    intercept: float
    r_squared: float
    theoretical_slope: Optional[float] = None
    noise_floor_flag: bool
    used_rows: int
    bound_ratio: Optional[float] = None


# ---------------------------------------------------------------------------
# Shared pieces
# ---------------------------------------------------------------------------


@lru_cache(maxsize=64)
def limit_variance(params: ModelParams, delta: Optional[float] = None) -> float:
    """sigma^2 for ``params``; only custom sequences depend on ``delta``."""
    value, error = sigma_sq(stationary_covariance(params), delta=delta)
    logger.info("sigma^2 = %.10g (error estimate %.2e)", value, error)
    return value


def variance_delta(params: ModelParams, delta: float) -> Optional[float]:
    return delta if params.variant is ModelVariant.CUSTOM else None


def path_kind(params: ModelParams) -> str:
    return "S" if params.variant is ModelVariant.FOU2 else "X"


def _run_blocks(config: ExperimentConfig, plan: EmbeddingPlan, block_fn: Callable[[PathBatch], np.ndarray]) -> np.ndarray:
    """Simulate every replication block, apply ``block_fn`` and join in block order."""
    seed = config.seed
    parts = map_blocks(
        lambda rows: block_fn(simulate_block(plan, rows, seed)),
        config.reps,
        config.block_size,
        config.threads,
    )
    return np.concatenate(parts)


def _prepare(config: ExperimentConfig, n: int):
    grid = config.grid_for(n)
    seq = build_cov_sequence(stationary_covariance(config.model), grid)
    return grid, seq, embedding_plan(seq)


def _distance_row(config: ExperimentConfig, grid: SamplingGrid, sample: np.ndarray, censored: int) -> DistanceRow:
    estimate = distance_estimate(sample, censored)
    gamma = stationary_covariance(config.model).gamma
    if grid.horizon > 1:
        bounds = bound_curves(config.model, grid.n, grid.delta)
        bound_kol, bound_w = bounds.d_kol_bound, bounds.d_w_bound
    else:
        bound_kol = bound_w = math.nan

    row = DistanceRow(
        n=grid.n,
        delta=grid.delta,
        Tn=grid.horizon,
        statistic=config.statistic.value,
        d_kol=estimate.d_kol,
        d_w=estimate.d_w,
        se_kol=estimate.se_kol,
        psi=psi_n(grid.delta, grid.horizon, gamma),
        bound_kol=bound_kol,
        bound_w=bound_w,
        censored=censored,
    )
    logger.info(
        "n=%d delta=%.4g Tn=%.4g d_kol=%.4f d_w=%.4f censored=%d",
        row.n, row.delta, row.Tn, row.d_kol, row.d_w, row.censored,
    )
    return row


# ---------------------------------------------------------------------------
# Experiments
# ---------------------------------------------------------------------------


def run_clt_experiment(config: ExperimentConfig) -> DistanceTable:
    """Distances of V_n(Z)/sigma or V_n(X)/sigma to N(0, 1) for each n.

    A statistic of ``drift`` is delegated to ``run_drift_experiment``.
    Rows that fail are recorded with their reason and the table is still
    returned.
    """
    if config.statistic is Statistic.DRIFT:
        return run_drift_experiment(config)

    table = DistanceTable(config=config)
    memory = MemoryTracker()
    use_x = config.statistic is Statistic.VN_X

    for n in config.n_list:
        try:
            grid, seq, plan = _prepare(config, n)
            sigma = math.sqrt(limit_variance(config.model, variance_delta(config.model, grid.delta)))
            rho0 = seq.rho0

            def block_fn(batch: PathBatch) -> np.ndarray:
                if use_x:
                    batch = z_to_x(batch, config.model.rate, path_kind(config.model))
                return normalized_fluct(second_moment(batch.data), rho0, grid.horizon) / sigma

            sample = _run_blocks(config, plan, block_fn)
            table.rows.append(_distance_row(config, grid, sample, censored=0))
        except OusmeError as exc:
            logger.error("Row n=%d failed: %s", n, exc)
            table.failures.append(RowFailure(n=n, reason=str(exc)))
        memory.log(f"[n={n}]")

    return table


def _fou2_drift(moments: np.ndarray, hurst: float) -> np.ndarray:
    """f_mu per replication; values outside the range of g_mu become NaN."""
    drifts = np.empty(len(moments))
    for i, value in enumerate(moments):
        try:
            drifts[i] = invert_f_mu(float(value), hurst)
        except OutOfRangeError:
            drifts[i] = math.nan
    return drifts


def run_drift_experiment(config: ExperimentConfig) -> DistanceTable:
    """Distances of sqrt(Tn) (f(v_n) - drift) / (sigma |f'(rho(0))|) to N(0, 1).

    Replications with v_n <= 0 are censored and counted; a censored
    fraction above 1% flags the row.
    """
    model = config.model
    if model.variant is ModelVariant.CUSTOM:
        raise DomainError("drift experiments need an fOU model")
    drift_true = config.drift_true if config.drift_true is not None else model.rate
    sigma = math.sqrt(limit_variance(model))

    if model.variant is ModelVariant.FOU1:
        constants = standardize_fou1(model.theta, model.hurst, sigma)
        drift_map = partial(f_H, hurst=model.hurst)
    else:
        constants = standardize_fou2(model.mu, model.hurst, sigma)
        drift_map = partial(_fou2_drift, hurst=model.hurst)
    logger.info("Drift scale sigma*|f'| = %.6g (|f'| = %.6g)", constants.scale, constants.fprime_abs)

    table = DistanceTable(config=config.model_copy(update={"statistic": Statistic.DRIFT}))
    memory = MemoryTracker()

    for n in config.n_list:
        try:
            grid, _, plan = _prepare(config, n)
            root_tn = math.sqrt(grid.horizon)

            def block_fn(batch: PathBatch) -> np.ndarray:
                moments = second_moment(z_to_x(batch, model.rate, path_kind(model)).data)
                statistic = np.full(len(moments), math.nan)
                positive = moments > 0
                if np.any(positive):
                    statistic[positive] = root_tn * (drift_map(moments[positive]) - drift_true) / constants.scale
                return statistic

            statistic = _run_blocks(config, plan, block_fn)
            kept = np.isfinite(statistic)
            censored = int(np.count_nonzero(~kept))
            if censored > CENSORED_FLAG_FRACTION * config.reps:
                table.flags.append(f"n={n}: censored {censored} of {config.reps} replications")
                logger.warning("n=%d: censored %d of %d replications", n, censored, config.reps)
            table.rows.append(_distance_row(table.config, grid, statistic[kept], censored))
        except OusmeError as exc:
            logger.error("Row n=%d failed: %s", n, exc)
            table.failures.append(RowFailure(n=n, reason=str(exc)))
        memory.log(f"[n={n}]")

    return table


def coupling_check(config: ExperimentConfig) -> CouplingTable:
    """Monte Carlo E|V_n(X) - V_n(Z)|^2 on common paths, and Tn times it."""
    model = config.model
    rate = model.rate
    table = CouplingTable(config=config)

    for n in config.n_list:
        try:
            grid, seq, plan = _prepare(config, n)
            rho0 = seq.rho0

            def block_fn(batch: PathBatch) -> np.ndarray:
                stationary = normalized_fluct(second_moment(batch.data), rho0, grid.horizon)
                shifted = z_to_x(batch, rate, path_kind(model))
                return (normalized_fluct(second_moment(shifted.data), rho0, grid.horizon) - stationary) ** 2

            mse = float(np.mean(_run_blocks(config, plan, block_fn)))
            table.rows.append(CouplingRow(n=n, Tn=grid.horizon, mse=mse, product=grid.horizon * mse))
            logger.info("n=%d Tn=%.4g mse=%.4e Tn*mse=%.4f", n, grid.horizon, mse, grid.horizon * mse)
        except OusmeError as exc:
            logger.error("Row n=%d failed: %s", n, exc)
            table.failures.append(RowFailure(n=n, reason=str(exc)))

    return table


# ---------------------------------------------------------------------------
# Rate fitting
# ---------------------------------------------------------------------------


def theoretical_slope(alpha: float, params: ModelParams) -> float:
    """Predicted log-log slope under delta_n = c0 n^(-alpha)."""
    if params.variant is ModelVariant.FOU1 and params.hurst > HIGH_HURST_BRANCH:
        return -min(alpha, (1 - alpha) * (3 - 4 * params.hurst))
    return -min(alpha, (1 - alpha) / 2)


def fit_rate(
    table: DistanceTable,
    column: str = "d_kol",
    alpha: Optional[float] = None,
    params: Optional[ModelParams] = None,
) -> RateFit:
    """Least-squares slope of log(column) on log(n) over rows above 3 se_kol.

    Raises:
        DomainError: If fewer than three rows clear the noise floor
    """
    if column not in ("d_kol", "d_w"):
        raise DomainError(f"cannot fit column {column!r}")
    if table.config is not None:
        alpha = alpha if alpha is not None else table.config.alpha
        params = params if params is not None else table.config.model

    floor = [NOISE_FLOOR_MULTIPLE * row.se_kol for row in table.rows]
    usable = [row for row, cut in zip(table.rows, floor) if getattr(row, column) > cut]
    if len(usable) < MIN_FIT_ROWS:
        raise DomainError(f"only {len(usable)} rows above the noise floor; need {MIN_FIT_ROWS}")

    log_n = np.log([row.n for row in usable])
    log_d = np.log([getattr(row, column) for row in usable])
    result = linregress(log_n, log_d)

    bound_column = "bound_kol" if column == "d_kol" else "bound_w"
    ratios = [getattr(row, column) / getattr(row, bound_column) for row in table.rows if getattr(row, bound_column) > 0]

    return RateFit(
        column=column,
        slope=float(result.slope),
        intercept=float(result.intercept),
        r_squared=float(result.rvalue**2),
        theoretical_slope=theoretical_slope(alpha, params) if alpha is not None and params is not None else None,
        noise_floor_flag=any(getattr(row, column) < cut for row, cut in zip(table.rows, floor)),
        used_rows=len(usable),
        bound_ratio=max(ratios) if ratios else None,
    )


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------

PLOT_TEMPLATE = '''"""Log-log plot of empirical distances against the bound curve."""

import matplotlib.pyplot as plt

SERIES = {series!r}

fig, ax = plt.subplots()
for label, (n, distance, bound) in SERIES.items():
    line, = ax.loglog(n, distance, "o-", label=f"{{label}} d_kol")
    ax.loglog(n, bound, "--", color=line.get_color(), label=f"{{label}} bound")
ax.set_xlabel("n")
ax.set_ylabel("distance to N(0, 1)")
ax.legend()
fig.savefig({image!r}, dpi=150)
'''


def _write_text(path: str, text: str) -> str:
    try:
        with open(ensure_parent_dir(path), "w", encoding="utf-8") as handle:
            handle.write(text)
    except OSError as exc:
        raise ReportError(f"cannot write {path}: {exc}") from exc
    return path


def report_payload(tables: Sequence[DistanceTable], fits: Sequence[RateFit] = ()) -> dict:
    """JSON document with schema tag, seed, config echo, rows and fits."""
    configs = [table.config for table in tables if table.config is not None]
    return {
        "schema": SCHEMA,
        "generated_at": datetime.now(timezone.utc).isoformat(),
        "seed": configs[0].seed if configs else None,
        "config": configs[0].model_dump(mode="json") if configs else None,
        "tables": [
            {
                "statistic": table.config.statistic.value if table.config else None,
                "config": table.config.model_dump(mode="json") if table.config else None,
                "rows": [row.model_dump() for row in table.rows],
                "failures": [failure.model_dump() for failure in table.failures],
                "flags": list(table.flags),
            }
            for table in tables
        ],
        "fits": [fit.model_dump() for fit in fits],
    }


def emit_report(
    tables: Union[DistanceTable, Sequence[DistanceTable]],
    fits: Sequence[RateFit] = (),
    fmt: str = "csv",
    out: str = "results/report.csv",
    plot: bool = False,
) -> List[str]:
    """Write distance tables as CSV or JSON, optionally with a plot script.

    Returns:
        Paths written

    Raises:
        ReportError: If there are no rows (nothing is written) or a file
            cannot be written
    """
    if isinstance(tables, DistanceTable):
        tables = [tables]
    if not any(table.rows for table in tables):
        raise ReportError("no distance rows to report")
    if fmt not in ("csv", "json"):
        raise ReportError(f"unknown report format {fmt!r}")

    if fmt == "csv":
        frame = pd.concat([table.to_frame() for table in tables], ignore_index=True)
        try:
            frame.to_csv(ensure_parent_dir(out), index=False)
        except OSError as exc:
            raise ReportError(f"cannot write {out}: {exc}") from exc
    else:
        _write_text(out, json.dumps(report_payload(tables, fits), indent=2))
    written = [out]

    if plot:
        series = {
            table.config.statistic.value if table.config else f"table{i}": (
                [row.n for row in table.rows],
                [row.d_kol for row in table.rows],
                [row.bound_kol for row in table.rows],
            )
            for i, table in enumerate(tables)
        }
        script = PLOT_TEMPLATE.format(series=series, image=sibling_path(out, "_plot", ".png"))
        written.append(_write_text(sibling_path(out, "_plot", ".py"), script))

    logger.info("Wrote %s", ", ".join(written))
    return written


def write_records(records: List[dict], fmt: str, out: str, kind: str, config: Optional[BaseModel] = None) -> str:
    """Write plain records (coupling rows, cumulant reports) as CSV or JSON."""
    if not records:
        raise ReportError(f"no {kind} records to report")
    if fmt == "csv":
        try:
            pd.DataFrame(records).to_csv(ensure_parent_dir(out), index=False)
        except OSError as exc:
            raise ReportError(f"cannot write {out}: {exc}") from exc
        return out
    payload = {
        "schema": SCHEMA,
        "kind": kind,
        "generated_at": datetime.now(timezone.utc).isoformat(),
        "config": config.model_dump(mode="json") if config is not None else None,
        "records": records,
    }
    return _write_text(out, json.dumps(payload, indent=2))


def read_distance_csv(path: str) -> DistanceTable:
    """Parse a CSV written by ``emit_report`` back into a table."""
    try:
        frame = pd.read_csv(path, float_precision="round_trip")
    except (OSError, ValueError) as exc:
        raise ReportError(f"cannot read {path}: {exc}") from exc
    missing = [column for column in CSV_COLUMNS if column not in frame.columns]
    if missing:
        raise ReportError(f"{path} lacks columns {missing}")
    return DistanceTable(rows=[DistanceRow(**record) for record in frame[CSV_COLUMNS].to_dict("records")])
