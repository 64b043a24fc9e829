"""
Control-variate Monte Carlo estimators for the FLMM exchange option.

The FLMM payoff Y and the frictionless payoff X are taken from the same
coupled paths. Prices use

    V = mean(Y + c (X - V_Margrabe)),   c = -Cov(Y, X) / Var(X)

and deltas the multivariate form Z = Y - C (X - Delta_Margrabe) with
C = Sigma_YX Sigma_XX^-1. Both coefficients are fitted on the sample they
correct.
"""
import logging
from dataclasses import asdict, dataclass, field
from itertools import product
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from src.engine.sde import CoupledPaths, GridSpec, simulate_coupled_paths
from src.models.impact import ImpactParams
from src.models.margrabe import MarketState, ModelParams, margrabe_deltas, margrabe_price
from src.utils.errors import InvalidParamsError

logger = logging.getLogger(__name__)

Z_99 = 2.5758293
RIDGE_COND = 1e12
RIDGE_SCALE = 1e-10

VR_OK = "ok"
VR_DEGENERATE = "degenerate"
VR_NO_CONTROL = "no_control"

ESTIMATE_COLUMNS = [
    "s1", "s2", "tau", "value", "std_error", "ci_low", "ci_high", "n_used",
    "n_discarded", "c_hat", "vr_factor", "vr_status", "plain_value",
    "plain_std_error", "margrabe", "min_denom", "wall_clock",
]

DELTA_COLUMNS = [
    "s1", "s2", "tau", "delta1", "delta2", "std_error1", "std_error2",
    "ci_low1", "ci_high1", "ci_low2", "ci_high2", "margrabe_delta1",
    "margrabe_delta2", "excess1", "excess2", "n_used", "vr_status",
    "ridge", "wall_clock",
]

LVA_COLUMNS = [
    "s1", "s2", "v_flmm", "v_margrabe", "excess", "std_error", "ci_low",
    "ci_high", "vr_factor", "n_used",
]


@dataclass
class EstimateWithCI:
    value: float
    std_error: float
    ci_low: float
    ci_high: float
    n_used: int
    c_hat: float
    vr_factor: float
    wall_clock: float
    vr_status: str = VR_OK
    plain_value: float = float("nan")
    plain_std_error: float = float("nan")
    margrabe: float = float("nan")
    n_discarded: int = 0
    min_denom: float = 1.0
    s1: float = float("nan")
    s2: float = float("nan")
    tau: float = float("nan")

    @property
    def ci_length(self) -> float:
        return self.ci_high - self.ci_low

    def to_row(self) -> Dict[str, object]:
        row = asdict(self)
        return {name: row[name] for name in ESTIMATE_COLUMNS}


@dataclass
class DeltaEstimate:
    delta1: float
    delta2: float
    std_error1: float
    std_error2: float
    ci_low1: float
    ci_high1: float
    ci_low2: float
    ci_high2: float
    c_hat: np.ndarray
    margrabe_delta1: float
    margrabe_delta2: float
    n_used: int
    wall_clock: float
    vr_status: str = VR_OK
    ridge: bool = False
    s1: float = float("nan")
    s2: float = float("nan")
    tau: float = float("nan")
    plain: np.ndarray = field(default_factory=lambda: np.full(2, np.nan))

    @property
    def excess1(self) -> float:
        return self.delta1 - self.margrabe_delta1

    @property
    def excess2(self) -> float:
        return self.delta2 - self.margrabe_delta2

    def to_row(self) -> Dict[str, object]:
        row = {name: getattr(self, name) for name in DELTA_COLUMNS}
        row["ridge"] = int(self.ridge)
        return row


def _sample_std_error(z: np.ndarray) -> float:
    if z.shape[0] < 2:
        return 0.0
    return float(np.std(z, ddof=1, axis=0) / np.sqrt(z.shape[0]))


def control_variate_price(y: np.ndarray, x: np.ndarray, control_mean: float) -> Tuple[float, float, float, float, str]:
    """(value, std_error, c_hat, vr_factor, vr_status) from per-path payoffs."""
    y = np.asarray(y, dtype=float)
    x = np.asarray(x, dtype=float)
    var_y = float(np.var(y, ddof=1)) if y.size > 1 else 0.0

    if np.array_equal(y, x):
        vr = float("inf") if var_y > 0.0 else 1.0
        return float(control_mean), 0.0, -1.0, vr, VR_DEGENERATE

    var_x = float(np.var(x, ddof=1)) if x.size > 1 else 0.0
    if var_x == 0.0:
        logger.warning("control payoff has zero variance, falling back to plain Monte Carlo")
        return float(np.mean(y)), _sample_std_error(y), 0.0, 1.0, VR_NO_CONTROL

    cov = float(np.cov(y, x, ddof=1)[0, 1])
    c_hat = -cov / var_x
    z = y + c_hat * (x - control_mean)
    var_z = float(np.var(z, ddof=1))
    vr = var_y / var_z if var_z > 0.0 else float("inf")
    return float(np.mean(z)), _sample_std_error(z), c_hat, vr, VR_OK


def _discounted_payoffs(paths: CoupledPaths, r: float, tau: float) -> Tuple[np.ndarray, np.ndarray]:
    disc = np.exp(-r * tau)
    term = paths.terminal[paths.valid]
    term_cv = paths.terminal_cv[paths.valid]
    y = disc * np.maximum(term[:, 0] - term[:, 1], 0.0)
    x = disc * np.maximum(term_cv[:, 0] - term_cv[:, 1], 0.0)
    return y, x


def price_estimate(
    start: MarketState,
    tau: float,
    model: ModelParams,
    impact: ImpactParams,
    spec: GridSpec,
    workers: int = 1,
) -> EstimateWithCI:
    """Control-variate price of the FLMM exchange option with a 99% CI."""
    if not tau > 0.0:
        raise InvalidParamsError("tau must be positive for a Monte Carlo estimate", {"tau": tau})
    paths = simulate_coupled_paths(start, spec.horizon(tau), model, impact, workers=workers)
    return price_from_paths(start, tau, model, paths)


def price_from_paths(start: MarketState, tau: float, model: ModelParams, paths: CoupledPaths) -> EstimateWithCI:
    """Price estimate from already simulated coupled paths."""
    v_margrabe = float(margrabe_price(start, tau, model))
    y, x = _discounted_payoffs(paths, model.r, tau)

    value, se, c_hat, vr, status = control_variate_price(y, x, v_margrabe)
    half = Z_99 * se
    return EstimateWithCI(
        value=value,
        std_error=se,
        ci_low=value - half,
        ci_high=value + half,
        n_used=int(y.size),
        c_hat=c_hat,
        vr_factor=vr,
        wall_clock=paths.wall_clock,
        vr_status=status,
        plain_value=float(np.mean(y)),
        plain_std_error=_sample_std_error(y),
        margrabe=v_margrabe,
        n_discarded=paths.n_discarded,
        min_denom=paths.min_denom,
        s1=float(start.s1),
        s2=float(start.s2),
        tau=float(tau),
    )


def _pathwise_delta_samples(jac: np.ndarray, terminal: np.ndarray, disc: float) -> np.ndarray:
    """disc * 1{S1 > S2} (1, -1) dS(T)/dS(0), one row per path."""
    itm = (terminal[:, 0] > terminal[:, 1]).astype(float)
    gradient = jac[:, 0, :] - jac[:, 1, :]
    return disc * itm[:, None] * gradient


def _fit_control_matrix(y: np.ndarray, x: np.ndarray) -> Tuple[np.ndarray, bool]:
    joint = np.cov(np.concatenate([y, x], axis=1), rowvar=False, ddof=1)
    sigma_yx = joint[:2, 2:]
    sigma_xx = joint[2:, 2:]
    ridge = False
    cond = np.linalg.cond(sigma_xx)
    if not np.isfinite(cond) or cond > RIDGE_COND:
        ridge = True
        bump = RIDGE_SCALE * max(float(np.trace(sigma_xx)), 1e-300)
        logger.warning("control covariance ill-conditioned (cond=%.3g), ridge %.3g", cond, bump)
        sigma_xx = sigma_xx + bump * np.eye(2)
    return sigma_yx @ np.linalg.inv(sigma_xx), ridge


def delta_estimate(
    start: MarketState,
    tau: float,
    model: ModelParams,
    impact: ImpactParams,
    spec: GridSpec,
    workers: int = 1,
) -> DeltaEstimate:
    """Pathwise deltas with the Margrabe deltas as a two-dimensional control."""
    if not tau > 0.0:
        raise InvalidParamsError("tau must be positive for a Monte Carlo estimate", {"tau": tau})
    grid = spec.horizon(tau)
    mu = margrabe_deltas(start, tau, model)
    paths = simulate_coupled_paths(start, grid, model, impact, with_jacobians=True, workers=workers)
    disc = np.exp(-model.r * tau)
    valid = paths.valid
    y = _pathwise_delta_samples(paths.jacobian[valid], paths.terminal[valid], disc)
    x = _pathwise_delta_samples(paths.jacobian_cv[valid], paths.terminal_cv[valid], disc)

    ridge = False
    if np.array_equal(y, x):
        status = VR_DEGENERATE
        c_hat = np.eye(2)
        estimate = mu.copy()
        se = np.zeros(2)
    elif np.all(np.var(x, axis=0) == 0.0):
        logger.warning("delta control has zero variance, falling back to plain Monte Carlo")
        status = VR_NO_CONTROL
        c_hat = np.zeros((2, 2))
        estimate = y.mean(axis=0)
        se = _column_std_errors(y)
    else:
        status = VR_OK
        c_hat, ridge = _fit_control_matrix(y, x)
        z = y - (x - mu) @ c_hat.T
        estimate = z.mean(axis=0)
        se = _column_std_errors(z)

    half = Z_99 * se
    return DeltaEstimate(
        delta1=float(estimate[0]),
        delta2=float(estimate[1]),
        std_error1=float(se[0]),
        std_error2=float(se[1]),
        ci_low1=float(estimate[0] - half[0]),
        ci_high1=float(estimate[0] + half[0]),
        ci_low2=float(estimate[1] - half[1]),
        ci_high2=float(estimate[1] + half[1]),
        c_hat=c_hat,
        margrabe_delta1=float(mu[0]),
        margrabe_delta2=float(mu[1]),
        n_used=int(y.shape[0]),
        wall_clock=paths.wall_clock,
        vr_status=status,
        ridge=ridge,
        s1=float(start.s1),
        s2=float(start.s2),
        tau=float(tau),
        plain=y.mean(axis=0),
    )


def _column_std_errors(z: np.ndarray) -> np.ndarray:
    if z.shape[0] < 2:
        return np.zeros(z.shape[1])
    return np.std(z, ddof=1, axis=0) / np.sqrt(z.shape[0])


def square_grid(values: Iterable[float]) -> List[Tuple[float, float]]:
    """All (s1, s2) pairs over one price axis, s2-major like the LVA tables."""
    values = list(values)
    return [(s1, s2) for s2, s1 in product(values, values)]


def lva_table(
    grid: Sequence[Tuple[float, float]],
    tau: float,
    model: ModelParams,
    impact: ImpactParams,
    spec: GridSpec,
    workers: int = 1,
) -> pd.DataFrame:
    """FLMM price, Margrabe price and their difference at every (s1, s2)."""
    rows = []
    for s1, s2 in grid:
        est = price_estimate(MarketState(s1, s2), tau, model, impact, spec, workers=workers)
        rows.append({
            "s1": float(s1),
            "s2": float(s2),
            "v_flmm": est.value,
            "v_margrabe": est.margrabe,
            "excess": est.value - est.margrabe,
            "std_error": est.std_error,
            "ci_low": est.ci_low,
            "ci_high": est.ci_high,
            "vr_factor": est.vr_factor,
            "n_used": est.n_used,
        })
        logger.info("LVA cell s1=%g s2=%g excess=%.6g (se %.3g)", s1, s2, rows[-1]["excess"], est.std_error)
    return pd.DataFrame(rows, columns=LVA_COLUMNS)


def estimates_frame(estimates: Iterable[EstimateWithCI]) -> pd.DataFrame:
    return pd.DataFrame([e.to_row() for e in estimates], columns=ESTIMATE_COLUMNS)


def deltas_frame(estimates: Iterable[DeltaEstimate]) -> pd.DataFrame:
    return pd.DataFrame([e.to_row() for e in estimates], columns=DELTA_COLUMNS)


def write_csv(frame: pd.DataFrame, path: str, stanza: Optional[Dict[str, object]] = None) -> None:
    """Write a table with fixed float formatting; the stanza goes in leading comment lines."""
    with open(path, "w", newline="") as handle:
        for key in sorted(stanza or {}):
            handle.write(f"# {key}={stanza[key]}\n")
        frame.to_csv(handle, index=False, float_format="%.12g")
