"""
Milstein simulation of the finite-liquidity market.

Every step draws K fine Brownian increments per factor; the step increments
dW and the Levy area A12 are both built from that one fine path. The FLMM path
and its frictionless control-variate path are advanced on the same noise, and
optionally carry the pathwise Jacobian dS(m)/dS(0) used by the delta
estimator.

The step is written in matrix-recursion form

    S(m+1) = B(m) S(m) + 1/2 b(m)
    b_i    = sum_kj M^i_kj (dW_k dW_j - 1{k=j} dt - A_kj),   M^i = J_i Sigma

where B holds the drift and first-order diffusion terms (loadings divided by
the price they multiply) and J_i[k, l] = d sig_ik / d s_l.
"""
import logging
import struct
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, Optional, Tuple

import numpy as np

from src.engine.streams import block_generator, block_ranges
from src.models.impact import (
    FRICTIONLESS,
    ImpactParams,
    coeff_jacobians,
    effective_coeffs,
    lambda_bar,
)
from src.models.margrabe import ArrayLike, MarketState, ModelParams, margrabe_greeks
from src.utils.errors import (
    AllPathsDiscardedError,
    DatasetFileError,
    InvalidParamsError,
    NonPositivePriceError,
)

logger = logging.getLogger(__name__)

_EYE = np.eye(2)

PATH_MAGIC = b"FLMMPATH"
PATH_VERSION = 1
_PATH_HEADER = struct.Struct("<8sIQQQ")


@dataclass(frozen=True)
class GridSpec:
    n_paths: int = 10_000
    n_steps: int = 100
    levy_substeps: int = 32
    seed: int = 0
    t0: float = 0.0
    T: float = 0.5
    block_size: int = 2048

    def __post_init__(self):
        for name in ("n_paths", "n_steps", "levy_substeps", "block_size"):
            value = getattr(self, name)
            if int(value) != value or value < 1:
                raise InvalidParamsError(f"{name} must be a positive integer", {name: value})
        if not 0 <= int(self.seed) < 2 ** 64:
            raise InvalidParamsError("seed must be a 64-bit unsigned integer", {"seed": self.seed})
        if not self.t0 < self.T:
            raise InvalidParamsError("grid needs t0 < T", {"t0": self.t0, "T": self.T})

    @property
    def dt(self) -> float:
        return (self.T - self.t0) / self.n_steps

    def horizon(self, tau: float) -> "GridSpec":
        """Same grid and seed, re-anchored on [0, tau]."""
        return GridSpec(
            n_paths=self.n_paths,
            n_steps=self.n_steps,
            levy_substeps=self.levy_substeps,
            seed=self.seed,
            t0=0.0,
            T=tau,
            block_size=self.block_size,
        )

    def to_dict(self) -> Dict[str, float]:
        return {
            "n_paths": self.n_paths,
            "n_steps": self.n_steps,
            "levy_substeps": self.levy_substeps,
            "seed": self.seed,
            "t0": self.t0,
            "T": self.T,
            "block_size": self.block_size,
        }


@dataclass
class StepNoise:
    """Step increments and Levy area built from the fine increments (K, ...)."""

    dW1: ArrayLike
    dW2: ArrayLike
    a12: ArrayLike
    fine1: Optional[np.ndarray] = None
    fine2: Optional[np.ndarray] = None
    dt: Optional[float] = None

    @property
    def a21(self) -> ArrayLike:
        return -self.a12


def identity_jacobian(n_paths: Optional[int] = None) -> np.ndarray:
    """Delta(0) = I, shaped (2, 2) or (2, 2, n_paths)."""
    if n_paths is None:
        return _EYE.copy()
    return np.repeat(_EYE[:, :, None], n_paths, axis=2)


def noise_from_increments(
    fine1: np.ndarray, fine2: np.ndarray, dt: Optional[float] = None
) -> StepNoise:
    """Sum fine increments into dW and accumulate the antisymmetric area.

    A12 = sum_k (W1(k-1) dW2(k) - W2(k-1) dW1(k)), with W(k-1) the left-point
    partial sum; this equals the trapezoidal form since the cross terms cancel.
    """
    fine1 = np.asarray(fine1, dtype=float)
    fine2 = np.asarray(fine2, dtype=float)
    if fine1.shape != fine2.shape:
        raise InvalidParamsError(
            "fine increments of both factors must share a shape",
            {"shape1": fine1.shape, "shape2": fine2.shape},
        )
    prev1 = np.concatenate([np.zeros_like(fine1[:1]), np.cumsum(fine1, axis=0)[:-1]], axis=0)
    prev2 = np.concatenate([np.zeros_like(fine2[:1]), np.cumsum(fine2, axis=0)[:-1]], axis=0)
    a12 = np.sum(prev1 * fine2 - prev2 * fine1, axis=0)
    return StepNoise(
        dW1=np.sum(fine1, axis=0),
        dW2=np.sum(fine2, axis=0),
        a12=a12,
        fine1=fine1,
        fine2=fine2,
        dt=dt,
    )


def sample_step_noise(
    rng: np.random.Generator, dt: float, K: int, size: Optional[int] = None
) -> StepNoise:
    """Draw one step of noise; ``size`` paths at once, or a scalar step if None."""
    if not dt > 0.0 or K < 1:
        raise InvalidParamsError("need dt > 0 and K >= 1", {"dt": dt, "K": K})
    shape = (2, K) if size is None else (2, K, size)
    fine = rng.standard_normal(shape) * np.sqrt(dt / K)
    return noise_from_increments(fine[0], fine[1], dt=dt)


@dataclass
class _StepResult:
    s_next: np.ndarray
    jac_next: Optional[np.ndarray]
    denom: np.ndarray


def _advance(
    s: np.ndarray,
    noise: StepNoise,
    t: float,
    T: float,
    dt: float,
    model: ModelParams,
    impact: ImpactParams,
    jac: Optional[np.ndarray] = None,
    check: bool = False,
) -> _StepResult:
    """One Milstein step on price arrays s of shape (2, n)."""
    state = MarketState(s[0], s[1])
    lam = lambda_bar(t, s[0], T, impact)
    greeks = margrabe_greeks(state, T - t, model) if np.any(np.asarray(lam) > 0.0) else None
    coeffs = effective_coeffs(t, state, T, model, impact, check=check, greeks=greeks)
    J = coeff_jacobians(
        t, state, T, model, impact, check=False, greeks=greeks, second_order=jac is not None
    )
    sigma = coeffs.sigma_matrix()
    W = np.stack([
        np.broadcast_to(np.asarray(noise.dW1, dtype=float), s.shape[1:]),
        np.broadcast_to(np.asarray(noise.dW2, dtype=float), s.shape[1:]),
    ])
    a12 = np.broadcast_to(np.asarray(noise.a12, dtype=float), s.shape[1:])
    growth = 1.0 + model.r * dt

    B = np.empty_like(sigma)
    B[0, 0] = growth + sigma[0, 0] / s[0] * W[0]
    B[0, 1] = sigma[0, 1] / s[1] * W[1]
    B[1, 0] = sigma[1, 0] / s[0] * W[0]
    B[1, 1] = growth + sigma[1, 1] / s[1] * W[1]

    levy = np.zeros_like(sigma)
    levy[0, 1] = a12
    levy[1, 0] = -a12
    Q = W[:, None] * W[None, :] - _EYE[:, :, None] * dt - levy

    M = np.einsum("ikl...,lj...->ikj...", J.jac, sigma)
    b = np.einsum("ikj...,kj...->i...", M, Q)
    s_next = np.einsum("ij...,j...->i...", B, s) + 0.5 * b

    jac_next = None
    if jac is not None:
        dM = np.einsum("iklq...,lj...->ikjq...", J.hess, sigma) + np.einsum(
            "ikl...,ljq...->ikjq...", J.jac, J.jac
        )
        db = np.einsum("ikjq...,kj...->iq...", dM, Q)
        DF = (
            _EYE[:, :, None] * growth
            + np.einsum("ikq...,k...->iq...", J.jac, W)
            + 0.5 * db
        )
        jac_next = np.einsum("iq...,qj...->ij...", DF, jac)

    denom = np.broadcast_to(np.asarray(coeffs.denom, dtype=float), s.shape[1:])
    return _StepResult(s_next=s_next, jac_next=jac_next, denom=denom)


def _state_array(state: MarketState) -> Tuple[np.ndarray, bool]:
    s1 = np.asarray(state.s1, dtype=float)
    s2 = np.asarray(state.s2, dtype=float)
    scalar = s1.ndim == 0 and s2.ndim == 0
    s1, s2 = np.broadcast_arrays(np.atleast_1d(s1), np.atleast_1d(s2))
    return np.stack([s1, s2]).astype(float), scalar


def _raise_nonpositive(t: float, s: np.ndarray, s_next: np.ndarray):
    bad = ~np.all(s_next > 0.0, axis=0)
    if np.any(bad):
        idx = int(np.flatnonzero(bad)[0])
        raise NonPositivePriceError(
            "Milstein step produced a non-positive price",
            {
                "t": t,
                "path": idx,
                "s1": float(s[0, idx]),
                "s2": float(s[1, idx]),
                "s1_next": float(s_next[0, idx]),
                "s2_next": float(s_next[1, idx]),
            },
        )


def milstein_step(
    state: MarketState,
    noise: StepNoise,
    t: float,
    T: float,
    model: ModelParams,
    impact: ImpactParams,
    dt: Optional[float] = None,
) -> MarketState:
    """Advance one step; dt defaults to the step length the noise was drawn for."""
    dt = _resolve_dt(noise, dt)
    s, scalar = _state_array(state)
    step = _advance(s, noise, t, T, dt, model, impact, check=True)
    _raise_nonpositive(t, s, step.s_next)
    if scalar:
        return MarketState(float(step.s_next[0, 0]), float(step.s_next[1, 0]))
    return MarketState(step.s_next[0], step.s_next[1])


def jacobian_step(
    jac: np.ndarray,
    state: MarketState,
    noise: StepNoise,
    t: float,
    T: float,
    model: ModelParams,
    impact: ImpactParams,
    dt: Optional[float] = None,
) -> np.ndarray:
    """Propagate dS/dS(0) through the exact derivative of ``milstein_step``."""
    dt = _resolve_dt(noise, dt)
    s, scalar = _state_array(state)
    jac_arr = np.asarray(jac, dtype=float)
    if jac_arr.ndim == 2:
        jac_arr = np.broadcast_to(jac_arr[:, :, None], (2, 2, s.shape[1]))
    step = _advance(s, noise, t, T, dt, model, impact, jac=jac_arr, check=True)
    _raise_nonpositive(t, s, step.s_next)
    return step.jac_next[:, :, 0] if scalar else step.jac_next


def _resolve_dt(noise: StepNoise, dt: Optional[float]) -> float:
    if dt is None:
        dt = noise.dt
    if dt is None or not dt > 0.0:
        raise InvalidParamsError("step length must be positive", {"dt": dt})
    return float(dt)


@dataclass
class CoupledPaths:
    """Terminal states of both arms, indexed by path.

    ``valid`` is False for discarded paths; their rows hold the last state
    reached before the discard.
    """

    terminal: np.ndarray
    terminal_cv: np.ndarray
    valid: np.ndarray
    jacobian: Optional[np.ndarray] = None
    jacobian_cv: Optional[np.ndarray] = None
    min_denom: float = 1.0
    discards: Dict[str, int] = field(default_factory=dict)
    wall_clock: float = 0.0

    @property
    def n_discarded(self) -> int:
        return int(np.count_nonzero(~self.valid))


@dataclass
class _BlockTask:
    index: int
    start: int
    stop: int
    s0: Tuple[float, float]
    spec: GridSpec
    model: ModelParams
    impact: ImpactParams
    with_jacobians: bool


def _simulate_block(task: _BlockTask):
    spec = task.spec
    n = task.stop - task.start
    dt = spec.dt
    rng = block_generator(spec.seed, task.index)

    s = np.empty((2, n))
    s[0], s[1] = task.s0
    s_cv = s.copy()
    jac = identity_jacobian(n) if task.with_jacobians else None
    jac_cv = identity_jacobian(n) if task.with_jacobians else None
    alive = np.ones(n, dtype=bool)
    reasons = {"regularity": 0, "nonpositive": 0}
    min_denom = np.inf

    with np.errstate(all="ignore"):
        for m in range(spec.n_steps):
            t = spec.t0 + m * dt
            noise = sample_step_noise(rng, dt, spec.levy_substeps, size=n)
            step = _advance(s, noise, t, spec.T, dt, task.model, task.impact, jac=jac)
            step_cv = _advance(s_cv, noise, t, spec.T, dt, task.model, FRICTIONLESS, jac=jac_cv)

            if np.any(alive):
                min_denom = min(min_denom, float(np.min(step.denom[alive])))
            irregular = alive & (step.denom < task.impact.delta0)
            ok_next = np.all(step.s_next > 0.0, axis=0) & np.all(np.isfinite(step.s_next), axis=0)
            ok_next &= np.all(step_cv.s_next > 0.0, axis=0)
            nonpositive = alive & ~irregular & ~ok_next
            for reason, mask in (("regularity", irregular), ("nonpositive", nonpositive)):
                for idx in np.flatnonzero(mask):
                    logger.warning(
                        "discarding path %d at t=%.6g (%s): s=(%.6g, %.6g) denom=%.3g",
                        task.start + int(idx), t, reason, s[0, idx], s[1, idx], step.denom[idx],
                    )
                reasons[reason] += int(np.count_nonzero(mask))
            alive &= ~(irregular | nonpositive)

            s = np.where(alive, step.s_next, s)
            s_cv = np.where(alive, step_cv.s_next, s_cv)
            if jac is not None:
                jac = np.where(alive, step.jac_next, jac)
                jac_cv = np.where(alive, step_cv.jac_next, jac_cv)

    return task.index, s, s_cv, jac, jac_cv, alive, reasons, min_denom


def simulate_coupled_paths(
    start: MarketState,
    spec: GridSpec,
    model: ModelParams,
    impact: ImpactParams,
    with_jacobians: bool = False,
    workers: int = 1,
) -> CoupledPaths:
    """Run FLMM and control-variate paths on shared noise, block by block."""
    s0 = (float(start.s1), float(start.s2))
    tasks = [
        _BlockTask(index, lo, hi, s0, spec, model, impact, with_jacobians)
        for index, lo, hi in block_ranges(spec.n_paths, spec.block_size)
    ]
    began = time.perf_counter()
    if workers > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_simulate_block, tasks))
    else:
        results = [_simulate_block(task) for task in tasks]
    results.sort(key=lambda item: item[0])

    terminal = np.concatenate([r[1] for r in results], axis=1).T
    terminal_cv = np.concatenate([r[2] for r in results], axis=1).T
    valid = np.concatenate([r[5] for r in results])
    jacobian = jacobian_cv = None
    if with_jacobians:
        jacobian = np.moveaxis(np.concatenate([r[3] for r in results], axis=2), 2, 0)
        jacobian_cv = np.moveaxis(np.concatenate([r[4] for r in results], axis=2), 2, 0)
    discards = {"regularity": 0, "nonpositive": 0}
    for r in results:
        for key, count in r[6].items():
            discards[key] += count

    paths = CoupledPaths(
        terminal=terminal,
        terminal_cv=terminal_cv,
        valid=valid,
        jacobian=jacobian,
        jacobian_cv=jacobian_cv,
        min_denom=float(min(r[7] for r in results)),
        discards=discards,
        wall_clock=time.perf_counter() - began,
    )
    if paths.n_discarded:
        logger.warning("%d of %d paths discarded: %s", paths.n_discarded, spec.n_paths, discards)
    if paths.n_discarded == spec.n_paths:
        raise AllPathsDiscardedError(
            "every simulated path was discarded", {"n_paths": spec.n_paths, **discards}
        )
    return paths


def write_path_dump(path: str, paths: CoupledPaths, spec: GridSpec) -> None:
    """Header (magic, version, N, M, seed) then rows (S1, S2, S1cv, S2cv) as <f8.

    Discarded paths are written as NaN rows.
    """
    rows = np.concatenate([paths.terminal, paths.terminal_cv], axis=1)
    rows = np.where(paths.valid[:, None], rows, np.nan).astype("<f8")
    with open(path, "wb") as handle:
        handle.write(
            _PATH_HEADER.pack(PATH_MAGIC, PATH_VERSION, spec.n_paths, spec.n_steps, spec.seed)
        )
        handle.write(rows.tobytes())


def read_path_dump(path: str) -> Tuple[Dict[str, int], np.ndarray]:
    with open(path, "rb") as handle:
        raw = handle.read()
    if len(raw) < _PATH_HEADER.size:
        raise DatasetFileError("path dump shorter than its header", {"path": path})
    magic, version, n_paths, n_steps, seed = _PATH_HEADER.unpack_from(raw)
    if magic != PATH_MAGIC:
        raise DatasetFileError("not a path dump", {"path": path, "magic": repr(magic)})
    body = raw[_PATH_HEADER.size:]
    if len(body) != n_paths * 4 * 8:
        raise DatasetFileError(
            "path dump body does not match its header",
            {"path": path, "n_paths": n_paths, "bytes": len(body)},
        )
    header = {"version": version, "n_paths": n_paths, "n_steps": n_steps, "seed": seed}
    return header, np.frombuffer(body, dtype="<f8").reshape(n_paths, 4)
