"""
Finite-liquidity price impact.

The illiquid asset 1 is pushed around by market-wide Delta_1 hedging of the
frictionless exchange option, scaled by the truncated impact function
lambda_bar(t, s1). Solving the feedback for dS1 gives effective diffusion
loadings

    sig11 = sigma1 s1 / (1 - lambda Gamma11)
    sig12 = sigma2 s2 lambda Gamma12 / (1 - lambda Gamma11)

while asset 2 stays a plain GBM (sig21 = sigma2 s2 rho,
sig22 = sigma2 s2 sqrt(1 - rho^2)). Under the pricing measure both drifts are
r * s.

The loadings above are the "literal" coupling: the hedging feedback through
dS2 is loaded on W2 alone. The "correlated" coupling routes it through the
correlated driver of asset 2, rho dW1 + sqrt(1 - rho^2) dW2:

    sig11 = (sigma1 s1 + rho sigma2 s2 lambda Gamma12) / (1 - lambda Gamma11)
    sig12 = sqrt(1 - rho^2) sigma2 s2 lambda Gamma12 / (1 - lambda Gamma11)

which is the coupling whose cross-variation with asset 2 matches the drift
returned by physical_drift. Both agree when lambda = 0.

lambda_bar is piecewise constant in s1 (truncation band), so its s-derivatives
are taken as zero everywhere.
"""
import math
from dataclasses import dataclass, fields
from typing import Dict, Optional, Union

import numpy as np

from src.models.margrabe import (
    ArrayLike,
    GreeksBundle,
    MarketState,
    ModelParams,
    margrabe_greeks,
)
from src.utils.errors import InvalidParamsError, RegularityError

LITERAL = "literal"
CORRELATED = "correlated"
COUPLINGS = (LITERAL, CORRELATED)


@dataclass(frozen=True)
class ImpactParams:
    epsilon: float = 0.04
    beta: float = 100.0
    floor: float = 1e-8
    cap: float = 1e8
    delta0: float = 1e-6
    coupling: str = LITERAL

    def __post_init__(self):
        if self.coupling not in COUPLINGS:
            raise InvalidParamsError(
                "coupling must be one of " + ", ".join(COUPLINGS), {"coupling": self.coupling}
            )
        if not self.epsilon >= 0.0:
            raise InvalidParamsError("epsilon must be non-negative", {"epsilon": self.epsilon})
        if not self.beta > 0.0:
            raise InvalidParamsError("beta must be positive", {"beta": self.beta})
        if not 0.0 < self.floor < self.cap:
            raise InvalidParamsError(
                "trading band must satisfy 0 < floor < cap",
                {"floor": self.floor, "cap": self.cap},
            )
        if not 0.0 < self.delta0 < 1.0:
            raise InvalidParamsError("delta0 must lie in (0, 1)", {"delta0": self.delta0})

    @property
    def frictionless(self) -> bool:
        return self.epsilon == 0.0

    def to_dict(self) -> Dict[str, Union[float, str]]:
        return {f.name: getattr(self, f.name) for f in fields(self)}


FRICTIONLESS = ImpactParams(epsilon=0.0)


def _recouple(a, b, rho: float, impact: ImpactParams):
    """Map literal asset-1 terms (on W1, on W2) to the configured coupling."""
    if impact.coupling == LITERAL:
        return a, b
    return a + rho * b, math.sqrt(1.0 - rho ** 2) * b


@dataclass
class EffectiveCoeffs:
    mu1: ArrayLike
    mu2: ArrayLike
    sig11: ArrayLike
    sig12: ArrayLike
    sig21: ArrayLike
    sig22: ArrayLike
    denom: ArrayLike
    lam: ArrayLike

    def sigma_matrix(self) -> np.ndarray:
        """Sigma[i, k] = loading of asset i on Brownian motion k."""
        s11, s12, s21, s22 = np.broadcast_arrays(
            *(np.asarray(x, dtype=float) for x in (self.sig11, self.sig12, self.sig21, self.sig22))
        )
        return np.array([[s11, s12], [s21, s22]])


@dataclass
class CoeffJacobians:
    """
    jac[i, k, l]     = d sig_ik / d s_l
    hess[i, k, l, q] = d^2 sig_ik / d s_l d s_q

    Trailing axes (if any) index paths.
    """

    jac: np.ndarray
    hess: np.ndarray

    @property
    def J1(self) -> np.ndarray:
        return self.jac[0]

    @property
    def J2(self) -> np.ndarray:
        return self.jac[1]


def lambda_bar(t: float, s1: ArrayLike, tau_total: float, params: ImpactParams) -> ArrayLike:
    """epsilon (1 - exp(-beta (T - t)^{3/2})) inside [floor, cap], zero outside."""
    remaining = max(tau_total - t, 0.0)
    level = params.epsilon * -np.expm1(-params.beta * remaining ** 1.5)
    s1_arr = np.asarray(s1, dtype=float)
    in_band = (s1_arr >= params.floor) & (s1_arr <= params.cap)
    out = np.where(in_band, level, 0.0)
    return float(out) if out.ndim == 0 else out


def _gbm_loadings(s1, s2, model: ModelParams):
    s1 = np.asarray(s1, dtype=float)
    s2 = np.asarray(s2, dtype=float)
    sig11 = model.sigma1 * s1
    sig12 = np.zeros_like(sig11)
    sig21 = model.sigma2 * s2 * model.rho
    sig22 = model.sigma2 * s2 * np.sqrt(1.0 - model.rho ** 2)
    return sig11, sig12, sig21, sig22


def _check_regular(t, s1, s2, denom, impact: ImpactParams):
    bad = np.asarray(denom) < impact.delta0
    if np.any(bad):
        idx = int(np.flatnonzero(np.atleast_1d(bad))[0])
        raise RegularityError(
            "1 - lambda * Gamma11 fell below the regularity margin",
            {
                "t": t,
                "s1": float(np.atleast_1d(s1)[idx]) if np.ndim(s1) else float(s1),
                "s2": float(np.atleast_1d(s2)[idx]) if np.ndim(s2) else float(s2),
                "denom": float(np.atleast_1d(denom)[idx]),
                "delta0": impact.delta0,
            },
        )


def effective_coeffs(
    t: float,
    state: MarketState,
    T: float,
    model: ModelParams,
    impact: ImpactParams,
    check: bool = True,
    greeks: Optional[GreeksBundle] = None,
) -> EffectiveCoeffs:
    """Risk-neutral drift and diffusion loadings of the impacted market at time t.

    With check=False a regularity violation is left in ``denom`` for the caller
    (the simulator discards offending paths instead of aborting the run).
    """
    s1 = np.asarray(state.s1, dtype=float)
    s2 = np.asarray(state.s2, dtype=float)
    sig11, sig12, sig21, sig22 = _gbm_loadings(s1, s2, model)
    lam = np.asarray(lambda_bar(t, s1, T, impact), dtype=float)
    denom = np.ones(np.broadcast(s1, s2).shape)

    if np.any(lam > 0.0):
        if greeks is None:
            greeks = margrabe_greeks(state, T - t, model)
        denom = 1.0 - lam * greeks.gamma11
        impacted = lam > 0.0
        safe = np.where(impacted, denom, 1.0)
        sig11 = np.where(impacted, model.sigma1 * s1 / safe, sig11)
        sig12 = np.where(impacted, model.sigma2 * s2 * lam * greeks.gamma12 / safe, sig12)
        sig11, sig12 = _recouple(sig11, sig12, model.rho, impact)
        denom = np.where(impacted, denom, 1.0)

    if check:
        _check_regular(t, s1, s2, denom, impact)

    return EffectiveCoeffs(
        mu1=model.r * s1,
        mu2=model.r * s2,
        sig11=_squeeze(sig11),
        sig12=_squeeze(sig12),
        sig21=_squeeze(sig21),
        sig22=_squeeze(sig22),
        denom=_squeeze(denom),
        lam=_squeeze(lam),
    )


def _squeeze(x):
    arr = np.asarray(x, dtype=float)
    return float(arr) if arr.ndim == 0 else arr


def _quotient_derivatives(num, num_grad, num_hess, den, den_grad, den_hess):
    """First and second derivatives of num/den from those of num and den."""
    inv = 1.0 / den
    grad = [num_grad[a] * inv - num * den_grad[a] * inv * inv for a in range(2)]
    hess = [[None, None], [None, None]]
    for a in range(2):
        for b in range(2):
            hess[a][b] = (
                num_hess[a][b] * inv
                - (num_grad[a] * den_grad[b] + num_grad[b] * den_grad[a]) * inv ** 2
                - num * den_hess[a][b] * inv ** 2
                + 2.0 * num * den_grad[a] * den_grad[b] * inv ** 3
            )
    return grad, hess


def coeff_jacobians(
    t: float,
    state: MarketState,
    T: float,
    model: ModelParams,
    impact: ImpactParams,
    check: bool = True,
    greeks: Optional[GreeksBundle] = None,
    second_order: bool = True,
) -> CoeffJacobians:
    """Analytic first and second s-derivatives of the diffusion loadings."""
    s1 = np.asarray(state.s1, dtype=float)
    s2 = np.asarray(state.s2, dtype=float)
    shape = np.broadcast(s1, s2).shape
    zero = np.zeros(shape)

    jac = np.zeros((2, 2, 2) + shape)
    hess = np.zeros((2, 2, 2, 2) + shape)
    jac[0, 0, 0] = model.sigma1
    jac[1, 0, 1] = model.sigma2 * model.rho
    jac[1, 1, 1] = model.sigma2 * np.sqrt(1.0 - model.rho ** 2)

    lam = np.asarray(lambda_bar(t, s1, T, impact), dtype=float)
    if not np.any(lam > 0.0):
        return CoeffJacobians(jac=jac, hess=hess)

    g = greeks if greeks is not None else margrabe_greeks(state, T - t, model)
    impacted = lam > 0.0
    den = 1.0 - lam * g.gamma11
    if check:
        _check_regular(t, s1, s2, np.where(impacted, den, 1.0), impact)
    den = np.where(impacted, den, 1.0)
    den_grad = [-lam * g.speed111, -lam * g.speed112]
    den_hess = [
        [-lam * g.acc1111, -lam * g.acc1112],
        [-lam * g.acc1112, -lam * g.acc1122],
    ]

    # sig11 = sigma1 s1 / den
    grad11, hess11 = _quotient_derivatives(
        model.sigma1 * s1, [model.sigma1 + zero, zero], [[zero, zero], [zero, zero]],
        den, den_grad, den_hess,
    )

    # sig12 = sigma2 lam s2 Gamma12 / den
    c = model.sigma2 * lam
    num12 = c * s2 * g.gamma12
    num12_grad = [c * s2 * g.speed112, c * (g.gamma12 + s2 * g.speed122)]
    cross = c * (g.speed112 + s2 * g.acc1122)
    num12_hess = [
        [c * s2 * g.acc1112, cross],
        [cross, c * (2.0 * g.speed122 + s2 * g.acc1222)],
    ]
    grad12, hess12 = _quotient_derivatives(num12, num12_grad, num12_hess, den, den_grad, den_hess)

    for l in range(2):
        jac[0, 0, l] = np.where(impacted, grad11[l], jac[0, 0, l])
        jac[0, 1, l] = np.where(impacted, grad12[l], 0.0)
        if not second_order:
            continue
        for q in range(2):
            hess[0, 0, l, q] = np.where(impacted, hess11[l][q], 0.0)
            hess[0, 1, l, q] = np.where(impacted, hess12[l][q], 0.0)
    jac[0, 0], jac[0, 1] = _recouple(jac[0, 0].copy(), jac[0, 1].copy(), model.rho, impact)
    hess[0, 0], hess[0, 1] = _recouple(hess[0, 0].copy(), hess[0, 1].copy(), model.rho, impact)
    return CoeffJacobians(jac=jac, hess=hess)


def physical_drift(
    t: float,
    state: MarketState,
    T: float,
    model: ModelParams,
    impact: ImpactParams,
    mu1: float,
    mu2: float,
) -> ArrayLike:
    """Real-world drift of asset 1 under hedging feedback.

    df is expanded by Ito with f = Delta_1, so f_t = -Charm_1 and the second
    order terms carry lambda. Reduces to mu1 * s1 when lambda vanishes.
    """
    s1 = np.asarray(state.s1, dtype=float)
    s2 = np.asarray(state.s2, dtype=float)
    lam = np.asarray(lambda_bar(t, s1, T, impact), dtype=float)
    if not np.any(lam > 0.0):
        return _squeeze(mu1 * s1 + 0.0 * s2)

    g = margrabe_greeks(state, T - t, model)
    den = 1.0 - lam * g.gamma11
    cross_var = (
        model.rho * model.sigma1 * model.sigma2 * s1 * s2
        + model.sigma2 ** 2 * s2 ** 2 * lam * g.gamma12
    )
    var1 = (
        model.sigma1 ** 2 * s1 ** 2
        + model.sigma2 ** 2 * s2 ** 2 * lam ** 2 * g.gamma12 ** 2
        + 2.0 * model.rho * model.sigma1 * model.sigma2 * s1 * s2 * lam * g.gamma12
    )
    ito = (
        g.speed112 * cross_var / den
        + g.speed111 * var1 / (2.0 * den ** 2)
        + 0.5 * model.sigma2 ** 2 * s2 ** 2 * g.speed122
    )
    drift = (mu1 * s1 - lam * g.charm1 + mu2 * s2 * lam * g.gamma12 + lam * ito) / den
    return _squeeze(np.where(lam > 0.0, drift, mu1 * s1))
