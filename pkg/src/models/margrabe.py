"""
Margrabe exchange-option analytics.

Closed-form price of the option to exchange asset 2 for asset 1 in the
frictionless two-asset lognormal market, and the ladder of Greeks up to fourth
order in the asset prices. The Greeks serve two purposes: they are the
control variate for the Monte Carlo engine, and Delta_1 is the market-wide
hedging strategy that drives the price impact in the finite-liquidity model.

All functions accept scalars or numpy arrays for the asset prices (and tau)
and broadcast.
"""
import math
from dataclasses import dataclass, fields
from typing import Dict, Union

import numpy as np
from scipy.special import ndtr

from src.utils.errors import DegenerateExpiryError, InvalidParamsError

ArrayLike = Union[float, np.ndarray]

_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)
_RADICAND_TOL = 1e-14


@dataclass(frozen=True)
class ModelParams:
    sigma1: float = 0.4
    sigma2: float = 0.2
    rho: float = 0.5
    r: float = 0.05

    def __post_init__(self):
        if not (self.sigma1 >= 0.0 and self.sigma2 >= 0.0):
            raise InvalidParamsError(
                "volatilities must be non-negative",
                {"sigma1": self.sigma1, "sigma2": self.sigma2},
            )
        if not -1.0 <= self.rho <= 1.0:
            raise InvalidParamsError("rho must lie in [-1, 1]", {"rho": self.rho})
        if not self.r >= 0.0:
            raise InvalidParamsError("r must be non-negative", {"r": self.r})

    def to_dict(self) -> Dict[str, float]:
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass(frozen=True)
class MarketState:
    s1: ArrayLike
    s2: ArrayLike

    def __post_init__(self):
        if not (np.all(np.asarray(self.s1) > 0.0) and np.all(np.asarray(self.s2) > 0.0)):
            raise InvalidParamsError(
                "asset prices must be strictly positive",
                {"s1": _summary(self.s1), "s2": _summary(self.s2)},
            )


@dataclass
class GreeksBundle:
    """Margrabe sensitivities at one (tau, s1, s2). Time Greeks are d/dtau."""

    delta1: ArrayLike
    delta2: ArrayLike
    theta: ArrayLike
    gamma11: ArrayLike
    gamma22: ArrayLike
    gamma12: ArrayLike
    charm1: ArrayLike
    charm2: ArrayLike
    speed111: ArrayLike
    speed222: ArrayLike
    speed112: ArrayLike
    speed221: ArrayLike
    speed122: ArrayLike
    colour11: ArrayLike
    colour22: ArrayLike
    colour12: ArrayLike
    acc1111: ArrayLike
    acc1112: ArrayLike
    acc1122: ArrayLike
    acc1222: ArrayLike
    acc2222: ArrayLike

    def to_dict(self) -> Dict[str, ArrayLike]:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def _summary(x: ArrayLike):
    arr = np.asarray(x, dtype=float)
    return float(arr) if arr.ndim == 0 else {"min": float(arr.min()), "max": float(arr.max())}


def norm_pdf(x: ArrayLike) -> ArrayLike:
    return _INV_SQRT_2PI * np.exp(-0.5 * np.square(x))


def norm_cdf(x: ArrayLike) -> ArrayLike:
    return ndtr(x)


def effective_vol(params: ModelParams) -> float:
    """sqrt(sigma1^2 + sigma2^2 - 2 rho sigma1 sigma2)."""
    radicand = (
        params.sigma1 ** 2
        + params.sigma2 ** 2
        - 2.0 * params.sigma1 * params.sigma2 * params.rho
    )
    if radicand < 0.0:
        scale = max(params.sigma1 ** 2 + params.sigma2 ** 2, 1.0)
        if radicand < -_RADICAND_TOL * scale:
            raise InvalidParamsError(
                "negative effective variance", {"radicand": radicand, **params.to_dict()}
            )
        radicand = 0.0
    return math.sqrt(radicand)


def _d_plus_minus(s1, s2, tau, sigma):
    v = sigma * np.sqrt(tau)
    x = np.log(s1 / s2)
    d_plus = x / v + 0.5 * v
    return x, v, d_plus, d_plus - v


def _as_output(value):
    arr = np.asarray(value)
    return float(arr) if arr.ndim == 0 else arr


def margrabe_price(state: MarketState, tau: ArrayLike, params: ModelParams) -> ArrayLike:
    """V = s1 N(d+) - s2 N(d-); intrinsic value at tau = 0 or sigma = 0."""
    tau_arr = np.asarray(tau, dtype=float)
    if np.any(tau_arr < 0.0):
        raise InvalidParamsError("tau must be non-negative", {"tau": _summary(tau)})
    s1 = np.asarray(state.s1, dtype=float)
    s2 = np.asarray(state.s2, dtype=float)
    sigma = effective_vol(params)
    intrinsic = np.maximum(s1 - s2, 0.0)
    if sigma == 0.0:
        return _as_output(intrinsic * np.ones_like(tau_arr))
    live = tau_arr > 0.0
    safe_tau = np.where(live, tau_arr, 1.0)
    _, _, d_plus, d_minus = _d_plus_minus(s1, s2, safe_tau, sigma)
    value = s1 * norm_cdf(d_plus) - s2 * norm_cdf(d_minus)
    return _as_output(np.where(live, value, intrinsic))


def margrabe_greeks(state: MarketState, tau: ArrayLike, params: ModelParams) -> GreeksBundle:
    """Closed-form Greeks. Refuses tau <= 0 or sigma = 0 instead of returning inf."""
    tau_arr = np.asarray(tau, dtype=float)
    sigma = effective_vol(params)
    if np.any(tau_arr <= 0.0) or sigma == 0.0:
        raise DegenerateExpiryError(
            "Greeks are undefined at expiry or with zero effective volatility",
            {"tau": _summary(tau), "sigma": sigma},
        )
    s1 = np.asarray(state.s1, dtype=float)
    s2 = np.asarray(state.s2, dtype=float)
    x, v, d_plus, d_minus = _d_plus_minus(s1, s2, tau_arr, sigma)
    n_plus = norm_pdf(d_plus)
    n_minus = norm_pdf(d_minus)

    # g = N'(d+) / (sigma sqrt(tau)); every price Greek is g times a rational in s and u.
    g = n_plus / v
    u = d_plus / v
    inv_v2 = 1.0 / (v * v)

    dd_plus_dtau = (-x / v + 0.5 * v) / (2.0 * tau_arr)
    dd_minus_dtau = (-x / v - 0.5 * v) / (2.0 * tau_arr)

    gamma11 = g / s1
    gamma22 = g * s1 / (s2 * s2)
    gamma12 = -g / s2

    # speed221 = dGamma22/ds1 and speed122 = dGamma12/ds2 are the same third
    # derivative d3V/ds1 ds2^2; both are kept under their own names.
    speed221 = g / (s2 * s2) * (1.0 - u)
    speed122 = -(u * g / s2) / s2 + g / (s2 * s2)

    return GreeksBundle(
        delta1=_as_output(norm_cdf(d_plus)),
        delta2=_as_output(-norm_cdf(d_minus)),
        theta=_as_output(sigma * s1 * n_plus / (2.0 * np.sqrt(tau_arr))),
        gamma11=_as_output(gamma11),
        gamma22=_as_output(gamma22),
        gamma12=_as_output(gamma12),
        charm1=_as_output(n_plus * dd_plus_dtau),
        charm2=_as_output(-n_minus * dd_minus_dtau),
        speed111=_as_output(-g / (s1 * s1) * (u + 1.0)),
        speed222=_as_output(g * s1 / s2 ** 3 * (u - 2.0)),
        speed112=_as_output(u * g / (s1 * s2)),
        speed221=_as_output(speed221),
        speed122=_as_output(speed122),
        colour11=_as_output(gamma11 * (-d_plus * dd_plus_dtau - 0.5 / tau_arr)),
        colour22=_as_output(gamma22 * (-d_minus * dd_minus_dtau - 0.5 / tau_arr)),
        colour12=_as_output(gamma12 * (-d_plus * dd_plus_dtau - 0.5 / tau_arr)),
        acc1111=_as_output(g / s1 ** 3 * ((u + 2.0) * (u + 1.0) - inv_v2)),
        acc1112=_as_output(-g / (s1 * s1 * s2) * (u * (u + 1.0) - inv_v2)),
        acc1122=_as_output(g / (s1 * s2 * s2) * (u * u - u - inv_v2)),
        acc1222=_as_output(g / s2 ** 3 * ((u - 2.0) * (1.0 - u) + inv_v2)),
        acc2222=_as_output(g * s1 / s2 ** 4 * ((u - 3.0) * (u - 2.0) - inv_v2)),
    )


def margrabe_deltas(state: MarketState, tau: float, params: ModelParams) -> np.ndarray:
    """(Delta1, Delta2) as a length-2 array, the delta control-variate mean."""
    greeks = margrabe_greeks(state, tau, params)
    return np.array([greeks.delta1, greeks.delta2], dtype=float)
