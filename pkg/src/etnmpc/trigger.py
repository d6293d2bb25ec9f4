"""Feasibility predicates, minimum inter-event time and the two triggering rules.

Every exponential expression has a series branch for tiny L_f * t so that
linear stubs with a vanishing Lipschitz modulus stay well defined.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import ContractViolation, InvalidConfiguration

SERIES_CUTOFF = 1e-8


def _expm1_over(L, t):
    """(e^{L t} - 1) / L, continuous at L = 0."""
    z = L * t
    if abs(z) < SERIES_CUTOFF:
        return t * (1.0 + 0.5 * z)
    return math.expm1(z) / L


def _log1p_over(L, c):
    """ln(1 + L c) / L, continuous at L = 0."""
    z = L * c
    if abs(z) < SERIES_CUTOFF:
        return c * (1.0 - 0.5 * z)
    return math.log1p(z) / L


def deviation_bound(w_tilde_max, L_f, dt):
    if dt < 0:
        raise ContractViolation("dt must be non-negative")
    return w_tilde_max * _expm1_over(L_f, dt)


def feasibility_margin(region, T_star_k):
    """Deviation budget (eps - eps_f) e^{-L_f T*_k}."""
    return (region.epsilon - region.epsilon_f) * math.exp(-region.L_f * T_star_k)


def continuous_feasibility(x_t, x_hat_t, elapsed, T_star_k, region):
    dev = float(region.norm(np.asarray(x_t, dtype=float) - np.asarray(x_hat_t, dtype=float)))
    return dev <= feasibility_margin(region, T_star_k) and elapsed <= T_star_k


def _require_T0(region):
    if region.T_star_0 is None:
        raise ContractViolation("region has no T*_0; call set_T_star_0 first")


def delta_min(region, T_star_k):
    _require_T0(region)
    eps, eps_f, L = region.epsilon, region.epsilon_f, region.L_f
    if eps < eps_f:
        raise InvalidConfiguration("epsilon must exceed epsilon_f")
    if not -1e-9 <= T_star_k <= region.T_star_0 + 1e-9:
        raise ContractViolation(f"T*_k={T_star_k} outside [0, T*_0={region.T_star_0}]")
    c = (4.0 * (eps - eps_f) * math.exp(L * (region.T_star_0 - T_star_k))
         / (region.lambda_min_QP * (1.0 - region.alpha) * eps_f))
    return _log1p_over(L, c)


@dataclass(frozen=True)
class TriggerParams:
    region: object
    gamma: float

    def __post_init__(self):
        if not 0.0 < self.gamma <= 1.0:
            raise InvalidConfiguration("gamma must lie in (0, 1]")
        _require_T0(self.region)


@dataclass(frozen=True)
class SdsDecision:
    branch: str  # "sample" or "direct"
    delta_min: float
    delta_star: Optional[float] = None
    t_next: Optional[float] = None

    @property
    def samples(self):
        return self.branch == "sample"


def sds_decide(params, T_star_k, t_k=0.0):
    if not T_star_k > 0:
        raise ContractViolation("T*_k must be positive outside the inner terminal set")
    dmin = delta_min(params.region, T_star_k)
    if T_star_k >= dmin:
        return SdsDecision("sample", dmin, delta_star=params.gamma * dmin)
    return SdsDecision("direct", dmin, t_next=t_k + T_star_k)


@dataclass(frozen=True)
class EtsVerdict:
    deviation: float
    threshold: float
    horizon_ok: bool
    continue_: bool

    @property
    def negative_threshold(self):
        return self.threshold < 0.0


def ets_threshold(region, delta_star, T_star_k):
    L = region.L_f
    decay = _expm1_over(-L, delta_star)  # (1 - e^{-L d}) / L
    return (feasibility_margin(region, T_star_k + delta_star)
            - region.w_tilde_max * decay)


def ets_check(params, x_t, x_hat_t, m, delta_star, T_star_k):
    if m < 1:
        raise ContractViolation("evaluation index m starts at 1")
    region = params.region
    dev = float(region.norm(np.asarray(x_t, dtype=float) - np.asarray(x_hat_t, dtype=float)))
    thr = ets_threshold(region, delta_star, T_star_k)
    ok = (m + 1) * delta_star <= T_star_k
    return EtsVerdict(dev, thr, ok, bool(dev < thr and ok))
