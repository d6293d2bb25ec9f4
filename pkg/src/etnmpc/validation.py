"""Property battery run by ``etnmpc validate``.

Each check returns a :class:`Property` with a signed slack (positive means
the property holds with room to spare).  Checks never raise on a failed
property; only configuration problems propagate.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import brentq

from . import trigger as trig
from .closed_loop import (feasibility_violations, gronwall_slack, run, telescoping_slack)
from .errors import FeasibilityLost, InitialInfeasible
from .model import linearize_at_origin
from .terminal import (closed_loop_matrix, invariance_check, lyapunov_residual, solve_lyapunov,
                       stage_weight, validate_region)

LYAP_TOL = 1e-8
DECREASE_TOL = 1e-9
INVARIANCE_RTOL = 1e-6
DELTA_MIN_TOL = 1e-9
GRONWALL_TOL = 1e-9
TELESCOPE_TOL = 1e-6


@dataclass
class Property:
    name: str
    passed: bool
    slack: float = math.nan
    detail: str = ""
    skipped: bool = False

    def line(self):
        tag = "SKIP" if self.skipped else ("PASS" if self.passed else "FAIL")
        s = "" if math.isnan(self.slack) else f" slack={self.slack:.3e}"
        d = f" ({self.detail})" if self.detail else ""
        return f"{tag} {self.name}{s}{d}"


# -- region ---------------------------------------------------------------

def check_lyapunov(region, model):
    """Lyapunov equation for the configured gain, re-solved; the shipped P_f is compared."""
    A, B = linearize_at_origin(model)
    A_c = closed_loop_matrix(A, B, region.K)
    M = stage_weight(region.Q, region.R, region.K)
    P = solve_lyapunov(A_c, M)
    resid = lyapunov_residual(P, A_c, M)
    given = lyapunov_residual(region.P_f, A_c, M)
    rel = float(np.linalg.norm(P - region.P_f) / np.linalg.norm(P))
    return Property("lyapunov_residual", resid <= LYAP_TOL, LYAP_TOL - resid,
                    f"configured P_f residual {given:.2e}, relative gap {rel:.2e}")


def check_certificate(region, model, n_samples=10_000, seed=0):
    rep = validate_region(region, model, n_samples, seed)
    ok = rep.max_decrease_violation <= DECREASE_TOL and rep.kappa_in_U_fraction == 1.0
    return Property("region_certificate", ok, DECREASE_TOL - rep.max_decrease_violation,
                    f"Kx in U on {rep.kappa_in_U_fraction:.3%} of samples")


def check_invariance(region, model, seed=0):
    ratio = invariance_check(region, model, seed=seed)
    lim = 1.0 + INVARIANCE_RTOL
    return Property("region_invariance", ratio <= lim, lim - ratio,
                    f"max V_f/eps^2 = {ratio:.6f} under |w| = w_hat_max")


# -- triggering -----------------------------------------------------------

def delta_min_bisect(region, T_star_k):
    """First t at which the Gronwall envelope under w_tilde_max exhausts the budget.

    Found with Brent's method, so it shares nothing with the closed form
    beyond the two expressions being equated.
    """
    eps, eps_f, L = region.epsilon, region.epsilon_f, region.L_f
    w = region.lambda_min_QP * (1 - region.alpha) * eps_f / (4 * math.exp(L * region.T_star_0))
    budget = (eps - eps_f) * math.exp(-L * T_star_k)

    def g(t):
        env = w * t if L == 0 else w / L * math.expm1(L * t)
        return env - budget

    hi = 1.0
    while g(hi) < 0:
        hi *= 2.0
    return brentq(g, 0.0, hi, xtol=1e-14, rtol=4 * np.finfo(float).eps, maxiter=500)


def check_delta_min(region, draws=100, seed=0):
    """Closed form against bisection on random parameters, then monotonicity."""
    from .terminal import assemble_region, set_T_star_0

    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(draws):
        eps_f = rng.uniform(0.01, 1.0)
        eps = eps_f * rng.uniform(1.01, 3.0)
        reg = assemble_region(region.P_f, region.K, eps, eps_f, rng.uniform(0.0, 3.0),
                              region.Q, region.R, rng.uniform(0.05, 0.95))
        reg = set_T_star_0(reg, rng.uniform(0.5, 6.0))
        T = rng.uniform(0.0, reg.T_star_0)
        worst = max(worst, abs(trig.delta_min(reg, T) - delta_min_bisect(reg, T)))
    out = [Property("delta_min_vs_bisection", worst <= DELTA_MIN_TOL, DELTA_MIN_TOL - worst,
                    f"{draws} draws")]
    if region.T_star_0 is not None:
        Ts = np.linspace(region.T_star_0, 0.0, 100)
        d = np.array([trig.delta_min(region, T) for T in Ts])
        inc = float(np.min(np.diff(d)))
        out.append(Property("delta_min_monotone", inc > 0, inc, "100-point sweep"))
    return out


def check_ets_soundness(region, draws=2000, seed=0):
    """A 'continue' verdict keeps the worst-case deviation inside the budget for one more step.

    From deviation e at the evaluation, the envelope after a further delta is
    e e^{L delta} + w (e^{L delta} - 1)/L; it must not exceed the margin.
    """
    rng = np.random.default_rng(seed)
    L, w = region.L_f, region.w_tilde_max
    params = trig.TriggerParams(region, 1.0)
    worst = math.inf
    hits = 0
    for _ in range(draws):
        T = rng.uniform(0.0, region.T_star_0)
        dmin = trig.delta_min(region, T)
        d = rng.uniform(0.05, 1.0) * dmin
        m = int(rng.integers(1, 5))
        if (m + 1) * d > T:
            continue
        budget = trig.feasibility_margin(region, T)
        dev = rng.uniform(0.0, 1.2) * budget
        x_hat = np.zeros(region.P_f.shape[0])
        x = dev * region.norm.sqrt_inv()[:, 0]  # unit P_f-norm column, scaled
        v = trig.ets_check(params, x, x_hat, m, d, T)
        if not v.continue_:
            continue
        hits += 1
        env = dev * math.exp(L * d) + trig.deviation_bound(w, L, d)
        worst = min(worst, budget - env)
    return Property("ets_one_step_soundness", hits > 0 and worst >= -1e-15, worst,
                    f"{hits} continue verdicts checked")


# -- closed loop ------------------------------------------------------------

@dataclass
class RunCheck:
    seed: int
    status: str
    certified: bool
    convergence_time: float
    bound: float
    violations: int
    gronwall: float
    telescoping: float
    metrics: dict


def check_run(scenario, keep_log=False):
    """Run one scenario and evaluate every run-level oracle on its log.

    With ``keep_log`` the log is returned alongside (None if the first OCP failed).
    """
    try:
        log = run(scenario)
    except (InitialInfeasible, FeasibilityLost) as exc:
        log = exc.log
    if log is None or log.region.T_star_0 is None:
        chk = RunCheck(int(scenario.disturbance.seed), "initial_infeasible", False, math.nan,
                       math.nan, 0, math.nan, math.nan, {})
        return (chk, log) if keep_log else chk
    m = log.metrics()
    ct = m["convergence_time"]
    chk = RunCheck(int(scenario.disturbance.seed), log.status, log.certified,
                   math.inf if ct is None else ct, m["certified_bound"] or math.nan,
                   len(feasibility_violations(log)), gronwall_slack(log),
                   telescoping_slack(log), m)
    return (chk, log) if keep_log else chk


def summarize_runs(checks):
    """Battery lines for a list of RunCheck."""
    if not checks:
        return []
    cert = [c for c in checks if c.certified]
    lost = [c for c in checks if c.status in ("feasibility_lost", "initial_infeasible")]
    props = [Property("recursive_feasibility", not lost, float(-len(lost)),
                      f"{len(checks)} runs, {len(lost)} lost")]
    if not cert:
        for name in ("convergence_bound", "inter_evaluation_feasibility", "gronwall_envelope",
                     "horizon_telescoping"):
            props.append(Property(name, True, detail="not certified, skipped", skipped=True))
        return props
    slack = min(c.bound - c.convergence_time for c in cert)
    props.append(Property("convergence_bound", slack >= 0, slack,
                          f"median convergence {np.median([c.convergence_time for c in cert]):.4f}"
                          f" over {len(cert)} certified runs"))
    nv = sum(c.violations for c in cert)
    props.append(Property("inter_evaluation_feasibility", nv == 0, float(-nv),
                          f"{nv} dense-grid violations"))
    g = min(c.gronwall for c in cert)
    props.append(Property("gronwall_envelope", g >= -GRONWALL_TOL, g + GRONWALL_TOL))
    t = min(c.telescoping for c in cert)
    props.append(Property("horizon_telescoping", t >= -TELESCOPE_TOL, t + TELESCOPE_TOL))
    return props
