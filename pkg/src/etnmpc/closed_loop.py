"""Closed-loop simulation: event-triggered, self-triggered and periodic MPC.

The plant and a disturbance-free twin advance in lockstep under the same
input, so the deviation from the predicted optimal trajectory is available
at every dense-grid instant.  The twin is re-synchronised with the plant
at each OCP instant.
"""
from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import ocp as _ocp
from . import trigger as _trig
from .errors import (ContractViolation, FeasibilityLost, InfeasibleError, InitialInfeasible,
                     InvalidConfiguration)
from .model import DisturbanceSignal, WeightedNorm, _write_csv, fmt, weighted_norm
from .terminal import contains, set_T_star_0

MODES = ("event", "periodic", "self")


@dataclass(frozen=True)
class DisturbanceSpec:
    kind: str = "random"  # "none" or "random"
    bound: float = 0.0
    hold: float = 0.01
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("none", "random"):
            raise InvalidConfiguration(f"unknown disturbance kind {self.kind!r}")
        if self.bound < 0 or not self.hold > 0:
            raise InvalidConfiguration("disturbance bound must be >= 0 and hold > 0")


@dataclass(frozen=True)
class LocalController:
    K: np.ndarray
    mode: str = "sample_and_hold"
    delta: float = 0.01

    def __post_init__(self):
        if self.mode not in ("continuous", "sample_and_hold"):
            raise InvalidConfiguration(f"unknown local mode {self.mode!r}")
        if self.mode == "sample_and_hold" and not self.delta > 0:
            raise InvalidConfiguration("sample-and-hold period must be positive")


@dataclass(frozen=True)
class Scenario:
    model: object
    region: object  # TerminalRegion; T*_0 is filled in by the run
    x0: np.ndarray
    T_0: float = 4.0
    gamma: float = 1.0
    mode: str = "event"
    h_ctrl: float = 0.1
    disturbance: DisturbanceSpec = field(default_factory=DisturbanceSpec)
    sim_horizon: float = 10.0
    max_step: float = 1e-3
    local_mode: str = "sample_and_hold"
    local_delta: float = 0.01
    dwell: float = 2.0
    n_segments: int = 40
    options: _ocp.SolverOptions = field(default_factory=_ocp.SolverOptions)

    def __post_init__(self):
        object.__setattr__(self, "x0", np.array(self.x0, dtype=float))
        if self.mode not in MODES:
            raise InvalidConfiguration(f"mode must be one of {MODES}")
        if not 0 < self.gamma <= 1:
            raise InvalidConfiguration("gamma must lie in (0, 1]")
        if not 0 < self.region.alpha < 1:
            raise InvalidConfiguration("alpha must lie in (0, 1)")
        if not (self.T_0 > 0 and self.h_ctrl > 0 and self.max_step > 0 and self.sim_horizon > 0):
            raise InvalidConfiguration("horizons and steps must be positive")
        if self.x0.shape != (self.model.state_dim,):
            raise InvalidConfiguration("x0 has the wrong dimension")
        LocalController(self.region.K, self.local_mode, self.local_delta)

    @property
    def local(self):
        return LocalController(self.region.K, self.local_mode, self.local_delta)


def make_disturbance(bound, hold, duration, seed, P_f, t_start=0.0):
    """Held samples: uniform direction on the P_f sphere, magnitude uniform in [0, bound]."""
    if bound < 0 or not hold > 0:
        raise ContractViolation("need bound >= 0 and hold > 0")
    P_f = np.asarray(P_f, dtype=float)
    n = P_f.shape[0]
    count = int(math.floor(duration / hold + 1e-9)) + 1
    if bound == 0:
        return DisturbanceSignal(t_start, hold, np.zeros((count, n)), seed, 0.0)
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((count, n))
    z /= np.linalg.norm(z, axis=1, keepdims=True)
    r = rng.uniform(0.0, bound, size=count)
    w_eig, V = np.linalg.eigh(P_f)
    S = (V / np.sqrt(w_eig)) @ V.T
    W = (r[:, None] * z) @ S.T
    norm = WeightedNorm(P_f)
    for _ in range(8):  # round-off can leave a sample a few ulps above the cap
        nv = weighted_norm(norm, W)
        over = nv > bound
        if not over.any():
            break
        W[over] *= (bound / nv[over])[:, None] * (1.0 - 4e-16)
    return DisturbanceSignal(t_start, hold, W, seed, float(bound))


# ---------------------------------------------------------------- records

@dataclass
class Event:
    t: float
    kind: str
    k: int
    m: Optional[int] = None
    deviation: Optional[float] = None
    threshold: Optional[float] = None
    delta_min: Optional[float] = None
    delta_star: Optional[float] = None
    T_star: Optional[float] = None
    detail: str = ""


@dataclass
class Cycle:
    k: int
    t_k: float
    T_k: float
    T_star: float
    delta_min: float
    branch: str
    J: float
    terminal_Vf: float
    converged: bool
    kkt: float
    delta: float = math.nan
    evaluations: int = 0


@dataclass
class SimLog:
    scenario: Scenario
    region: object
    t: np.ndarray = None
    x: np.ndarray = None
    u: np.ndarray = None
    x_hat: np.ndarray = None
    cycle_index: np.ndarray = None
    mode: np.ndarray = None
    events: list = field(default_factory=list)
    cycles: list = field(default_factory=list)
    certified: bool = False
    switch_time: Optional[float] = None
    status: str = "running"

    @property
    def V_f(self):
        return self.region.V_f(self.x)

    def metrics(self):
        return extract_metrics(self)

    # exports -----------------------------------------------------------
    def write(self, directory):
        os.makedirs(directory, exist_ok=True)
        n = self.x.shape[1]
        m = self.u.shape[1]
        V = self.V_f
        rows = [[fmt(t)] + [fmt(v) for v in xi] + [fmt(v) for v in ui] + [fmt(vf), md]
                for t, xi, ui, vf, md in zip(self.t, self.x, self.u, V, self.mode)]
        _write_csv(os.path.join(directory, "trace.csv"),
                   ["t"] + [f"x{i + 1}" for i in range(n)] + [f"u{i + 1}" for i in range(m)]
                   + ["V_f", "mode"], rows)

        def o(v):
            if v is None:
                return ""
            return str(v) if isinstance(v, (int, str)) else fmt(v)

        _write_csv(os.path.join(directory, "events.csv"),
                   ["t", "kind", "k", "m", "deviation", "threshold", "delta_min", "delta_star",
                    "T_star", "detail"],
                   [[fmt(e.t), e.kind, str(e.k), o(e.m), o(e.deviation), o(e.threshold),
                     o(e.delta_min), o(e.delta_star), o(e.T_star), e.detail]
                    for e in self.events])
        _write_csv(os.path.join(directory, "cycles.csv"),
                   ["k", "t_k", "delta_k", "T_k", "T_star_k", "delta_min_k", "branch", "J"],
                   [[str(c.k), fmt(c.t_k), fmt(c.delta), fmt(c.T_k), fmt(c.T_star),
                     fmt(c.delta_min), c.branch, fmt(c.J)] for c in self.cycles])
        with open(os.path.join(directory, "metrics.json"), "w") as fh:
            fh.write(metrics_json(self.metrics()))


def _jsonable(v):
    if isinstance(v, bool) or v is None or isinstance(v, (int, str)):
        return json.dumps(v)
    if isinstance(v, float):
        return fmt(v) if math.isfinite(v) else "null"
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_jsonable(x) for x in v) + "]"
    raise TypeError(type(v))


def metrics_json(metrics):
    """JSON with every float printed in shortest round-trip form."""
    body = ",\n".join(f'  "{k}": {_jsonable(v)}' for k, v in metrics.items())
    return "{\n" + body + "\n}\n"


def extract_metrics(log):
    region = log.region
    V = log.V_f
    inside = np.nonzero(V <= region.epsilon ** 2)[0]
    conv = float(log.t[inside[0]] - log.t[0]) if len(inside) else None
    after = V[inside[0]:] if len(inside) else np.array([])
    deltas = [c.delta for c in log.cycles if math.isfinite(c.delta)]
    bound = region.T_star_0 / region.alpha if region.T_star_0 is not None else None
    return {
        "mode": log.scenario.mode,
        "gamma": float(log.scenario.gamma),
        "seed": int(log.scenario.disturbance.seed),
        "status": log.status,
        "certified": bool(log.certified),
        "ocp_count": sum(1 for e in log.events if e.kind == "ocp_solve"),
        # one sample per OCP instant plus one per trigger evaluation
        "measurement_count": sum(1 for e in log.events if e.kind == "measurement"),
        "ets_evaluations": sum(1 for e in log.events
                               if e.kind == "measurement" and e.detail == "ets"),
        "convergence_time": conv,
        "certified_bound": bound,
        "T_star_0": region.T_star_0,
        "switch_time": log.switch_time,
        "max_Vf_ratio_after_entry": (float(after.max() / region.epsilon ** 2)
                                     if len(after) else None),
        "min_delta": min(deltas) if deltas else None,
        "mean_delta": float(np.mean(deltas)) if deltas else None,
        "deltas": deltas,
    }


# ---------------------------------------------------------------- engine

class _Engine:
    """Advances plant and nominal twin between breakpoints on a dense RK4 grid."""

    def __init__(self, scenario, dist):
        self.sc = scenario
        self.model = scenario.model
        self.kern = scenario.model.kernel_impl(scenario.options.backend)
        self.dist = dist
        self.t = 0.0
        self.x = scenario.x0.copy()
        self.xh = scenario.x0.copy()
        self.T = [0.0]
        self.X = [self.x.copy()]
        self.XH = [self.xh.copy()]
        self.U = []
        self.C = [0]
        self.M = []
        n = self.model.state_dim
        self._zero = np.zeros(n)

    def _breaks(self, a, b, extra):
        pts = {b}
        pts.update(p for p in extra if a + 1e-12 < p < b - 1e-12)
        pts.update(p for p in self.dist.boundaries_in(a, b) if a + 1e-12 < p < b - 1e-12)
        return sorted(pts)

    def _push(self, X, XH, u, cycle, mode, h, a):
        K = len(X) - 1
        self.T.extend(a + h * np.arange(1, K + 1))
        self.X.extend(X[1:])
        self.XH.extend(XH[1:])
        self.U.extend([u] * K)
        self.C.extend([cycle] * K)
        self.M.extend([mode] * K)

    def advance_mpc(self, t_end, u_traj, cycle):
        a = self.t
        bounds = [float(b) for b in u_traj.boundaries()]
        for b in self._breaks(a, t_end, bounds):
            self._interval(a, b, u_traj.value_at(0.5 * (a + b)), cycle, "mpc", twin=True)
            a = b
        self.t = t_end

    def _interval(self, a, b, u, cycle, mode, twin):
        span = b - a
        if span <= 1e-12:
            return
        K = max(1, int(math.ceil(span / self.sc.max_step - 1e-9)))
        h = span / K
        w = self.dist.value_at(0.5 * (a + b))
        U = np.tile(u, (K, 1))
        H = np.full(K, h)
        X = self.kern.rk4_steps(self.x, U, np.tile(w, (K, 1)), H)
        if twin:
            XH = self.kern.rk4_steps(self.xh, U, np.zeros((K, self.model.state_dim)), H)
        else:
            XH = np.full_like(X, np.nan)
        if not np.all(np.isfinite(X)):
            raise FeasibilityLost(f"plant state diverged near t={a:.6g}")
        self._push(X, XH, np.array(u, dtype=float), cycle, mode, h, a)
        self.x = X[-1].copy()
        self.xh = XH[-1].copy()

    def resync(self):
        self.xh = self.x.copy()

    def advance_local(self, t_end, ctrl):
        a = self.t
        if ctrl.mode == "sample_and_hold":
            n = int(math.floor((t_end - a) / ctrl.delta + 1e-9))
            ticks = [a + j * ctrl.delta for j in range(1, n + 1)]
            u = self.model.project(ctrl.K @ self.x)
            next_tick = 0
            for b in self._breaks(a, t_end, ticks):
                self._interval(a, b, u, -1, "local", twin=False)
                a = b
                if next_tick < len(ticks) and abs(b - ticks[next_tick]) <= 1e-12:
                    u = self.model.project(ctrl.K @ self.x)
                    next_tick += 1
        else:
            for b in self._breaks(a, t_end, []):
                self._continuous(a, b, ctrl)
                a = b
        self.t = t_end

    def _continuous(self, a, b, ctrl):
        span = b - a
        if span <= 1e-12:
            return
        K = max(1, int(math.ceil(span / self.sc.max_step - 1e-9)))
        h = span / K
        w = self.dist.value_at(0.5 * (a + b))
        model = self.model

        def f(x):
            return model.rhs(x, model.project(ctrl.K @ x)) + w

        x = self.x
        for i in range(K):
            u = model.project(ctrl.K @ x)
            k1 = f(x)
            k2 = f(x + 0.5 * h * k1)
            k3 = f(x + 0.5 * h * k2)
            k4 = f(x + h * k3)
            x = x + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
            self.T.append(a + h * (i + 1))
            self.X.append(x)
            self.XH.append(np.full_like(x, np.nan))
            self.U.append(u)
            self.C.append(-1)
            self.M.append("local")
        self.x = np.array(x)

    def finish(self, log):
        n_u = self.model.input_dim
        U = self.U + [self.U[-1] if self.U else np.zeros(n_u)]
        log.t = np.asarray(self.T, dtype=float)
        log.x = np.asarray(self.X, dtype=float)
        log.x_hat = np.asarray(self.XH, dtype=float)
        log.u = np.asarray(U, dtype=float).reshape(len(U), n_u)
        log.cycle_index = np.asarray(self.C, dtype=int)
        modes = self.M + [self.M[-1] if self.M else "mpc"]
        log.mode = np.asarray(modes)


def _run(scenario):
    sc = scenario
    region = sc.region
    total = sc.sim_horizon + sc.dwell + 1.0
    if sc.disturbance.kind == "none" or sc.disturbance.bound == 0:
        dist = make_disturbance(0.0, sc.disturbance.hold, total, sc.disturbance.seed, region.P_f)
    else:
        dist = make_disturbance(sc.disturbance.bound, sc.disturbance.hold, total,
                                sc.disturbance.seed, region.P_f)
    eng = _Engine(sc, dist)
    log = SimLog(sc, region)
    alpha = region.alpha
    k = 0
    prev = None
    t_prev = 0.0
    params = None

    def fail(exc_type, msg):
        log.status = "initial_infeasible" if exc_type is InitialInfeasible else "feasibility_lost"
        eng.finish(log)
        raise exc_type(msg, log)

    while True:
        t_k = eng.t
        if sc.mode == "periodic" and prev is not None and prev_delta > prev.T_star_k + 1e-12:
            log.events.append(Event(t_k, "feasibility_lost", k, detail="delta_exceeds_T_star"))
            fail(FeasibilityLost, f"sampling interval {prev_delta:.6g} exceeds "
                                  f"T*_{k - 1}={prev.T_star_k:.6g}")
        if contains(log.region, eng.x, "outer"):
            log.switch_time = t_k
            log.events.append(Event(t_k, "mode_switch", k))
            break
        if t_k >= sc.sim_horizon - 1e-12:
            log.status = "horizon_reached"
            eng.finish(log)
            return log
        if k == 0:
            T_k = sc.T_0
            warm = None
        else:
            T_k = _ocp.shrink_horizon(prev.T_star_k, prev_delta, alpha)
            warm = _ocp.shifted_candidate(prev, sc.model, log.region, eng.x, t_k, t_prev, T_k,
                                          sc.n_segments, sc.options.steps_per_segment,
                                          sc.options.backend)
        spec = _ocp.OcpSpec(sc.model, eng.x.copy(), t_k, T_k, region.Q, region.R, log.region,
                            sc.n_segments, warm, sc.options)
        try:
            sol = _ocp.solve(spec)
        except InfeasibleError as exc:
            log.events.append(Event(t_k, "ocp_failed", k, detail=str(exc)))
            fail(InitialInfeasible if k == 0 else FeasibilityLost,
                 f"OCP at t={t_k:.6g} (k={k}) infeasible: {exc}")
        if not sol.terminal_Vf <= region.epsilon_f ** 2 * (1 + _ocp.TERMINAL_RTOL):
            fail(InitialInfeasible if k == 0 else FeasibilityLost,
                 f"OCP at t={t_k:.6g} (k={k}) missed the terminal set")
        T_star = sol.T_star_k
        if k == 0:
            log.region = set_T_star_0(log.region, T_star)
            params = _trig.TriggerParams(log.region, sc.gamma)
            bound = sc.disturbance.bound if sc.disturbance.kind == "random" else 0.0
            log.certified = bound <= log.region.certified_bound
        eng.resync()
        dmin = _trig.delta_min(log.region, min(T_star, log.region.T_star_0))
        log.events.append(Event(t_k, "measurement", k, m=0, detail="ocp_instant"))
        log.events.append(Event(t_k, "ocp_solve", k, T_star=T_star, delta_min=dmin))
        cyc = Cycle(k, t_k, T_k, T_star, dmin, "", sol.cost, sol.terminal_Vf, sol.converged,
                    sol.projected_grad_norm)
        if sc.mode == "event":
            dec = _trig.sds_decide(params, T_star, t_k)
            if dec.samples:
                cyc.branch = "sample"
                d = dec.delta_star
                mi = 1
                while True:
                    eng.advance_mpc(t_k + mi * d, sol.u_star, k)
                    v = _trig.ets_check(params, eng.x, eng.xh, mi, d, T_star)
                    log.events.append(Event(eng.t, "measurement", k, m=mi, deviation=v.deviation,
                                            threshold=v.threshold, delta_star=d, T_star=T_star,
                                            detail="ets"))
                    log.events.append(Event(eng.t, "ets_continue" if v.continue_ else "ets_stop",
                                            k, m=mi, deviation=v.deviation, threshold=v.threshold,
                                            delta_star=d, T_star=T_star,
                                            detail="negative_threshold" if v.negative_threshold
                                            else ""))
                    if not v.continue_:
                        break
                    mi += 1
                cyc.evaluations = mi
            else:
                cyc.branch = "direct"
                log.events.append(Event(t_k, "sds_direct", k, delta_min=dmin, T_star=T_star))
                eng.advance_mpc(dec.t_next, sol.u_star, k)
        elif sc.mode == "self":
            cyc.branch = "self"
            eng.advance_mpc(t_k + min(dmin, T_star), sol.u_star, k)
        else:
            cyc.branch = "periodic"
            if sc.h_ctrl > T_k:
                prev_delta = sc.h_ctrl
                prev = sol
                log.cycles.append(cyc)
                log.events.append(Event(t_k, "feasibility_lost", k, detail="delta_exceeds_T_k"))
                fail(FeasibilityLost, f"sampling interval {sc.h_ctrl:.6g} exceeds the "
                                      f"prediction horizon {T_k:.6g}")
            eng.advance_mpc(t_k + sc.h_ctrl, sol.u_star, k)
        cyc.delta = eng.t - t_k
        log.cycles.append(cyc)
        prev, prev_delta, t_prev = sol, cyc.delta, t_k
        k += 1

    eng.advance_local(eng.t + sc.dwell, sc.local)
    log.status = "converged"
    eng.finish(log)
    return log


def run_event_triggered(scenario):
    return _run(replace(scenario, mode="event"))


def run_self_triggered(scenario):
    return _run(replace(scenario, mode="self"))


def run_periodic(scenario):
    return _run(replace(scenario, mode="periodic"))


def run(scenario):
    return _run(scenario)


# ---------------------------------------------------------------- oracles

def _cycle_rows(log):
    for c in log.cycles:
        idx = np.nonzero(log.cycle_index == c.k)[0]
        if c.k == 0:
            idx = idx[idx > 0]
        yield c, idx


TIME_SLACK = 1e-12  # grid times are sums of substeps; allow round-off at cycle ends


def feasibility_violations(log):
    """Dense-grid instants where the continuous feasibility predicate fails."""
    bad = []
    for c, idx in _cycle_rows(log):
        for i in idx:
            elapsed = max(0.0, log.t[i] - c.t_k - TIME_SLACK)
            if not _trig.continuous_feasibility(log.x[i], log.x_hat[i], elapsed,
                                                c.T_star, log.region):
                bad.append((c.k, float(log.t[i])))
    return bad


def gronwall_slack(log):
    """Smallest bound - deviation over every dense-grid instant of every cycle."""
    reg = log.region
    worst = math.inf
    for c, idx in _cycle_rows(log):
        if len(idx) == 0:
            continue
        dev = weighted_norm(reg.norm, log.x[idx] - log.x_hat[idx])
        bnd = np.array([_trig.deviation_bound(reg.w_tilde_max, reg.L_f, t - c.t_k)
                        for t in log.t[idx]])
        worst = min(worst, float(np.min(bnd - dev)))
    return worst


def telescoping_slack(log):
    """min over cycles of T*_0 - alpha (t_k - t_0) - T*_k."""
    reg = log.region
    return min((reg.T_star_0 - reg.alpha * c.t_k - c.T_star for c in log.cycles),
               default=math.inf)
