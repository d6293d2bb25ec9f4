"""Shrinking-horizon optimal control problem solved by single shooting.

Decision variables are the piecewise-constant segment values.  The terminal
constraint V_f(x(T)) <= eps_f^2 is kept as an explicit inequality for SLSQP;
when SQP stalls outside the constraint, an L-BFGS-B pass on log V_f(x(T))
restores feasibility first.  Gradients come from central differences.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.optimize import minimize

from .errors import ContractViolation, InfeasibleError, InternalInconsistency
from .model import ControlTrajectory, StateTrajectory, fmt

TERMINAL_RTOL = 1e-6
FD_STEP = 1e-6
BISECT_TOL = 1e-9


@dataclass(frozen=True)
class SolverOptions:
    n_segments: int = 40
    steps_per_segment: int = 20
    max_iter: int = 500
    # stationarity: KKT residual <= grad_rtol * (1 + |J|)
    grad_rtol: float = 1e-4
    max_rounds: int = 6
    backend: Optional[str] = None


@dataclass(frozen=True)
class OcpSpec:
    model: object
    x_k: np.ndarray
    t_k: float
    T_k: float
    Q: np.ndarray
    R: np.ndarray
    region: object
    n_segments: int = 40
    warm_start: Optional[ControlTrajectory] = None
    options: SolverOptions = field(default_factory=SolverOptions)

    def __post_init__(self):
        if not self.T_k > 0:
            raise ContractViolation(f"horizon must be positive, got {self.T_k}")
        for name in ("Q", "R"):
            M = np.atleast_2d(np.asarray(getattr(self, name), dtype=float))
            if not np.allclose(M, M.T) or np.min(np.linalg.eigvalsh(M)) <= 0:
                raise ContractViolation(f"{name} must be symmetric positive definite")
            object.__setattr__(self, name, M)
        object.__setattr__(self, "x_k", np.array(self.x_k, dtype=float))

    @property
    def segment_width(self):
        return self.T_k / self.n_segments

    @property
    def step(self):
        return self.segment_width / self.options.steps_per_segment


@dataclass(frozen=True)
class OcpSolution:
    u_star: ControlTrajectory
    x_star: StateTrajectory
    cost: float
    T_k: float
    T_star_k: float
    terminal_Vf: float
    solver_iterations: int
    converged: bool
    multiplier: float = 0.0
    projected_grad_norm: float = float("nan")

    def summary(self):
        return {
            "J": fmt(self.cost),
            "T_k": fmt(self.T_k),
            "T_star_k": fmt(self.T_star_k),
            "terminal_Vf": fmt(self.terminal_Vf),
            "iterations": str(self.solver_iterations),
            "converged": str(self.converged).lower(),
        }


def eval_cost(x_traj, u_traj, Q, R):
    """Trapezoid rule for the integral of ||x||_Q^2 + ||u||_R^2 on the state grid."""
    Q = np.atleast_2d(Q)
    R = np.atleast_2d(R)
    ratio = u_traj.segment_width / x_traj.step
    if abs(x_traj.t_start - u_traj.t_start) > 1e-9 or abs(ratio - round(ratio)) > 1e-6:
        raise ContractViolation("state and control grids are not aligned")
    X = x_traj.states
    K = len(X) - 1
    if K == 0:
        return 0.0
    mids = x_traj.t_start + x_traj.step * (np.arange(K) + 0.5)
    U = u_traj.values[[u_traj.index_at(t) for t in mids]]
    q = np.einsum("ij,jk,ik->i", X, Q, X)
    r = np.einsum("ij,jk,ik->i", U, R, U)
    return float(np.sum(x_traj.step * (0.5 * (q[:-1] + q[1:]) + r)))


def shrink_horizon(T_star_prev, delta_prev, alpha):
    if delta_prev > T_star_prev + 1e-9:
        raise ContractViolation(
            f"inter-event time {delta_prev:.6g} exceeds previous entry time {T_star_prev:.6g}")
    T = T_star_prev - alpha * delta_prev
    if not T > 0:
        raise ContractViolation(f"non-positive horizon {T:.6g}")
    return T


def _rk4_single(rhs, x, u, h):
    k1 = rhs(x, u)
    k2 = rhs(x + 0.5 * h * k1, u)
    k3 = rhs(x + 0.5 * h * k2, u)
    k4 = rhs(x + h * k3, u)
    return x + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)


def first_entry_time(x_star, region, model=None, u_star=None, terminal_rtol=TERMINAL_RTOL):
    """Offset from t_k at which the predicted trajectory first enters Phi_f.

    The first grid index with V_f <= eps_f^2 brackets the crossing; with a
    model and control at hand the crossing is refined by bisection on a
    partial RK4 step, otherwise by linear interpolation of V_f.
    """
    target = region.epsilon_f ** 2
    V = region.V_f(x_star.states)
    hits = np.nonzero(V <= target)[0]
    if len(hits) == 0:
        if V[-1] <= target * (1 + terminal_rtol):
            return x_star.step * (len(V) - 1)
        raise InternalInconsistency("no entry into the inner terminal set on the grid")
    i = int(hits[0])
    if i == 0:
        return 0.0
    h = x_star.step
    if model is None or u_star is None:
        frac = (V[i - 1] - target) / (V[i - 1] - V[i])
        return h * (i - 1 + frac)
    x0 = x_star.states[i - 1]
    u = u_star.value_at(x_star.t_start + h * (i - 0.5))
    lo, hi = 0.0, h
    while hi - lo > BISECT_TOL:
        mid = 0.5 * (lo + hi)
        if region.V_f(_rk4_single(model.rhs, x0, u, mid)) <= target:
            hi = mid
        else:
            lo = mid
    return h * (i - 1) + hi


def _resample(warm, t_k, width, N, m):
    mids = t_k + width * (np.arange(N) + 0.5)
    vals = np.array([warm.value_at(t) for t in mids], dtype=float)
    return vals.reshape(N, m)


def shifted_candidate(prev, model, region, x_k, t_k, t_prev, T_k, n_segments,
                      steps_per_segment=20, backend=None):
    """Warm start modelled on the feasible candidate of the recursive-feasibility argument.

    Keep the previous optimal input until the previous predicted entry time
    t_prev + T*_prev, then apply the local gain sample-and-hold per segment
    along the re-predicted trajectory.
    """
    kern = model.kernel_impl(backend)
    width = T_k / n_segments
    h = width / steps_per_segment
    switch = t_prev + prev.T_star_k
    x = np.array(x_k, dtype=float)
    vals = np.empty((n_segments, model.input_dim))
    zeros_w = np.zeros((steps_per_segment, model.state_dim))
    H = np.full(steps_per_segment, h)
    for j in range(n_segments):
        mid = t_k + width * (j + 0.5)
        if mid < switch:
            u = prev.u_star.value_at(mid)
        else:
            u = model.project(region.K @ x)
        vals[j] = u
        X = kern.rk4_steps(x, np.tile(u, (steps_per_segment, 1)), zeros_w, H)
        x = X[-1]
        if not np.all(np.isfinite(x)):
            vals[j + 1:] = 0.0
            break
    return ControlTrajectory(t_k, width, vals)


class _Problem:
    """Caches the last value/gradient evaluation; SLSQP asks for both at each point."""

    def __init__(self, spec):
        self.spec = spec
        o = spec.options
        self.kern = spec.model.kernel_impl(o.backend)
        self.shape = (spec.n_segments, spec.model.input_dim)
        self.sps = o.steps_per_segment
        self.h = spec.step
        self.P = np.ascontiguousarray(spec.region.P_f)
        self.eps_f2 = spec.region.epsilon_f ** 2
        self.lo = np.broadcast_to(spec.model.u_lower, self.shape).ravel()
        self.hi = np.broadcast_to(spec.model.u_upper, self.shape).ravel()
        self.evals = 0
        self._key = None
        self._val = None

    def proj(self, u):
        return np.clip(u, self.lo, self.hi)

    def eval(self, u):
        """(J, g, dJ, dg) with g = V_f(x_T)/eps_f^2 - 1, all flattened."""
        u = np.asarray(u, dtype=float).ravel()
        key = u.tobytes()
        if key != self._key:
            s = self.spec
            U = np.ascontiguousarray(u.reshape(self.shape))
            J, vT, gJ, gV = self.kern.cost_terminal_grad(s.x_k, U, self.sps, self.h, s.Q, s.R,
                                                         self.P, FD_STEP)
            self.evals += 1
            self._key = key
            self._val = (J, vT / self.eps_f2 - 1.0, gJ.ravel(), gV.ravel() / self.eps_f2)
        return self._val


def _multiplier(prob, u, g, dJ, dg, active_tol=1e-4):
    # least-squares multiplier on the inputs not pinned at a bound
    if g < -active_tol:
        return 0.0
    free = (u > prob.lo + 1e-9) & (u < prob.hi - 1e-9)
    den = float(dg[free] @ dg[free])
    if den == 0.0:
        return 0.0
    return max(0.0, -float(dJ[free] @ dg[free]) / den)


def _kkt(prob, u):
    J, g, dJ, dg = prob.eval(u)
    lam = _multiplier(prob, u, g, dJ, dg)
    res = float(np.linalg.norm(prob.proj(u - (dJ + lam * dg)) - u))
    return res, lam


def _sqp(prob, u, opts):
    bounds = list(zip(prob.lo, prob.hi))
    con = {"type": "ineq",
           "fun": lambda v: -prob.eval(v)[1],
           "jac": lambda v: -prob.eval(v)[3]}
    res = minimize(lambda v: prob.eval(v)[0], u, jac=lambda v: prob.eval(v)[2],
                   method="SLSQP", bounds=bounds, constraints=[con],
                   options={"maxiter": opts.max_iter, "ftol": 1e-14})
    u = prob.proj(res.x)
    if not np.isfinite(prob.eval(u)[0]):
        return None, int(res.nit)
    return u, int(res.nit)


def _restore(prob, u, opts):
    """Drive V_f(x_T) down with L-BFGS-B on log V_f; used when SQP stalls infeasible."""
    def fg(v):
        _, g, _, dg = prob.eval(v)
        vt = g + 1.0
        if not np.isfinite(vt) or vt <= 0.0:
            return 1e300, np.zeros_like(v)
        return math.log(vt), dg / vt

    res = minimize(fg, u, jac=True, method="L-BFGS-B", bounds=list(zip(prob.lo, prob.hi)),
                   options={"maxiter": opts.max_iter})
    return prob.proj(res.x), int(res.nit)


def solve(spec):
    """Solve the OCP; raise InfeasibleError when no input meets the terminal constraint."""
    opts = spec.options
    prob = _Problem(spec)
    if spec.warm_start is not None:
        u0 = _resample(spec.warm_start, spec.t_k, spec.segment_width, *prob.shape)
    else:
        u0 = np.zeros(prob.shape)
    u0 = prob.proj(u0.ravel())
    if not np.isfinite(prob.eval(u0)[0]):
        u0 = np.zeros_like(u0)
    tol = TERMINAL_RTOL
    iters = 0
    best = u0
    candidates = [u0]
    for rnd in range(opts.max_rounds):
        start = candidates[-1]
        u, it = _sqp(prob, start, opts)
        iters += it
        if u is not None:
            if prob.eval(u)[1] < prob.eval(best)[1]:
                best = u
            if prob.eval(u)[1] <= tol:
                res, lam = _kkt(prob, u)
                if res <= opts.grad_rtol * (1.0 + abs(prob.eval(u)[0])) or rnd >= 2:
                    return _finish(spec, prob, u, iters, lam, res)
                candidates.append(u)
                continue
        if prob.eval(best)[1] <= tol:
            candidates.append(best)
            continue
        u, it = _restore(prob, best, opts)
        iters += it
        if prob.eval(u)[1] > tol:
            raise InfeasibleError(prob.eps_f2 * (1.0 + min(prob.eval(u)[1], prob.eval(best)[1])),
                                  prob.eps_f2)
        best = u
        candidates.append(u)
    res, lam = _kkt(prob, best)
    return _finish(spec, prob, best, iters, lam, res)


def _finish(spec, prob, u, iters, lam, res):
    U = np.ascontiguousarray(u.reshape(prob.shape))
    X, J = prob.kern.shoot(spec.x_k, U, prob.sps, prob.h, spec.Q, spec.R)
    u_star = ControlTrajectory(spec.t_k, spec.segment_width, U)
    x_star = StateTrajectory(spec.t_k, prob.h, X)
    vT = float(spec.region.V_f(X[-1]))
    feasible = vT <= prob.eps_f2 * (1 + TERMINAL_RTOL)
    converged = feasible and res <= spec.options.grad_rtol * (1.0 + abs(J))
    T_star = first_entry_time(x_star, spec.region, spec.model, u_star) if feasible else math.nan
    return OcpSolution(u_star, x_star, float(J), spec.T_k, T_star, vT, iters, converged,
                       lam, res)


def projected_gradient_norm(spec, solution):
    """KKT residual ||P(u - (dJ + lam dg)) - u|| recomputed from scratch at the returned input."""
    prob = _Problem(spec)
    return _kkt(prob, solution.u_star.values.ravel())[0]
