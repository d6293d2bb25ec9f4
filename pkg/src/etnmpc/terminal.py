"""Terminal ingredients: local gain, Lyapunov matrix, invariant ellipsoids."""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
import scipy.linalg as sla

from .errors import (InvalidConfiguration, NotStabilizableError, NotStabilizedError,
                     NumericalFailure, RegionSynthesisFailed, StateError)
from .model import WeightedNorm, fmt, linearize_at_origin

EPS_START = 10.0
EPS_SHRINK = 0.8
EPS_FLOOR = 1e-6


def is_hurwitz(A):
    return bool(np.all(np.linalg.eigvals(A).real < 0))


def solve_lyapunov(A_c, M):
    """P with P A_c + A_c^T P = -M, by a Kronecker-product linear solve."""
    A_c = np.asarray(A_c, dtype=float)
    M = np.asarray(M, dtype=float)
    if not is_hurwitz(A_c):
        raise NotStabilizedError("closed-loop matrix is not Hurwitz")
    n = A_c.shape[0]
    eye = np.eye(n)
    # column-major vec: vec(P A) = (A^T kron I) vec(P), vec(A^T P) = (I kron A^T) vec(P)
    L = np.kron(A_c.T, eye) + np.kron(eye, A_c.T)
    p = np.linalg.solve(L, -M.reshape(-1, order="F"))
    P = p.reshape(n, n, order="F")
    P = 0.5 * (P + P.T)
    resid = np.linalg.norm(P @ A_c + A_c.T @ P + M, 2)
    if resid > 1e-8:
        raise NumericalFailure(f"Lyapunov residual {resid:.3e} exceeds 1e-8")
    if np.min(np.linalg.eigvalsh(P)) <= 0:
        raise NumericalFailure("Lyapunov solution is not positive definite")
    return P


def lyapunov_residual(P, A_c, M):
    return float(np.linalg.norm(P @ A_c + A_c.T @ P + M, 2))


def is_stabilizable(A, B, tol=1e-9):
    n = A.shape[0]
    for lam in np.linalg.eigvals(A):
        if lam.real >= -tol:
            if np.linalg.matrix_rank(np.hstack([A - lam * np.eye(n), B]), tol=1e-8) < n:
                return False
    return True


def design_local_gain(A_f, B_f, Q, R):
    """Continuous-time LQR gain K with u = K x (minus sign already included).

    The Riccati solution comes from the stable invariant subspace of the
    Hamiltonian, using an ordered real Schur form.
    """
    A = np.atleast_2d(np.asarray(A_f, dtype=float))
    B = np.asarray(B_f, dtype=float).reshape(A.shape[0], -1)
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    R = np.atleast_2d(np.asarray(R, dtype=float))
    if not is_stabilizable(A, B):
        raise NotStabilizableError("(A_f, B_f) is not stabilizable")
    n = A.shape[0]
    Rinv = np.linalg.inv(R)
    H = np.block([[A, -B @ Rinv @ B.T], [-Q, -A.T]])
    T, Z, sdim = sla.schur(H, output="real", sort="lhp")
    if sdim != n:
        raise NumericalFailure("Hamiltonian has eigenvalues on the imaginary axis")
    X1, X2 = Z[:n, :n], Z[n:, :n]
    P = np.linalg.solve(X1.T, X2.T).T
    P = 0.5 * (P + P.T)
    K = -Rinv @ B.T @ P
    if not is_hurwitz(A + B @ K):
        raise NumericalFailure("LQR gain failed to stabilize the linearization")
    return K


def closed_loop_matrix(A_f, B_f, K):
    return np.asarray(A_f) + np.asarray(B_f) @ np.asarray(K)


def stage_weight(Q, R, K):
    """Q + K^T R K."""
    K = np.atleast_2d(K)
    return np.asarray(Q, dtype=float) + K.T @ np.atleast_2d(R) @ K


def lambda_min_qp(P_f, M):
    S = WeightedNorm(P_f).sqrt_inv()
    QP = S @ M @ S
    return float(np.linalg.eigvalsh(0.5 * (QP + QP.T))[0]), QP


def _sphere(rng, count, dim):
    d = rng.standard_normal((count, dim))
    return d / np.linalg.norm(d, axis=1, keepdims=True)


def _phi_ratio(model, K, A_c, norm, X):
    """||phi(x)||_P / ||x||_P with phi(x) = f(x, Kx) - A_c x."""
    U = X @ np.atleast_2d(K).T
    phi = model.rhs(X, U) - X @ A_c.T
    return norm(phi) / norm(X)


def find_epsilon(model, K, P_f, Q, R, input_box=None, n_samples=10_000, seed=0):
    """Largest radius on the geometric ladder 10 * 0.8^j passing the sampled certificate.

    On the boundary samples of {x'P_f x = eps^2} require
    ||phi(x)||_P / ||x||_P <= lambda_min(Q_P)/4 and K x inside the input box.
    """
    K = np.atleast_2d(np.asarray(K, dtype=float))
    lo, hi = input_box if input_box is not None else model.input_box
    A_f, B_f = linearize_at_origin(model)
    A_c = closed_loop_matrix(A_f, B_f, K)
    norm = WeightedNorm(P_f)
    lam, _ = lambda_min_qp(norm.P, stage_weight(Q, R, K))
    S = norm.sqrt_inv()
    dirs = _sphere(np.random.default_rng(seed), n_samples, model.state_dim) @ S.T
    eps = EPS_START
    while eps >= EPS_FLOOR:
        X = eps * dirs
        U = X @ K.T
        in_box = np.all((U >= lo) & (U <= hi))
        if in_box and np.max(_phi_ratio(model, K, A_c, norm, X)) <= lam / 4.0:
            return eps
        eps *= EPS_SHRINK
    raise RegionSynthesisFailed("no admissible terminal radius above 1e-6")


@dataclass(frozen=True)
class TerminalRegion:
    P_f: np.ndarray
    K: np.ndarray
    epsilon: float
    epsilon_f: float
    L_f: float
    lambda_min_QP: float
    w_hat_max: float
    alpha: float
    Q: np.ndarray
    R: np.ndarray
    w_tilde_max: Optional[float] = None
    T_star_0: Optional[float] = None
    norm: WeightedNorm = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "norm", WeightedNorm(self.P_f))

    @property
    def certified_bound(self):
        """min(w_hat_max, w_tilde_max): the disturbance cap of the convergence guarantee."""
        if self.w_tilde_max is None:
            return self.w_hat_max
        return min(self.w_hat_max, self.w_tilde_max)

    def V_f(self, x):
        x = np.asarray(x, dtype=float)
        return np.einsum("...i,ij,...j->...", x, self.P_f, x)

    def as_block(self):
        """Flat key/value view; keys are the ``region.*`` config entries."""
        out = {
            "region.P_f": ", ".join(fmt(v) for v in self.P_f.ravel()),
            "region.K": ", ".join(fmt(v) for v in np.ravel(self.K)),
            "region.K_shape": f"{self.K.shape[0]}, {self.K.shape[1]}",
            "region.epsilon": fmt(self.epsilon),
            "region.epsilon_f": fmt(self.epsilon_f),
            "region.L_f": fmt(self.L_f),
            "region.alpha": fmt(self.alpha),
            "region.lambda_min_QP": fmt(self.lambda_min_QP),
            "region.w_hat_max": fmt(self.w_hat_max),
            "region.Q": ", ".join(fmt(v) for v in self.Q.ravel()),
            "region.R": ", ".join(fmt(v) for v in self.R.ravel()),
        }
        if self.T_star_0 is not None:
            out["region.T_star_0"] = fmt(self.T_star_0)
            out["region.w_tilde_max"] = fmt(self.w_tilde_max)
        return out


def assemble_region(P_f, K, epsilon, epsilon_f, L_f, Q, R, alpha):
    if not 0 < epsilon_f < epsilon:
        raise InvalidConfiguration(f"need 0 < epsilon_f < epsilon, got {epsilon_f} and {epsilon}")
    if not 0 < alpha < 1:
        raise InvalidConfiguration("alpha must lie in (0, 1)")
    if L_f < 0:
        raise InvalidConfiguration("L_f must be non-negative")
    P_f = np.array(P_f, dtype=float)
    K = np.atleast_2d(np.array(K, dtype=float))
    Q = np.atleast_2d(np.array(Q, dtype=float))
    R = np.atleast_2d(np.array(R, dtype=float))
    lam, _ = lambda_min_qp(P_f, stage_weight(Q, R, K))
    for a in (P_f, K, Q, R):
        a.setflags(write=False)
    return TerminalRegion(P_f, K, float(epsilon), float(epsilon_f), float(L_f), lam,
                          float(epsilon) * lam / 4.0, float(alpha), Q, R)


def w_tilde_formula(lam, alpha, epsilon_f, L_f, T_star_0):
    return lam * (1.0 - alpha) * epsilon_f / (4.0 * math.exp(L_f * T_star_0))


def set_T_star_0(region, T_star_0):
    if region.T_star_0 is not None:
        raise StateError("T*_0 already set for this region")
    if not T_star_0 > 0:
        raise InvalidConfiguration("T*_0 must be positive")
    w = w_tilde_formula(region.lambda_min_QP, region.alpha, region.epsilon_f, region.L_f,
                        float(T_star_0))
    return replace(region, T_star_0=float(T_star_0), w_tilde_max=w)


def contains(region, x, which="outer"):
    r = region.epsilon if which == "outer" else region.epsilon_f
    if which not in ("outer", "inner"):
        raise ValueError("which must be 'outer' or 'inner'")
    return bool(region.V_f(x) <= r * r)


@dataclass
class RegionReport:
    n_samples: int
    max_decrease_violation: float
    max_phi_ratio: float
    kappa_in_U_fraction: float
    lyapunov_residual: float
    passed: bool
    notes: list = field(default_factory=list)

    def lines(self):
        yield f"n_samples = {self.n_samples}"
        yield f"max_decrease_violation = {fmt(self.max_decrease_violation)}"
        yield f"max_phi_ratio = {fmt(self.max_phi_ratio)}"
        yield f"kappa_in_U_fraction = {fmt(self.kappa_in_U_fraction)}"
        yield f"lyapunov_residual = {fmt(self.lyapunov_residual)}"
        yield f"passed = {str(self.passed).lower()}"
        for note in self.notes:
            yield f"note = {note}"


def sample_in_region(region, n_samples, rng):
    """Uniform samples in {V_f <= eps^2} by rejection from the unit cube."""
    n = region.P_f.shape[0]
    S = region.norm.sqrt_inv()
    out = []
    have = 0
    while have < n_samples:
        z = rng.uniform(-1.0, 1.0, size=(2 * n_samples, n))
        z = z[np.einsum("ij,ij->i", z, z) <= 1.0]
        out.append(z)
        have += len(z)
    z = np.concatenate(out)[:n_samples]
    return region.epsilon * z @ S.T


def validate_region(region, model, n_samples=10_000, seed=0):
    """Sampled check of dV_f/dx f(x, Kx) <= -x'(Q + K'RK)x / 2 inside the outer set."""
    rng = np.random.default_rng(seed)
    K = region.K
    M = stage_weight(region.Q, region.R, K)
    A_f, B_f = linearize_at_origin(model)
    A_c = closed_loop_matrix(A_f, B_f, K)
    X = sample_in_region(region, n_samples, rng)
    U = X @ K.T
    F = model.rhs(X, U)
    vdot = 2.0 * np.einsum("ij,jk,ik->i", X, region.P_f, F)
    bound = -0.5 * np.einsum("ij,jk,ik->i", X, M, X)
    violation = float(np.max(vdot - bound))
    ratio = 2.0 * _phi_ratio(model, K, A_c, region.norm, X) / region.lambda_min_QP
    edge = region.epsilon * _sphere(rng, n_samples, model.state_dim) @ region.norm.sqrt_inv().T
    lo, hi = model.input_box
    UE = np.vstack([U, edge @ K.T])
    frac = float(np.mean(np.all((UE >= lo) & (UE <= hi), axis=1)))
    resid = lyapunov_residual(region.P_f, A_c, M)
    report = RegionReport(n_samples, violation, float(np.max(ratio)), frac, resid,
                          violation <= 1e-9 and frac == 1.0)
    if resid > 1e-8:
        report.notes.append(f"P_f solves the Lyapunov equation only to {resid:.2e}")
    return report


def fixture_notes(region, reported_w_hat=None, reported_w_tilde=None):
    """Flag reference scalars that cannot be re-derived from the region itself."""
    notes = []
    if reported_w_hat is not None:
        implied = 4.0 * reported_w_hat / region.lambda_min_QP
        if not implied > region.epsilon_f:
            notes.append(
                f"reported w_hat_max={reported_w_hat:g} implies epsilon={implied:.4g}, "
                f"not above epsilon_f={region.epsilon_f:g}; kept as an independent fixture")
    if reported_w_tilde is not None and region.w_tilde_max is not None:
        if not math.isclose(reported_w_tilde, region.w_tilde_max, rel_tol=0.05):
            notes.append(
                f"reported w_tilde_max={reported_w_tilde:g} differs from the formula value "
                f"{region.w_tilde_max:.4g} at T*_0={region.T_star_0:.4g}")
    return notes


def invariance_check(region, model, n_starts=100, n_disturbances=100, duration=5.0,
                     step=0.01, seed=0):
    """Worst V_f / eps^2 over every (boundary start, held disturbance) pair.

    Each disturbance is a random direction scaled to ||w||_P = w_hat_max and
    held for the whole run under the continuous local law u = Kx.
    """
    rng = np.random.default_rng(seed)
    n = model.state_dim
    S = region.norm.sqrt_inv()
    starts = region.epsilon * _sphere(rng, n_starts, n) @ S.T
    dists = region.w_hat_max * _sphere(rng, n_disturbances, n) @ S.T
    X = np.repeat(starts, n_disturbances, axis=0)
    W = np.tile(dists, (n_starts, 1))
    K = region.K

    def f(x):
        return model.rhs(x, x @ K.T) + W

    worst = float(np.max(region.V_f(X)))
    with np.errstate(over="ignore", invalid="ignore"):  # escaping starts may blow up
        for _ in range(int(round(duration / step))):
            k1 = f(X)
            k2 = f(X + 0.5 * step * k1)
            k3 = f(X + 0.5 * step * k2)
            k4 = f(X + step * k3)
            X = X + step / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
            V = region.V_f(X)
            if not np.all(np.isfinite(V)):
                return math.inf
            worst = max(worst, float(np.max(V)))
    return worst / region.epsilon ** 2
