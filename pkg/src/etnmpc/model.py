"""Continuous-time plant models, RK4 trajectories and weighted norms."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import ContractViolation, IntegrationDiverged
from .kernels import kernel_for

FD_STEP = 1e-6
LIPSCHITZ_SAFETY = 1.05
_GRID_TOL = 1e-9
_CHUNK = 1000


def fmt(v):
    """Shortest text that parses back to the same double."""
    return repr(float(v))


@dataclass(frozen=True)
class SystemModel:
    """x' = rhs(x, u) with the input set given as a box.

    ``rhs`` must accept single vectors and stacked rows alike.  ``kernel``
    names a compiled right-hand side (``("chen_allgower", [mu])`` or
    ``("linear", A ++ B)``); models without one run on the numpy fallback.
    """

    state_dim: int
    input_dim: int
    rhs: Callable
    input_box: tuple
    jacobians_at_origin: Optional[tuple] = None
    name: str = "custom"
    kernel: Optional[tuple] = None
    _cache: dict = field(default_factory=dict, compare=False, repr=False)

    def __post_init__(self):
        if self.state_dim < 1 or self.input_dim < 1:
            raise ContractViolation("dimensions must be positive")
        lo = np.asarray(self.input_box[0], dtype=float).reshape(self.input_dim)
        hi = np.asarray(self.input_box[1], dtype=float).reshape(self.input_dim)
        if np.any(lo > hi):
            raise ContractViolation("input box lower bound exceeds upper bound")
        if np.any(lo > 0) or np.any(hi < 0):
            raise ContractViolation("input box must contain the zero input")
        object.__setattr__(self, "input_box", (lo, hi))
        f0 = np.asarray(self.rhs(np.zeros(self.state_dim), np.zeros(self.input_dim)), dtype=float)
        if f0.shape != (self.state_dim,):
            raise ContractViolation(f"rhs returned shape {f0.shape}, expected ({self.state_dim},)")
        if np.max(np.abs(f0)) > 1e-12:
            raise ContractViolation("rhs(0, 0) must vanish")

    @property
    def u_lower(self):
        return self.input_box[0]

    @property
    def u_upper(self):
        return self.input_box[1]

    def project(self, u):
        return np.clip(u, self.input_box[0], self.input_box[1])

    def in_box(self, u):
        u = np.asarray(u, dtype=float)
        return bool(np.all(u >= self.input_box[0]) and np.all(u <= self.input_box[1]))

    def kernel_impl(self, backend=None):
        key = ("kernel", backend)
        if key not in self._cache:
            self._cache[key] = kernel_for(self, backend)
        return self._cache[key]


@dataclass(frozen=True)
class ControlTrajectory:
    """Piecewise-constant input: ``values[j]`` holds on segment j."""

    t_start: float
    segment_width: float
    values: np.ndarray

    def __post_init__(self):
        vals = np.array(self.values, dtype=float)
        if vals.ndim == 1:
            vals = vals[:, None]
        if vals.ndim != 2 or len(vals) == 0:
            raise ContractViolation("control values must be a non-empty (N, m) array")
        if not self.segment_width > 0:
            raise ContractViolation("segment_width must be positive")
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)

    @property
    def n_segments(self):
        return len(self.values)

    @property
    def duration(self):
        return self.n_segments * self.segment_width

    @property
    def t_end(self):
        return self.t_start + self.duration

    def index_at(self, t):
        j = int(math.floor((t - self.t_start) / self.segment_width + 1e-9))
        return min(max(j, 0), self.n_segments - 1)

    def value_at(self, t):
        return self.values[self.index_at(t)]

    def boundaries(self):
        return self.t_start + self.segment_width * np.arange(self.n_segments + 1)

    def to_csv(self, path):
        m = self.values.shape[1]
        rows = [[fmt(self.t_start + j * self.segment_width)] + [fmt(v) for v in self.values[j]]
                for j in range(self.n_segments)]
        _write_csv(path, ["t"] + [f"u{i + 1}" for i in range(m)], rows)


@dataclass(frozen=True)
class StateTrajectory:
    t_start: float
    step: float
    states: np.ndarray

    def __post_init__(self):
        st = np.array(self.states, dtype=float)
        if st.ndim != 2 or len(st) == 0:
            raise ContractViolation("states must be a non-empty (K, n) array")
        if not self.step > 0:
            raise ContractViolation("step must be positive")
        st.setflags(write=False)
        object.__setattr__(self, "states", st)

    @property
    def times(self):
        return self.t_start + self.step * np.arange(len(self.states))

    @property
    def t_end(self):
        return self.t_start + self.step * (len(self.states) - 1)

    @property
    def final(self):
        return self.states[-1]

    def to_csv(self, path):
        n = self.states.shape[1]
        rows = [[fmt(t)] + [fmt(v) for v in x] for t, x in zip(self.times, self.states)]
        _write_csv(path, ["t"] + [f"x{i + 1}" for i in range(n)], rows)


@dataclass(frozen=True)
class DisturbanceSignal:
    """Piecewise-constant disturbance held for ``hold`` seconds per sample."""

    t_start: float
    hold: float
    samples: np.ndarray
    seed: Optional[int] = None
    bound: float = 0.0

    def __post_init__(self):
        s = np.array(self.samples, dtype=float)
        if s.ndim != 2:
            raise ContractViolation("disturbance samples must be (K, n)")
        if not self.hold > 0:
            raise ContractViolation("hold must be positive")
        s.setflags(write=False)
        object.__setattr__(self, "samples", s)

    @classmethod
    def zero(cls, n, t_start=0.0, hold=1.0):
        return cls(t_start, hold, np.zeros((1, n)), None, 0.0)

    def index_at(self, t):
        k = int(math.floor((t - self.t_start) / self.hold + 1e-9))
        return min(max(k, 0), len(self.samples) - 1)

    def value_at(self, t):
        return self.samples[self.index_at(t)]

    def boundaries_in(self, a, b):
        k0 = math.ceil((a - self.t_start) / self.hold - 1e-9)
        k1 = math.floor((b - self.t_start) / self.hold + 1e-9)
        return [self.t_start + k * self.hold for k in range(max(k0, 0), k1 + 1)]


@dataclass(frozen=True)
class WeightedNorm:
    P: np.ndarray
    cholesky_factor: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        P = np.array(self.P, dtype=float)
        if P.ndim != 2 or P.shape[0] != P.shape[1]:
            raise ContractViolation("P must be square")
        if not np.allclose(P, P.T, rtol=0, atol=1e-14 * max(1.0, np.abs(P).max())):
            raise ContractViolation("P must be symmetric")
        P = 0.5 * (P + P.T)
        try:
            L = np.linalg.cholesky(P)
        except np.linalg.LinAlgError as exc:
            raise ContractViolation("P must be positive definite") from exc
        P.setflags(write=False)
        L.setflags(write=False)
        object.__setattr__(self, "P", P)
        object.__setattr__(self, "cholesky_factor", L)

    @property
    def dim(self):
        return self.P.shape[0]

    def __call__(self, x):
        return weighted_norm(self, x)

    def sqrt_inv(self):
        """Symmetric P^{-1/2} via eigen-decomposition."""
        w, V = np.linalg.eigh(self.P)
        return (V / np.sqrt(w)) @ V.T


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(header)
        wr.writerows(rows)


def _check_dims(model, x, u=None):
    x = np.asarray(x, dtype=float)
    if x.shape[-1:] != (model.state_dim,):
        raise ContractViolation(f"state has shape {x.shape}, model expects n={model.state_dim}")
    if u is not None:
        u = np.asarray(u, dtype=float)
        if u.shape[-1:] != (model.input_dim,):
            raise ContractViolation(
                f"input has shape {u.shape}, model expects m={model.input_dim}")
    return x, u


def eval_rhs(model, x, u):
    x, u = _check_dims(model, x, u)
    return np.asarray(model.rhs(x, u), dtype=float)


def weighted_norm(P, x):
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != P.dim:
        raise ContractViolation("dimension mismatch in weighted norm")
    return np.linalg.norm(x @ P.cholesky_factor, axis=-1)


def _divides(step, span):
    r = span / step
    return abs(r - round(r)) <= _GRID_TOL * max(1.0, r)


def _first_bad(X, t0, h):
    bad = ~np.all(np.isfinite(X), axis=1)
    if bad.any():
        raise IntegrationDiverged(t0 + h * int(np.argmax(bad)))


def integrate_disturbed(model, x0, u, w, duration, step, backend=None):
    """Fixed-step RK4 on f(x, u) + w(t); inputs are sampled at step midpoints."""
    x0, _ = _check_dims(model, x0)
    if not np.all(np.isfinite(x0)):
        raise ContractViolation("initial state must be finite")
    if not (step > 0 and duration > 0):
        raise ContractViolation("step and duration must be positive")
    if not (_divides(step, u.segment_width) and _divides(step, duration)):
        raise ContractViolation("step must divide both the segment width and the duration")
    if duration > u.duration * (1 + _GRID_TOL) + _GRID_TOL:
        raise ContractViolation("duration exceeds the control trajectory")
    if not model.in_box(u.values):
        raise ContractViolation("control values leave the input box")
    K = int(round(duration / step))
    mids = u.t_start + step * (np.arange(K) + 0.5)
    U = u.values[[u.index_at(t) for t in mids]]
    if w is None:
        W = np.zeros((K, model.state_dim))
    else:
        W = np.array([w.value_at(t) for t in mids]).reshape(K, model.state_dim)
    X = model.kernel_impl(backend).rk4_steps(x0, U, W, np.full(K, float(step)))
    _first_bad(X, u.t_start, step)
    return StateTrajectory(u.t_start, float(step), X)


def integrate_nominal(model, x0, u, duration, step, backend=None):
    return integrate_disturbed(model, x0, u, None, duration, step, backend)


def _central_jacobians(model, h):
    n, m = model.state_dim, model.input_dim
    A = np.empty((n, n))
    B = np.empty((n, m))
    zx, zu = np.zeros(n), np.zeros(m)
    for i in range(n):
        e = np.zeros(n)
        e[i] = h
        A[:, i] = (model.rhs(zx + e, zu) - model.rhs(zx - e, zu)) / (2 * h)
    for i in range(m):
        e = np.zeros(m)
        e[i] = h
        B[:, i] = (model.rhs(zx, zu + e) - model.rhs(zx, zu - e)) / (2 * h)
    return A, B


def linearize_at_origin(model, numeric=False):
    """(A_f, B_f) at the origin; analytic when the model carries them."""
    key = ("jac", bool(numeric))
    if key in model._cache:
        return model._cache[key]
    if model.jacobians_at_origin is not None and not numeric:
        A, B = (np.array(M, dtype=float) for M in model.jacobians_at_origin)
    else:
        A, B = _central_jacobians(model, FD_STEP)
        A2, B2 = _central_jacobians(model, FD_STEP / 2)
        scale = max(1.0, np.abs(A).max(), np.abs(B).max())
        if max(np.abs(A - A2).max(), np.abs(B - B2).max()) > 1e-6 * scale:
            raise ContractViolation("finite-difference Jacobians unstable under step halving")
    A.setflags(write=False)
    B.setflags(write=False)
    model._cache[key] = (A, B)
    return A, B


def _ball_samples(rng, count, dim, radius):
    d = rng.standard_normal((count, dim))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    r = radius * rng.random(count) ** (1.0 / dim)
    return d * r[:, None]


def estimate_lipschitz(model, P, domain_radius, n_samples, seed):
    """Sampled Lipschitz modulus of f(., u) in the P-weighted norm, times 1.05.

    Samples come in fixed chunks seeded by (seed, chunk index), so a larger
    ``n_samples`` only ever adds pairs to the same prefix.
    """
    if n_samples < 1000:
        raise ContractViolation("n_samples must be at least 1000")
    if not domain_radius > 0:
        raise ContractViolation("domain_radius must be positive")
    n, m = model.state_dim, model.input_dim
    Linv_T = np.linalg.inv(P.cholesky_factor).T
    lo, hi = model.input_box
    # unbounded input directions are sampled on [-1, 1]
    lo = np.where(np.isfinite(lo), lo, -1.0)
    hi = np.where(np.isfinite(hi), hi, 1.0)
    best = 0.0
    done = 0
    chunk = 0
    while done < n_samples:
        rng = np.random.default_rng([int(seed), chunk])
        z1 = _ball_samples(rng, _CHUNK, n, domain_radius)
        z2 = _ball_samples(rng, _CHUNK, n, domain_radius)
        u = lo + (hi - lo) * rng.random((_CHUNK, m))
        take = min(_CHUNK, n_samples - done)
        x1 = z1[:take] @ Linv_T.T
        x2 = z2[:take] @ Linv_T.T
        u = u[:take]
        dx = weighted_norm(P, x1 - x2)
        df = weighted_norm(P, model.rhs(x1, u) - model.rhs(x2, u))
        ok = dx > 0
        if ok.any():
            best = max(best, float(np.max(df[ok] / dx[ok])))
        done += take
        chunk += 1
    return LIPSCHITZ_SAFETY * best


# --- model registry --------------------------------------------------------

def chen_allgower(mu=0.8, u_max=2.0):
    """Benchmark plant: x1' = x2 + u(mu + (1-mu)x1), x2' = x1 + u(mu - 4(1-mu)x2)."""
    mu = float(mu)

    def rhs(x, u):
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float)
        x1, x2, v = x[..., 0], x[..., 1], u[..., 0]
        return np.stack([x2 + v * (mu + (1 - mu) * x1),
                         x1 + v * (mu - 4 * (1 - mu) * x2)], axis=-1)

    A = np.array([[0.0, 1.0], [1.0, 0.0]])
    B = np.array([[mu], [mu]])
    return SystemModel(2, 1, rhs, ([-u_max], [u_max]), (A, B), "chen_allgower",
                       ("chen_allgower", np.array([mu])))


def linear_model(A, B, u_min=None, u_max=None, name="linear"):
    A = np.atleast_2d(np.array(A, dtype=float))
    B = np.array(B, dtype=float).reshape(A.shape[0], -1)
    m = B.shape[1]
    lo = np.full(m, -np.inf) if u_min is None else np.broadcast_to(np.asarray(u_min, float), (m,))
    hi = np.full(m, np.inf) if u_max is None else np.broadcast_to(np.asarray(u_max, float), (m,))

    def rhs(x, u):
        return np.asarray(x, dtype=float) @ A.T + np.asarray(u, dtype=float) @ B.T

    params = np.concatenate([A.ravel(), B.ravel()])
    return SystemModel(A.shape[0], m, rhs, (lo, hi), (A, B), name, ("linear", params))


MODELS = {"chen_allgower": chen_allgower}


def make_model(name, **params):
    try:
        factory = MODELS[name]
    except KeyError:
        raise ContractViolation(f"unknown model {name!r}; known: {sorted(MODELS)}") from None
    return factory(**params)
