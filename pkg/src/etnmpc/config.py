"""Flat ``key = value`` run configuration with dotted section prefixes.

Lines starting with ``#`` are comments.  Vectors and matrices are comma
separated (matrices row-major).  Key order is irrelevant.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, fields
from typing import Optional

import numpy as np

from .errors import InvalidConfiguration
from .model import WeightedNorm, estimate_lipschitz, fmt, linearize_at_origin, make_model


def parse_text(text):
    out = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InvalidConfiguration(f"line {n}: expected 'key = value', got {raw!r}")
        key, value = (p.strip() for p in line.split("=", 1))
        if not key or "." not in key:
            raise InvalidConfiguration(f"line {n}: key {key!r} lacks a section prefix")
        if key in out:
            raise InvalidConfiguration(f"line {n}: duplicate key {key!r}")
        out[key] = value
    return out


def _floats(s):
    try:
        return tuple(float(v) for v in s.split(",") if v.strip())
    except ValueError as exc:
        raise InvalidConfiguration(f"not a number list: {s!r}") from exc


def _seeds(s):
    seeds = []
    for part in s.split(","):
        part = part.strip()
        if not part:
            continue
        try:
            if "-" in part[1:]:
                a, b = part.split("-", 1)
                seeds.extend(range(int(a), int(b) + 1))
            else:
                seeds.append(int(part))
        except ValueError as exc:
            raise InvalidConfiguration(f"bad seed list {s!r}") from exc
    if not seeds:
        raise InvalidConfiguration("empty seed list")
    return tuple(seeds)


def _seed_text(seeds):
    return ", ".join(str(s) for s in seeds)


def _square(vals, name):
    n = int(round(math.sqrt(len(vals))))
    if n * n != len(vals):
        raise InvalidConfiguration(f"{name} needs n*n entries, got {len(vals)}")
    return np.array(vals).reshape(n, n)


@dataclass(frozen=True)
class RunConfig:
    # model
    model_name: str = "chen_allgower"
    mu: float = 0.8
    u_min: float = -2.0
    u_max: float = 2.0
    # stage cost
    Q: tuple = (0.1, 0.0, 0.0, 0.1)
    R: tuple = (0.05,)
    # region
    region_source: str = "synthesize"
    K: Optional[tuple] = None
    K_sign: float = 1.0
    P_f: Optional[tuple] = None
    L_f: Optional[float] = None
    epsilon: Optional[float] = None
    epsilon_f: float = 0.08
    w_hat_reported: Optional[float] = None
    w_tilde_reported: Optional[float] = None
    synth_samples: int = 10_000
    synth_seed: int = 0
    lipschitz_samples: int = 20_000
    lipschitz_radius: Optional[float] = None
    # scenario
    x0: tuple = (2.693, 0.0)
    T_0: float = 4.0
    alpha: float = 0.8
    gamma: float = 1.0
    mode: str = "event"
    h_ctrl: float = 0.1
    sim_horizon: float = 10.0
    max_step: float = 1e-3
    local_mode: str = "sample_and_hold"
    local_delta: float = 0.01
    dwell: float = 2.0
    # disturbance
    disturbance_kind: str = "random"
    disturbance_bound: float = 8.3e-4
    disturbance_hold: float = 0.01
    # solver
    n_segments: int = 40
    steps_per_segment: int = 20
    # runs
    seeds: tuple = (0,)
    validate_seeds: tuple = tuple(range(20))
    compare_modes: tuple = ("event",)
    compare_gammas: tuple = (0.2, 1.0)
    reference_counts: tuple = ()  # ((gamma, count), ...)
    verbosity: int = 1

    def __post_init__(self):
        self.check()

    def check(self):
        if self.region_source not in ("synthesize", "fixtures"):
            raise InvalidConfiguration("region.source must be 'synthesize' or 'fixtures'")
        if self.region_source == "fixtures":
            missing = [k for k in ("K", "P_f", "L_f", "epsilon") if getattr(self, k) is None]
            if missing:
                raise InvalidConfiguration(f"fixtures block lacks {', '.join(missing)}")
            if not 0 < self.epsilon_f < self.epsilon:
                raise InvalidConfiguration(
                    f"need 0 < epsilon_f < epsilon, got {self.epsilon_f} and {self.epsilon}")
        else:
            present = [k for k in ("K", "P_f", "L_f", "epsilon") if getattr(self, k) is not None]
            if present:
                raise InvalidConfiguration(
                    f"region.source = synthesize but fixtures given: {', '.join(present)}")
        if not 0 < self.alpha < 1:
            raise InvalidConfiguration("scenario.alpha must lie in (0, 1)")
        if not 0 < self.gamma <= 1:
            raise InvalidConfiguration("scenario.gamma must lie in (0, 1]")
        if self.mode not in ("event", "periodic", "self"):
            raise InvalidConfiguration("scenario.mode must be event, periodic or self")
        if self.u_min > self.u_max:
            raise InvalidConfiguration("model.u_min exceeds model.u_max")
        n = self.Q_matrix.shape[0]
        if len(self.x0) != n:
            raise InvalidConfiguration(
                f"scenario.x0 has {len(self.x0)} entries, cost.Q is {n}x{n}")
        for g in self.compare_gammas:
            if not 0 < g <= 1:
                raise InvalidConfiguration("compare.gammas must lie in (0, 1]")

    # -- conversions -----------------------------------------------------
    @property
    def Q_matrix(self):
        return _square(self.Q, "cost.Q")

    @property
    def R_matrix(self):
        return _square(self.R, "cost.R")

    def replace(self, **kw):
        vals = {f.name: getattr(self, f.name) for f in fields(self)}
        vals.update(kw)
        return RunConfig(**vals)


# key -> (attribute, parser, printer)
def _f(v):
    return fmt(v)


def _vec(v):
    return ", ".join(fmt(x) for x in v)


def _opt(parser):
    return lambda s: None if s.strip().lower() in ("", "none") else parser(s)


_KEYS = {
    "model.name": ("model_name", str, str),
    "model.mu": ("mu", float, _f),
    "model.u_min": ("u_min", float, _f),
    "model.u_max": ("u_max", float, _f),
    "cost.Q": ("Q", _floats, _vec),
    "cost.R": ("R", _floats, _vec),
    "region.source": ("region_source", str, str),
    "region.epsilon_f": ("epsilon_f", float, _f),
    "region.synth_samples": ("synth_samples", int, str),
    "region.synth_seed": ("synth_seed", int, str),
    "region.lipschitz_samples": ("lipschitz_samples", int, str),
    "region.lipschitz_radius": ("lipschitz_radius", _opt(float), _f),
    "fixtures.K": ("K", _floats, _vec),
    "fixtures.K_sign": ("K_sign", float, _f),
    "fixtures.P_f": ("P_f", _floats, _vec),
    "fixtures.L_f": ("L_f", float, _f),
    "fixtures.epsilon": ("epsilon", float, _f),
    "fixtures.w_hat_reported": ("w_hat_reported", float, _f),
    "fixtures.w_tilde_reported": ("w_tilde_reported", float, _f),
    "scenario.x0": ("x0", _floats, _vec),
    "scenario.T_0": ("T_0", float, _f),
    "scenario.alpha": ("alpha", float, _f),
    "scenario.gamma": ("gamma", float, _f),
    "scenario.mode": ("mode", str, str),
    "scenario.h_ctrl": ("h_ctrl", float, _f),
    "scenario.sim_horizon": ("sim_horizon", float, _f),
    "scenario.max_step": ("max_step", float, _f),
    "scenario.local_mode": ("local_mode", str, str),
    "scenario.local_delta": ("local_delta", float, _f),
    "scenario.dwell": ("dwell", float, _f),
    "disturbance.kind": ("disturbance_kind", str, str),
    "disturbance.bound": ("disturbance_bound", float, _f),
    "disturbance.hold": ("disturbance_hold", float, _f),
    "solver.n_segments": ("n_segments", int, str),
    "solver.steps_per_segment": ("steps_per_segment", int, str),
    "run.seeds": ("seeds", _seeds, _seed_text),
    "run.verbosity": ("verbosity", int, str),
    "validate.seeds": ("validate_seeds", _seeds, _seed_text),
    "compare.modes": ("compare_modes", lambda s: tuple(p.strip() for p in s.split(",")),
                      lambda v: ", ".join(v)),
    "compare.gammas": ("compare_gammas", _floats, _vec),
    "reference.counts": ("reference_counts",
                         lambda s: tuple((float(a), int(b)) for a, b in
                                         (p.split(":") for p in s.split(",") if p.strip())),
                         lambda v: ", ".join(f"{fmt(g)}:{c}" for g, c in v)),
}


def from_mapping(mapping, base=None):
    """Build a RunConfig from parsed key/value strings, on top of ``base``."""
    vals = {} if base is None else {f.name: getattr(base, f.name) for f in fields(base)}
    for key, text in mapping.items():
        if key not in _KEYS:
            raise InvalidConfiguration(f"unknown key {key!r}")
        attr, parse, _ = _KEYS[key]
        try:
            vals[attr] = parse(text)
        except InvalidConfiguration:
            raise
        except (ValueError, TypeError) as exc:
            raise InvalidConfiguration(f"{key}: cannot parse {text!r}") from exc
    return RunConfig(**vals)


def to_mapping(cfg):
    defaults = RunConfig()
    out = {}
    for key, (attr, _, show) in _KEYS.items():
        v = getattr(cfg, attr)
        if v is None:
            continue
        if cfg.region_source == "synthesize" and key.startswith("fixtures."):
            if v == getattr(defaults, attr):
                continue
        out[key] = show(v)
    return out


def serialize(cfg):
    m = to_mapping(cfg)
    return "".join(f"{k} = {m[k]}\n" for k in sorted(m))


def parse(text, base=None):
    return from_mapping(parse_text(text), base)


PRESETS = {
    "chen_allgower_sec6": """\
# benchmark scenario; the README explains the choice of x0 and fixtures.epsilon
model.name = chen_allgower
model.mu = 0.8
model.u_min = -2
model.u_max = 2
cost.Q = 0.1, 0, 0, 0.1
cost.R = 0.05
region.source = fixtures
fixtures.K = 1.8042, 1.8042
fixtures.K_sign = -1
fixtures.P_f = 0.0814, 0.0314, 0.0314, 0.0814
fixtures.L_f = 0.53
fixtures.epsilon = 0.0809
region.epsilon_f = 0.08
fixtures.w_hat_reported = 2.0e-3
fixtures.w_tilde_reported = 8.3e-4
scenario.x0 = 2.693, 0
scenario.T_0 = 4.0
scenario.alpha = 0.8
scenario.gamma = 1.0
scenario.mode = event
scenario.h_ctrl = 0.1
scenario.sim_horizon = 10
scenario.max_step = 0.001
scenario.local_mode = sample_and_hold
scenario.local_delta = 0.01
scenario.dwell = 2
disturbance.kind = random
disturbance.bound = 8.3e-4
disturbance.hold = 0.01
solver.n_segments = 40
solver.steps_per_segment = 20
run.seeds = 0
validate.seeds = 0-19
compare.modes = event
compare.gammas = 0.2, 1.0
reference.counts = 0.2:85, 1.0:46
""",
}


def preset(name):
    try:
        return parse(PRESETS[name])
    except KeyError:
        raise InvalidConfiguration(
            f"unknown preset {name!r}; available: {', '.join(sorted(PRESETS))}") from None


# -- builders ----------------------------------------------------------------

def build_model(cfg):
    if cfg.u_min != -cfg.u_max:
        raise InvalidConfiguration("only symmetric input boxes are supported")
    try:
        return make_model(cfg.model_name, mu=cfg.mu, u_max=cfg.u_max)
    except ValueError as exc:
        raise InvalidConfiguration(str(exc)) from exc


def build_region(cfg, model=None):
    """Terminal region from the fixtures block, or synthesized from scratch."""
    from .terminal import (assemble_region, closed_loop_matrix, design_local_gain,
                           find_epsilon, solve_lyapunov, stage_weight)

    model = model or build_model(cfg)
    Q, R = cfg.Q_matrix, cfg.R_matrix
    n, m = model.state_dim, model.input_dim
    if cfg.region_source == "fixtures":
        if len(cfg.K) != n * m or len(cfg.P_f) != n * n:
            raise InvalidConfiguration("fixture K or P_f has the wrong size")
        K = cfg.K_sign * np.array(cfg.K).reshape(m, n)
        P = np.array(cfg.P_f).reshape(n, n)
        return assemble_region(P, K, cfg.epsilon, cfg.epsilon_f, cfg.L_f, Q, R, cfg.alpha)
    A, B = linearize_at_origin(model)
    K = design_local_gain(A, B, Q, R)
    P = solve_lyapunov(closed_loop_matrix(A, B, K), stage_weight(Q, R, K))
    eps = find_epsilon(model, K, P, Q, R, n_samples=cfg.synth_samples, seed=cfg.synth_seed)
    if not cfg.epsilon_f < eps:
        raise InvalidConfiguration(
            f"synthesized epsilon={eps:.4g} does not exceed epsilon_f={cfg.epsilon_f:g}")
    radius = cfg.lipschitz_radius
    if radius is None:
        radius = max(float(WeightedNorm(P)(np.array(cfg.x0))), eps)
    L = estimate_lipschitz(model, WeightedNorm(P), radius, cfg.lipschitz_samples,
                           cfg.synth_seed)
    return assemble_region(P, K, eps, cfg.epsilon_f, L, Q, R, cfg.alpha)


def build_scenario(cfg, region, seed, mode=None, gamma=None, model=None):
    from .closed_loop import DisturbanceSpec, Scenario
    from .ocp import SolverOptions

    model = model or build_model(cfg)
    return Scenario(
        model=model, region=region, x0=np.array(cfg.x0), T_0=cfg.T_0,
        gamma=cfg.gamma if gamma is None else gamma, mode=mode or cfg.mode,
        h_ctrl=cfg.h_ctrl,
        disturbance=DisturbanceSpec(cfg.disturbance_kind, cfg.disturbance_bound,
                                    cfg.disturbance_hold, int(seed)),
        sim_horizon=cfg.sim_horizon, max_step=cfg.max_step, local_mode=cfg.local_mode,
        local_delta=cfg.local_delta, dwell=cfg.dwell, n_segments=cfg.n_segments,
        options=SolverOptions(n_segments=cfg.n_segments,
                              steps_per_segment=cfg.steps_per_segment))
