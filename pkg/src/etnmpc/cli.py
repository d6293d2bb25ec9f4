"""Command-line entry point: ``etnmpc {region,solve,simulate,compare,validate}``.

Exit status: 0 when every asserted property holds, 1 on a property
failure, 2 on a configuration error.
"""
from __future__ import annotations

import argparse
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from . import config as cfgmod
from . import ocp
from . import validation as val
from .closed_loop import MODES
from .errors import EtnmpcError, InvalidConfiguration, RegionSynthesisFailed
from .model import _write_csv, fmt
from .terminal import fixture_notes, validate_region

EXIT_OK, EXIT_FAIL, EXIT_CONFIG = 0, 1, 2
DEFAULT_OUT = "runs"


# -- configuration -------------------------------------------------------------

def _seed_arg(s):
    try:
        return cfgmod._seeds(s)
    except InvalidConfiguration as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _float_list(s):
    try:
        return tuple(float(v) for v in s.split(",") if v.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number list: {s!r}") from None


def load_config(args):
    base = cfgmod.preset(args.preset) if args.preset else None
    if args.config:
        try:
            with open(args.config) as fh:
                text = fh.read()
        except OSError as exc:
            raise InvalidConfiguration(f"cannot read {args.config}: {exc}") from exc
        cfg = cfgmod.parse(text, base)
    elif base is not None:
        cfg = base
    else:
        raise InvalidConfiguration("give --config PATH or --preset NAME")
    over = {}
    if args.seed:
        over["seeds"] = args.seed
        over["validate_seeds"] = args.seed
    if args.mode:
        over["mode"] = args.mode[0]
        over["compare_modes"] = tuple(args.mode)
    if args.gamma:
        over["gamma"] = args.gamma[0]
        over["compare_gammas"] = tuple(args.gamma)
    return cfg.replace(**over) if over else cfg


def out_root(args):
    root = args.out or os.environ.get("ETNMPC_OUT") or DEFAULT_OUT
    try:
        os.makedirs(root, exist_ok=True)
    except OSError as exc:
        raise InvalidConfiguration(f"output directory {root!r} not writable: {exc}") from exc
    if not os.access(root, os.W_OK):
        raise InvalidConfiguration(f"output directory {root!r} not writable")
    return root


def _say(cfg, *lines):
    if cfg.verbosity > 0:
        for line in lines:
            print(line)


# -- workers (module level so they pickle) -------------------------------------------

def _run_one(cfg_text, seed, mode, gamma, directory):
    cfg = cfgmod.parse(cfg_text)
    model = cfgmod.build_model(cfg)
    region = cfgmod.build_region(cfg, model)
    sc = cfgmod.build_scenario(cfg, region, seed, mode, gamma, model)
    chk, log = val.check_run(sc, keep_log=True)
    if directory is not None and log is not None:
        log.write(directory)
    return chk


def _map_runs(cfg, jobs, tasks):
    """tasks: list of (seed, mode, gamma, directory); results come back in task order."""
    text = cfgmod.serialize(cfg)
    if jobs <= 1 or len(tasks) <= 1:
        return [_run_one(text, *t) for t in tasks]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        futs = [pool.submit(_run_one, text, *t) for t in tasks]
        return [f.result() for f in futs]


def _run_dir(root, mode, gamma, seed):
    return os.path.join(root, f"{mode}_gamma{gamma:g}", f"seed_{seed}")


# -- subcommands ---------------------------------------------------------------

def cmd_region(cfg, args):
    model = cfgmod.build_model(cfg)
    region = cfgmod.build_region(cfg, model)
    report = validate_region(region, model, cfg.synth_samples, cfg.synth_seed)
    report.notes.extend(fixture_notes(region, cfg.w_hat_reported))
    root = out_root(args)
    block = region.as_block()
    text = "".join(f"{k} = {block[k]}\n" for k in sorted(block))
    with open(os.path.join(root, "region.cfg"), "w") as fh:
        fh.write(text)
    with open(os.path.join(root, "region_report.txt"), "w") as fh:
        fh.write("".join(f"{line}\n" for line in report.lines()))
    _say(cfg, *report.lines(), *text.splitlines())
    return EXIT_OK if report.passed else EXIT_FAIL


def cmd_solve(cfg, args):
    model = cfgmod.build_model(cfg)
    region = cfgmod.build_region(cfg, model)
    spec = ocp.OcpSpec(model, np.array(cfg.x0), 0.0, cfg.T_0, region.Q, region.R, region,
                       cfg.n_segments,
                       options=ocp.SolverOptions(n_segments=cfg.n_segments,
                                                 steps_per_segment=cfg.steps_per_segment))
    sol = ocp.solve(spec)
    root = out_root(args)
    sol.u_star.to_csv(os.path.join(root, "u_star.csv"))
    sol.x_star.to_csv(os.path.join(root, "x_star.csv"))
    summary = sol.summary()
    summary["kkt_residual"] = fmt(sol.projected_grad_norm)
    with open(os.path.join(root, "solve_summary.txt"), "w") as fh:
        fh.write("".join(f"{k} = {v}\n" for k, v in summary.items()))
    _say(cfg, *(f"{k} = {v}" for k, v in summary.items()))
    return EXIT_OK if sol.converged else EXIT_FAIL


def _run_failed(chk):
    if chk.status in ("feasibility_lost", "initial_infeasible"):
        return True
    return chk.certified and not chk.convergence_time <= chk.bound


def cmd_simulate(cfg, args):
    root = out_root(args)
    tasks = [(s, cfg.mode, cfg.gamma, _run_dir(root, cfg.mode, cfg.gamma, s))
             for s in cfg.seeds]
    checks = _map_runs(cfg, args.jobs, tasks)
    bad = 0
    for chk in checks:
        m = chk.metrics
        ct = m.get("convergence_time")
        _say(cfg, f"seed {chk.seed}: status={chk.status} certified={str(chk.certified).lower()} "
                  f"convergence_time={'none' if ct is None else f'{ct:.4f}'} "
                  f"bound={chk.bound:.4f} ocp_count={m.get('ocp_count')} "
                  f"measurements={m.get('measurement_count')}")
        bad += _run_failed(chk)
    return EXIT_FAIL if bad else EXIT_OK


COMPARE_HEADER = ["mode", "gamma", "seed", "status", "ocp_count", "measurement_count",
                  "ets_evaluations", "convergence_time", "min_delta", "mean_delta"]


def _row(chk, mode, gamma):
    m = chk.metrics

    def o(v):
        return "" if v is None else (str(v) if isinstance(v, int) else fmt(v))

    return [mode, fmt(gamma), str(chk.seed), chk.status, o(m.get("ocp_count")),
            o(m.get("measurement_count")), o(m.get("ets_evaluations")),
            o(m.get("convergence_time")), o(m.get("min_delta")), o(m.get("mean_delta"))]


def gamma_ordering(results, seeds, gammas):
    """Per seed, the measurement count must fall strictly as gamma grows."""
    order = sorted(set(gammas))
    worst = math.inf
    for s in seeds:
        counts = [results[(g, s)].metrics.get("measurement_count") for g in order]
        if any(c is None for c in counts):
            return False, -math.inf
        worst = min([worst] + [a - b for a, b in zip(counts, counts[1:])])
    return worst > 0, worst


def self_vs_event(results, gammas, seeds):
    """min over matched cycles of event Delta_k - self Delta_k."""
    worst = math.inf
    for g in gammas:
        for s in seeds:
            ev = results[("event", g, s)].metrics.get("deltas") or []
            se = results[("self", g, s)].metrics.get("deltas") or []
            worst = min([worst] + [a - b for a, b in zip(ev, se)])
    return worst >= -1e-9, worst


def cmd_compare(cfg, args):
    combos = [(mo, g) for mo in cfg.compare_modes for g in cfg.compare_gammas]
    if len(combos) < 2:
        raise InvalidConfiguration("compare needs at least two (mode, gamma) combinations")
    for mo in cfg.compare_modes:
        if mo not in MODES:
            raise InvalidConfiguration(f"unknown mode {mo!r}")
    root = out_root(args)
    tasks = [(s, mo, g, _run_dir(os.path.join(root, "compare"), mo, g, s))
             for mo, g in combos for s in cfg.seeds]
    checks = _map_runs(cfg, args.jobs, tasks)
    results = {}
    rows = []
    for (s, mo, g, _), chk in zip(tasks, checks):
        results[(mo, g, s)] = chk
        rows.append(_row(chk, mo, g))
    _write_csv(os.path.join(root, "comparison.csv"), COMPARE_HEADER, rows)

    props = []
    if len(set(cfg.compare_gammas)) > 1:
        for mo in dict.fromkeys(cfg.compare_modes):
            if mo != "event":  # gamma only acts on the event-triggered sampler
                continue
            sub = {(g, s): results[(mo, g, s)] for g in cfg.compare_gammas for s in cfg.seeds}
            ok, slack = gamma_ordering(sub, cfg.seeds, cfg.compare_gammas)
            props.append(val.Property(f"gamma_tradeoff[{mo}]", ok, float(slack),
                                      "measurement count falls as gamma grows"))
    nominal = cfg.seeds[0]
    for g, ref in cfg.reference_counts:
        if ("event", g, nominal) not in results:
            continue
        c = results[("event", g, nominal)].metrics.get("measurement_count")
        if c is None:
            props.append(val.Property(f"count_band[gamma={g:g}]", False, detail="run failed"))
            continue
        slack = 0.5 * ref - abs(c - ref)
        props.append(val.Property(f"count_band[gamma={g:g}]", slack >= 0, slack,
                                  f"{c} vs reference {ref} on seed {nominal}"))
    if {"event", "self"} <= set(cfg.compare_modes):
        ok, slack = self_vs_event(results, cfg.compare_gammas, cfg.seeds)
        props.append(val.Property("self_interval_floor", ok, slack,
                                  "self-triggered intervals never exceed event-triggered ones"))
    failed = [c for c in checks if _run_failed(c)]
    if failed:
        props.append(val.Property("runs", False, float(-len(failed)),
                                  f"{len(failed)} runs failed"))
    _say(cfg, *(",".join(r) for r in [COMPARE_HEADER] + rows), *(p.line() for p in props))
    return EXIT_OK if all(p.passed or p.skipped for p in props) else EXIT_FAIL


def cmd_validate(cfg, args):
    model = cfgmod.build_model(cfg)
    region = cfgmod.build_region(cfg, model)
    props = [val.check_lyapunov(region, model),
             val.check_certificate(region, model, cfg.synth_samples, cfg.synth_seed),
             val.check_invariance(region, model, cfg.synth_seed)]
    root = out_root(args)
    tasks = [(s, cfg.mode, cfg.gamma, None) for s in cfg.validate_seeds]
    checks = _map_runs(cfg, args.jobs, tasks)
    with_T0 = next((c.metrics["T_star_0"] for c in checks if c.metrics), None)
    if with_T0 is not None:
        from .terminal import set_T_star_0
        reg0 = set_T_star_0(region, with_T0)
        props += val.check_delta_min(reg0)
        props.append(val.check_ets_soundness(reg0))
    else:
        props += val.check_delta_min(region)[:1]
    props += val.summarize_runs(checks)
    lines = [p.line() for p in props]
    with open(os.path.join(root, "validate_report.txt"), "w") as fh:
        fh.write("".join(f"{line}\n" for line in lines))
    for line in lines:  # the battery always prints
        print(line)
    return EXIT_OK if all(p.passed or p.skipped for p in props) else EXIT_FAIL


COMMANDS = {"region": cmd_region, "solve": cmd_solve, "simulate": cmd_simulate,
            "compare": cmd_compare, "validate": cmd_validate}


def build_parser():
    p = argparse.ArgumentParser(prog="etnmpc", description=__doc__.splitlines()[0])
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH")
    common.add_argument("--preset", metavar="NAME")
    common.add_argument("--seed", type=_seed_arg, metavar="N[,N...]")
    common.add_argument("--out", metavar="DIR")
    common.add_argument("--jobs", type=int, default=1, metavar="N")
    common.add_argument("--mode", type=lambda s: tuple(s.split(",")), metavar="MODE[,MODE...]")
    common.add_argument("--gamma", type=_float_list, metavar="F[,F...]")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sub.add_parser(name, parents=[common])
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    try:
        if args.jobs < 1:
            raise InvalidConfiguration("--jobs must be at least 1")
        if args.mode and any(m not in MODES for m in args.mode):
            raise InvalidConfiguration(f"--mode must be one of {', '.join(MODES)}")
        cfg = load_config(args)
        return COMMANDS[args.command](cfg, args)
    except InvalidConfiguration as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except RegionSynthesisFailed as exc:
        print(f"region synthesis failed: {exc}", file=sys.stderr)
        return EXIT_FAIL
    except EtnmpcError as exc:
        print(f"{type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
