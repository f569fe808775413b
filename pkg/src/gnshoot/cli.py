"""Command-line front end: ``gnshoot solve|mpc|contraction --config run.json``.

Exit codes: 0 converged (or run completed), 1 configuration error,
2 iteration limit or stalled line search, 3 divergence or unstable rollout.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

import jsonschema
import numpy as np

from gnshoot.bench import PROBLEMS, make_problem, run_contraction_study
from gnshoot.core import (
    ConfigurationError,
    GnshootError,
    IntegrationDivergenceError,
    IterationRecord,
    ModelError,
)
from gnshoot.dynamics import Integrator
from gnshoot.nmpc import PlantConfig, create_controller, run_closed_loop
from gnshoot.riccati import Regularization
from gnshoot.solver import (
    InterpolateInit,
    LineSearch,
    ProvidedInit,
    SolverSettings,
    SteadyStateInit,
    VariantConfig,
    solve,
)

log = logging.getLogger("gnshoot")

EXIT_OK, EXIT_CONFIG, EXIT_MAX_ITERS, EXIT_DIVERGED = 0, 1, 2, 3
CONTRACTION_HEADER = ("variant", "M", "mean_rate", "std_rate", "n_converged", "n_excluded")

_number = {"type": "number"}
_weight = {"anyOf": [_number, {"type": "array", "items": _number},
                     {"type": "array", "items": {"type": "array", "items": _number}}]}

CONFIG_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["system"],
    "properties": {
        "system": {"enum": sorted(PROBLEMS)},
        "system_params": {"type": "object"},
        "dt": {"type": "number", "exclusiveMinimum": 0},
        "N": {"type": "integer", "minimum": 1},
        "x_init": {"type": "array", "items": _number, "minItems": 1},
        "integrator": {
            "type": "object", "additionalProperties": False,
            "properties": {"scheme": {"enum": ["rk4", "euler"]},
                           "substeps": {"type": "integer", "minimum": 1}},
        },
        "cost": {
            "type": "object", "additionalProperties": False,
            "properties": {"Q": _weight, "R": _weight, "QN": _weight},
        },
        "variant": {
            "type": "object", "additionalProperties": False, "required": ["type"],
            "properties": {
                "type": {"enum": ["SS", "iLQR", "GNMS", "iLQR-GNMS"]},
                "M": {"anyOf": [{"type": "integer"}, {"const": "N"}]},
                "closed_loop": {"type": "boolean"},
            },
        },
        "init": {
            "type": "object", "additionalProperties": False, "required": ["type"],
            "properties": {
                "type": {"enum": ["steady_state", "interpolate", "provided"]},
                "parameters": {"type": "object"},
            },
        },
        "termination": {
            "type": "object", "additionalProperties": False,
            "properties": {"j_rel_min": {"type": "number", "exclusiveMinimum": 0},
                           "d_max": {"type": "number", "exclusiveMinimum": 0},
                           "max_iters": {"type": "integer", "minimum": 1}},
        },
        "line_search": {
            "type": "object", "additionalProperties": False,
            "properties": {"enabled": {"type": "boolean"},
                           "rho": {"type": "number", "minimum": 0}},
        },
        "mpc": {
            "type": "object", "additionalProperties": False,
            "properties": {"duration": {"type": "number", "minimum": 0},
                           "shift": {"type": "boolean"},
                           "noise_std": {"type": "number", "minimum": 0},
                           "plant_substeps": {"type": "integer", "minimum": 1}},
        },
        "contraction": {
            "type": "object", "additionalProperties": False,
            "properties": {"samples": {"type": "integer", "minimum": 1},
                           "scale": {"type": "number", "minimum": 0},
                           "K": {"type": "integer", "minimum": 2},
                           "variants": {"type": "array", "items": {"type": "string"},
                                        "minItems": 1}},
        },
        "seed": {"type": "integer", "minimum": 0},
        "threads": {"type": "integer", "minimum": 1},
    },
}


# ---------------------------------------------------------------------------
# config handling


def load_config(path) -> dict:
    try:
        with open(path) as fh:
            cfg = json.load(fh)
    except OSError as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"config {path} is not valid JSON: {exc}") from None
    validate_config(cfg)
    return cfg


def validate_config(cfg: dict) -> None:
    try:
        jsonschema.validate(cfg, CONFIG_SCHEMA)
    except jsonschema.ValidationError as exc:
        where = ".".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigurationError(f"config field {where}: {exc.message}") from None


def config_hash(cfg: dict) -> str:
    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def resolve_threads(cli_value: int | None, cfg: dict) -> int:
    if cli_value is not None:
        return max(1, cli_value)
    if "threads" in cfg:
        return cfg["threads"]
    env = os.environ.get("GNSHOOT_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise ConfigurationError(f"GNSHOOT_THREADS must be an integer, got {env!r}") from None
    return os.cpu_count() or 1


def build_problem(cfg: dict):
    params = dict(cfg.get("system_params", {}))
    for key in ("dt", "N"):
        if key in cfg:
            params[key] = cfg[key]
    if "x_init" in cfg:
        params["x_init"] = cfg["x_init"]
    params.update(cfg.get("cost", {}))
    integ = cfg.get("integrator", {})
    params.update({k: v for k, v in integ.items()})
    try:
        problem = make_problem(cfg["system"], **params)
    except TypeError as exc:
        raise ConfigurationError(f"invalid system_params for {cfg['system']}: {exc}") from None
    except (ValueError, ModelError) as exc:
        raise ConfigurationError(f"invalid problem definition: {exc}") from None
    return problem


def build_variant(cfg: dict, N: int) -> VariantConfig:
    spec = cfg.get("variant", {"type": "iLQR"})
    kind = spec["type"]
    M = spec.get("M")
    if kind in ("SS", "iLQR"):
        if M not in (None, 1):
            raise ConfigurationError(f"variant.M must be 1 for {kind}, got {M}")
        variant = VariantConfig(1, kind == "iLQR")
    elif kind == "GNMS":
        variant = VariantConfig(None if M in (None, "N") else M, False)
    else:
        if M is None:
            raise ConfigurationError("variant.M is required for iLQR-GNMS")
        variant = VariantConfig(None if M == "N" else M, True)
    if "closed_loop" in spec and spec["closed_loop"] != variant.closed_loop:
        raise ConfigurationError(
            f"variant.closed_loop={spec['closed_loop']} contradicts variant.type={kind}")
    if variant.M is not None and not 1 <= variant.M <= N:
        raise ConfigurationError(f"variant.M = {variant.M} must lie in [1, N = {N}]")
    return variant


def build_init(cfg: dict):
    spec = cfg.get("init", {"type": "steady_state"})
    par = spec.get("parameters", {})
    try:
        if spec["type"] == "steady_state":
            return SteadyStateInit(None if "x" not in par else np.asarray(par["x"], float))
        if spec["type"] == "interpolate":
            return InterpolateInit(np.asarray(par["x_goal"], float))
        return ProvidedInit(np.asarray(par["X"], float), np.asarray(par["U"], float),
                            None if "L" not in par else np.asarray(par["L"], float))
    except KeyError as exc:
        raise ConfigurationError(f"init.parameters is missing {exc}") from None


def build_settings(cfg: dict, line_search: bool | None = None) -> SolverSettings:
    term = cfg.get("termination", {})
    ls = cfg.get("line_search", {})
    enabled = ls.get("enabled", False) if line_search is None else line_search
    return SolverSettings(d_max=term.get("d_max", 1e-6), J_rel_min=term.get("j_rel_min", 1e-6),
                          max_iters=term.get("max_iters", 100),
                          line_search=LineSearch(enabled=enabled, rho=ls.get("rho", 10.0)),
                          regularization=Regularization())


def _apply_overrides(cfg: dict, args) -> dict:
    cfg = json.loads(json.dumps(cfg))
    if getattr(args, "variant", None):
        v = VariantConfig.parse(args.variant)
        kind = {(True, True): "iLQR", (True, False): "SS"}.get(
            (v.M == 1, v.closed_loop), "iLQR-GNMS" if v.closed_loop else "GNMS")
        cfg["variant"] = {"type": kind}
        if v.M not in (None, 1) or kind in ("GNMS", "iLQR-GNMS"):
            cfg["variant"]["M"] = "N" if v.M is None else v.M
    if getattr(args, "intervals", None) is not None:
        spec = cfg.setdefault("variant", {"type": "iLQR-GNMS"})
        # an interval count turns the single-interval variants into their hybrids
        spec["type"] = {"SS": "GNMS", "iLQR": "iLQR-GNMS"}.get(spec["type"], spec["type"])
        spec["M"] = args.intervals
    if getattr(args, "seed", None) is not None:
        cfg["seed"] = args.seed
    if getattr(args, "line_search", False):
        cfg.setdefault("line_search", {})["enabled"] = True
    if getattr(args, "shift", False):
        cfg.setdefault("mpc", {})["shift"] = True
    if getattr(args, "duration", None) is not None:
        cfg.setdefault("mpc", {})["duration"] = args.duration
    if getattr(args, "samples", None) is not None:
        cfg.setdefault("contraction", {})["samples"] = args.samples
    validate_config(cfg)
    return cfg


def _fmt(x) -> str:
    return repr(float(x)) if isinstance(x, (float, np.floating)) else str(x)


def _open_out(path, cfg: dict):
    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    fh = open(out, "w", newline="")
    fh.write(f"# config_sha256={config_hash(cfg)} seed={cfg.get('seed', 0)}\n")
    return fh


# ---------------------------------------------------------------------------
# commands


def cmd_solve(args) -> int:
    cfg = _apply_overrides(load_config(args.config), args)
    problem = build_problem(cfg)
    variant = build_variant(cfg, problem.N)
    settings = build_settings(cfg)
    init = build_init(cfg)
    dump_iter = _parse_dump(args.dump_lq)
    out = Path(args.out or "solve.csv")

    def callback(info):
        if dump_iter is not None and info.record.iter == dump_iter:
            info.lq.to_json(out.with_suffix(f".lq_iter{dump_iter}.json"))

    try:
        result = solve(problem, variant, settings, init, callback)
    except IntegrationDivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    with _open_out(out, cfg) as fh:
        writer = csv.writer(fh)
        writer.writerow(IterationRecord.CSV_HEADER)
        for rec in result.records:
            writer.writerow([_fmt(v) for v in rec.as_row()])
    print(f"{variant.label}: status={result.status} iterations={result.iterations} "
          f"cost={result.cost!r}")
    if result.status == "converged":
        return EXIT_OK
    if result.status in ("max_iters", "stalled"):
        return EXIT_MAX_ITERS
    print(f"error: {result.status}: {result.message}", file=sys.stderr)
    return EXIT_DIVERGED


def _parse_dump(value) -> int | None:
    if value is None:
        return None
    text = value.split("=", 1)[1] if "=" in value else value
    try:
        k = int(text)
    except ValueError:
        raise ConfigurationError(f"--dump-lq expects iter=<k>, got {value!r}") from None
    if k < 1:
        raise ConfigurationError("--dump-lq iteration must be >= 1")
    return k


def cmd_mpc(args) -> int:
    cfg = _apply_overrides(load_config(args.config), args)
    problem = build_problem(cfg)
    variant = build_variant(cfg, problem.N)
    mpc = cfg.get("mpc", {})
    threads = resolve_threads(args.threads, cfg)
    controller = create_controller(problem, variant, build_init(cfg),
                                   settings=build_settings(cfg), shift=mpc.get("shift", False),
                                   threads=threads)
    integ = problem.integrator
    plant = PlantConfig(problem.dynamics,
                        Integrator(integ.dt, integ.scheme,
                                   integ.substeps * mpc.get("plant_substeps", 1)),
                        noise_std=mpc.get("noise_std", 0.0), seed=cfg.get("seed", 0))
    try:
        result = run_closed_loop(plant, controller, mpc.get("duration", 5.0))
    finally:
        controller.close()
    cols = (["cycle", "t_sim"] + [f"x_meas_{i}" for i in range(problem.m)]
            + ["cost_stage", "feedback_ms", "prep_ms"])
    with _open_out(args.out or "mpc.csv", cfg) as fh:
        writer = csv.writer(fh)
        writer.writerow(cols)
        for row in result.rows:
            writer.writerow([_fmt(row[c]) for c in cols])
    x_final = result.X[-1]
    print(f"{variant.label}-NMPC: cycles={len(result.rows)} "
          f"accumulated_cost={result.accumulated_cost!r} "
          f"mean_frequency_hz={result.mean_frequency_hz:.1f} "
          f"x_final={np.array2string(x_final, precision=6)} "
          f"|x_final|={np.linalg.norm(x_final):.6g} failed_cycles={result.failed_cycles}")
    if result.status != "ok":
        print("error: plant diverged", file=sys.stderr)
        return EXIT_DIVERGED
    return EXIT_OK


def cmd_contraction(args) -> int:
    cfg = _apply_overrides(load_config(args.config), args)
    problem = build_problem(cfg)
    study = cfg.get("contraction", {})
    variants = study.get("variants")
    if variants is None:
        variants = [build_variant(cfg, problem.N)] if "variant" in cfg else ["iLQR", "GNMS"]
    summaries = run_contraction_study(problem, variants, n_samples=study.get("samples", 100),
                                      scale=study.get("scale", 0.1), seed=cfg.get("seed", 0),
                                      threads=resolve_threads(args.threads, cfg),
                                      K=study.get("K", 5))
    with _open_out(args.out or "contraction.csv", cfg) as fh:
        writer = csv.writer(fh)
        writer.writerow(CONTRACTION_HEADER)
        for s in summaries:
            writer.writerow([s.variant, s.M, _fmt(s.mean_rate), _fmt(s.std_rate),
                             s.n_converged, s.n_excluded])
    if args.json:
        summary = {s.variant: {"M": s.M, "mean_rate": s.mean_rate, "std_rate": s.std_rate,
                               "n_converged": s.n_converged, "n_excluded": s.n_excluded,
                               "degenerate": s.degenerate} for s in summaries}
        Path(args.json).write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    for s in summaries:
        flag = " (degenerate: no rate could be estimated)" if s.degenerate else ""
        print(f"{s.variant}: mean_rate={s.mean_rate:.6g} std={s.std_rate:.3g} "
              f"converged={s.n_converged} excluded={s.n_excluded}{flag}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gnshoot",
                                     description="Gauss-Newton shooting solvers for optimal control")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", required=True, help="JSON run configuration")
        p.add_argument("--out", help="output CSV path")
        p.add_argument("--variant", help="e.g. SS, iLQR, GNMS, GNMS(5), iLQR-GNMS(5)")
        p.add_argument("--intervals", type=int, help="number of shooting intervals M")
        p.add_argument("--threads", type=int, help="worker threads (env GNSHOOT_THREADS)")
        p.add_argument("--seed", type=int)
        p.add_argument("--line-search", action="store_true", help="enable merit backtracking")

    p = sub.add_parser("solve", help="run the solver to convergence")
    common(p)
    p.add_argument("--dump-lq", metavar="iter=K", help="write the LQ subproblem of iteration K")
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("mpc", help="closed-loop NMPC simulation")
    common(p)
    p.add_argument("--duration", type=float, help="simulated seconds")
    p.add_argument("--shift", action="store_true", help="shift the plan every cycle")
    p.set_defaults(func=cmd_mpc)

    p = sub.add_parser("contraction", help="perturbed-restart contraction study")
    common(p)
    p.add_argument("--samples", type=int)
    p.add_argument("--json", help="also write a JSON summary")
    p.set_defaults(func=cmd_contraction)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigurationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ModelError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except GnshootError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
