"""Command-line interface: ``swjm simulate | fit | mcsim | summarize``.

Exit status is 0 whenever the command ran, including fits that did not
converge; I/O, parsing and configuration errors exit with status 2.
"""
from __future__ import annotations

import argparse
import json
import os
import platform
import sys
from pathlib import Path

import jsonschema
import numpy as np
import pandas as pd
import scipy

from . import __version__
from .estimate import FitOptions, fit
from .likelihood import QuadratureSettings, exposure_from_rows
from .mcharness import (Scenario, build_additional_scenarios, build_paper_grid,
                        performance_measures, read_raw, run_scenarios, sort_raw,
                        write_raw)
from .model import ModelSpec
from .simulate import (LONGITUDINAL_FILE, SURVIVAL_FILE, SimConfig, TrialDataset,
                       simulate_trial)

EXIT_OK, EXIT_ERROR = 0, 2
RAW_FILE = "raw_results.csv"
SUMMARY_FILE = "summary.csv"
SUMMARY_TEXT = "summary.txt"
PROVENANCE_FILE = "provenance.json"

_num = {"type": "number"}
_posint = {"type": "integer", "minimum": 1}
_seed = {"type": "integer", "minimum": 0, "maximum": 2 ** 64 - 1}

DESIGN_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["n_sequences", "n_periods", "clusters_per_sequence", "subjects_per_cluster"],
    "properties": {
        "n_sequences": _posint, "n_periods": _posint,
        "clusters_per_sequence": _posint, "subjects_per_cluster": _posint,
        "crossover_periods": {"type": "array", "items": {"type": "integer"}},
    },
}

DROPOUT_SCHEMA = {
    "oneOf": [
        {"type": "object", "additionalProperties": False, "required": ["type"],
         "properties": {"type": {"const": "none"}}},
        {"type": "object", "additionalProperties": False, "required": ["type"],
         "properties": {"type": {"const": "weibull"}, "log_lambda": _num,
                        "log_shape": _num, "nu": _num, "omega_1": _num, "omega_2": _num}},
        {"type": "object", "additionalProperties": False, "required": ["type"],
         "properties": {"type": {"const": "logistic"}, "intercept": _num, "nu": _num,
                        "omega_1": _num, "omega_2": _num,
                        "standardize": {"type": "boolean"}}},
    ]
}

SIMULATE_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["design", "params"],
    "properties": {
        "design": DESIGN_SCHEMA,
        "params": {
            "type": "object",
            "additionalProperties": False,
            "required": ["period_effects", "treatment_effect", "var_alpha", "var_phi",
                         "var_eps"],
            "properties": {
                "period_effects": {"type": "array", "items": _num, "minItems": 1},
                "treatment_effect": {"oneOf": [_num, {"type": "array", "items": _num}]},
                "var_alpha": {"type": "number", "minimum": 0},
                "var_phi": {"type": "number", "minimum": 0},
                "var_eps": {"type": "number", "exclusiveMinimum": 0},
            },
        },
        "dropout": DROPOUT_SCHEMA,
        "seed": _seed,
    },
}

_FIT_PROPERTIES = {
    "nodes": _posint,
    "adaptive": {"type": "boolean"},
    "max_iter": _posint,
    "gtol": {"type": "number", "exclusiveMinimum": 0},
    "ftol": {"type": "number", "exclusiveMinimum": 0},
    "level": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
}

FIT_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "model": {"enum": ["lmm", "joint"]},
        "effect": {"enum": ["constant", "gtot"]},
        "association": {"enum": ["free", "equal", "cluster-only", "subject-only", "none"]},
        "baseline": {"enum": ["exponential", "weibull"]},
        **_FIT_PROPERTIES,
    },
}

MCSIM_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "grid": {"type": "string"},
        "scale": {"enum": ["paper", "desk"]},
        "seed": _seed,
        "workers": _posint,
        "reps": _posint,
        **_FIT_PROPERTIES,
    },
}

SCENARIO_FILE_SCHEMA = {
    "type": "array",
    "minItems": 1,
    "items": {
        "type": "object",
        "additionalProperties": False,
        "required": ["label", "n_reps", "config"],
        "properties": {
            "label": {"type": "string", "minLength": 1},
            "n_reps": _posint,
            "config": SIMULATE_SCHEMA,
            "metadata": {"type": "object"},
        },
    },
}


class CLIError(Exception):
    """Operational failure reported with a nonzero exit status."""


def _load_json(path, schema, what):
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise CLIError(f"{path}: not valid JSON ({exc})") from exc
    validator = jsonschema.Draft202012Validator(schema)
    errors = sorted(validator.iter_errors(doc), key=lambda e: list(e.absolute_path))
    if errors:
        lines = [f"{what} {path} failed validation:"]
        for e in errors:
            where = "/".join(str(p) for p in e.absolute_path) or "<root>"
            lines.append(f"  {where}: {e.message}")
        raise CLIError("\n".join(lines))
    return doc


def _provenance(args, extra: dict) -> dict:
    return {"tool": "swjm", "version": __version__, "argv": sys.argv[1:],
            "command": args.command, "python": platform.python_version(),
            "numpy": np.__version__, "scipy": scipy.__version__,
            "pandas": pd.__version__, **extra}


def _write_json(path, doc):
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _out_dir(path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _default_workers() -> int:
    env = os.environ.get("SWJM_WORKERS")
    if env is None:
        return 1
    try:
        n = int(env)
    except ValueError:
        raise CLIError(f"SWJM_WORKERS must be a positive integer, got {env!r}")
    if n < 1:
        raise CLIError(f"SWJM_WORKERS must be a positive integer, got {env!r}")
    return n


def _fit_options(settings: dict) -> FitOptions:
    quad = QuadratureSettings(nodes=settings.get("nodes", 7),
                              adaptive=settings.get("adaptive", True))
    kw = {k: settings[k] for k in ("max_iter", "gtol", "ftol", "level") if k in settings}
    return FitOptions(quadrature=quad, **kw)


# ----------------------------------------------------------------------
# subcommands

def cmd_simulate(args) -> int:
    if not args.config:
        raise CLIError("simulate needs --config")
    doc = _load_json(args.config, SIMULATE_SCHEMA, "simulation config")
    if args.seed is not None:
        doc["seed"] = args.seed
    try:
        config = SimConfig.from_dict(doc)
    except (ValueError, TypeError) as exc:
        raise CLIError(f"invalid simulation config: {exc}") from exc
    out = _out_dir(args.out)
    data = simulate_trial(config)
    data.to_csv(out)
    _write_json(out / PROVENANCE_FILE, _provenance(args, {"config": config.to_dict()}))
    return EXIT_OK


def _resolve_data(args):
    path = Path(args.data)
    survival = Path(args.survival) if args.survival else None
    if path.is_dir():
        longitudinal = path / LONGITUDINAL_FILE
        if survival is None and (path / SURVIVAL_FILE).exists():
            survival = path / SURVIVAL_FILE
    else:
        longitudinal = path
    if not longitudinal.exists():
        raise CLIError(f"longitudinal data not found: {longitudinal}")
    if survival is not None and not survival.exists():
        raise CLIError(f"survival data not found: {survival}")
    return longitudinal, survival


def cmd_fit(args) -> int:
    settings = {}
    if args.config:
        settings.update(_load_json(args.config, FIT_SCHEMA, "fit config"))
    for key in ("model", "effect", "association", "baseline", "nodes"):
        value = getattr(args, key)
        if value is not None:
            settings[key] = value
    model = settings.get("model", "lmm")
    effect = settings.get("effect", "constant")
    association = settings.get("association", "free" if model == "joint" else "none")
    baseline = settings.get("baseline", "weibull")

    longitudinal, survival = _resolve_data(args)
    if model == "joint" and survival is None:
        raise CLIError("--model joint needs survival data: pass --survival PATH or a "
                       f"directory containing {SURVIVAL_FILE}")
    try:
        data = TrialDataset.from_csv(longitudinal, survival if model == "joint" else None)
    except (ValueError, KeyError, pd.errors.ParserError) as exc:
        raise CLIError(f"cannot read data: {exc}") from exc

    lon = data.longitudinal
    n_periods = int(lon["period"].max())
    max_exposure = 0
    if effect == "gtot":
        e = exposure_from_rows(lon)
        max_exposure = int(e.max()) if np.any(e >= 0) else 0
    try:
        if model == "joint":
            spec = ModelSpec.joint(n_periods, outcome=effect,
                                   association=association.replace("-", "_"),
                                   baseline=baseline, max_exposure=max_exposure)
        else:
            if association != "none":
                raise CLIError("--association applies to --model joint only")
            spec = ModelSpec.lmm(n_periods, outcome=effect, max_exposure=max_exposure)
        options = _fit_options(settings)
        result = fit(data, spec, options)
    except ValueError as exc:
        raise CLIError(str(exc)) from exc

    out = _out_dir(args.out)
    result.to_frame().to_csv(out / "estimates.csv", index=False, float_format="%.17g",
                             lineterminator="\n")
    _write_json(out / "fit_summary.json", result.summary())
    _write_json(out / PROVENANCE_FILE, _provenance(args, {
        "longitudinal": str(longitudinal), "survival": str(survival) if survival else None,
        "settings": settings, "spec": spec.to_dict()}))
    status = "converged" if result.converged else f"not converged ({result.reason})"
    print(f"{model} fit {status}; "
          f"log-likelihood {result.loglik:.6f}")
    return EXIT_OK


def _select_grid(grid: str, scale: str, reps):
    if grid == "paper-A":
        return build_paper_grid("A", scale, reps)
    if grid == "paper-B":
        return build_paper_grid("B", scale, reps)
    if grid == "extra":
        return build_additional_scenarios(scale, reps)
    path = Path(grid)
    if not path.exists():
        raise CLIError(f"--grid must be paper-A, paper-B, extra or a scenario file; "
                       f"{grid!r} not found")
    doc = _load_json(path, SCENARIO_FILE_SCHEMA, "scenario file")
    try:
        scenarios = [Scenario.from_dict(d) for d in doc]
    except (ValueError, TypeError) as exc:
        raise CLIError(f"invalid scenario in {path}: {exc}") from exc
    if reps:
        scenarios = [Scenario(s.label, s.config, reps, s.metadata) for s in scenarios]
    labels = [s.label for s in scenarios]
    if len(set(labels)) != len(labels):
        raise CLIError("scenario labels must be unique")
    return scenarios


def cmd_mcsim(args) -> int:
    settings = {}
    if args.config:
        settings.update(_load_json(args.config, MCSIM_SCHEMA, "mcsim config"))
    for key in ("grid", "scale", "seed", "workers", "reps", "nodes"):
        value = getattr(args, key)
        if value is not None:
            settings[key] = value
    grid = settings.get("grid", "paper-A")
    scale = settings.get("scale", "desk")
    seed = int(settings.get("seed", 0))
    workers = settings.get("workers") or _default_workers()
    reps = settings.get("reps")
    scenarios = _select_grid(grid, scale, reps)
    options = _fit_options(settings)

    out = _out_dir(args.out)
    raw_path = out / RAW_FILE
    prov_path = out / PROVENANCE_FILE
    recipe = {"grid": grid, "scale": scale, "seed": seed, "reps": reps,
              "fit": {k: v for k, v in settings.items() if k in _FIT_PROPERTIES}}
    existing = None
    if raw_path.exists():
        if prov_path.exists():
            with open(prov_path) as fh:
                old = json.load(fh).get("recipe")
            if old is not None and old != recipe:
                raise CLIError(f"{out} holds results from a different run "
                               f"({old}); use a fresh --out directory")
        existing = read_raw(raw_path)
        print(f"resuming: {existing[['scenario', 'rep']].drop_duplicates().shape[0]} "
              "repetitions already present")
    _write_json(out / "scenarios.json", [s.to_dict() for s in scenarios])
    _write_json(prov_path, _provenance(args, {"recipe": recipe}))

    # checkpoint in blocks so an interrupted run loses little work
    block = max(4 * workers, 10)
    labels = [s.label for s in scenarios]
    raw = existing
    for s in scenarios:
        for upto in range(block, s.n_reps + block, block):
            raw = run_scenarios([s], workers, seed, options, existing=raw,
                                n_reps=min(upto, s.n_reps))
            write_raw(sort_raw(raw, labels), raw_path)
        print(f"{s.label}: {s.n_reps} repetitions done", flush=True)
    return EXIT_OK


def format_summary(summary: pd.DataFrame) -> str:
    """Plain-text table per scenario: one row per (model, estimand)."""
    blocks = []
    for scen, g in summary.groupby("scenario", sort=False):
        cell = g.assign(text=[
            "NA" if not np.isfinite(v) else
            (f"{v:.4f}" if not np.isfinite(m) else f"{v:.4f} ({m:.4f})")
            for v, m in zip(g["value"], g["mcse"])])
        table = cell.pivot_table(index=["model", "estimand"], columns="measure",
                                 values="text", aggfunc="first", sort=False)
        n = g.groupby(["model", "estimand"], sort=False)["n_converged"].first()
        table.insert(0, "n_conv", n)
        cols = [c for c in ("n_conv", "bias", "rel_bias", "empse", "modse", "coverage",
                            "convergence") if c in table.columns]
        blocks.append(f"Scenario {scen}\n{table[cols].to_string()}\n")
    return "\n".join(blocks)


def cmd_summarize(args) -> int:
    try:
        raw = read_raw(args.raw)
    except (ValueError, pd.errors.ParserError) as exc:
        raise CLIError(f"cannot read raw results: {exc}") from exc
    summary = performance_measures(raw)
    out = _out_dir(args.out)
    summary.to_csv(out / SUMMARY_FILE, index=False, float_format="%.17g",
                   lineterminator="\n")
    text = format_summary(summary)
    (out / SUMMARY_TEXT).write_text(text)
    print(text)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="swjm", description="Stepped wedge trials with dropout: simulation, "
                                 "mixed and joint model fitting, Monte Carlo studies.")
    parser.add_argument("--version", action="version", version=f"swjm {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="simulate one trial from a JSON config")
    p.add_argument("--config", required=True, help="simulation config (JSON)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, help="override the config's seed")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("fit", help="fit an LMM or a joint model to trial data")
    p.add_argument("data", help=f"directory holding {LONGITUDINAL_FILE} (and "
                                f"{SURVIVAL_FILE}) or a longitudinal CSV")
    p.add_argument("--survival", help="start-stop survival CSV")
    p.add_argument("--config", help="fit settings (JSON)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--model", choices=["lmm", "joint"])
    p.add_argument("--effect", choices=["constant", "gtot"])
    p.add_argument("--association",
                   choices=["free", "equal", "cluster-only", "subject-only", "none"])
    p.add_argument("--baseline", choices=["exponential", "weibull"])
    p.add_argument("--nodes", type=int, help="quadrature nodes per dimension")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("mcsim", help="run a Monte Carlo study (resumable)")
    p.add_argument("--config", help="mcsim settings (JSON)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--grid", help="paper-A, paper-B, extra or a scenario JSON file")
    p.add_argument("--scale", choices=["paper", "desk"])
    p.add_argument("--seed", type=int, help="master seed")
    p.add_argument("--workers", type=int, help="worker processes (default $SWJM_WORKERS or 1)")
    p.add_argument("--reps", type=int, help="override repetitions per scenario")
    p.add_argument("--nodes", type=int, help="quadrature nodes per dimension")
    p.set_defaults(func=cmd_mcsim)

    p = sub.add_parser("summarize", help="performance measures from raw results")
    p.add_argument("raw", help=f"raw results CSV ({RAW_FILE})")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_summarize)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    for name in ("seed",):
        v = getattr(args, name, None)
        if v is not None and not 0 <= v < 2 ** 64:
            parser.error(f"--{name} must be an unsigned 64-bit integer")
    for name in ("workers", "nodes", "reps"):
        v = getattr(args, name, None)
        if v is not None and v < 1:
            parser.error(f"--{name} must be a positive integer")
    try:
        return args.func(args)
    except CLIError as exc:
        print(f"swjm: error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    except (OSError, ValueError) as exc:
        print(f"swjm: error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
