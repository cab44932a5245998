"""Command-line driver: ``nltdc run``, ``nltdc verify`` and ``nltdc rate``."""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
import tempfile
import time
from datetime import datetime, timezone
from importlib import metadata
from pathlib import Path

import numpy as np

from .config import RunConfig, load_config, resolve
from .diagnostics import fit_power_law, fit_rate, summarize_ensemble
from .errors import AssumptionViolation, DegenerateChainError, InvalidArgument, NonMixingError
from .mdp import estimate_mixing, mixing_time
from .tdc import check_feasibility, run_ensemble
from .verification import SUITES, format_table, run_suite

EXIT_OK = 0
EXIT_VERIFY_FAILED = 1
EXIT_INVALID = 2
EXIT_ALL_FAILED = 3
CONFIG_ERRORS = (InvalidArgument, DegenerateChainError, NonMixingError, AssumptionViolation)
SUMMARY_QUANTITIES = ("grad_norm_sq", "tracking_err_sq", "var_vs_grad", "var_centered")


def code_version() -> str:
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        return "0+unknown"


def report_error(code: int, kind: str, message: str, **extra) -> int:
    """Machine-readable error report on stderr; returns the exit code."""
    payload = {"exit_code": code, "error": kind, "message": message, **extra}
    print(json.dumps(payload, sort_keys=True), file=sys.stderr)
    return code


def write_atomic(path: Path, text: str):
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        return x if math.isfinite(x) else repr(x)
    return obj


def dump_json(obj) -> str:
    return json.dumps(_jsonable(obj), indent=2, sort_keys=True) + "\n"


def output_dir(cfg: RunConfig, cli_out: str | None) -> Path:
    if cli_out:
        return Path(cli_out)
    if cfg.output_dir:
        return Path(cfg.output_dir)
    return Path(os.environ.get("NLTDC_OUT", "nltdc_out")) / (cfg.name or cfg.experiment)


def apply_overrides(cfg: RunConfig, args) -> RunConfig:
    d = cfg.to_dict()
    if getattr(args, "seeds", None) is not None:
        d["n_seeds"] = args.seeds
    if getattr(args, "jobs", None) is not None:
        d["jobs"] = args.jobs
    if getattr(args, "no_projection", False):
        d["projection"] = False
    if getattr(args, "cadence", None) is not None:
        d["cadence"] = args.cadence
    return RunConfig.from_dict(d)


def _feasibility(run) -> tuple[dict | None, int | None]:
    if run.ledger is None:
        return None, None
    tau = None
    if run.config.regime == "markov":
        try:
            tau = mixing_time(estimate_mixing(run.mdp, run.pair.behavior), run.problem.schedule.beta)
        except NonMixingError:
            tau = None
    return check_feasibility(run.ledger, run.problem.schedule, tau).to_dict(), tau


def _assumptions(run) -> list:
    notes = ["theta_0 ~ uniform(-0.5, 0.5) per entry from the seed; omega_0 = 0"]
    if run.config.experiment == "garnet":
        temp = run.config.mdp.get("temperature", 0.5)
        notes.append(f"garnet policies: uniform behavior; softmax target of N(0,1) logits at temperature {temp}")
    return notes


def _manifest(run, started: float, files: dict, **extra) -> dict:
    feasibility, tau = _feasibility(run)
    return {
        "config": run.config.to_dict(),
        "assumptions": _assumptions(run),
        "ledger": run.ledger.to_dict() if run.ledger is not None else None,
        "ledger_note": run.ledger_note,
        "R_omega": run.R_omega,
        "R_omega_source": run.R_omega_source,
        "tau_beta": tau,
        "feasibility": feasibility,
        "approximator": {"family": run.spec.family, "param_dim": run.spec.param_dim, **run.spec.to_dict()},
        "mdp_hash": run.mdp.snapshot_hash(),
        "code_version": code_version(),
        "timestamp": datetime.now(timezone.utc).isoformat(),
        "wall_clock_seconds": time.time() - started,
        "files": files,
        **extra,
    }


def _write_snapshot(run, out: Path) -> str:
    snapshot = {"mdp": run.mdp.to_dict(), "policies": run.pair.to_dict(), "approximator": run.spec.to_dict()}
    write_atomic(out / "mdp.json", dump_json(snapshot))
    return "mdp.json"


def cmd_run(args) -> int:
    started = time.time()
    try:
        cfg = apply_overrides(load_config(args.config), args)
        run = resolve(cfg)
        result = run_ensemble(run.problem, cfg.seeds, mode=cfg.mode, jobs=cfg.jobs)
    except CONFIG_ERRORS as exc:
        return report_error(EXIT_INVALID, type(exc).__name__, str(exc))
    out = output_dir(cfg, args.out)
    out.mkdir(parents=True, exist_ok=True)
    files = {"snapshot": _write_snapshot(run, out), "seeds": {}, "summaries": {}}
    for i, rec in enumerate(result.records):
        name = f"seed_{i:03d}.csv"
        write_atomic(out / name, rec.to_csv())
        files["seeds"][str(rec.seed)] = name
    ok = [rec for rec in result.records if rec.failure is None]
    if ok:
        for quantity in SUMMARY_QUANTITIES:
            if getattr(ok[0], quantity) is None:
                continue
            name = f"summary_{quantity}.csv"
            write_atomic(out / name, summarize_ensemble(ok, quantity).to_csv())
            files["summaries"][quantity] = name
    failures = [{"seed": seed, **info} for seed, info in result.failures]
    runs = [
        {"seed": rec.seed, "W": rec.W, "steps_run": rec.steps_run, "theta_final": rec.theta_final}
        for rec in result.records
    ]
    write_atomic(out / "manifest.json", dump_json(_manifest(run, started, files, failures=failures, runs=runs)))
    print(f"wrote {len(result.records)} seed files to {out} ({len(failures)} failed)")
    if not ok:
        return report_error(
            EXIT_ALL_FAILED, "NumericalBlowup", "every seed produced a non-finite iterate",
            failures=_jsonable(failures), manifest=str(out / "manifest.json"),
        )
    return EXIT_OK


def synthetic_values(horizons, spec: dict) -> np.ndarray:
    """Exact ``c T^(-1/2)`` (or ``c log T / sqrt T`` with ``log: true``) values."""
    T = np.asarray(horizons, dtype=float)
    c = float(spec.get("c", 1.0))
    return c * (np.log(T) if spec.get("log", False) else 1.0) / np.sqrt(T)


def cmd_rate(args) -> int:
    started = time.time()
    try:
        cfg = apply_overrides(load_config(args.config), args)
        if not cfg.horizons or len(cfg.horizons) < 3:
            raise InvalidArgument("the rate command needs at least 3 horizons")
        run = resolve(cfg)
        if cfg.synthetic is not None:
            fit = fit_power_law(cfg.horizons, synthetic_values(cfg.horizons, cfg.synthetic))
        else:
            fit = fit_rate(cfg.horizons, cfg.seeds, run.problem, jobs=cfg.jobs, estimator=cfg.estimator)
    except CONFIG_ERRORS as exc:
        return report_error(EXIT_INVALID, type(exc).__name__, str(exc))
    out = output_dir(cfg, args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_atomic(out / "rate.csv", fit.to_csv())
    files = {"snapshot": _write_snapshot(run, out), "rate": "rate.csv"}
    rate = {
        "slope": fit.slope,
        "intercept": fit.intercept,
        "residual": fit.residual,
        "flagged_horizons": fit.flagged,
        "n_success": fit.n_success,
        "estimator": "synthetic" if cfg.synthetic is not None else cfg.estimator,
    }
    write_atomic(out / "manifest.json", dump_json(_manifest(run, started, files, rate=rate)))
    print(f"fitted exponent {fit.slope:.6f} over horizons {list(cfg.horizons)}")
    if cfg.synthetic is None and fit.n_success and not any(fit.n_success):
        return report_error(EXIT_ALL_FAILED, "NumericalBlowup", "every seed failed at every horizon")
    return EXIT_OK


def cmd_verify(args) -> int:
    checks = run_suite(args.scope, seed=args.seed)
    print(format_table(checks))
    failing = [c for c in checks if not c.passed]
    if failing:
        return report_error(
            EXIT_VERIFY_FAILED, "VerificationFailed", f"{len(failing)} check(s) failed",
            failing=[{"case": f"{c.suite}: {c.case}", "margin": c.margin} for c in failing],
        )
    print(f"all {len(checks)} checks passed")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="nltdc", description="Non-linear off-policy TDC experiments.")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_run_flags(p):
        p.add_argument("--config", required=True, help="YAML config file or preset name")
        p.add_argument("--out", help="output directory (default: $NLTDC_OUT/<name>)")
        p.add_argument("--seeds", type=int, help="number of seeds, overriding the config")
        p.add_argument("--jobs", type=int, help="worker processes")
        p.add_argument("--no-projection", action="store_true", help="disable the omega projection")
        p.add_argument("--cadence", type=int, help="record diagnostics every M steps")

    add_run_flags(sub.add_parser("run", help="run a seeded ensemble"))
    add_run_flags(sub.add_parser("rate", help="fit the convergence-rate exponent"))
    p = sub.add_parser("verify", help="run the verification suites")
    p.add_argument("scope", nargs="?", default="all", choices=(*SUITES, "all"))
    p.add_argument("--seed", type=int, default=0)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_INVALID if exc.code else EXIT_OK
    handlers = {"run": cmd_run, "rate": cmd_rate, "verify": cmd_verify}
    return handlers[args.command](args)


if __name__ == "__main__":
    sys.exit(main())
