"""Command line entry point: data generation, fitting, pipelines and experiment sweeps.

Every command reads an optional TOML config, writes into a fresh output
directory and finishes by writing ``manifest.json``.  Outputs are staged in a
temporary sibling directory and moved into place only on success, so a failed
command never leaves partial results behind.

Exit codes: 0 success, 2 invalid input or config, 3 training divergence
(a failed-run record is still written), 4 lower-bound oracle outside tolerance.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import math
import os
import shutil
import sys
import time
from dataclasses import asdict, fields, replace
from pathlib import Path
from typing import Any, Callable

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

from .experiments import (
    RATE_COLUMNS,
    LowerBoundSpec,
    RateSpec,
    RecoverySpec,
    run_lowerbound,
    run_rates,
    run_recovery_seed,
)
from .model import StructuredModel, anova_project, component_l2_errors, load_model, mc_l2_error, save_model
from .nn import TrainingDivergence
from .pipeline import run_pipeline
from .synthdata import (
    Dataset,
    DgpConfig,
    dataset_to_csv,
    make_truth,
    read_csv,
    sample_dataset,
    signal_strength,
    split_dataset,
)
from .train import OptConfig, estimate_sigma, fit_erm, fit_penalized, plan_highdim, plan_lowdim

SCHEMA_VERSION = 1
ENV_PREFIX = "INTERACTNN_"
COMMANDS = ("gen", "fit", "fit-sparse", "pipeline", "rates", "lowerbound", "eval")

EXIT_OK, EXIT_INPUT, EXIT_DIVERGED, EXIT_ORACLE = 0, 2, 3, 4

# keys accepted in the [plan] table; everything else in the plan is derived from the data
PLAN_KEYS = {"beta1", "beta2", "C3", "C4", "c1", "c2", "B", "depth", "rsc", "sigma_hat"}
RATES_KEYS = {"n_grid", "seeds", "additive", "n_mc", "mc_seed"}
PIPELINE_KEYS = {"seeds"}
IO_KEYS = {"data", "model", "truth"}
EVAL_KEYS = {"n_mc", "mc_seed"}


class ConfigError(ValueError):
    """Config or command-line input that fails validation."""


# --------------------------------------------------------------------------
# Configuration


def _field_names(cls) -> set[str]:
    return {f.name for f in fields(cls)}


def _check_keys(table: dict, allowed: set[str], where: str) -> None:
    extra = sorted(set(table) - allowed)
    if extra:
        raise ConfigError(f"unknown key(s) in [{where}]: {', '.join(extra)}")


SECTIONS: dict[str, set[str]] = {
    "dgp": _field_names(DgpConfig),
    "opt": _field_names(OptConfig),
    "refit_opt": _field_names(OptConfig),
    "plan": PLAN_KEYS,
    "rates": RATES_KEYS,
    "pipeline": PIPELINE_KEYS,
    "lowerbound": _field_names(LowerBoundSpec),
    "io": IO_KEYS,
    "eval": EVAL_KEYS,
}
TOP_LEVEL = {"schema_version", "command", "seed", "threads", "deterministic"}


def load_config(path: str | Path | None) -> dict:
    """Parse and validate a config file; a missing path gives the empty config."""
    if path is None:
        return {"schema_version": SCHEMA_VERSION}
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file {p} does not exist")
    try:
        cfg = tomllib.loads(p.read_text())
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{p}: {exc}") from exc
    validate_config(cfg)
    return cfg


def validate_config(cfg: dict) -> None:
    if cfg.get("schema_version") != SCHEMA_VERSION:
        raise ConfigError(f"schema_version must be {SCHEMA_VERSION}")
    _check_keys({k: v for k, v in cfg.items() if not isinstance(v, dict)}, TOP_LEVEL, "top level")
    for name, table in cfg.items():
        if isinstance(table, dict):
            if name not in SECTIONS:
                raise ConfigError(f"unknown section [{name}]")
            _check_keys(table, SECTIONS[name], name)
    rates = cfg.get("rates", {})
    if "n_grid" in rates and not rates["n_grid"]:
        raise ConfigError("[rates] n_grid must be nonempty")
    for sec in ("rates", "pipeline"):
        if "seeds" in cfg.get(sec, {}) and not cfg[sec]["seeds"]:
            raise ConfigError(f"[{sec}] seeds must be nonempty")


def _env(name: str) -> str | None:
    return os.environ.get(ENV_PREFIX + name.upper())


def _truthy(s: str) -> bool:
    return s.strip().lower() in ("1", "true", "yes", "on")


def resolve_settings(args: argparse.Namespace, cfg: dict) -> dict:
    """Command-line flags override environment variables, which override the config."""
    def pick(flag, env_name, key, cast, default):
        if flag is not None:
            return flag
        env = _env(env_name)
        if env is not None:
            return cast(env)
        return cfg.get(key, default)

    seed = pick(args.seed, "seed", "seed", int, None)
    threads = int(pick(args.threads, "threads", "threads", int, 1))
    det = bool(pick(True if args.deterministic else None, "deterministic", "deterministic", _truthy, False))
    if threads < 1:
        raise ConfigError("threads must be at least 1")
    return {"seed": seed, "threads": 1 if det else threads, "deterministic": det}


def _build(cls, table: dict, where: str, **overrides):
    try:
        return cls(**{**table, **overrides})
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{where}] {exc}") from exc


def dgp_from(cfg: dict, seed: int | None) -> DgpConfig:
    table = dict(cfg.get("dgp", {}))
    if "n" not in table or "d" not in table:
        raise ConfigError("[dgp] needs n and d")
    if seed is not None:
        table["seed"] = seed
    return _build(DgpConfig, table, "dgp")


def opt_from(cfg: dict, section: str, seed: int | None) -> OptConfig:
    table = dict(cfg.get(section, cfg.get("opt", {}) if section == "refit_opt" else {}))
    if seed is not None:
        table["seed"] = seed
    return _build(OptConfig, table, section)


def plan_table(cfg: dict) -> dict:
    defaults = {"beta1": 2.0, "beta2": 2.0, "C3": 0.5, "C4": 0.5, "c1": 1.0, "c2": 1.0,
                "B": 10.0, "depth": 3, "rsc": True, "sigma_hat": None}
    return {**defaults, **cfg.get("plan", {})}


# --------------------------------------------------------------------------
# Output directories


class RunDir:
    """Write-once output directory staged in a temporary sibling."""

    def __init__(self, target: Path):
        self.target = target
        if target.exists() and any(target.iterdir()):
            raise ConfigError(f"output directory {target} exists and is not empty")
        self.stage = target.parent / f".{target.name}.staging-{os.getpid()}"
        self.files: dict[str, dict] = {}
        self.volatile: list[str] = []

    def __enter__(self) -> RunDir:
        self.target.parent.mkdir(parents=True, exist_ok=True)
        if self.stage.exists():
            shutil.rmtree(self.stage)
        self.stage.mkdir()
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc_type is not None:
            shutil.rmtree(self.stage, ignore_errors=True)
            return False
        return False

    def write_bytes(self, name: str, data: bytes, columns: list[str] | None = None, volatile: bool = False) -> None:
        path = self.stage / name
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(data)
        if volatile:
            self.volatile.append(name)
            return
        entry: dict[str, Any] = {"sha256": hashlib.sha256(data).hexdigest(), "bytes": len(data)}
        if columns is not None:
            entry["columns"] = columns
        self.files[name] = entry

    def write_json(self, name: str, obj: Any, volatile: bool = False) -> None:
        self.write_bytes(name, dumps(obj).encode(), volatile=volatile)

    def write_model(self, name: str, model: StructuredModel) -> None:
        tmp = self.stage / name
        save_model(model, tmp)
        for p in sorted(tmp.rglob("*")):
            if p.is_file():
                rel = str(p.relative_to(self.stage))
                data = p.read_bytes()
                self.files[rel] = {"sha256": hashlib.sha256(data).hexdigest(), "bytes": len(data)}

    def commit(self, command: str, settings: dict, status: str) -> None:
        manifest = {
            "schema_version": SCHEMA_VERSION,
            "command": command,
            "status": status,
            "deterministic": settings["deterministic"],
            "files": dict(sorted(self.files.items())),
            "volatile": sorted(self.volatile),
        }
        (self.stage / "manifest.json").write_text(dumps(manifest))
        if self.target.exists():
            self.target.rmdir()
        os.replace(self.stage, self.target)


def _clean(obj):
    """JSON-safe copy: non-finite floats become null and tuples become lists."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else None
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def dumps(obj: Any) -> str:
    return json.dumps(_clean(obj), indent=2, sort_keys=True) + "\n"


def csv_bytes(columns: list[str], rows: list[list]) -> bytes:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for row in rows:
        w.writerow([repr(float(v)) if isinstance(v, float) else v for v in row])
    return buf.getvalue().encode()


# --------------------------------------------------------------------------
# Commands


def _load_data(path: str | None, what: str = "data") -> Dataset:
    if path is None:
        raise ConfigError(f"--{what} (or [io] {what}) is required")
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"{what} file {p} does not exist")
    try:
        return read_csv(p)
    except ValueError as exc:
        raise ConfigError(f"{p}: {exc}") from exc


def _load_model_dir(path: str | None, what: str) -> StructuredModel:
    if path is None:
        raise ConfigError(f"--{what} (or [io] {what}) is required")
    p = Path(path)
    if not (p / "manifest.json").is_file():
        raise ConfigError(f"{what} directory {p} has no manifest.json")
    return load_model(p)


def _io(args, cfg: dict, name: str) -> str | None:
    val = getattr(args, name, None)
    return val if val is not None else cfg.get("io", {}).get(name)


def cmd_gen(args, cfg, settings, out: RunDir) -> int:
    dgp = dgp_from(cfg, settings["seed"])
    truth = make_truth(dgp)
    ds = sample_dataset(truth, dgp)
    cols = [f"x{j + 1}" for j in range(ds.d)] + ["y"]
    out.write_bytes("data.csv", dataset_to_csv(ds).encode(), columns=cols)
    out.write_model("truth", truth)
    out.write_json("dgp.json", {"dgp": dgp.to_dict(), "signal": signal_strength(truth)})
    return EXIT_OK


def _fit_command(args, cfg, settings, out: RunDir, penalized: bool) -> int:
    ds = _load_data(_io(args, cfg, "data"))
    pt = plan_table(cfg)
    opt = opt_from(cfg, "opt", settings["seed"])
    t0 = time.perf_counter()
    if penalized:
        sigma = pt["sigma_hat"] if pt["sigma_hat"] is not None else estimate_sigma(ds)
        plan = plan_highdim(ds.n, ds.d, pt["beta1"], pt["beta2"], sigma, pt["C3"], pt["C4"],
                            pt["c1"], pt["c2"], pt["B"], pt["depth"], pt["rsc"])
    else:
        plan = plan_lowdim(ds.n, ds.d, pt["beta1"], pt["beta2"], pt["B"], pt["depth"])
    timing = not settings["deterministic"]
    try:
        fit = fit_penalized(ds, plan, opt) if penalized else fit_erm(ds, plan, None, opt)
    except TrainingDivergence as exc:
        out.write_json("fit.json", {"status": "failed", "error": str(exc), "plan": plan.to_dict(),
                                    "opt": opt.to_dict()})
        return EXIT_DIVERGED
    model = fit.model if penalized else anova_project(fit.model)[0]
    out.write_model("model", model)
    out.write_json("fit.json", {"status": "ok", "plan": plan.to_dict(), "opt": opt.to_dict(),
                                "fit": fit.summary(timing)})
    out.write_json("timing.json", {"wall_time": time.perf_counter() - t0}, volatile=True)
    return EXIT_OK


def cmd_fit(args, cfg, settings, out):
    return _fit_command(args, cfg, settings, out, penalized=False)


def cmd_fit_sparse(args, cfg, settings, out):
    return _fit_command(args, cfg, settings, out, penalized=True)


def _recovery_spec(cfg: dict, dgp: DgpConfig, settings: dict) -> RecoverySpec:
    pt = plan_table(cfg)
    seeds = cfg.get("pipeline", {}).get("seeds", [dgp.seed])
    dgp = replace(dgp, beta1=pt["beta1"], beta2=pt["beta2"], B=pt["B"])
    return RecoverySpec(dgp, [int(s) for s in seeds], opt_from(cfg, "opt", None), opt_from(cfg, "refit_opt", None),
                        pt["C3"], pt["C4"], pt["c1"], pt["c2"], pt["rsc"])


def cmd_pipeline(args, cfg, settings, out: RunDir) -> int:
    """With ``--data``: one pipeline run on that file.  Otherwise a seeded recovery sweep on ``[dgp]``."""
    timing = not settings["deterministic"]
    data = _io(args, cfg, "data")
    t0 = time.perf_counter()
    if data is not None:
        ds = _load_data(data)
        pt = plan_table(cfg)
        first, _ = split_dataset(ds)
        sigma = pt["sigma_hat"] if pt["sigma_hat"] is not None else estimate_sigma(first)
        plan = plan_highdim(first.n, ds.d, pt["beta1"], pt["beta2"], sigma, pt["C3"], pt["C4"],
                            pt["c1"], pt["c2"], pt["B"], pt["depth"], pt["rsc"])
        opt, refit = opt_from(cfg, "opt", settings["seed"]), opt_from(cfg, "refit_opt", settings["seed"])
        try:
            res = run_pipeline(ds, plan, opt, refit)
        except TrainingDivergence as exc:
            out.write_json("record.json", {"status": "failed", "error": str(exc), "plan": plan.to_dict()})
            return EXIT_DIVERGED
        out.write_model("model", res.model)
        out.write_json("record.json", {"status": "ok", **res.record(plan, timing)})
        out.write_json("timing.json", {**res.timing, "wall_time": time.perf_counter() - t0}, volatile=True)
        return EXIT_OK

    dgp = dgp_from(cfg, settings["seed"])
    spec = _recovery_spec(cfg, dgp, settings)
    rows, records, failed = [], [], False
    for s in spec.seeds:
        try:
            rec = run_recovery_seed(spec, s)
            rec["status"] = "ok"
        except TrainingDivergence as exc:
            rec, failed = {"seed": s, "status": "failed", "error": str(exc)}, True
        records.append(rec)
        if rec["status"] == "ok":
            m = rec["metrics"]
            rows.append([s, int(m["contains1"]), int(m["contains2"]), len(rec["S1_hat"]), len(rec["S2_hat"]),
                         m["gamma1"], m["gamma2"], m["precision1"], m["recall1"], m["precision2"], m["recall2"]])
    cols = ["seed", "contains1", "contains2", "size1", "size2", "fp1", "fp2",
            "precision1", "recall1", "precision2", "recall2"]
    out.write_bytes("recovery.csv", csv_bytes(cols, rows), columns=cols)
    ok = [r for r in records if r["status"] == "ok"]
    summary = {
        "dgp": spec.dgp.to_dict(),
        "opt": spec.opt.to_dict(),
        "refit_opt": spec.refit_opt.to_dict(),
        "runs": len(records),
        "containment_runs": sum(r["metrics"]["contains"] for r in ok),
        "size_bound_runs": sum(len(r["S1_hat"]) <= 4 * spec.dgp.s1 and len(r["S2_hat"]) <= 4 * spec.dgp.s2 for r in ok),
        "failed_runs": len(records) - len(ok),
    }
    out.write_json("records.json", records)
    out.write_json("summary.json", summary)
    out.write_json("timing.json", {"wall_time": time.perf_counter() - t0}, volatile=True)
    return EXIT_DIVERGED if failed else EXIT_OK


def cmd_rates(args, cfg, settings, out: RunDir) -> int:
    dgp = dgp_from(cfg, None)
    r = cfg.get("rates", {})
    grid = r.get("n_grid", [256, 512, 1024, 2048, 4096])
    if len(set(grid)) < 3:
        raise ConfigError("[rates] n_grid needs at least three distinct sizes")
    seeds = r.get("seeds", [settings["seed"] if settings["seed"] is not None else dgp.seed])
    spec = RateSpec(dgp, [int(n) for n in grid], [int(s) for s in seeds], opt_from(cfg, "opt", None),
                    bool(r.get("additive", True)), int(r.get("n_mc", 100_000)), int(r.get("mc_seed", 12345)))
    table = run_rates(spec, threads=settings["threads"])
    timing = not settings["deterministic"]
    cols = [c for c in RATE_COLUMNS if timing or c != "wall_time"]
    rows = [[getattr(row, c) for c in cols] for row in table.rows]
    out.write_bytes("rates.csv", csv_bytes(cols, rows), columns=cols)
    out.write_json("summary.json", {"spec": {"dgp": dgp.to_dict(), "n_grid": spec.n_grid, "seeds": spec.seeds,
                                             "opt": spec.opt.to_dict(), "additive": spec.additive,
                                             "n_mc": spec.n_mc, "mc_seed": spec.mc_seed},
                                    **table.summary()})
    out.write_json("timing.json", {"cells": [{"n": row.n, "seed": row.seed, "wall_time": row.wall_time}
                                             for row in table.rows]}, volatile=True)
    return EXIT_OK


def cmd_lowerbound(args, cfg, settings, out: RunDir) -> int:
    table = dict(cfg.get("lowerbound", {}))
    if settings["seed"] is not None:
        table["seed"] = settings["seed"]
    spec = _build(LowerBoundSpec, table, "lowerbound")
    t0 = time.perf_counter()
    report = run_lowerbound(spec)
    out.write_json("report.json", {"spec": asdict(spec), **report})
    out.write_json("timing.json", {"wall_time": time.perf_counter() - t0}, volatile=True)
    return EXIT_OK if report["passed"] else EXIT_ORACLE


def cmd_eval(args, cfg, settings, out: RunDir) -> int:
    model = _load_model_dir(_io(args, cfg, "model"), "model")
    record: dict[str, Any] = {"d": model.d, "keys": [str(k) for k in model.keys()]}
    data = _io(args, cfg, "data")
    if data is not None:
        ds = _load_data(data)
        if ds.d != model.d:
            raise ConfigError(f"data has d={ds.d} but the model has d={model.d}")
        r = ds.y - model.predict(ds.X)
        record["mse"] = float(r @ r / max(ds.n, 1))
        record["n"] = ds.n
    truth_dir = _io(args, cfg, "truth")
    if truth_dir is not None:
        truth = _load_model_dir(truth_dir, "truth")
        if truth.d != model.d:
            raise ConfigError("model and truth dimensions differ")
        e = cfg.get("eval", {})
        err, se = mc_l2_error(model, truth, int(e.get("n_mc", 100_000)), seed=int(e.get("mc_seed", 12345)))
        record["mc_l2_error"], record["stderr"] = err, se
        fit_p, truth_p = anova_project(model)[0], anova_project(truth)[0]
        record["component_l2_errors"] = {str(k): v for k, v in component_l2_errors(fit_p, truth_p).items()}
    out.write_json("eval.json", record)
    return EXIT_OK


HANDLERS: dict[str, Callable] = {
    "gen": cmd_gen,
    "fit": cmd_fit,
    "fit-sparse": cmd_fit_sparse,
    "pipeline": cmd_pipeline,
    "rates": cmd_rates,
    "lowerbound": cmd_lowerbound,
    "eval": cmd_eval,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="interactnn", description=__doc__.splitlines()[0])
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML config file")
    common.add_argument("--seed", type=int, default=None, help="override every seed in the config")
    common.add_argument("--threads", type=int, default=None, help="worker processes for sweep cells")
    common.add_argument("--deterministic", action="store_true", default=None,
                        help="sequential reduction and timing kept out of primary records")
    common.add_argument("--out-dir", help="fresh output directory")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name, parents=[common])
        if name in ("fit", "fit-sparse", "pipeline", "eval"):
            p.add_argument("--data", help="CSV with columns x1..xd,y")
        if name == "eval":
            p.add_argument("--model", help="model directory")
            p.add_argument("--truth", help="ground-truth model directory")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config if args.config is not None else _env("config"))
        if cfg.get("command") not in (None, args.command):
            raise ConfigError(f"config is for command {cfg['command']!r}, not {args.command!r}")
        settings = resolve_settings(args, cfg)
        out_dir = args.out_dir if args.out_dir is not None else _env("out_dir")
        if out_dir is None:
            raise ConfigError("--out-dir (or INTERACTNN_OUT_DIR) is required")
        target = Path(out_dir)
        # inputs are validated before anything touches the disk
        _precheck(args, cfg, settings)
        with RunDir(target) as out:
            code = HANDLERS[args.command](args, cfg, settings, out)
            out.commit(args.command, settings, "ok" if code == EXIT_OK else "failed")
    except ConfigError as exc:
        print(f"interactnn {args.command}: {exc}", file=sys.stderr)
        return EXIT_INPUT
    if code != EXIT_OK:
        print(f"interactnn {args.command}: finished with status {code}", file=sys.stderr)
    return code


def _precheck(args, cfg: dict, settings: dict) -> None:
    cmd = args.command
    if cmd in ("fit", "fit-sparse"):
        _load_data(_io(args, cfg, "data"))
    elif cmd == "pipeline":
        if _io(args, cfg, "data") is not None:
            _load_data(_io(args, cfg, "data"))
        else:
            dgp_from(cfg, settings["seed"])
    elif cmd in ("gen", "rates"):
        dgp_from(cfg, settings["seed"])
    elif cmd == "eval":
        _load_model_dir(_io(args, cfg, "model"), "model")
    opt_from(cfg, "opt", settings["seed"])
    opt_from(cfg, "refit_opt", settings["seed"])


if __name__ == "__main__":
    sys.exit(main())
