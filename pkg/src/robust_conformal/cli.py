"""Command-line front end: ``robust-conformal {simulate,predict,sensitivity,experiment}``.

Exit codes: 0 success, 2 config error, 3 data error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import io
from .bench import (
    CSV_FIELDS,
    ReportRow,
    SimConfig,
    cell_keys,
    config_dict,
    default_jobs,
    run_experiment,
    simulate_source,
    simulate_target,
)
from .conformal import Method, MethodConfig, run_wrcp
from .debiased import run_dwrcp
from .estimators import FitError
from .quantile import DegenerateWeightsError
from .sensitivity import WHOLE, SensitivityTarget, fit_counterfactual, ite_interval

log = logging.getLogger("robust_conformal")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

INTERVAL_FIELDS = ["index", "method", "divergence", "rho", "fold", "threshold", "lower", "upper", "is_infinite"]
SENSITIVITY_FIELDS = [
    "index", "estimand", "population", "method", "divergence", "rho",
    "propensity", "weight", "threshold", "lower", "upper", "is_infinite",
]
REPORT_FIELDS = [f for f in CSV_FIELDS if f != "runtime"]
TIMING_FIELDS = ["method", "divergence", "rho", "runtime"]
# config entries that only select cells; a resumed run may change them
CELL_KEYS = {"methods", "divergences", "rho_grid"}


@dataclass
class RunManifest:
    subcommand: str
    config: str
    inputs: dict = field(default_factory=dict)
    out: str = "."
    seed: int | None = None

    def check(self) -> None:
        if not Path(self.config).is_file():
            raise io.ConfigError(f"config file not found: {self.config}")
        for name, path in self.inputs.items():
            if not Path(path).is_file():
                raise io.DataError(f"{name} file not found: {path}")


def _method_configs(section: dict) -> list[MethodConfig]:
    try:
        method = Method.parse(section["name"])
        rhos = section["rho"] if method.robust else [0.0]
        return [MethodConfig(method, section["divergence"], r, float(section["alpha"])) for r in rhos]
    except (ValueError, TypeError) as exc:
        raise io.ConfigError(str(exc)) from None


def _sim_config(cfg: dict) -> SimConfig:
    sim = cfg["simulation"]
    exp = cfg.get("experiment", {})
    try:
        return SimConfig(
            scenario=sim["scenario"],
            d=int(sim["d"]),
            sparsity=int(sim["sparsity"]),
            coef=float(sim["coef"]),
            eta=float(sim["eta"]),
            tilt=sim["tilt"],
            n_train=int(sim["n_train"]),
            n_test=int(sim["n_test"]),
            seed=cfg["seed"],
            **({} if not exp else {
                "n_runs": int(exp["n_runs"]),
                "rho_grid": exp["rho_grid"],
                "methods": exp["methods"],
                "divergences": exp["divergences"],
                "alpha": float(exp["alpha"]),
                "length_cap": float(exp["length_cap"]),
            }),
        )
    except (ValueError, TypeError, KeyError) as exc:
        raise io.ConfigError(str(exc)) from None


def _interval_columns(blocks) -> dict:
    cols = {k: [] for k in INTERVAL_FIELDS}
    for mc, intervals in blocks:
        for i, iv in enumerate(intervals):
            cols["index"].append(i)
            cols["method"].append(mc.method.value)
            cols["divergence"].append(mc.divergence.name.value if mc.method.robust else "none")
            cols["rho"].append(float(mc.rho))
            cols["fold"].append(iv.fold)
            cols["threshold"].append(iv.threshold)
            cols["lower"].append(iv.lower)
            cols["upper"].append(iv.upper)
            cols["is_infinite"].append(iv.is_infinite)
    return cols


def _coverage(intervals, y) -> float:
    return float(np.mean([yi in iv for iv, yi in zip(intervals, y)]))


# --------------------------------------------------------------------------
# subcommands


def cmd_simulate(cfg: dict, out: Path) -> int:
    sim = _sim_config(cfg)
    rng = np.random.default_rng(cfg["seed"])
    X, y = simulate_source(sim, rng)
    Xt, yt = simulate_target(sim, rng)
    with io.output_dir(out) as d:
        io.write_table(d / "source.csv", io.Dataset(X, y).columns())
        io.write_table(d / "target.csv", io.Dataset(Xt, yt).columns())
    print(f"wrote {len(X)} source and {len(Xt)} target rows to {out}")
    return EXIT_OK


def cmd_predict(cfg: dict, train: Path, test: Path, out: Path) -> int:
    section = cfg["method"]
    configs = _method_configs(section)
    tr = io.read_dataset(train, need_y=True)
    te = io.read_dataset(test)
    if tr.X.shape[1] != te.X.shape[1]:
        raise io.DataError(f"train has {tr.X.shape[1]} covariates, test has {te.X.shape[1]}")
    blocks = []
    for mc in configs:
        if mc.method is Method.DWRCP:
            intervals = run_dwrcp(tr.X, tr.y, te.X, mc, seed=cfg["seed"])
        else:
            intervals = run_wrcp(tr.X, tr.y, te.X, mc, seed=cfg["seed"], leave_one_out=bool(section["leave_one_out"]))
        blocks.append((mc, intervals))
        if te.y is not None:
            print(f"{mc.method.value} rho={mc.rho!r}: coverage {_coverage(intervals, te.y):.4f}")
    with io.output_dir(out) as d:
        io.write_table(d / "intervals.csv", _interval_columns(blocks))
    return EXIT_OK


def cmd_sensitivity(cfg: dict, observational: Path, targets: Path, out: Path) -> int:
    configs = _method_configs(cfg["method"])
    if configs[0].method is Method.DWRCP:
        raise io.ConfigError("sensitivity analysis supports CP, WCP, RCP and WRCP")
    sens = cfg["sensitivity"]
    try:
        target = SensitivityTarget(int(sens["t1"]), sens["t2"] if isinstance(sens["t2"], str) else int(sens["t2"]))
    except (ValueError, TypeError) as exc:
        raise io.ConfigError(f"sensitivity: {exc}") from None
    obs = io.read_dataset(observational, need_y=True, need_t=True)
    tgt = io.read_dataset(targets)
    if obs.X.shape[1] != tgt.X.shape[1]:
        raise io.DataError(f"observational data has {obs.X.shape[1]} covariates, targets have {tgt.X.shape[1]}")
    eps = float(sens["propensity_clip"])
    population = target.t2 if target.t2 == WHOLE else str(target.t2)
    cols = {k: [] for k in SENSITIVITY_FIELDS}

    def emit(estimand, mc, intervals, e, w):
        for i, iv in enumerate(intervals):
            cols["index"].append(i)
            cols["estimand"].append(estimand)
            cols["population"].append(population)
            cols["method"].append(mc.method.value)
            cols["divergence"].append(mc.divergence.name.value if mc.method.robust else "none")
            cols["rho"].append(float(mc.rho))
            cols["propensity"].append(float(e[i]))
            cols["weight"].append(float(w[i]) if w is not None else math.nan)
            cols["threshold"].append(iv.threshold)
            cols["lower"].append(iv.lower)
            cols["upper"].append(iv.upper)
            cols["is_infinite"].append(iv.is_infinite)

    fit = fit_counterfactual(obs.X, obs.t, obs.y, target, cfg["seed"], eps=eps)
    e = np.clip(fit.propensity(tgt.X), eps, 1 - eps)
    for mc in configs:
        if sens["ite"]:
            split = sens["budget_split"]
            intervals = ite_interval(
                obs.X, obs.t, obs.y, tgt.X, mc,
                budget_split=tuple(split) if split is not None else None,
                population=target.t2, seed=cfg["seed"],
            )
            emit("ITE", mc, intervals, e, None)
        else:
            intervals = fit.intervals(tgt.X, mc)
            emit(f"Y{target.t1}", mc, intervals, e, fit.test_weights(tgt.X))
        if tgt.y is not None:
            print(f"{mc.method.value} rho={mc.rho!r}: coverage {_coverage(intervals, tgt.y):.4f}")
    with io.output_dir(out) as d:
        io.write_table(d / "intervals.csv", cols)
    return EXIT_OK


def _rows_to_columns(rows, fields) -> dict:
    return {f: [getattr(r, f) for r in rows] for f in fields}


def _load_previous(d: Path, sim: SimConfig, config: dict):
    """Rows, per-run values and timings of an earlier invocation, if present."""
    report = d / "report.json"
    if not report.is_file():
        return {}, {}, {}
    with open(report, encoding="utf-8") as fh:
        prev = json.load(fh)
    def shared(c):
        return {k: v for k, v in c.items() if k not in CELL_KEYS}

    if shared(prev.get("config", {})) != shared(config):
        raise io.ConfigError(f"{report} was produced by a different configuration; refusing to resume")
    rows = {}
    for r in prev["rows"]:
        row = ReportRow(**r, runtime=math.nan)
        rows[row.key] = row
    per_run = {}
    for k, v in prev["per_run"].items():
        m, div, rho = k.split("|")
        per_run[(m, div, float(rho))] = v
    timing = {}
    if (d / "timing.csv").is_file():
        t = io.read_table(d / "timing.csv", {"method": str, "divergence": str})
        for m, div, rho, rt in zip(t["method"], t["divergence"], t["rho"], t["runtime"]):
            timing[(str(m), str(div), float(rho))] = float(rt)
    valid = set(cell_keys(sim))
    return ({k: v for k, v in rows.items() if k in valid}, per_run, timing)


def cmd_experiment(cfg: dict, out: Path, jobs: int | None, resume: bool) -> int:
    sim = _sim_config(cfg)
    config = config_dict(sim)
    with io.output_dir(out) as d:
        rows, per_run, timing = _load_previous(d, sim, config) if resume else ({}, {}, {})
        if rows:
            log.info("resuming: %d of %d cells already complete", len(rows), len(cell_keys(sim)))
        report = run_experiment(sim, jobs=jobs, skip=frozenset(rows))
        for r in report.rows:
            rows[r.key] = r
            timing[r.key] = r.runtime
        per_run.update(report.per_run)
        ordered = [rows[k] for k in cell_keys(sim)]
        io.write_table(d / "report.csv", _rows_to_columns(ordered, REPORT_FIELDS))
        timed = _rows_to_columns(ordered, TIMING_FIELDS[:-1])
        timed["runtime"] = [timing.get(r.key, math.nan) for r in ordered]
        io.write_table(d / "timing.csv", timed)
        io.write_json(d / "report.json", {
            "config": config,
            "rho_star": sim.rho_star,
            "rows": [{f: getattr(r, f) for f in REPORT_FIELDS} for r in ordered],
            "per_run": {
                "|".join(map(str, k)): [{kk: vv for kk, vv in v.items() if kk != "runtime"} for v in per_run[k]]
                for k in cell_keys(sim)
            },
        })
    print(f"{'method':8s} {'div':5s} {'rho':>7s} {'coverage':>9s} {'length':>7s} {'inf':>5s}")
    for r in ordered:
        print(f"{r.method:8s} {r.divergence:5s} {r.rho:7.3f} {r.coverage:9.4f} {r.length:7.3f} {r.infinite_rate:5.2f}")
    return EXIT_OK


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="robust-conformal", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="subcommand", required=True)

    def common(p, out_default):
        p.add_argument("--config", required=True, help="YAML config file")
        p.add_argument("--out", default=out_default, help="output directory")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")

    p = sub.add_parser("simulate", help="write source.csv and target.csv from a synthetic scenario")
    common(p, "data")
    p = sub.add_parser("predict", help="prediction intervals for test covariates")
    common(p, "predictions")
    p.add_argument("--train", required=True)
    p.add_argument("--test", required=True)
    p = sub.add_parser("sensitivity", help="counterfactual or ITE intervals under hidden confounding")
    common(p, "sensitivity")
    p.add_argument("--observational", required=True)
    p.add_argument("--targets", required=True)
    p = sub.add_parser("experiment", help="Monte Carlo coverage experiment")
    common(p, "results")
    p.add_argument("--jobs", type=int, default=None, help="worker processes (default: $ROBUST_CONFORMAL_JOBS or 1)")
    p.add_argument("--resume", action="store_true", help="skip cells already present in the output directory")
    return parser


def _manifest(args) -> RunManifest:
    inputs = {}
    if args.subcommand == "predict":
        inputs = {"train": args.train, "test": args.test}
    elif args.subcommand == "sensitivity":
        inputs = {"observational": args.observational, "targets": args.targets}
    return RunManifest(args.subcommand, args.config, inputs, args.out, args.seed)


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    manifest = _manifest(args)
    try:
        manifest.check()
        cfg = io.load_config(manifest.config, manifest.subcommand)
        if manifest.seed is not None:
            cfg["seed"] = manifest.seed
        out = Path(manifest.out)
        if args.subcommand == "simulate":
            return cmd_simulate(cfg, out)
        if args.subcommand == "predict":
            return cmd_predict(cfg, Path(args.train), Path(args.test), out)
        if args.subcommand == "sensitivity":
            return cmd_sensitivity(cfg, Path(args.observational), Path(args.targets), out)
        jobs = default_jobs() if args.jobs is None else args.jobs
        return cmd_experiment(cfg, out, jobs, args.resume)
    except io.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FitError, DegenerateWeightsError, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (io.DataError, ValueError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
