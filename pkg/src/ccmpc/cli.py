"""Command-line entry point: ``python -m ccmpc <subcommand> [options]``.

Exit codes: 0 success, 1 a reported negative outcome (planner infeasible,
mean-shift check failed, infeasible problem file), 2 configuration, input
or solver errors.  Wall-clock timings go to ``timings.json`` so every CSV is
byte-identical across reruns with the same config and seed.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import platform
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from importlib import metadata
from pathlib import Path

import numpy as np

from . import plots
from .config import ConfigError, config_hash, load_config, to_dict
from .constraints import AllocationError, BuildError, allocate_risk
from .geometry import PredictionLookupError, check_mean_shift, load_prediction, save_prediction
from .misocp import ProblemFormatError, SolveStatus, load_problem, solve, solve_by_enumeration
from .planners import PlannerKind
from .risk_bench import BenchConfig, BenchMethod, BenchResult, ConvergenceError, run_bench, summarize
from .scenarios import (LaneChangeConfig, SceneKind, TrialConfig, TrialRecord, aggregate,
                        gen_lane_change_predictions, run_trial)

OUT_DIR_ENV = "CCMPC_OUT_DIR"
EXIT_OK, EXIT_NEGATIVE, EXIT_ERROR = 0, 1, 2

log = logging.getLogger("ccmpc")


@dataclass(frozen=True)
class AssumptionConfig:
    """Inputs for ``check-assumptions`` when no prediction file is given."""
    epsilon: float = 0.05
    T: int = 10
    seed: int = 0
    lane_change: LaneChangeConfig = field(default_factory=LaneChangeConfig)


# ---------------------------------------------------------------------------
# output helpers


def _cell(v):
    if v is None:
        return ""
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if hasattr(v, "value"):
        return v.value
    return v


def write_csv(path: Path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_cell(v) for v in row])


def read_csv(path: Path) -> list:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _versions() -> dict:
    out = {"python": platform.python_version()}
    for dist in ("artifact", "numpy", "scipy", "clarabel", "scikit-learn", "matplotlib"):
        try:
            out[dist] = metadata.version(dist)
        except metadata.PackageNotFoundError:
            out[dist] = None
    return out


def write_manifest(out: Path, command: str, cfg, seed, extra=None):
    data = {"command": command, "config": to_dict(cfg), "config_hash": config_hash(cfg), "seed": seed,
            "versions": _versions()}
    if extra:
        data.update(extra)
    (out / "manifest.json").write_text(json.dumps(data, indent=1, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# subcommands


def cmd_riskbench(args, out: Path) -> int:
    cfg = load_config(BenchConfig, args.config, args.override)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    log.info("risk bench: %d repetitions", cfg.repetitions)
    results = run_bench(cfg)
    write_bench(out, results)
    plots.plot_bench(results, out / "riskbench.svg", cfg.epsilon)
    write_manifest(out, "riskbench", cfg, cfg.seed)
    for method, (x, viol, _) in summarize(results).items():
        print(f"{method.value:12s} mean x* {x:9.4f}  mean violation {viol:.4f}")
    return EXIT_OK


def write_bench(out: Path, results):
    write_csv(out / "riskbench.csv", ["method", "rep", "x_star", "violation_rate"],
              [(r.method, r.seed, r.x_star, r.violation_rate) for r in results])
    write_timings(out, {"runs": [{"method": r.method.value, "rep": r.seed, "solve_time": r.solve_time}
                                 for r in results]})
    write_csv(out / "riskbench_summary.csv", ["method", "mean_x_star", "mean_violation_rate"],
              [(m, x, v) for m, (x, v, _) in summarize(results).items()])


def _trial_job(job):
    cfg, kind, trial = job
    record, trace, _ = run_trial(cfg, kind, trial)
    return record, np.asarray(trace.states).tolist(), np.asarray(trace.inputs).tolist()


def _run_scene(args, out: Path, scene: SceneKind) -> int:
    cfg = load_config(TrialConfig, args.config, args.override, defaults=TrialConfig(scene=scene))
    if cfg.scene is not scene:
        raise ConfigError(f"this subcommand runs scene {scene.value!r}, config says {cfg.scene.value!r}")
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    jobs = [(cfg, kind, trial) for kind in cfg.planners for trial in range(cfg.n_trials)]
    log.info("%s: %d planners x %d trials", scene.value, len(cfg.planners), cfg.n_trials)
    if args.workers > 1:
        with ProcessPoolExecutor(args.workers) as pool:
            done = list(pool.map(_trial_job, jobs))
    else:
        done = [_trial_job(j) for j in jobs]
    records = [d[0] for d in done]
    traces = out / "traces"
    traces.mkdir(exist_ok=True)
    for rec, states, inputs in done:
        (traces / f"{rec.planner.value}_{rec.seed:03d}.json").write_text(json.dumps(
            {"planner": rec.planner.value, "trial": rec.seed, "feasible": rec.feasible,
             "infeasible_at": rec.infeasible_at, "states": states, "inputs": inputs}) + "\n")
    write_trials(out, records)
    goal = cfg.intersection.goal if scene is SceneKind.T_INTERSECTION_LITE else None
    plots.plot_paths({f"{rec.planner.value} #{rec.seed}": states for rec, states, _ in done if rec.seed == 0},
                     out / "paths.svg", goal)
    write_manifest(out, scene.value, cfg, cfg.seed)
    print_metrics(aggregate(records))
    return EXIT_OK if all(r.feasible for r in records) else EXIT_NEGATIVE


def write_trials(out: Path, records):
    write_csv(out / "trials.csv",
              ["trial", "planner", "feasible", "infeasible_at", "cost", "travel_time", "collision_rate"],
              [(r.seed, r.planner, r.feasible, r.infeasible_at, r.cost, r.travel_time, r.collision_rate)
               for r in records])
    rows = aggregate(records)
    write_metrics(out, rows)
    trials = [{"trial": r.seed, "planner": r.planner.value, "worst_solve_time": r.worst_solve_time} for r in records]
    metrics = [{"planner": m.planner.value, "worst_solve_time": m.worst_solve_time} for m in rows]
    write_timings(out, {"trials": trials, "metrics": metrics})


def write_metrics(out: Path, rows, prefix: str = "metrics"):
    write_csv(out / f"{prefix}.csv", ["planner", "n_trials", "feasibility", "travel_time", "cost", "collision_rate"],
              [(m.planner, m.n_trials, m.feasibility, m.travel_time, m.cost, m.collision_rate) for m in rows])


def write_timings(out: Path, data: dict):
    (out / "timings.json").write_text(json.dumps(data, indent=1) + "\n")


def read_timings(run: Path, key: str) -> list:
    path = run / "timings.json"
    return json.loads(path.read_text()).get(key, []) if path.exists() else []


def print_metrics(rows):
    print(f"{'planner':12s} {'feasible':>8s} {'travel[s]':>9s} {'cost':>10s} {'coll.rate':>9s} {'worst[s]':>8s}")
    for m in rows:
        print(f"{m.planner.value:12s} {m.feasibility:8.2f} {m.travel_time:9.2f} {m.cost:10.3f} "
              f"{m.collision_rate:9.5f} {m.worst_solve_time:8.3f}")


def cmd_check_assumptions(args, out: Path) -> int:
    cfg = load_config(AssumptionConfig, args.config, args.override)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if args.pred is not None:
        pred = load_prediction(args.pred)
        horizon = max((t for (_, t, _) in pred.entries), default=1)
        source = {"prediction_file": str(args.pred)}
    else:
        lc = replace(cfg.lane_change, epsilon=cfg.epsilon, T=cfg.T)
        pred = gen_lane_change_predictions(cfg.T - 1, cfg.T, cfg.seed, lc)
        save_prediction(pred, out / "prediction.json")
        horizon = cfg.T
        source = {"prediction_file": "prediction.json"}
    alloc = allocate_risk(cfg.epsilon, horizon, max(len(pred.obstacles()), 1))
    report = check_mean_shift(pred, alloc)
    table = report.table()
    write_csv(out / "assumption.csv", ["t", "tau", "obstacle", "face", "mode", "gamma", "gamma_g", "h", "ok"],
              [(r["t"], r["tau"], r["j"], r["i"], r["k"], r["gamma"], r["gamma_g"], r["h"], r["ok"])
               for r in table])
    plots.plot_assumption(table, out / "assumption.svg")
    write_manifest(out, "check-assumptions", cfg, cfg.seed, source)
    taus = sorted({r["tau"] for r in table})
    for tau in taus:
        rows = [r for r in table if r["tau"] == tau]
        margin = min(r["gamma_g"] - r["h"] for r in rows)
        print(f"tau={tau:2d} checks={len(rows):4d} min(gamma*g - h)={margin:.6g}")
    print("mean-shift check:", "PASS" if report.passed else f"FAIL ({len(report.violations)} violations)")
    return EXIT_OK if report.passed else EXIT_NEGATIVE


def cmd_solve_file(args, out: Path) -> int:
    p = load_problem(args.problem)
    res = solve(p, time_limit=args.time_limit)
    doc = {"status": res.status.value, "objective": res.objective, "assignment": list(res.assignment or ()),
           "node_count": res.node_count}
    if args.enumerate:
        ref = solve_by_enumeration(p)
        doc["enumeration"] = {"status": ref.status.value, "objective": ref.objective,
                              "assignment": list(ref.assignment or ())}
    (out / "solve.json").write_text(json.dumps(doc, indent=1) + "\n")
    print(json.dumps(doc, indent=1))
    return EXIT_OK if res.feasible else EXIT_NEGATIVE


def cmd_report(args, out: Path) -> int:
    run = Path(args.run_dir) if args.run_dir else out
    lines = [f"# Report for {run}", ""]
    if (run / "trials.csv").exists():
        records = load_trial_records(run)
        rows = aggregate(records)
        write_metrics(out, rows, "report_metrics")
        print_metrics(rows)
        lines += ["| planner | trials | feasibility | travel time [s] | cost | collision rate |",
                  "|---|---|---|---|---|---|"]
        lines += [f"| {m.planner.value} | {m.n_trials} | {m.feasibility:.2f} | {m.travel_time:.2f} | "
                  f"{m.cost:.3f} | {m.collision_rate:.5f} |" for m in rows]
    elif (run / "riskbench.csv").exists():
        results = load_bench_results(run)
        plots.plot_bench(results, out / "report_riskbench.svg")
        lines += ["| method | mean x* | mean violation |", "|---|---|---|"]
        for method, (x, v, _) in summarize(results).items():
            lines.append(f"| {method.value} | {x:.4f} | {v:.4f} |")
            print(f"{method.value:12s} mean x* {x:9.4f}  mean violation {v:.4f}")
    else:
        raise ConfigError(f"{run} holds neither trials.csv nor riskbench.csv")
    (out / "report.md").write_text("\n".join(lines) + "\n")
    return EXIT_OK


def _float(s: str) -> float:
    return float(s) if s != "" else math.nan


def load_trial_records(run: Path) -> list:
    timings = {(d["trial"], d["planner"]): d["worst_solve_time"] for d in read_timings(run, "trials")}
    return [TrialRecord(int(r["trial"]), PlannerKind(r["planner"]), r["feasible"] == "true",
                        int(r["infeasible_at"]) if r["infeasible_at"] else None, _float(r["cost"]),
                        _float(r["travel_time"]), _float(r["collision_rate"]),
                        timings.get((int(r["trial"]), r["planner"]), math.nan))
            for r in read_csv(run / "trials.csv")]


def load_bench_results(run: Path) -> list:
    timings = {(d["method"], d["rep"]): d["solve_time"] for d in read_timings(run, "runs")}
    return [BenchResult(BenchMethod(r["method"]), int(r["rep"]), _float(r["x_star"]), _float(r["violation_rate"]),
                        timings.get((r["method"], int(r["rep"])), math.nan))
            for r in read_csv(run / "riskbench.csv")]


# ---------------------------------------------------------------------------
# argument parsing


COMMANDS = {
    "riskbench": cmd_riskbench,
    "lane-change": lambda a, o: _run_scene(a, o, SceneKind.LANE_CHANGE),
    "intersection": lambda a, o: _run_scene(a, o, SceneKind.T_INTERSECTION_LITE),
    "check-assumptions": cmd_check_assumptions,
    "solve-file": cmd_solve_file,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="ccmpc", description="Chance-constrained MPC under GMM uncertainty.")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", type=Path, help="JSON config (keys not given keep their defaults)")
        sp.add_argument("--out-dir", type=Path,
                        help=f"output directory (default ${OUT_DIR_ENV}/<command> or runs/<command>)")
        sp.add_argument("--seed", type=int, help="overrides the config seed")
        sp.add_argument("--override", "-o", action="append", default=[], metavar="KEY=VALUE",
                        help="dotted-path override, e.g. lane_change.epsilon=0.1 (repeatable)")
        sp.add_argument("-v", "--verbose", action="store_true")
        if name in ("lane-change", "intersection"):
            sp.add_argument("--workers", type=int, default=1, help="parallel trial processes")
        if name == "check-assumptions":
            sp.add_argument("--pred", type=Path, help="prediction file; generated from the config when omitted")
        if name == "solve-file":
            sp.add_argument("--problem", type=Path, required=True)
            sp.add_argument("--time-limit", type=float, default=60.0)
            sp.add_argument("--enumerate", action="store_true", help="also run the enumeration oracle")
        if name == "report":
            sp.add_argument("--run-dir", type=Path, help="directory of a previous run (default: --out-dir)")
    return ap


def resolve_out_dir(args) -> Path:
    if args.out_dir is not None:
        return args.out_dir
    if args.command == "report" and args.run_dir is not None:
        return args.run_dir
    return Path(os.environ.get(OUT_DIR_ENV, "runs")) / args.command


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    out = resolve_out_dir(args)
    try:
        out.mkdir(parents=True, exist_ok=True)
        return COMMANDS[args.command](args, out)
    except (ConfigError, ProblemFormatError, BuildError, AllocationError, PredictionLookupError,
            ConvergenceError) as exc:
        print(f"error: {exc}", file=sys.stderr)
    except (OSError, ValueError, KeyError) as exc:
        print(f"error ({type(exc).__name__}): {exc}", file=sys.stderr)
    return EXIT_ERROR


if __name__ == "__main__":
    raise SystemExit(main())
