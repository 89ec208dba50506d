"""Command-line entry points for single runs, sweeps and utilities."""
from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import tempfile
from concurrent.futures import ProcessPoolExecutor, as_completed
from importlib import resources
from pathlib import Path

import numpy as np

from .arrivals import giant_arrival_rates
from .known_rate import solve_pk
from .model import ConfigurationError
from .scenario import build_scenario, generate_dataset, parse_scenario
from .sim import TRACE_COLUMNS, run_simulation
from .wog import deadline_bounds

SWEEP_METRICS = (
    "utility", "response_mean_ms", "response_max_ms", "block_rate",
    "satisfaction_ratio", "served", "blocked", "dropped", "late",
)


def write_atomic(path: Path, text: str):
    """Write via a temp file in the same directory, then rename."""
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def dump_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def write_trace_csv(path: Path, rows):
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    with os.fdopen(fd, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(TRACE_COLUMNS)
        writer.writerows(rows)
    os.replace(tmp, path)


def load_summary_schema() -> dict:
    with resources.files("mecsim.schemas").joinpath("summary.schema.json").open() as fh:
        return json.load(fh)


def _run_one(cfg: dict, outdir: Path, figures: bool | None = None):
    scenario = build_scenario(cfg)
    summary, trace = run_simulation(scenario)
    outdir.mkdir(parents=True, exist_ok=True)
    write_atomic(outdir / "summary.json", dump_json(summary.as_dict()))
    if cfg["write_trace"]:
        write_trace_csv(outdir / "trace.csv", trace)
    want_figures = cfg["figures"] if figures is None else figures
    if want_figures:
        from .report import render_run_figures

        render_run_figures(summary.as_dict(), trace, outdir)
    return summary


def cmd_simulate(args) -> int:
    cfg = parse_scenario(args.config)
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.output_dir is not None:
        cfg["output_dir"] = args.output_dir
    if args.no_trace:
        cfg["write_trace"] = False
    if args.no_figures:
        cfg["figures"] = False
    outdir = Path(cfg["output_dir"])
    summary = _run_one(cfg, outdir)
    print(
        f"{summary.algorithm}: served={summary.served} blocked={summary.blocked} "
        f"dropped={summary.dropped} utility={summary.utility:.4f} "
        f"response_mean={summary.response_mean_ms:.3f}ms -> {outdir}"
    )
    return 0


def _sweep_point(cfg: dict, param: str, value, point_dir: str):
    cfg = dict(cfg)
    cfg[param] = value
    cfg["output_dir"] = point_dir
    summary = _run_one(cfg, Path(point_dir), figures=False)
    return summary.as_dict()


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def cmd_sweep(args) -> int:
    cfg = parse_scenario(args.config)
    if args.output_dir is not None:
        cfg["output_dir"] = args.output_dir
    values = [_parse_value(v) for v in args.values.split(",")]
    base = Path(cfg["output_dir"])
    base.mkdir(parents=True, exist_ok=True)
    # sweeping validity is checked up front so typos fail fast
    for v in values:
        probe = dict(cfg)
        probe[args.param] = v
        parse_scenario(probe)

    max_workers = int(os.environ.get("MEC_SIM_THREADS", "0")) or (os.cpu_count() or 1)
    max_workers = max(1, min(max_workers, len(values)))
    jobs = {
        v: (dict(cfg), args.param, v, str(base / f"{args.param}_{v}")) for v in values
    }
    results: dict = {}
    failures: dict = {}
    if max_workers == 1:
        for v, job in jobs.items():
            try:
                results[v] = _sweep_point(*job)
            except Exception as exc:  # partial sweeps are retained
                failures[v] = repr(exc)
    else:
        with ProcessPoolExecutor(max_workers=max_workers) as pool:
            futs = {pool.submit(_sweep_point, *job): v for v, job in jobs.items()}
            for fut in as_completed(futs):
                v = futs[fut]
                try:
                    results[v] = fut.result()
                except Exception as exc:
                    failures[v] = repr(exc)

    rows = []
    for v in values:
        if v not in results:
            continue
        s = results[v]
        row = {"param": args.param, "value": v, "seed": s["seed"]}
        row.update({m: s[m] for m in SWEEP_METRICS})
        rows.append(row)
    combined = base / "combined.csv"
    fd, tmp = tempfile.mkstemp(dir=base, prefix=".combined.")
    with os.fdopen(fd, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["param", "value", "seed", *SWEEP_METRICS])
        writer.writeheader()
        writer.writerows(rows)
    os.replace(tmp, combined)

    manifest = {
        "param": args.param,
        "values": values,
        "completed": [v for v in values if v in results],
        "failed": {str(v): err for v, err in failures.items()},
    }
    write_atomic(base / "sweep_manifest.json", dump_json(manifest))
    if not args.no_figures and rows:
        from .report import render_sweep_figures

        render_sweep_figures(rows, args.param, base)
    print(f"sweep over {args.param}: {len(results)} ok, {len(failures)} failed -> {base}")
    return 0 if not failures else 1


def cmd_solve_pk(args) -> int:
    cfg = parse_scenario(args.config)
    scenario = build_scenario(cfg)
    lam = giant_arrival_rates(scenario.process, len(scenario.stations), np.ones(1))[:, 0]
    sol = solve_pk(scenario.stations, lam)
    print(
        dump_json(
            {
                "lambda": [float(v) for v in lam],
                "y_star": [float(v) for v in sol.y_star],
                "mu_star": [float(v) for v in sol.mu_star],
                "z_star": sol.z_star,
            }
        ),
        end="",
    )
    return 0


def cmd_bounds(args) -> int:
    cfg = parse_scenario(args.config)
    scenario = build_scenario(cfg)
    report = deadline_bounds(scenario.v, scenario.stations, scenario.topology, l_max=scenario.l_max)
    print(
        dump_json(
            {
                "v": scenario.v,
                "l_max_slots": scenario.l_max,
                "delta_max": scenario.topology.delta_max,
                "h_max": [int(v) for v in report.h_max],
                "z_max": [int(v) for v in report.z_max],
                "w_max": [float(v) for v in report.w_max],
                "v_ceiling": report.v_ceiling if np.isfinite(report.v_ceiling) else None,
            }
        ),
        end="",
    )
    return 0


def cmd_dataset_gen(args) -> int:
    path = generate_dataset(
        args.out, seed=args.seed, n_stations=args.stations, n_groups=args.groups
    )
    print(f"wrote {path}")
    return 0


def cmd_validate(args) -> int:
    import jsonschema

    failures = []

    def check(name, fn):
        try:
            fn()
            print(f"PASS {name}")
        except Exception as exc:
            failures.append((name, exc))
            print(f"FAIL {name}: {exc}")

    cfg = parse_scenario(args.config)
    cfg["write_trace"] = False
    cfg["figures"] = False
    scenario = build_scenario(cfg)

    state = {}

    def run_once():
        summary, _ = run_simulation(scenario)
        state["summary"] = summary.as_dict()

    check("run completes with per-slot invariants", run_once)
    check(
        "summary validates against the published schema",
        lambda: jsonschema.validate(state["summary"], load_summary_schema()),
    )

    def accounting():
        s = state["summary"]
        assert s["arrived"] == s["served"] + s["blocked"] + s["dropped"] + s["pending"]

    check("task accounting closes", accounting)

    def determinism():
        second, _ = run_simulation(build_scenario(cfg))
        assert dump_json(second.as_dict()) == dump_json(state["summary"]), "summaries differ"

    check("identical seed reproduces the summary bit-exactly", determinism)

    if scenario.algorithm in ("wog", "wog-observed"):
        def energy():
            s = state["summary"]
            w_max = max(
                deadline_bounds(scenario.v, scenario.stations, scenario.topology).w_max
            )
            slack = 2 * w_max / s["horizon_slots"]
            for avg, budget in zip(s["energy_avg_j"], s["energy_budget_j"]):
                assert avg <= budget + slack, f"energy {avg} above budget {budget} + {slack}"

        check("running-average energy within budget slack", energy)

    return 1 if failures else 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="mecsim",
        description="Cooperative peer-offloading simulator for edge base stations",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="run one scenario")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--output-dir", default=None)
    p.add_argument("--no-trace", action="store_true")
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(fn=cmd_simulate)

    p = sub.add_parser("sweep", help="run a scenario across parameter values")
    p.add_argument("--config", required=True)
    p.add_argument("--param", required=True)
    p.add_argument("--values", required=True, help="comma-separated JSON scalars")
    p.add_argument("--output-dir", default=None)
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(fn=cmd_sweep)

    p = sub.add_parser("solve-pk", help="print the optimal throughput/service split")
    p.add_argument("--config", required=True)
    p.set_defaults(fn=cmd_solve_pk)

    p = sub.add_parser("bounds", help="print queue bounds and the deadline V ceiling")
    p.add_argument("--config", required=True)
    p.set_defaults(fn=cmd_bounds)

    p = sub.add_parser("dataset-gen", help="synthesize a locations CSV")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--stations", type=int, default=36)
    p.add_argument("--groups", type=int, default=126)
    p.set_defaults(fn=cmd_dataset_gen)

    p = sub.add_parser("validate", help="run the invariant suite on a scenario")
    p.add_argument("--config", required=True)
    p.set_defaults(fn=cmd_validate)

    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigurationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
