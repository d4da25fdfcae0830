"""Experiment command line: run, compare, replay."""

from __future__ import annotations

import argparse
import json
import os
import sys
from typing import Optional

from .config import load_config
from .errors import ConfigError, EvofluxError, UndefinedBaseline
from .metrics import (
    RunReport,
    compute_report,
    load_trace,
    normalized_evolution_rate,
    write_curves_csv,
)
from .runner import run_experiment


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="evoflux", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run an experiment from a config file")
    run.add_argument("--config", required=True, help="TOML experiment config")
    run.add_argument("--mode", choices=("sync", "async"), help="override run.mode")
    run.add_argument("--policy", help="override staleness.policy")
    run.add_argument("--seed", type=int, help="override run.seed")
    run.add_argument("--budget", type=float, help="override run.budget_s")
    run.add_argument("--out", default="out", help="output directory")

    compare = sub.add_parser("compare", help="compare two report files")
    compare.add_argument("--a", required=True, help="baseline report JSON")
    compare.add_argument("--b", required=True, help="treatment report JSON")

    replay = sub.add_parser("replay", help="recompute a report from a trace")
    replay.add_argument("--trace", required=True, help="event trace JSONL")
    replay.add_argument("--budget", type=float, required=True, help="budget seconds")
    replay.add_argument("--out", help="write the report JSON here (default stdout)")
    return parser


def _cmd_run(args: argparse.Namespace) -> int:
    cfg = load_config(args.config)
    if args.mode:
        cfg.mode = args.mode
    if args.policy:
        cfg.policy = args.policy
    if args.seed is not None:
        cfg.seed = args.seed
    if args.budget is not None:
        cfg.budget_s = args.budget
    cfg.validate()

    result = run_experiment(cfg)
    report = result.report
    os.makedirs(args.out, exist_ok=True)
    report_path = os.path.join(args.out, "report.json")
    with open(report_path, "w", encoding="utf-8") as fh:
        fh.write(report.to_json() + "\n")
    result.trace.save_jsonl(os.path.join(args.out, "trace.jsonl"))
    write_curves_csv(
        report,
        os.path.join(args.out, "score_curve.csv"),
        os.path.join(args.out, "concurrency_curve.csv"),
    )
    if result.pool is not None:
        result.pool.save(os.path.join(args.out, "pool.json"))
    print(
        f"{cfg.mode}/{cfg.policy} seed={cfg.seed} budget={report.budget_seconds:.0f}s: "
        f"{report.tokens_per_second:.1f} tok/s, "
        f"{report.proposals_per_min:.2f} proposals/min, "
        f"{report.accepted_proposals_per_min:.2f} accepted/min, "
        f"score {report.initial_score:.3f}->{report.final_score:.3f} "
        f"-> {report_path}"
    )
    return 0


def _load_report(path: str) -> RunReport:
    with open(path, encoding="utf-8") as fh:
        return RunReport.from_json(fh.read())


def _ratio(b: float, a: float) -> str:
    return f"{b / a:.2f}x" if a > 0 else "--"


def _cmd_compare(args: argparse.Namespace) -> int:
    a, b = _load_report(args.a), _load_report(args.b)
    try:
        rate = f"{normalized_evolution_rate(b, a):.2f}"
    except UndefinedBaseline:
        rate = "--"
    rows = [
        ("tokens/s", a.tokens_per_second, b.tokens_per_second),
        ("proposals/min", a.proposals_per_min, b.proposals_per_min),
        ("accepted/min", a.accepted_proposals_per_min, b.accepted_proposals_per_min),
        ("avg in-flight", a.average_concurrency, b.average_concurrency),
    ]
    print(f"{'metric':<16}{'A':>12}{'B':>12}{'B/A':>8}")
    for name, va, vb in rows:
        print(f"{name:<16}{va:>12.2f}{vb:>12.2f}{_ratio(vb, va):>8}")
    print(f"{'score gain':<16}{a.final_score - a.initial_score:>12.3f}"
          f"{b.final_score - b.initial_score:>12.3f}{rate:>8}")
    return 0


def _cmd_replay(args: argparse.Namespace) -> int:
    trace = load_trace(args.trace)
    report = compute_report(trace, args.budget)
    text = report.to_json()
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text + "\n")
        print(f"report -> {args.out}")
    else:
        print(text)
    return 0


def main(argv: Optional[list[str]] = None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "run":
            return _cmd_run(args)
        if args.command == "compare":
            return _cmd_compare(args)
        return _cmd_replay(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (EvofluxError, OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
