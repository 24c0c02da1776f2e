"""Scenario runner.

Exit codes: 0 success, 1 invalid config or arguments, 2 settlement or
conservation failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
from pathlib import Path
from typing import Optional, Sequence

from .config import FORMATS, ConfigError, load_scenario
from .engine import SimulationConfig, run_simulation, with_seed
from .metrics import SimulationReport, to_decimal
from .rewards import SettlementError

log = logging.getLogger("pbs_arena")

TRACE_COLUMNS = (
    "slot",
    "mechanism",
    "proposer",
    "winner",
    "outcome",
    "proposer_income",
    "builder_profit",
    "burned",
    "kickbacks",
    "floor",
    "ptc_verdict",
)

EXIT_OK, EXIT_INVALID, EXIT_FAILURE = 0, 1, 2


def report_json(report: SimulationReport, trace_name: str = "trace.csv") -> str:
    payload = report.to_dict()
    payload["trace"] = trace_name
    return json.dumps(payload, indent=2, sort_keys=True) + "\n"


def trace_csv(table) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\r\n")
    writer.writerow(TRACE_COLUMNS)
    rows = zip(
        table.proposer,
        table.winner,
        table.outcome,
        table.proposer_income,
        table.builder_profit,
        table.burned,
        table.kickbacks,
        table.floor,
        table.ptc,
    )
    for slot, (proposer, winner, outcome, income, profit, burned, kick, floor, ptc) in enumerate(rows):
        writer.writerow(
            (
                slot,
                table.mechanism,
                proposer,
                winner or "",
                outcome.value,
                income,
                profit,
                burned,
                kick,
                "" if floor is None else floor,
                ptc or "",
            )
        )
    return buf.getvalue()


def write_outputs(report: SimulationReport, out_dir: Path, fmt: str, suffix: str = "") -> list[Path]:
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    if fmt in ("json", "both"):
        path = out_dir / f"report{suffix}.json"
        path.write_text(report_json(report, f"trace{suffix}.csv"), encoding="utf-8")
        written.append(path)
    if fmt in ("csv", "both"):
        path = out_dir / f"trace{suffix}.csv"
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(trace_csv(report.table))
        written.append(path)
    return written


def summary_row(report: SimulationReport) -> dict:
    return {
        "seed": report.config.seed,
        "gini": to_decimal(report.gini),
        "hhi": to_decimal(report.hhi),
        "reward_variance": to_decimal(report.reward_variance),
        "burned_total": report.burned_total,
        "kickback_total": report.kickback_total,
        "outcome_counts": report.outcome_counts,
        "censorship_rate": to_decimal(report.censorship_rate),
        "conservation_ok": report.conservation.ok,
    }


def _run_one(config: SimulationConfig, out_dir: Path, fmt: str, suffix: str) -> dict:
    report = run_simulation(config)
    write_outputs(report, out_dir, fmt, suffix)
    row = summary_row(report)
    if not report.conservation.ok:
        row["error"] = (
            f"conservation residual {report.conservation.residual} "
            f"(first offending slot {report.conservation.first_offending_slot})"
        )
    return row


def _sweep_worker(args) -> dict:
    config, out_dir, fmt, seed = args
    try:
        return _run_one(with_seed(config, seed), out_dir, fmt, f"-{seed}")
    except SettlementError as exc:
        return {"seed": seed, "conservation_ok": False, "error": str(exc)}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pbs-arena", description="Slot-by-slot block auction simulator.")
    p.add_argument("--config", required=True, help="scenario TOML file")
    p.add_argument("--seed", type=int, help="override the scenario seed (u64)")
    p.add_argument("--slots", type=int, help="override the number of slots")
    p.add_argument("--out", help="output directory (default: $PBS_ARENA_OUT, then [output].dir)")
    p.add_argument("--sweep", type=int, metavar="N", help="run N consecutive seeds starting at the seed")
    p.add_argument("--format", choices=FORMATS, help="which files to write")
    p.add_argument("--jobs", type=int, default=1, help="parallel worker processes for sweeps")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_INVALID
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")

    try:
        scenario = load_scenario(args.config)
        config = scenario.config
        if args.seed is not None:
            config = with_seed(config, args.seed)
        if args.slots is not None:
            config.slots = args.slots
            config.validate()
        if args.sweep is not None and args.sweep < 1:
            raise ConfigError("--sweep must be >= 1", "--sweep")
    except (ConfigError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID

    out_dir = Path(args.out or os.environ.get("PBS_ARENA_OUT") or scenario.output_dir)
    fmt = args.format or scenario.format
    if args.sweep is not None:
        seeds = list(range(config.seed, config.seed + args.sweep))
    elif args.seed is None and scenario.seeds:
        seeds = scenario.seeds
    else:
        seeds = []

    if not seeds:
        try:
            row = _run_one(config, out_dir, fmt, "")
        except SettlementError as exc:
            print(f"settlement failure: {exc}", file=sys.stderr)
            return EXIT_FAILURE
        if "error" in row:
            print(f"conservation failure: {row['error']}", file=sys.stderr)
            return EXIT_FAILURE
        log.info("wrote %s", out_dir)
        return EXIT_OK

    jobs = [(config, out_dir, fmt, s) for s in sorted(seeds)]
    if args.jobs > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            rows = list(pool.map(_sweep_worker, jobs))
    else:
        rows = [_sweep_worker(j) for j in jobs]
    rows.sort(key=lambda r: r["seed"])
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "summary.json").write_text(json.dumps({"runs": rows}, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    failed = [r for r in rows if "error" in r]
    for r in failed:
        print(f"seed {r['seed']}: {r['error']}", file=sys.stderr)
    return EXIT_FAILURE if failed else EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
