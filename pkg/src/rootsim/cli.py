"""Command-line scenario runner.

    rootsim --list
    rootsim --run <name|all> [--torture] [--defensive] [--seed N]
            [--semispace-words N] [--format human|json] [--all-modes]

Exit status is 0 when every report matches its scenario's expectation for
the active mode, 1 when any does not, 2 on usage errors.
"""

from __future__ import annotations

import argparse
import json
import sys
from typing import Sequence, TextIO

from . import scenarios
from .heap import MIN_SEMISPACE_WORDS
from .scenarios import ModeConfig, ScenarioReport


def _nonneg(text: str) -> int:
    n = int(text)
    if n < 0:
        raise argparse.ArgumentTypeError(f"{n} is negative")
    return n


def _semispace(text: str) -> int:
    n = int(text)
    if n < MIN_SEMISPACE_WORDS:
        raise argparse.ArgumentTypeError(f"semispace must be at least {MIN_SEMISPACE_WORDS} words")
    return n


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rootsim", description="Run FFI rooting scenarios.")
    action = p.add_mutually_exclusive_group(required=True)
    action.add_argument("--list", action="store_true", help="list scenarios and exit")
    action.add_argument("--run", metavar="NAME", help="scenario name, or 'all'")
    p.add_argument("--torture", action="store_true", help="collect before every allocation")
    p.add_argument("--defensive", action="store_true", help="verify root registration on every call")
    p.add_argument("--seed", type=_nonneg, default=0)
    p.add_argument("--semispace-words", type=_semispace, default=scenarios.DEFAULT_SEMISPACE_WORDS)
    p.add_argument("--format", choices=("human", "json"), default="human")
    p.add_argument(
        "--all-modes", action="store_true",
        help="ignore --torture/--defensive and run every combination",
    )
    return p


def report_line(report: ScenarioReport) -> str:
    return json.dumps(report.to_json(), sort_keys=True, separators=(",", ":"))


def _print_list(out: TextIO) -> None:
    rows = scenarios.list_scenarios()
    width = max(len(name) for name, _ in rows)
    for name, desc in rows:
        print(f"{name:<{width}}  {desc}", file=out)


def _print_table(reports: list[ScenarioReport], out: TextIO) -> None:
    header = ("scenario", "torture", "defensive", "outcome", "site", "roots", "gcs", "expected")
    rows = [header]
    for r in reports:
        rows.append((
            r.name,
            "on" if r.mode.torture else "off",
            "on" if r.mode.defensive else "off",
            r.outcome.label if r.outcome.kind != "Failure" else f"Failure: {r.outcome.text}",
            r.outcome.site or "",
            f"{r.root_count_delta:+d}",
            str(r.collections),
            "ok" if scenarios.expectation_met(r) else "MISMATCH",
        ))
    widths = [max(len(row[i]) for row in rows) for i in range(len(header))]
    for row in rows:
        print("  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip(), file=out)
    met = sum(scenarios.expectation_met(r) for r in reports)
    print(f"\n{met}/{len(reports)} expectations met", file=out)


def main(argv: Sequence[str] | None = None, out: TextIO | None = None) -> int:
    out = out or sys.stdout
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)

    if args.list:
        _print_list(out)
        return 0

    names = list(scenarios.SCENARIOS) if args.run == "all" else [args.run]
    unknown = [n for n in names if n not in scenarios.SCENARIOS]
    if unknown:
        print(f"rootsim: unknown scenario {unknown[0]!r} (see --list)", file=sys.stderr)
        return 2

    modes = scenarios.MODES if args.all_modes else [(args.torture, args.defensive)]
    reports = []
    for torture, defensive in modes:
        mode = ModeConfig(torture, defensive, args.semispace_words, args.seed)
        reports.extend(scenarios.run_scenario(name, mode) for name in names)

    if args.format == "json":
        for r in reports:
            print(report_line(r), file=out)
    else:
        _print_table(reports, out)
    return 0 if all(scenarios.expectation_met(r) for r in reports) else 1


def cli_main() -> None:
    sys.exit(main())


if __name__ == "__main__":
    cli_main()
