"""Command line: simulate, run, sweep, check-robustness.

Exit codes: 0 success, 1 configuration error, 2 every experiment cell
failed, 3 the robustness acceptance check failed.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path
from typing import List, Optional

from mriv.config import ConfigError, load_config
from mriv.dataset import DatasetError, save_dataset
from mriv.harness import (
    HarnessError,
    emit_results,
    emit_sweep,
    run_experiment,
    run_robustness_suite,
    sweep_confounding,
    sweep_smoothness,
)
from mriv.simgen import GpError, semi_synthetic, simulate

EXIT_OK, EXIT_CONFIG, EXIT_ALL_FAILED, EXIT_ROBUSTNESS = 0, 1, 2, 3


def _values(text: str) -> List[float]:
    try:
        vals = [float(v) for v in text.replace(",", " ").split()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a comma-separated list of numbers, got {text!r}") from None
    if not vals:
        raise argparse.ArgumentTypeError("empty value list")
    return vals


class _Parser(argparse.ArgumentParser):
    """Usage errors count as configuration errors (exit 1, not argparse's 2)."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mriv", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("simulate", help="write a simulated data set and its true surfaces")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("run", help="fit every method on every (n, seed) cell and report RMSE")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("sweep", help="RMSE series over confounding strength or smoothness")
    p.add_argument("--param", required=True, choices=("confounding", "smoothness"))
    p.add_argument("--values", required=True, type=_values)
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("check-robustness", help="verify the three robustness conditions in closed form")
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--points", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--magnitude", type=float, default=0.1)
    p.add_argument("--out", required=True)
    return parser


def _simulate(args) -> int:
    cfg = load_config(args.config)
    if cfg.generator == "file":
        raise ConfigError("simulate needs generator = gp-sim or semi-synthetic")
    if cfg.generator == "gp-sim":
        data, truth = simulate(cfg.sim)
    else:
        data, truth = semi_synthetic(cfg.sim.n, cfg.sim.seed, cfg.sim.alpha_u, cfg.semi_p)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_dataset(data, out / "dataset.csv")
    truth.to_csv(out / "components.csv")
    print(f"wrote {data.n} rows to {out / 'dataset.csv'}")
    return EXIT_OK


def _report_failures(records) -> None:
    for r in records:
        if r.failed:
            print(f"cell failed: method={r.method} n={r.n} seed={r.seed}: {r.error}", file=sys.stderr)


def _run(args) -> int:
    cfg = load_config(args.config)
    table = run_experiment(cfg)
    _report_failures(table.records)
    detail, summary = emit_results(table, args.out)
    for method, n, mean, sd in table.summary():
        print(f"{method:14s} n={n:<6d} rmse {mean:.4f} +- {sd:.4f}")
    return EXIT_ALL_FAILED if table.all_failed else EXIT_OK


def _sweep(args) -> int:
    cfg = load_config(args.config)
    fn = sweep_confounding if args.param == "confounding" else sweep_smoothness
    result = fn(cfg, args.values)
    records = [r for t in result.tables for r in t.records]
    _report_failures(records)
    emit_sweep(result, args.out)
    for v, t in zip(result.values, result.tables):
        line = "  ".join(f"{m}={mean:.4f}" for m, _, mean, _ in t.summary())
        print(f"{result.param}={v:g}: {line}")
    return EXIT_ALL_FAILED if records and all(r.failed for r in records) else EXIT_OK


def _robustness(args) -> int:
    if args.trials < 0 or args.points < 1:
        raise ConfigError("--trials must be >= 0 and --points >= 1")
    report = run_robustness_suite(args.trials, args.points, args.seed, args.magnitude)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report.write(out / "robustness.csv")
    print(
        f"conditions pass: {report.conditions_pass}; "
        f"negative controls detected: {report.negative_detection_rate:.3f}"
    )
    return EXIT_OK if report.passed else EXIT_ROBUSTNESS


COMMANDS = {"simulate": _simulate, "run": _run, "sweep": _sweep, "check-robustness": _robustness}


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, DatasetError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (HarnessError, GpError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ALL_FAILED


if __name__ == "__main__":
    sys.exit(main())
