"""Command-line entry point: ``selreg {bench,audit,report,prep}``.

Exit codes: 0 success, 1 invalid input or config, 2 some grid cells
failed, 3 fatal error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .config import ConfigError, load_config
from .dataset import DEFAULT_SPLIT, DatasetError, load_csv, preprocess, split
from .runner import EXIT_FATAL, EXIT_OK, EXIT_VALIDATION, RunError, run_audit, run_bench, run_report


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        # usage errors are validation failures (argparse would exit 2)
        self.print_usage(sys.stderr)
        self.exit(EXIT_VALIDATION, f"{self.prog}: error: {message}\n")


def parse_seeds(text: str) -> list[int]:
    """``"0,1,2"`` or an inclusive range ``"0-4"``."""
    seeds: list[int] = []
    try:
        for part in text.split(","):
            part = part.strip()
            if "-" in part:
                lo, hi = (int(p) for p in part.split("-", 1))
                if hi < lo:
                    raise ValueError
                seeds.extend(range(lo, hi + 1))
            else:
                seeds.append(int(part))
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid seed list {text!r}") from None
    return seeds


def _jobs(text: str) -> int:
    try:
        n = int(text)
    except ValueError:
        n = 0
    if n < 1:
        raise argparse.ArgumentTypeError("--jobs must be a positive integer")
    return n


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="selreg", description="Selective regression experiments.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    for name, help_text in (
        ("bench", "benchmark methods over datasets x seeds x coverages"),
        ("audit", "audit-model, Shapley and distribution-shift study"),
    ):
        s = sub.add_parser(name, help=help_text)
        s.add_argument("--config", required=True, help="JSON experiment config")
        s.add_argument("--out", help="output directory (overrides config 'out')")
        s.add_argument("--seeds", type=parse_seeds, help="seed list, e.g. 0,1,2 or 0-4")
        s.add_argument("--jobs", type=_jobs, default=1, help="parallel worker processes")

    r = sub.add_parser("report", help="summarise a bench or audit results directory")
    r.add_argument("results", help="directory holding manifest.json")
    r.add_argument("--out", help="where to write the report (default: the results directory)")

    pr = sub.add_parser("prep", help="split and preprocess a CSV dataset")
    pr.add_argument("csv", help="input CSV with a header row")
    pr.add_argument("--target", required=True, help="target column name")
    pr.add_argument("--categorical", default="", help="comma-separated categorical columns")
    pr.add_argument("--split", default="0.6,0.2,0.2", help="train,calibration,test fractions")
    pr.add_argument("--seed", type=int, default=0)
    pr.add_argument("--out", required=True, help="output directory")
    return p


def _run_grid(args, runner) -> int:
    cfg = load_config(args.config)
    out = args.out or cfg["out"]
    if out is None:
        raise ConfigError("no output directory: pass --out or set 'out' in the config")
    if args.seeds is not None:
        cfg = cfg.with_overrides(seeds=args.seeds)
    code = runner(cfg, out, args.jobs)
    print(f"{args.command}: wrote {out} (exit {code})")
    return code


def _prep(args) -> int:
    try:
        fractions = [float(f) for f in args.split.split(",")]
    except ValueError:
        raise ConfigError(f"invalid --split {args.split!r}") from None
    if len(fractions) != 3:
        raise ConfigError("--split needs train,calibration,test fractions")
    named = tuple((name, f) for (name, _), f in zip(DEFAULT_SPLIT, fractions))
    kinds = {c: "categorical" for c in args.categorical.split(",") if c}
    raw = load_csv(args.csv, args.target, kinds)
    plan = split(raw, named, seed=args.seed)
    data, record = preprocess(raw, plan.indices("train"))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    data.to_csv(out / "data.csv")
    (out / "split.json").write_text(plan.to_json() + "\n", encoding="utf-8")
    (out / "preprocess.json").write_text(json.dumps(record.to_dict(), indent=2) + "\n", encoding="utf-8")
    print(f"prep: {raw.n} rows, {data.d} features -> {out}")
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "bench":
            return _run_grid(args, run_bench)
        if args.command == "audit":
            return _run_grid(args, run_audit)
        if args.command == "report":
            code = run_report(args.results, args.out)
            print(f"report: wrote {args.out or args.results}")
            return code
        return _prep(args)
    except (ConfigError, DatasetError, RunError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except Exception as exc:  # anything unexpected is fatal
        print(f"fatal: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FATAL


if __name__ == "__main__":
    sys.exit(main())
