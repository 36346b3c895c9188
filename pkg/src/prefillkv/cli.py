"""Command-line entry point.

    prefillkv run --config run.toml --budget 1024
    prefillkv sweep-budget --budgets 256,1024,4096 --csv budget.csv
    prefillkv compare-reduction --budget 1024

Reports go to ``--csv`` / ``--json`` (relative paths resolve against
``$PREFILLKV_OUTPUT_DIR`` when set); with neither, CSV is written to stdout.
Summaries go to stderr.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

from . import harness
from .config import RunConfig, parse_config
from .errors import InvalidConfiguration, PrefillError

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_CODES = {"config": 3, "numeric": 4, "io": 5}
OUTPUT_DIR_ENV = "PREFILLKV_OUTPUT_DIR"

# flag -> dotted config key
_FLAG_KEYS = {
    "budget": "prefill.budget",
    "block_size": "prefill.block_size",
    "policy": "prefill.policy",
    "mode": "prefill.mode",
    "align": "prefill.align",
    "budget_mode": "prefill.budget_mode",
    "budget_stats": "prefill.budget_stats",
    "proxy_source": "prefill.proxy_source",
    "seed": "model.seed",
    "tiles": "layout.tiles",
    "csv": "output.csv",
    "json": "output.json",
}


def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="TOML config file")
    common.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override any config key (repeatable)")
    common.add_argument("--budget", type=int)
    common.add_argument("--block-size", type=int)
    common.add_argument("--policy", choices=["snapkv", "keydiff", "random"])
    common.add_argument("--mode", choices=["bulk", "blockwise", "hybrid"])
    common.add_argument("--align", choices=["none", "structure"])
    common.add_argument("--budget-mode", choices=["static", "dynamic"])
    common.add_argument("--budget-stats", choices=["none", "first_block", "explicit"])
    common.add_argument("--proxy-source", choices=["prompt_first", "block_local"])
    common.add_argument("--seed", type=int)
    common.add_argument("--csv")
    common.add_argument("--json")
    common.add_argument("--wall-clock", action="store_true", help="record wall-clock TTFT (non-deterministic)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="prefillkv", description="Block-wise prefill with KV eviction")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("run", parents=[common], help="one prefill run")
    s = sub.add_parser("sweep-input", parents=[common], help="peak memory vs. number of tiles")
    s.add_argument("--tile-counts", type=_int_list, default=[4, 8, 16, 32])
    s = sub.add_parser("sweep-budget", parents=[common], help="peak memory and TTFT proxy vs. budget")
    s.add_argument("--budgets", type=_int_list, default=[256, 1024, 4096])
    s = sub.add_parser("sweep-blocksize", parents=[common], help="aligned vs. unaligned block sizes")
    s.add_argument("--block-sizes", type=_int_list, default=[32, 49, 64, 98])
    s.add_argument("--tile-tokens", type=int, default=49)
    sub.add_parser("compare-policies", parents=[common], help="snapkv vs. keydiff vs. random on the needle task")
    sub.add_parser("compare-reduction", parents=[common], help="compression vs. strided input reduction")
    return p


def load_config(args: argparse.Namespace) -> RunConfig:
    text = None
    if args.config is not None:
        text = args.config.read_bytes()
    overrides = {}
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep:
            raise InvalidConfiguration(f"--set {item!r}: expected SECTION.KEY=VALUE")
        overrides[key.strip()] = value.strip()
    for flag, key in _FLAG_KEYS.items():
        v = getattr(args, flag, None)
        if v is not None:
            overrides[key] = v
    if args.wall_clock:
        overrides["output.wall_clock"] = True
    return parse_config(text, overrides)


def _resolve(path: str) -> Path:
    p = Path(path)
    base = os.environ.get(OUTPUT_DIR_ENV)
    if base and not p.is_absolute():
        p = Path(base) / p
    p.parent.mkdir(parents=True, exist_ok=True)
    return p


def write_reports(cfg: RunConfig, reports, stdout) -> None:
    wrote = False
    if cfg.output.csv:
        _resolve(cfg.output.csv).write_text(harness.reports_to_csv(reports))
        wrote = True
    if cfg.output.json:
        _resolve(cfg.output.json).write_text(harness.reports_to_json(reports))
        wrote = True
    if not wrote:
        stdout.write(harness.reports_to_csv(reports))


def dispatch(args: argparse.Namespace, cfg: RunConfig):
    cmd = args.command
    if cmd == "run":
        return [harness.run_once(cfg)[0]], {}
    if cmd == "sweep-input":
        reports = harness.sweep_input_size(cfg, args.tile_counts)
        return reports, harness.check_input_size_trend(cfg, reports)
    if cmd == "sweep-budget":
        reports = harness.sweep_budget(cfg, args.budgets)
        return reports, harness.check_budget_trend(reports)
    if cmd == "sweep-blocksize":
        reports = harness.sweep_block_size(cfg, args.block_sizes, args.tile_tokens)
        return reports, harness.check_block_size_trend(reports)
    if cmd == "compare-policies":
        return harness.compare_policies(cfg), {}
    if cmd == "compare-reduction":
        return harness.compare_reduction(cfg), {}
    raise AssertionError(cmd)


def main(argv=None, stdout=None, stderr=None) -> int:
    stdout = stdout or sys.stdout
    stderr = stderr or sys.stderr
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, stream=stderr)
    try:
        cfg = load_config(args)
        reports, claims = dispatch(args, cfg)
        write_reports(cfg, reports, stdout)
    except PrefillError as exc:
        print(f"error ({exc.category}): {exc}", file=stderr)
        return EXIT_CODES[exc.category]
    except OSError as exc:
        print(f"error (io): {exc}", file=stderr)
        return EXIT_CODES["io"]
    except (FloatingPointError, ArithmeticError) as exc:
        print(f"error (numeric): {exc}", file=stderr)
        return EXIT_CODES["numeric"]
    for r in reports:
        print(f"{r.label}: global_peak={r.global_peak_bytes} ttft_flops={r.ttft_flops} "
              f"retention={r.needle_retention:.4f}", file=stderr)
    for claim, ok in claims.items():
        print(f"{'PASS' if ok else 'FAIL'} {claim}", file=stderr)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
