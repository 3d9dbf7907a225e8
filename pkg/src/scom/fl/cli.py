"""Command-line entry point.

Subcommands::

    scom train     --config c.toml --out run/     metrics.csv, timing.csv, config-resolved.toml
    scom scan-ns   --config c.toml --out scan/    scan.csv
    scom opt-bench --config c.toml --out bench/   opt_trace.csv
    scom compare   --config c.toml --out cmp/     compare.csv

Exit status is 0 on success, 1 for invalid input (bad flags, malformed or
missing config, unwritable output directory) and 2 for runtime failures.
The ``SCOM_THREADS`` environment variable caps BLAS threads.
"""

from __future__ import annotations

import argparse
import contextlib
import logging
import os
import sys
import tempfile
from pathlib import Path

from .config import ConfigError, SimConfig, load_config, write_resolved
from .experiments import (COMPARE_COLUMNS, OPT_TRACE_COLUMNS, SCAN_COLUMNS, opt_bench, run_compare,
                          scan_ns)
from .simulation import METRICS_COLUMNS, run_training, write_csv

logger = logging.getLogger("scom")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2
METRICS_SCHEMA = "metrics-v1"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INVALID, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="scom", description="Sparse-coded MIMO over-the-air federated learning")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    helps = {
        "train": "run federated training and write per-round metrics",
        "scan-ns": "scan the number of multiplexed streams at fixed channel uses",
        "opt-bench": "record AO-ADMM convergence traces",
        "compare": "compare aggregation schemes across compression ratios",
    }
    for name, text in helps.items():
        p = sub.add_parser(name, help=text, description=text)
        p.add_argument("--config", type=Path, help="TOML configuration file (defaults if omitted)")
        p.add_argument("--seed", type=int, help="base seed overriding seeds.base")
        p.add_argument("--out", type=Path, required=True, help="output directory")
    return parser


def _prepare(args) -> SimConfig:
    cfg = load_config(args.config) if args.config is not None else SimConfig().validate()
    if args.seed is not None:
        if args.seed < 0:
            raise ConfigError("--seed must be non-negative")
        cfg = cfg.with_seed(args.seed)
    out = args.out
    if out.exists() and not out.is_dir():
        raise ConfigError(f"output path {out} exists and is not a directory")
    try:
        out.mkdir(parents=True, exist_ok=True)
        with tempfile.TemporaryFile(dir=out):
            pass
    except OSError as exc:
        raise ConfigError(f"output directory {out} is not writable: {exc}") from exc
    return cfg.resolved()


def _write_resolved(cfg, out: Path):
    path = out / "config-resolved.toml"
    write_resolved(cfg, path)
    text = path.read_text()
    path.write_text(f"# schema: {METRICS_SCHEMA}\n" + text)


def _train(cfg, out):
    res = run_training(cfg)
    write_csv(out / "metrics.csv", METRICS_COLUMNS, res.metrics)
    write_csv(out / "timing.csv", ["round", "seconds"],
              [{"round": r, "seconds": s} for r, s in res.timing])
    _write_resolved(cfg, out)
    logger.info("psi = %.6g; final loss %.6g", res.psi, res.metrics[-1].train_loss)


def _scan(cfg, out):
    rows, best = scan_ns(cfg)
    write_csv(out / "scan.csv", SCAN_COLUMNS, rows)
    _write_resolved(cfg, out)
    for (n_t, n_r), n_s in best.items():
        print(f"N_T={n_t} N_R={n_r}: C minimised at N_S={n_s}")


def _bench(cfg, out):
    rows, _ = opt_bench(cfg)
    write_csv(out / "opt_trace.csv", OPT_TRACE_COLUMNS, rows)
    _write_resolved(cfg, out)


def _compare(cfg, out):
    rows = run_compare(cfg)
    write_csv(out / "compare.csv", COMPARE_COLUMNS, rows)
    _write_resolved(cfg, out)


COMMANDS = {"train": _train, "scan-ns": _scan, "opt-bench": _bench, "compare": _compare}


def _thread_limit():
    value = os.environ.get("SCOM_THREADS")
    if not value:
        return contextlib.nullcontext()
    try:
        n = int(value)
    except ValueError:
        raise ConfigError(f"SCOM_THREADS must be an integer, got {value!r}") from None
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=n)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _prepare(args)
        limit = _thread_limit()
    except ConfigError as exc:
        print(f"scom: error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    try:
        with limit:
            COMMANDS[args.command](cfg, args.out)
    except Exception as exc:  # noqa: BLE001 - any failure maps to the runtime exit code
        logger.debug("run failed", exc_info=True)
        print(f"scom: {args.command} failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
