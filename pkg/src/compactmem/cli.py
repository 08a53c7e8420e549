"""Command-line entry point: ``compactmem run | grid | export-mem``.

Exit codes: 0 on success, 1 if any run aborted, 2 for invalid configuration
or arguments.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import __version__
from .bench import export_memory_images, run_grid
from .config import ConfigError, load_config
from .ppca import load_memory

log = logging.getLogger("compactmem")


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", required=True, type=Path, help="TOML or JSON experiment config")
    p.add_argument("--out", type=Path, default=Path("results"), help="output directory (default: ./results)")
    p.add_argument("--seed", type=int, action="append",
                   help="run seed; repeat to run several (overrides [sweep] seeds)")
    p.add_argument("--data-dir", type=Path, help="dataset root (default: $DATA_DIR)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="compactmem", description="Continual GLM benchmarks with compact K-prior memory.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="count", default=0, help="more logging (-vv for debug)")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="one method at one budget, as named in [method] and [memory]")
    _add_common(run)

    grid = sub.add_parser("grid", help="every method x budget x seed combination in [sweep]")
    _add_common(grid)
    grid.add_argument("--jobs", type=int, default=1, help="worker processes (default: 1)")

    exp = sub.add_parser("export-mem", help="write a saved memory as PGM images sorted by weight")
    exp.add_argument("memory", type=Path, help="memory file written by a run with [memory] dump = true")
    exp.add_argument("--shape", required=True, help="image shape as HxW, e.g. 16x16")
    exp.add_argument("--drop-bias", action="store_true", help="drop the leading constant feature before reshaping")
    exp.add_argument("--out", type=Path, default=Path("memory_images"), help="output directory")
    return parser


def _parse_shape(text: str) -> tuple[int, int]:
    try:
        h, w = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise ConfigError(f"--shape must look like HxW, got {text!r}") from None
    if h <= 0 or w <= 0:
        raise ConfigError(f"--shape entries must be positive, got {text!r}")
    return h, w


def _experiment(args, single: bool) -> int:
    cfg = load_config(args.config)
    if single:
        method = cfg["method"].get("name")
        if method is None:
            raise ConfigError(f"{args.config}: 'run' needs [method] name")
        cfg["sweep"]["methods"] = [method]
        cfg["sweep"]["budgets"] = [cfg["memory"].get("budget", 0)]
        cfg["sweep"]["seeds"] = cfg["sweep"]["seeds"][:1]
    if args.seed:
        cfg["sweep"]["seeds"] = args.seed
    jobs = getattr(args, "jobs", 1)
    if jobs < 1:
        raise ConfigError("--jobs must be at least 1")
    records = run_grid(cfg, args.out, args.data_dir, jobs)
    failed = [r for r in records if not r.ok]
    for r in records:
        status = f"avg={r.avg_acc:.4f}" if r.ok else f"ABORTED ({r.error})"
        extra = "".join(f" {k}={v:.4f}" for k, v in r.metrics.items())
        print(f"{r.method:14s} {r.stream:16s} budget={r.budget:>6s} seed={r.seed:<3d} {status}{extra}")
    print(f"wrote {args.out / 'results.csv'} and {args.out / 'results.json'}")
    return 1 if failed else 0


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = (logging.WARNING, logging.INFO, logging.DEBUG)[min(args.verbose, 2)]
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "export-mem":
            shape = _parse_shape(args.shape)
            mem, _ = load_memory(args.memory)
            files = export_memory_images(mem, shape, args.out, args.drop_bias)
            print(f"wrote {len(files)} images to {args.out}")
            return 0
        return _experiment(args, single=args.command == "run")
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2 if args.command == "export-mem" else 1


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
