"""Command line entry point: ``fls-lab <experiment-id> --config <path>``."""

from __future__ import annotations

import argparse
import logging
import sys
import time
from pathlib import Path

from .auxloss import DivergenceError
from .config import EXPERIMENT_IDS, ConfigError, load_config
from .experiments import ExperimentError, run_experiment
from .plotting import PlotError, emit_plots
from .records import write_record

log = logging.getLogger("fls_lab")


def _seed_list(text: str):
    try:
        seeds = [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"seeds must be comma-separated integers, got {text!r}") from None
    if not seeds:
        raise argparse.ArgumentTypeError("seed list is empty")
    return seeds


def _positive_int(text: str):
    k = int(text)
    if k < 1:
        raise argparse.ArgumentTypeError("--jobs must be at least 1")
    return k


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="fls-lab", description="Run a synthetic inverse-Fisher / pruning experiment.")
    ap.add_argument("experiment", choices=EXPERIMENT_IDS)
    ap.add_argument("--config", required=True, type=Path, help="TOML file with parameter overrides")
    ap.add_argument("--out", type=Path, default=None, help="output directory (default: runs/<experiment>)")
    ap.add_argument("--seeds", type=_seed_list, default=None, help="comma-separated seeds, e.g. 0,1,2")
    ap.add_argument("--jobs", type=_positive_int, default=1, help="worker processes for independent arms")
    ap.add_argument("--no-plots", action="store_true", help="write tables and manifest only")
    ap.add_argument("-v", "--verbose", action="store_true")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args.config, args.experiment, seeds=args.seeds, out=args.out)
        out = Path(cfg.out or Path("runs") / args.experiment)
        t0 = time.monotonic()
        record = run_experiment(cfg, jobs=args.jobs)
        log.info("ran %s on seeds %s in %.1f s", cfg.experiment, cfg.seeds, time.monotonic() - t0)
        write_record(record, out)
        if not args.no_plots:
            emit_plots(out)
    except (ConfigError, ExperimentError, DivergenceError, PlotError, FileNotFoundError) as exc:
        print(f"fls-lab: error: {exc}", file=sys.stderr)
        return 2
    print(out)
    return 0


if __name__ == "__main__":
    sys.exit(main())
