"""Command-line entry point: ``vistr {simulate,fit,detect,bench,report}``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical
failure. ``VISTR_LOG`` sets the log level (default WARNING).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

from . import __version__, pipeline
from .config import load_config
from .errors import ConfigError, DataError, NumericalError

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERICAL = 0, 2, 3, 4

log = logging.getLogger("vistr")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML file layered over the packaged defaults")
    common.add_argument("--seed", type=int, help="run seed (overrides the config)")
    common.add_argument("--out", help="root directory for dataset, models and reports")
    common.add_argument("--alpha", type=float, help="detector significance level")
    common.add_argument("--mode", choices=("mvgp", "iid"), help="residual model used by detect")

    p = argparse.ArgumentParser(prog="vistr", description="Replay-attack detection pipeline.")
    p.add_argument("--version", action="version", version=f"vistr {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("simulate", parents=[common], help="write a synthetic dataset")
    sub.add_parser("fit", parents=[common], help="fit TR, MVGP and IID models on nominal cycles")
    d = sub.add_parser("detect", parents=[common], help="run the online detector on one cycle")
    d.add_argument("--cycle", required=True, help="cycle id from the dataset manifest")
    sub.add_parser("bench", parents=[common], help="detection and fit tables for both methods")
    sub.add_parser("report", parents=[common], help="summarize fitted models and bench results")
    return p


def _configure_logging() -> None:
    level = os.environ.get("VISTR_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")


def _execute(args) -> None:
    cfg = load_config(args.config, seed=args.seed, out=args.out, alpha=args.alpha, mode=args.mode)
    if args.command == "simulate":
        path = pipeline.simulate(cfg)
        print(f"dataset written to {path.parent}")
    elif args.command == "fit":
        s = pipeline.fit_models(cfg)
        acc = s["tr"]["accuracy"]
        print(f"models written to {cfg.models_dir} (TR RMSE avg {acc['rmse_avg']:.4f} deg, "
              f"{s['tr']['iterations']} ALS sweeps)")
    elif args.command == "detect":
        rep = pipeline.detect(cfg, args.cycle)
        keys = ("cycle", "mode", "onset", "delay", "alarm_frequency", "false_alarm_rate", "nll", "log_vol")
        print(json.dumps({k: rep.to_dict()[k] for k in keys}, sort_keys=True))
    elif args.command == "bench":
        print(pipeline.format_bench(pipeline.bench(cfg)), end="")
    elif args.command == "report":
        print(pipeline.report(cfg), end="")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    _configure_logging()
    try:
        _execute(args)
    except ConfigError as exc:
        print(f"vistr: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"vistr: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"vistr: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
