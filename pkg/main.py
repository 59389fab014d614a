"""
main.py
=======
The Driver: command-line entry point for the render-and-compare classifier.

Commands:
1. synth   : generate a synthetic scene dataset (manifest + image grids)
2. train   : train extractor, neural textures and feed-forward heads
3. infer   : per-sample inference logs (--mode full | cascade | staged)
4. eval    : metrics report from inference logs
5. sweep   : threshold sweeps, ROC curves and sensitivity table from staged logs
6. pipeline: synth → train → infer → eval → sweep under one seed

Exit codes: 0 success, 1 failure, 2 bad arguments, 3 I/O, 4 schema/version.
"""

import argparse
import logging
import sys
from pathlib import Path
from typing import Dict, List, Optional

from omegaconf import DictConfig
from omegaconf.errors import OmegaConfBaseException

from core_pipeline.run_pipeline import (
    run_eval,
    run_full_pipeline,
    run_infer,
    run_sweep,
    run_synth,
    run_train,
)
from utils.config_loader import DEFAULT_CONFIG, INFER_MODES, load_config
from utils.errors import RCNetError

LOG_FORMAT = "[%(asctime)s] [%(levelname)s] %(message)s"

logger = logging.getLogger(__name__)


# ===== Setup Logging =====
def setup_logging(log_file: str = "", verbose: bool = False) -> None:
    handlers: List[logging.Handler] = [logging.StreamHandler()]
    if log_file:
        Path(log_file).parent.mkdir(parents=True, exist_ok=True)
        handlers.append(logging.FileHandler(log_file, encoding="utf-8"))
    logging.basicConfig(level=logging.DEBUG if verbose else logging.INFO, format=LOG_FORMAT, handlers=handlers, force=True)


# ===== Argument parsing =====
def _csv_list(text: str) -> List[str]:
    return [item.strip() for item in text.split(",") if item.strip()]


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", default=None, help="user config file (SECTION.key=value lines or YAML)")
    p.add_argument("--base-config", default=DEFAULT_CONFIG, help="default YAML config")
    p.add_argument("--seed", type=int, default=None, help="GLOBAL_RANDOM_SEED")
    p.add_argument("--data-dir", default=None, help="PATHS.data_dir")
    p.add_argument("--out-dir", default=None, help="PATHS.output_dir")
    p.add_argument("--model", default=None, help="PATHS.model_file")
    p.add_argument("--heads", default=None, help="PATHS.heads_file")
    p.add_argument("--parallel", type=int, default=None, help="worker threads (capped by RCNET_THREADS)")
    p.add_argument("--verbose", action="store_true")
    p.add_argument("overrides", nargs="*", help="extra SECTION.key=value overrides")


def _add_synth(p: argparse.ArgumentParser) -> None:
    p.add_argument("--classes", type=int, default=None, help="SYNTH.n_classes")
    p.add_argument("--per-class", type=int, default=None, help="SYNTH.per_class")
    p.add_argument("--levels", type=_csv_list, default=None, help="comma list of L0..L3")
    p.add_argument("--nuisances", type=_csv_list, default=None, help="comma list of nuisance factors")


def _add_train(p: argparse.ArgumentParser) -> None:
    p.add_argument("--epochs", type=int, default=None, help="TRAIN.epochs")
    p.add_argument("--force", action="store_true", default=None, help="overwrite existing model files")
    p.add_argument("--resume", action="store_true", default=None, help="continue from saved model + trace")


def _add_cascade(p: argparse.ArgumentParser) -> None:
    p.add_argument("--mode", choices=INFER_MODES, default=None, help="INFER.mode")
    p.add_argument("--tau1", type=float, default=None, help="CASCADE.tau1")
    p.add_argument("--tau2", type=float, default=None, help="CASCADE.tau2")
    p.add_argument("--stages", choices=("full", "s1", "s1s2", "s1s2s3"), default=None, help="CASCADE.stages")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rcnet", description="3D-aware classification by feature render-and-compare")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    _add_common(p)
    _add_synth(p)

    p = sub.add_parser("train", help="train model bank and heads")
    _add_common(p)
    _add_train(p)

    p = sub.add_parser("infer", help="run inference and write logs")
    _add_common(p)
    _add_cascade(p)
    p.add_argument("--split", choices=("train", "eval", "all"), default=None, help="INFER.split")

    p = sub.add_parser("eval", help="evaluate inference logs")
    _add_common(p)
    _add_cascade(p)

    p = sub.add_parser("sweep", help="threshold sweeps from staged logs")
    _add_common(p)
    _add_cascade(p)

    p = sub.add_parser("pipeline", help="synth → train → infer → eval → sweep")
    _add_common(p)
    _add_synth(p)
    _add_train(p)
    _add_cascade(p)
    return parser


_FLAG_KEYS = {
    "seed": "GLOBAL_RANDOM_SEED",
    "data_dir": "PATHS.data_dir",
    "out_dir": "PATHS.output_dir",
    "model": "PATHS.model_file",
    "heads": "PATHS.heads_file",
    "parallel": "INFER.parallel",
    "classes": "SYNTH.n_classes",
    "per_class": "SYNTH.per_class",
    "levels": "SYNTH.levels",
    "nuisances": "SYNTH.nuisances",
    "epochs": "TRAIN.epochs",
    "force": "TRAIN.force",
    "resume": "TRAIN.resume",
    "mode": "INFER.mode",
    "split": "INFER.split",
    "tau1": "CASCADE.tau1",
    "tau2": "CASCADE.tau2",
    "stages": "CASCADE.stages",
}


def flags_from_args(args: argparse.Namespace) -> Dict[str, object]:
    """Parsed flags → dotted config keys (only flags that were given)."""
    return {key: getattr(args, name) for name, key in _FLAG_KEYS.items() if getattr(args, name, None) is not None}


def _dispatch(command: str, cfg: DictConfig) -> None:
    if command == "synth":
        run_synth(cfg)
    elif command == "train":
        run_train(cfg)
    elif command == "infer":
        run_infer(cfg)
    elif command == "eval":
        run_eval(cfg)
    elif command == "sweep":
        run_sweep(cfg)
    elif command == "pipeline":
        run_full_pipeline(cfg)


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    setup_logging(verbose=args.verbose)
    try:
        cfg = load_config(args.base_config, args.config, flags_from_args(args), args.overrides)
    except (AssertionError, OmegaConfBaseException, ValueError) as e:
        logger.error(f"Invalid configuration: {e}")
        return 2
    except OSError as e:
        logger.error(f"Cannot read configuration: {e}")
        return 3
    if cfg.PATHS.log_file:
        try:
            setup_logging(cfg.PATHS.log_file, args.verbose)
        except OSError as e:
            logger.error(f"Cannot open log file {cfg.PATHS.log_file}: {e}")
            return 3

    logger.info(f"▶ {args.command} 시작")
    try:
        _dispatch(args.command, cfg)
    except RCNetError as e:
        logger.error(f"{args.command} failed: {e}")
        return e.exit_code
    except Exception as e:
        logger.error(f"{args.command} failed unexpectedly: {e}", exc_info=True)
        return 1
    logger.info(f"✅ {args.command} 완료")
    return 0


if __name__ == "__main__":
    sys.exit(main())
