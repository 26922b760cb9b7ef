"""
Command-line entry point.

    python main.py train --config config/settings.yaml
    python main.py ablate --config config/ablation.yaml
    python main.py eval|corrupt|subset|probe|overhead --config ...

Exit codes: 0 ok, 2 configuration or input error, 3 runtime or numeric
failure, 4 dataset format error.
"""
import argparse
import logging
import sys
from pathlib import Path

import yaml

from core.errors import FeatureMiningError
from training import experiments
from utils.config_loader import ConfigLoader

logger = logging.getLogger("main")

LOG_FORMAT = "%(asctime)s %(levelname)s [%(name)s] %(message)s"
COMMANDS = {
    "train": experiments.run_experiment,
    "eval": experiments.run_eval,
    "ablate": experiments.run_ablation,
    "corrupt": experiments.run_corrupt,
    "subset": experiments.run_subset,
    "probe": experiments.run_probe,
    "overhead": experiments.run_overhead,
}
RUN_LOG_COMMANDS = ("train", "ablate", "probe")


def build_parser():
    parser = argparse.ArgumentParser(description="Feature Mining training toolkit")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in COMMANDS.items():
        p = sub.add_parser(name, help=(fn.__doc__ or "").strip().splitlines()[0])
        p.add_argument("--config", default="config/settings.yaml", help="YAML run configuration")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
                       help="Override one config field (repeatable)")
        p.add_argument("--output-dir", default=None, help="Override output_dir")
        p.add_argument("--epochs", type=int, default=None, help="Override schedule.epochs; milestones scale with it unless set too")
        p.add_argument("--log-level", default=None, help="DEBUG, INFO, WARNING or ERROR")
    return parser


def _overrides(args):
    overrides = list(args.overrides)
    if args.output_dir:
        overrides.append({"output_dir": args.output_dir})
    return overrides


def setup_logging(level):
    logging.basicConfig(level=getattr(logging, level.upper(), logging.INFO), format=LOG_FORMAT, force=True)


def attach_run_log(output_dir):
    path = Path(output_dir)
    path.mkdir(parents=True, exist_ok=True)
    handler = logging.FileHandler(path / "run.log", encoding="utf8")
    handler.setFormatter(logging.Formatter(LOG_FORMAT))
    logging.getLogger().addHandler(handler)
    return handler


def main(argv=None):
    args = build_parser().parse_args(argv)
    setup_logging(args.log_level or "INFO")
    handler = None
    try:
        cfg = ConfigLoader(args.config, _overrides(args), epochs=args.epochs).run_config
        if args.log_level is None:
            setup_logging(cfg.logging.level)
        if args.command in RUN_LOG_COMMANDS:
            experiments.preflight(cfg)
            handler = attach_run_log(cfg.output_dir)
        results = COMMANDS[args.command](cfg)
        logger.info("%s finished: %s", args.command, yaml.safe_dump(_loggable(results), default_flow_style=True).strip())
        return 0
    except FeatureMiningError as e:
        logger.error("%s failed: %s", args.command, e)
        return e.exit_code
    except Exception:
        logger.exception("%s failed unexpectedly", args.command)
        return 3
    finally:
        if handler is not None:
            logging.getLogger().removeHandler(handler)
            handler.close()


def _loggable(results):
    if isinstance(results, dict):
        return {k: _loggable(v) for k, v in results.items() if k not in ("rows", "per_seed")}
    if isinstance(results, (list, tuple)):
        return [_loggable(v) for v in results]
    if hasattr(results, "item"):
        return results.item()
    return results


if __name__ == "__main__":
    sys.exit(main())
