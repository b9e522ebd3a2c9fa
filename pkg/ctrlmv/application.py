"""Command-line entry point: ``ctrlmv <command> [flags]``."""

import argparse
import os
import sys
from pathlib import Path

from ctrlmv import __version__
from ctrlmv.services.experiments import COMMANDS, INIT_CHOICES, RECIPES, ExperimentConfig
from ctrlmv.utils.errors import CtrlMVError
from ctrlmv.utils.logger import get_logger, set_console_level
from ctrlmv.utils.settings import get_settings_manager

logger = get_logger("Main")

OUT_ENV = "CTRL_MV_OUT"

HELP = {
    "convergence": "parameter error curves and log-log slopes on the simulated market",
    "regret": "cumulative Sharpe-ratio regret and its growth rate",
    "tradeoff": "variance of the actor increment over a grid of exploration levels",
    "backtest": "replicated out-of-sample comparison of allocation strategies",
    "sensitivity": "CTRL backtest under scaled learning rate, gamma and phi3",
    "pretrain": "pre-train CTRL and save its parameters (--episodes sets the iterations)",
}


def _common_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=Path, help="JSON file of setting overrides")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--episodes", type=int)
    parser.add_argument("--replications", type=int)
    parser.add_argument("--out", type=Path, help=f"output directory (env {OUT_ENV} wins)")
    parser.add_argument("--workers", type=int)
    parser.add_argument("--panel", type=Path, help="historical return panel CSV")
    parser.add_argument("--synthetic", action="store_true", help="generate a synthetic panel")
    parser.add_argument("--init", choices=INIT_CHOICES, help="starting parameters")
    parser.add_argument("--init-params", type=Path, help="parameters saved by `pretrain`")
    parser.add_argument("--lr-scale", type=float)
    parser.add_argument("--gamma-scale", type=float)
    parser.add_argument("--phi3-scale", type=float)
    parser.add_argument("--alpha", type=float, help="learning-rate numerator")
    parser.add_argument("--beta", type=float, help="learning-rate offset")
    parser.add_argument("--burn-in", type=int)
    parser.add_argument("--log-level", help="console log level (DEBUG, INFO, ...)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ctrlmv",
        description="Reinforcement learning for continuous-time mean-variance portfolios",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for command in COMMANDS:
        _common_flags(sub.add_parser(command, help=HELP[command]))
    return parser


def resolve_config(args: argparse.Namespace) -> ExperimentConfig:
    """Apply --config and schedule flags to the settings, then build the run configuration."""
    settings = get_settings_manager()
    if args.config is not None:
        settings.import_settings(args.config)
    schedule = {"training.alpha": args.alpha, "training.beta": args.beta}
    settings.apply_flat({k: v for k, v in schedule.items() if v is not None})

    out = os.environ.get(OUT_ENV) or args.out
    return ExperimentConfig.from_settings(
        args.command,
        seed=args.seed,
        episodes=args.episodes,
        replications=args.replications,
        workers=args.workers,
        out=out,
        init=args.init,
        init_params=args.init_params,
        panel=args.panel,
        synthetic=args.synthetic or None,
        burn_in=args.burn_in,
        lr_scale=args.lr_scale,
        gamma_scale=args.gamma_scale,
        phi3_scale=args.phi3_scale,
    )


def main(argv=None):
    """Main entry point; returns the process exit status."""
    if argv is None:
        argv = sys.argv
    args = build_parser().parse_args(argv[1:])
    if args.log_level:
        set_console_level(args.log_level)
    try:
        cfg = resolve_config(args)
        logger.info(f"Running {cfg.command} (seed {cfg.seed})")
        target = RECIPES[cfg.command](cfg)
    except CtrlMVError as e:
        logger.error(f"{args.command} failed: {e}")
        return 1
    logger.info(f"{args.command} finished: {target}")
    return 0


if __name__ == "__main__":
    sys.exit(main(sys.argv))
