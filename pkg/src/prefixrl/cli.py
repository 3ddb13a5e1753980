"""Command-line front end for the three-stage pipeline and its evaluations.

Subcommands: sft, rm-data, train-rm, train-rl, eval-bon, eval-steps,
eval-td, report. Stage seeds derive deterministically from the experiment
seed, so repeated runs with the same (config, seed) produce identical
sft / rm-data / train-rm artifacts.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import stages
from .config import PROTOCOLS, RM_METHODS, ExperimentConfig, defaults
from .errors import ConfigError, PrefixRlError
from .reports import emit_report
from .trainer import RL_METHODS

_PIPELINE = {
    "sft": stages.run_sft,
    "rm-data": stages.run_rm_data,
    "train-rm": stages.run_train_rm,
    "train-rl": stages.run_train_rl,
    "eval-bon": stages.run_eval_bon,
    "eval-steps": stages.run_eval_steps,
    "eval-td": stages.run_eval_td,
}


def _onoff(value: str) -> bool:
    if value not in ("on", "off"):
        raise argparse.ArgumentTypeError("expected 'on' or 'off'")
    return value == "on"


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="prefixrl",
        description="Prefix-value reward modeling and distribution-level RL "
                    "on synthetic verifiable token MDPs.")
    sub = parser.add_subparsers(dest="command", required=True)

    for name in _PIPELINE:
        p = sub.add_parser(name)
        p.add_argument("--config", type=Path, help="experiment config JSON")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", type=Path, help="run directory")
        p.add_argument("--workers", type=int)
        p.add_argument("--rm-method", choices=RM_METHODS)
        p.add_argument("--rl-method", choices=RL_METHODS)
        p.add_argument("--adb", type=_onoff, metavar="on|off")
        p.add_argument("--dlw", type=_onoff, metavar="on|off")
        p.add_argument("--p-min", type=float)
        p.add_argument("--alpha", type=float)
        p.add_argument("--protocol", choices=PROTOCOLS)
        p.add_argument("--n", type=int, help="rollouts per prompt")

    rep = sub.add_parser("report")
    rep.add_argument("runs", nargs="+", type=Path, help="run directories")
    rep.add_argument("--out", type=Path, required=True)
    return parser


def config_from_args(args: argparse.Namespace) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else defaults()
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out is not None:
        cfg.out = str(args.out)
    if args.workers is not None:
        cfg.workers = args.workers
    if args.rm_method is not None:
        cfg.rm.method = args.rm_method
    if args.rl_method is not None:
        cfg.rl.method = args.rl_method
    if args.adb is not None:
        cfg.online.adb = args.adb
    if args.dlw is not None:
        cfg.online.dlw = args.dlw
    if args.p_min is not None:
        cfg.rl.ppo.p_min = args.p_min
    if args.alpha is not None:
        cfg.rl.ppo.alpha = args.alpha
    if args.protocol is not None:
        cfg.eval.protocol = args.protocol
    if args.n is not None:
        cfg.rl.ppo.n_rollouts = args.n
        cfg.rm_data.rollouts_per_prompt = max(args.n, 2)
    cfg.validate()
    return cfg


def run(command: str, cfg: ExperimentConfig):
    """Dispatch one pipeline stage; returns the primary artifact."""
    return _PIPELINE[command](cfg)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "report":
            path = emit_report(args.runs, args.out)
            print(f"report written to {path}")
            return 0
        cfg = config_from_args(args)
        artifact = run(args.command, cfg)
        print(f"{args.command} done: {artifact}")
        return 0
    except ConfigError as err:
        print(err, file=sys.stderr)
        return 2
    except PrefixRlError as err:
        print(f"{args.command}: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
