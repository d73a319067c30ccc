"""Command-line entry point: ``altruism-irl <command> --config cfg.json --out DIR``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import experiment as ex

COMMANDS = {
    "gen-env": ex.cmd_gen_env,
    "gen-demos": ex.cmd_gen_demos,
    "infer": ex.cmd_infer,
    "evaluate": ex.cmd_evaluate,
    "rank-check": ex.cmd_rank_check,
    "z-study": ex.cmd_z_study,
    "imitate": ex.cmd_imitate,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="altruism-irl", description=__doc__)
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", type=Path, help="experiment config (JSON); defaults if omitted")
    parser.add_argument("--seed", type=int, help="override the master seed")
    parser.add_argument("--out", type=Path, default=Path("runs/default"), help="output directory")
    parser.add_argument("--method", choices=ex.METHODS, help="override the inference method")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = ex.ExperimentConfig.load(args.config) if args.config else ex.ExperimentConfig.from_dict()
        cfg = cfg.with_overrides(seed=args.seed, method=args.method)
        if args.command != "gen-env" and not (args.out / "game.json").exists():
            raise FileNotFoundError(f"{args.out / 'game.json'} not found; run gen-env first")
        args.out.mkdir(parents=True, exist_ok=True)
        COMMANDS[args.command](cfg, args.out)
    except Exception as exc:  # reported as machine-readable JSON
        err = {"error": type(exc).__name__, "message": str(exc), "command": args.command}
        step = getattr(exc, "step", None)
        if step is not None:
            err["step"] = step
        print(json.dumps(err), file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
