"""``netnet`` command line.  Exit codes: 0 ok, 1 check or validation failure, 2 usage."""
from __future__ import annotations

import argparse
import logging
import sys

from . import commands
from .config import RunConfig, load_config
from .io import FormatError
from .nnops import ConfigError


def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="netnet", description="scale-aware pyramid detector toolkit")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def add(name, help):
        p = sub.add_parser(name, help=help)
        p.add_argument("--config", help="key = value config file")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help="run directory (default runs/<command>-<seed>)")
        p.add_argument("--checkpoint")
        return p

    g = add("gradcheck", "finite-difference gradient suite")
    g.add_argument("--corrupt", metavar="OP", help=argparse.SUPPRESS)
    add("train", "train one model")
    add("eval", "score a model on the test split")
    add("ablate", "train and score several variants over several seeds")
    a = add("analyze", "FP / PFP / FN analysis and PR curves of a detections file")
    a.add_argument("--detections", required=True)
    a.add_argument("--gts", required=True)
    v = add("viz", "dump feature maps, gate and erased map as PGM")
    v.add_argument("--oracle-gate", action="store_true")
    return ap


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config) if args.config else RunConfig()
        if args.seed is not None:
            cfg = cfg.with_overrides(seed=args.seed)
        out = args.out or cfg.get("out") or f"runs/{args.command}-{cfg.seed}"
        c = args.command
        if c == "gradcheck":
            return commands.cmd_gradcheck(cfg, out, args.corrupt)
        if c == "train":
            return commands.cmd_train(cfg, out)
        if c == "eval":
            return commands.cmd_eval(cfg, out, args.checkpoint)
        if c == "ablate":
            return commands.cmd_ablate(cfg, out)
        if c == "analyze":
            return commands.cmd_analyze(cfg, out, args.detections, args.gts)
        return commands.cmd_viz(cfg, out, args.checkpoint, args.oracle_gate)
    except (ConfigError, FormatError, KeyError, OSError) as e:
        print(f"netnet {args.command}: error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
