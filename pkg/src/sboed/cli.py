"""``sboed <command> --config <path> --profile <name> --seed <int> --out <dir>``.

Exit codes: 0 success, 2 contract violation (bad input, missing or stale
artifacts), 3 numerical failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

from . import pipeline
from .config import PROFILES, config_hash, load_config
from .errors import ContractError, NumericFailure
from .io import write_json

log = logging.getLogger("sboed")

COMMANDS = {
    "gen-data": pipeline.gen_data,
    "reduce": pipeline.reduce,
    "train-surrogate": pipeline.train_surrogate,
    "validate-surrogate": pipeline.validate_surrogate,
    "train-policy": pipeline.train_policies,
    "eval": pipeline.evaluate,
    "compare-dopt": pipeline.compare_dopt,
}
# "all" runs the full chain in order
CHAIN = list(COMMANDS)


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sboed", description="Sequential sensor-placement design pipeline.")
    p.add_argument("command", choices=[*COMMANDS, "all", "show-config"])
    p.add_argument("--config", type=Path, default=None, help="JSON file overriding profile values")
    p.add_argument("--profile", choices=sorted(PROFILES), default="desk")
    p.add_argument("--seed", type=int, default=None, help="root seed (overrides the config)")
    p.add_argument("--out", type=Path, default=None, help="artifact directory (overrides the config)")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def _progress(*args):
    row = args[-1]
    log.info("%s", {k: (round(v, 5) if isinstance(v, float) else v) for k, v in row.items()})


def run(command: str, cfg: dict) -> dict:
    out = Path(cfg["paths"]["out"])
    out.mkdir(parents=True, exist_ok=True)
    write_json(out / "config.json", {**cfg, "config_hash": config_hash(cfg)})
    names = CHAIN if command == "all" else [command]
    result = {}
    for name in names:
        log.info("running %s into %s", name, out)
        fn = COMMANDS[name]
        if name in ("train-policy", "compare-dopt"):
            result = fn(cfg, out, log=_progress)
        else:
            result = fn(cfg, out)
    return result


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = load_config(args.config, args.profile, args.seed, args.out)
        if args.command == "show-config":
            print(json.dumps(cfg, indent=2))
            return 0
        metrics = run(args.command, cfg)
        print(json.dumps(metrics, indent=2, default=str))
        return 0
    except ContractError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericFailure as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
