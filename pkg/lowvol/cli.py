# lowvol/cli.py
"""
Command-line front end.

    lowvol backtest --config run.yaml --strategy low-beta --tax 0.3
    lowvol deciles --config run.yaml --set backtest.decile_rebalance=D
    lowvol simulate --seed 7 --out synth/
    lowvol verify --set verify.only=[A1,A6]

Exit codes: 0 success, 1 data / domain error or failed verification,
2 configuration error.
"""
from __future__ import annotations

import argparse
import logging
import sys
from typing import Callable, Dict, List, Optional

from .commands.backtest import cmd_backtest
from .commands.deciles import cmd_deciles
from .commands.factors import cmd_factors
from .commands.residualize import cmd_residualize
from .commands.simulate import cmd_simulate
from .commands.verify import cmd_verify
from .config import RunConfig, load_config
from .errors import ConfigError, LowVolError

logger = logging.getLogger(__name__)

COMMANDS: Dict[str, Callable[[RunConfig], object]] = {
    "backtest": cmd_backtest,
    "deciles": cmd_deciles,
    "factors": cmd_factors,
    "residualize": cmd_residualize,
    "simulate": cmd_simulate,
    "verify": cmd_verify,
}

# commands that fall back to the default synthetic market without a data section
SYNTHETIC_DEFAULT = ("simulate", "verify")


def _seed(text: str) -> int:
    value = int(text)
    if not 0 <= value < 2 ** 64:
        raise argparse.ArgumentTypeError(f"seed must be an unsigned 64-bit integer, got {text}")
    return value


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="lowvol", description="Low-volatility anomaly research engine")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="YAML run configuration")
        p.add_argument("--seed", type=_seed, help="Seed for synthetic markets and the suite")
        p.add_argument("--out", help="Output directory")
        p.add_argument("--strategy", help="low-vol, low-beta, sector-neutral low-vol or a factor name")
        p.add_argument("--tax", type=float, help="Dividend tax rate on long positions")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                       help="Override a config entry (repeatable), e.g. estimators.lag=40")
        p.add_argument("--workers", type=int, help="Parallel pools / factors")
        p.add_argument("-v", "--verbose", action="store_true", help="Debug logging")
    return ap


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )

    overrides = list(args.overrides)
    if args.workers is not None:
        overrides.append(f"workers={args.workers}")
    try:
        config = load_config(
            args.config,
            overrides=overrides,
            seed=args.seed,
            out=args.out,
            strategy=args.strategy,
            tax=args.tax,
            default_synthetic=args.command in SYNTHETIC_DEFAULT,
        )
        result = COMMANDS[args.command](config)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except LowVolError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1

    if args.command == "verify" and not result["passed"]:
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
