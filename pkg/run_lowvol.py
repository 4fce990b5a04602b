"""
Runner for the low-vol research engine (CLI)
Provides run_command(name, config_path=None, **flags) -> dict
Also accepts the full command line when run as a script.
"""
import sys

from lowvol.cli import COMMANDS, main
from lowvol.config import load_config


def run_command(name: str, config_path=None, overrides=(), seed=None, out=None, strategy=None, tax=None):
    config = load_config(
        config_path,
        overrides=overrides,
        seed=seed,
        out=out,
        strategy=strategy,
        tax=tax,
        default_synthetic=name in ("simulate", "verify"),
    )
    return COMMANDS[name](config)


if __name__ == "__main__":
    sys.exit(main(sys.argv[1:]))
