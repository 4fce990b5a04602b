# lowvol/commands/simulate.py
"""
`simulate`: write a synthetic market bundle in the ingestion formats, so it
can be read back through `data:` like any real pool.

Outputs: prices.csv, dividends.csv, membership.csv, sectors.csv, rates.csv,
metrics.csv, truth.csv (planted sigma / beta / dy per instrument), config.yaml
"""
from __future__ import annotations

import logging
from pathlib import Path
from typing import Dict

import pandas as pd

from ..config import RunConfig
from ..errors import ConfigError
from ..reports import write_csv
from ..synthetic_market import generate
from .workspace import echo_config

logger = logging.getLogger(__name__)


def cmd_simulate(config: RunConfig) -> Dict[str, Path]:
    if config.synthetic is None:
        raise ConfigError("simulate needs a 'synthetic' section, not 'data'")
    out = Path(config.output_dir)
    market = generate(config.synthetic)
    paths = market.write_csv(out)

    truth = pd.DataFrame({"sigma": market.sigma, "beta": market.beta, "dy": market.dy, "sector": market.sectors})
    truth.index.name = "instrument"
    paths["truth"] = write_csv(truth.reset_index(), out / "truth.csv")
    paths["config"] = echo_config(config)
    logger.info(
        f"[simulate] {config.synthetic.n_instruments} instruments x {config.synthetic.n_days} days "
        f"(seed {config.synthetic.seed}) -> {out}"
    )
    return paths
