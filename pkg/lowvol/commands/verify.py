# lowvol/commands/verify.py
"""
`verify`: run the acceptance suite and write verify.json.
"""
from __future__ import annotations

import logging
from pathlib import Path
from typing import Dict

from ..config import RunConfig
from ..reports import write_json
from ..verification import Scale, verify
from .workspace import echo_config

logger = logging.getLogger(__name__)

DEFAULT_SEED = 42


def cmd_verify(config: RunConfig) -> Dict:
    cfg = config.verify
    scale = Scale(
        n_instruments=cfg.n_instruments,
        n_days=cfg.n_days,
        corr_window=config.estimators.corr_window,
    )
    base = config.seed if config.seed is not None else DEFAULT_SEED
    results = verify(seeds=cfg.seeds, base_seed=base, only=cfg.only, scale=scale)

    report = {
        "passed": all(r.passed for r in results.values()),
        "base_seed": base,
        "seeds": cfg.seeds,
        "criteria": {name: r.to_dict() for name, r in results.items()},
    }
    echo_config(config)
    write_json(report, Path(config.output_dir) / "verify.json")
    failed = [name for name, r in results.items() if not r.passed]
    if failed:
        logger.error(f"[verify] failed: {failed}")
    else:
        logger.info(f"[verify] all {len(results)} criteria passed")
    return report
