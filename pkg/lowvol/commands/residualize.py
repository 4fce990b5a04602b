# lowvol/commands/residualize.py
"""
`residualize`: regress the target strategy's monthly P&L on the configured
factor P&Ls and report what is left.

Outputs (per pool): residual.csv, coefficients.json, rolling_coefficients.csv
"""
from __future__ import annotations

import logging
from typing import Dict

from ..config import RunConfig
from ..factor_lab import build_factors, residualize
from ..reports import write_csv, write_json
from ..strategy_bridge import StrategyContext
from .workspace import Workspace, echo_config, load_workspace

logger = logging.getLogger(__name__)


def residualize_pool(pool: str, ws: Workspace, ctx: StrategyContext) -> Dict:
    cfg = ws.config.residualize
    names = [cfg.target] + [r for r in cfg.regressors if r != cfg.target]
    pnls = build_factors(names, ctx, ws.metrics, workers=ws.config.workers)
    report = residualize(
        pnls[cfg.target],
        {r: pnls[r] for r in names[1:]},
        rolling_months=cfg.rolling_months,
    )

    out = ws.out_dir(pool)
    table = report.to_frame()
    table.index = table.index.astype(str)
    table.index.name = "month"
    write_csv(table.reset_index(), out / "residual.csv")
    if report.rolling_coefficients is not None:
        rolling = report.rolling_coefficients.copy()
        rolling.index = rolling.index.astype(str)
        rolling.index.name = "month"
        write_csv(rolling.reset_index(), out / "rolling_coefficients.csv")

    result = {
        "pool": pool,
        "target": cfg.target,
        "regressors": names[1:],
        "coefficients": report.coefficients,
        "r_squared": report.r_squared,
        "target_sharpe": report.target_sharpe,
        "residual_sharpe": report.residual_sharpe,
        "residual_correlations": report.correlations,
        "months": len(report.residual),
    }
    write_json(result, out / "coefficients.json")
    return result


def cmd_residualize(config: RunConfig) -> Dict:
    ws = load_workspace(config)
    echo_config(config)
    return ws.map_pools(lambda pool, ctx: residualize_pool(pool, ws, ctx))
