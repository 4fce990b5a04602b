# lowvol/commands/factors.py
"""
`factors`: comparison factor P&Ls under the shared construction, their
monthly correlation matrix and, when a holdings file is configured, the
fund holdings bias towards each factor's signal.

Outputs (per pool): factor_pnl.csv, monthly_pnl.csv, correlations.csv,
factors.json, holdings_bias.csv
"""
from __future__ import annotations

import logging
from typing import Dict

import pandas as pd

from ..backtest_engine import perf_stats
from ..config import RunConfig
from ..errors import DomainError
from ..factor_lab import FACTORS, build_factors, factor_metric, holdings_bias, load_holdings, metric_frame, monthly_table, pnl_correlation
from ..reports import write_csv, write_json
from ..strategy_bridge import StrategyContext
from .workspace import Workspace, echo_config, load_workspace

logger = logging.getLogger(__name__)


def _holdings_bias(ws: Workspace, ctx: StrategyContext) -> pd.DataFrame:
    cfg = ws.config.factors
    holdings = load_holdings(cfg.holdings)
    signals = {}
    for name in cfg.names:
        definition = FACTORS[name]
        if definition.metric is None:
            continue
        signals[name] = factor_metric(definition, ctx, ws.metrics)
    caps = None
    if cfg.normalization == "cap":
        if ws.metrics is None:
            raise DomainError("holdings normalized by market cap need a metrics file with 'cap'")
        caps = metric_frame(ws.metrics, "cap", ctx.panel.dates, ctx.panel.instruments)
    return holdings_bias(holdings, signals, normalization=cfg.normalization, caps=caps)


def factors_pool(pool: str, ws: Workspace, ctx: StrategyContext) -> Dict:
    cfg = ws.config.factors
    pnls = build_factors(cfg.names, ctx, ws.metrics, workers=ws.config.workers)
    out = ws.out_dir(pool)

    daily = pd.DataFrame({name: p.total for name, p in pnls.items()})
    daily.index = pd.DatetimeIndex(daily.index).strftime("%Y-%m-%d")
    daily.index.name = "date"
    write_csv(daily.reset_index(), out / "factor_pnl.csv")

    summary: Dict = {"pool": pool, "factors": {}}
    for name, pnl in pnls.items():
        try:
            summary["factors"][name] = perf_stats(pnl).to_dict()
        except DomainError as e:
            logger.warning(f"[factors] {pool}/{name}: no stats ({e})")
            summary["factors"][name] = None

    if len(pnls) > 1:
        monthly = monthly_table(pnls)
        monthly.index = monthly.index.astype(str)
        monthly.index.name = "month"
        write_csv(monthly.reset_index(), out / "monthly_pnl.csv")
        corr = pnl_correlation(pnls)
        corr.index.name = "factor"
        write_csv(corr.reset_index(), out / "correlations.csv")
        summary["correlations"] = corr

    if cfg.holdings is not None:
        bias = _holdings_bias(ws, ctx)
        write_csv(bias.reset_index(), out / "holdings_bias.csv")
        summary["holdings_bias_last"] = bias.iloc[-1] if len(bias) else None

    write_json(summary, out / "factors.json")
    logger.info(f"[factors] {pool}: built {list(pnls)}")
    return summary


def cmd_factors(config: RunConfig) -> Dict:
    ws = load_workspace(config)
    echo_config(config)
    return ws.map_pools(lambda pool, ctx: factors_pool(pool, ws, ctx))
