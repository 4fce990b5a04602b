# lowvol/commands/backtest.py
"""
`backtest`: daily positions, P&L legs and summary statistics of one strategy.

Outputs (per pool): positions.csv, diagnostics.csv, pnl.csv, stats.json
Multi-pool runs add aggregate_pnl.csv and aggregate.json at the output root.
"""
from __future__ import annotations

import logging
from typing import Dict, Tuple

import pandas as pd

from ..backtest_engine import PnlSeries, aggregate_pnl, dividend_attribution, perf_stats, updown_differential
from ..config import RunConfig
from ..factor_lab import factor_strategy, pnl_correlation
from ..reports import write_csv, write_json
from ..strategy_bridge import STRATEGIES, StrategyContext, StrategyResult, run_strategy
from .workspace import Workspace, echo_config, load_workspace

logger = logging.getLogger(__name__)

# strategy reported alongside, for the low-vol / low-beta correlation
COMPANION = {"low-vol": "low-beta", "low-beta": "low-vol"}


def _run(name: str, ws: Workspace, ctx: StrategyContext) -> StrategyResult:
    if name in STRATEGIES:
        return run_strategy(ctx, kind=name)
    return factor_strategy(name, ctx, ws.metrics)


def positions_long(positions: pd.DataFrame) -> pd.DataFrame:
    """date, instrument, dollars rows for the non-zero positions."""
    stacked = positions.stack()
    stacked = stacked[stacked != 0]
    out = stacked.rename("dollars").reset_index()
    out.columns = ["date", "instrument", "dollars"]
    out["date"] = pd.DatetimeIndex(out["date"]).strftime("%Y-%m-%d")
    return out


def _dated(frame: pd.DataFrame) -> pd.DataFrame:
    out = frame.copy()
    out.index = pd.DatetimeIndex(out.index).strftime("%Y-%m-%d")
    out.index.name = "date"
    return out.reset_index()


def backtest_pool(pool: str, ws: Workspace, ctx: StrategyContext) -> Tuple[Dict, PnlSeries]:
    config = ws.config
    name = config.strategy
    result = _run(name, ws, ctx)
    pnl = result.backtest(ctx, dividend_tax=config.backtest.tax_rate)
    stats = perf_stats(pnl).to_dict()

    stats.update({
        "pool": pool,
        "strategy": name,
        "tax_rate": config.backtest.tax_rate,
        "dvd_ratio": dividend_attribution(pnl, financed=True),
        "dvd_ratio_unfinanced": dividend_attribution(pnl, financed=False),
        "mean_nmv_over_gmv": float(result.diagnostics["nmv_over_gmv"].astype(float).mean()),
    })
    try:
        stats["updown_ratio"] = updown_differential(ctx.panel, ctx.sigma, ctx.index, calendar=ctx.calendar)["ratio"]
    except ValueError as e:
        logger.warning(f"[backtest] {pool}: up/down differential unavailable ({e})")
        stats["updown_ratio"] = None
    if "max_sector_nmv_share" in result.diagnostics:
        stats["max_sector_nmv_share"] = float(result.diagnostics["max_sector_nmv_share"].astype(float).max())

    other = COMPANION.get(name)
    if other is not None:
        other_pnl = run_strategy(ctx, kind=other).backtest(ctx, dividend_tax=config.backtest.tax_rate)
        try:
            corr = float(pnl_correlation({name: pnl, other: other_pnl}).loc[name, other])
        except ValueError as e:
            logger.warning(f"[backtest] {pool}: no {other} correlation ({e})")
            corr = None
        stats["companion"] = {"strategy": other, "monthly_correlation": corr}

    out = ws.out_dir(pool)
    write_csv(positions_long(result.positions), out / "positions.csv")
    write_csv(_dated(result.diagnostics), out / "diagnostics.csv")
    write_csv(_dated(pnl.to_frame()), out / "pnl.csv")
    write_json(stats, out / "stats.json")
    logger.info(f"[backtest] {pool}/{name}: sharpe {stats['sharpe']}, dvd ratio {stats['dvd_ratio']}")
    return stats, pnl


def aggregate_pools(pnls: Dict[str, PnlSeries], ws: Workspace) -> Dict:
    """Equal-weight P&L across pools and the pool-by-pool monthly correlations."""
    name = ws.config.strategy
    combined = aggregate_pnl(pnls, name=f"{name} (all pools)")
    stats = perf_stats(combined).to_dict()
    stats.update({
        "strategy": name,
        "pools": sorted(pnls),
        "dvd_ratio": dividend_attribution(combined, financed=True),
        "dvd_ratio_unfinanced": dividend_attribution(combined, financed=False),
    })
    try:
        stats["pool_correlations"] = pnl_correlation(pnls)
    except ValueError as e:
        logger.warning(f"[backtest] no cross-pool correlation ({e})")
        stats["pool_correlations"] = None

    out = ws.out_dir()
    write_csv(_dated(combined.to_frame()), out / "aggregate_pnl.csv")
    write_json(stats, out / "aggregate.json")
    logger.info(f"[backtest] {len(pnls)} pools aggregated: sharpe {stats['sharpe']}")
    return stats


def cmd_backtest(config: RunConfig) -> Dict:
    ws = load_workspace(config)
    echo_config(config)
    runs = ws.map_pools(lambda pool, ctx: backtest_pool(pool, ws, ctx))
    report: Dict = {pool: stats for pool, (stats, _) in runs.items()}
    if len(runs) > 1:
        report["aggregate"] = aggregate_pools({pool: pnl for pool, (_, pnl) in runs.items()}, ws)
    return report
