# lowvol/commands/deciles.py
"""
`deciles`: past-volatility decile portfolios, with and without dividends.

Outputs: deciles.csv (pool, mode, decile, stats), deciles_average.csv,
compounding.csv, dy_sigma_bins.csv, dy_deciles.csv, deciles.json
"""
from __future__ import annotations

import logging
from typing import Dict

import pandas as pd

from ..backtest_engine import average_decile_profiles, compounding_ratio, decile_portfolios, dy_vol_correlation
from ..config import RunConfig
from ..factor_lab import dy_decile_betas
from ..reports import write_csv, write_json
from ..strategy_bridge import StrategyContext
from .workspace import Workspace, echo_config, load_workspace

logger = logging.getLogger(__name__)

MODES = ("total", "price")


def deciles_pool(pool: str, ws: Workspace, ctx: StrategyContext) -> Dict:
    bt = ws.config.backtest
    reports = {
        mode: decile_portfolios(
            ctx.sigma, ctx.panel, mode=mode, rates=ctx.rates, calendar=ctx.calendar,
            n_deciles=bt.n_deciles, horizons=bt.horizons, rebalance=bt.decile_rebalance,
        )
        for mode in MODES
    }
    compounding = {
        average: compounding_ratio(ctx.panel, ctx.sigma, bt.horizons, average, bt.n_deciles, ctx.calendar)
        for average in ("arithmetic", "geometric")
    }
    dy_sigma = dy_vol_correlation(ctx.panel, calendar=ctx.calendar)
    dy_deciles = dy_decile_betas(ctx.panel, index=ctx.index, n_deciles=bt.n_deciles, calendar=ctx.calendar)
    return {
        "reports": reports,
        "compounding": compounding,
        "dy_sigma": dy_sigma,
        "dy_deciles": dy_deciles,
    }


def cmd_deciles(config: RunConfig) -> Dict:
    ws = load_workspace(config)
    echo_config(config)
    results = ws.map_pools(lambda pool, ctx: deciles_pool(pool, ws, ctx))
    out = ws.out_dir()

    rows = []
    for pool, res in results.items():
        for mode, report in res["reports"].items():
            table = report.stats.reset_index()
            table.insert(0, "mode", mode)
            table.insert(0, "pool", pool)
            rows.append(table)
    write_csv(pd.concat(rows, ignore_index=True), out / "deciles.csv")

    averages = []
    for mode in MODES:
        table = average_decile_profiles({p: r["reports"][mode] for p, r in results.items()})
        table.insert(0, "mode", mode)
        averages.append(table.reset_index())
    write_csv(pd.concat(averages, ignore_index=True), out / "deciles_average.csv")

    write_csv(
        pd.DataFrame([
            {"pool": pool, "average": average, "n": n, "ratio": ratio}
            for pool, res in results.items()
            for average, ratios in res["compounding"].items()
            for n, ratio in ratios.items()
        ]),
        out / "compounding.csv",
    )
    write_csv(
        pd.concat(
            [res["dy_sigma"].bins.reset_index().assign(pool=pool) for pool, res in results.items()],
            ignore_index=True,
        ),
        out / "dy_sigma_bins.csv",
    )
    write_csv(
        pd.concat(
            [res["dy_deciles"].betas.reset_index().assign(pool=pool) for pool, res in results.items()],
            ignore_index=True,
        ),
        out / "dy_deciles.csv",
    )

    summary = {
        pool: {
            "ir_total": res["reports"]["total"].profile().tolist(),
            "ir_price": res["reports"]["price"].profile().tolist(),
            "compounding": {k: {str(n): v for n, v in r.items()} for k, r in res["compounding"].items()},
            "dy_sigma_correlation": res["dy_sigma"].correlation,
            "dy_high_minus_low_index_correlation": res["dy_deciles"].high_minus_low_index_correlation,
        }
        for pool, res in results.items()
    }
    write_json(summary, out / "deciles.json")
    logger.info(f"[deciles] wrote decile reports for {len(results)} pool(s) to {out}")
    return summary
