# lowvol/commands/workspace.py
"""
Turns a RunConfig into ready-to-run strategy contexts (one per pool), from
CSV files or from a synthetic market, and owns the output directory layout.
"""
from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, Optional, TypeVar

import pandas as pd

from ..config import RunConfig
from ..data_core import RiskFreeCurve, compute_returns, load_panel_pools, load_rates
from ..errors import DataError
from ..factor_lab import load_metrics
from ..reports import write_yaml
from ..strategy_bridge import StrategyContext
from ..synthetic_market import SyntheticMarket, generate

logger = logging.getLogger(__name__)

T = TypeVar("T")


@dataclass
class Workspace:
    config: RunConfig
    contexts: Dict[str, StrategyContext]
    metrics: Optional[pd.DataFrame] = None
    market: Optional[SyntheticMarket] = None

    def out_dir(self, pool: Optional[str] = None) -> Path:
        """Single-pool runs write to the output root, multi-pool runs to one folder per pool."""
        root = Path(self.config.output_dir)
        if pool is None or len(self.contexts) == 1:
            return root
        return root / pool

    def map_pools(self, fn: Callable[[str, StrategyContext], T]) -> Dict[str, T]:
        """Apply `fn` to every pool, in parallel threads when workers > 1."""
        items = list(self.contexts.items())
        if self.config.workers <= 1 or len(items) == 1:
            return {pool: fn(pool, ctx) for pool, ctx in items}
        with ThreadPoolExecutor(max_workers=self.config.workers) as executor:
            futures = {pool: executor.submit(fn, pool, ctx) for pool, ctx in items}
            return {pool: f.result() for pool, f in futures.items()}


def _context(config: RunConfig, panel, calendar, rates) -> StrategyContext:
    est = config.estimators
    return StrategyContext(
        panel=panel,
        calendar=calendar,
        rates=rates,
        vol_window=est.vol_window,
        beta_window=est.beta_window,
        beta_block=est.beta_block,
        lag=est.lag,
        corr_window=est.corr_window,
        corr_min_coverage=est.corr_min_coverage,
        corr_refresh=est.corr_refresh,
        regularization=est.regularization,
        target_risk=config.portfolio.target_risk,
        project=config.portfolio.project_market_mode,
    )


def load_workspace(config: RunConfig) -> Workspace:
    mode = config.backtest.return_mode
    metrics = load_metrics(config.factors.metrics) if config.factors.metrics is not None else None

    if config.synthetic is not None:
        market = generate(config.synthetic)
        panel = market.panel(mode)
        ctx = _context(config, panel, market.calendar, market.rates)
        if metrics is None and not market.metrics.empty:
            metrics = market.metrics
        return Workspace(config=config, contexts={market.calendar.pool_name: ctx}, metrics=metrics, market=market)

    data = config.data
    series, pools = load_panel_pools(data.prices, data.dividends, data.membership, data.sectors, data.max_size)
    wanted = data.pools or sorted(pools)
    missing = [p for p in wanted if p not in pools]
    if missing:
        raise DataError(f"{data.membership}: pools not found: {missing}")

    full = compute_returns(series, mode)
    rates = load_rates(data.rates) if data.rates is not None else RiskFreeCurve.constant(data.risk_free, full.dates)
    contexts = {}
    for pool in wanted:
        calendar = pools[pool]
        contexts[pool] = _context(config, full.subset(calendar.instruments), calendar, rates)
        logger.info(f"[workspace] pool {pool}: {len(calendar.instruments)} instruments")
    return Workspace(config=config, contexts=contexts, metrics=metrics)


def echo_config(config: RunConfig) -> Path:
    """Write the resolved configuration next to the outputs."""
    return write_yaml(config.model_dump(mode="json"), Path(config.output_dir) / "config.yaml")
