# lowvol/strategy_bridge.py
"""
Glue between the estimators and the portfolio construction: walks the pool
calendar day by day and turns lagged risk estimates (or any metric) into
market-neutral dollar positions.

Per date t:
    members with full estimator windows
    -> rank signal
    -> Markowitz positions at target risk
    -> market-mode projection -> rescale to target risk
Instruments leaving the pool keep yesterday's position for one day and are
flat afterwards.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Dict, FrozenSet, Optional

import numpy as np
import pandas as pd

from .backtest_engine import PnlSeries, run_backtest
from .data_core import PoolCalendar, ReturnPanel, RiskFreeCurve
from .errors import DomainError, InsufficientDataError
from .estimators import (
    BETA_BLOCK,
    BETA_WINDOW,
    CORR_MIN_COVERAGE,
    CORR_WINDOW,
    SIGNAL_LAG,
    VOL_WINDOW,
    CorrelationModel,
    beta_frame,
    equal_weight_index,
    estimate_correlation,
    rank_signal,
    sector_rank_signal,
    volatility_frame,
)
from .neutral_portfolio import (
    SpikeMoments,
    closed_form_ratio,
    flat_overlap,
    markowitz_positions,
    project_market_mode,
    scale_to_risk,
    sector_exposures,
)

logger = logging.getLogger(__name__)

STRATEGIES = ("low-vol", "low-beta", "sector-neutral low-vol")
CORR_REFRESH = 21


@dataclass(eq=False)
class StrategyContext:
    """Everything a strategy run needs, with lazily computed estimator frames."""
    panel: ReturnPanel
    calendar: PoolCalendar
    rates: Optional[RiskFreeCurve] = None
    vol_window: int = VOL_WINDOW
    beta_window: int = BETA_WINDOW
    beta_block: int = BETA_BLOCK
    lag: int = SIGNAL_LAG
    corr_window: int = CORR_WINDOW
    corr_min_coverage: float = CORR_MIN_COVERAGE
    corr_refresh: int = CORR_REFRESH
    regularization: str = "clip"
    target_risk: float = 1.0
    project: bool = True
    _sigma: Optional[pd.DataFrame] = field(default=None, repr=False)
    _beta: Optional[pd.DataFrame] = field(default=None, repr=False)
    _index: Optional[pd.Series] = field(default=None, repr=False)

    def __post_init__(self):
        for name in ("vol_window", "beta_window", "beta_block", "corr_window", "corr_refresh"):
            if getattr(self, name) < 1:
                raise DomainError(f"{name} must be positive")
        if self.lag < 0:
            raise DomainError("lag must be >= 0")

    @property
    def index(self) -> pd.Series:
        if self._index is None:
            self._index = equal_weight_index(self.panel, self.calendar)
        return self._index

    @property
    def sigma(self) -> pd.DataFrame:
        if self._sigma is None:
            self._sigma = volatility_frame(self.panel, self.vol_window, self.lag)
        return self._sigma

    @property
    def beta(self) -> pd.DataFrame:
        if self._beta is None:
            self._beta = beta_frame(self.panel, self.index, self.beta_window, self.lag, self.beta_block)
        return self._beta


@dataclass(frozen=True, eq=False)
class StrategyResult:
    name: str
    positions: pd.DataFrame    # date x instrument dollars, held from that close
    diagnostics: pd.DataFrame  # date x (nmv, gmv, nmv_over_gmv, market_exposure_pre, ...)

    def backtest(self, context: StrategyContext, dividend_tax: float = 0.0) -> PnlSeries:
        return run_backtest(
            self.positions, context.panel, context.rates, context.calendar,
            dividend_tax=dividend_tax, name=self.name,
        )


class _CorrelationCache:
    """Correlation refreshed every `refresh` days, restricted once per instrument set."""

    def __init__(self, context: StrategyContext, dates: pd.DatetimeIndex):
        self.context = context
        self.refresh_dates = dates[::context.corr_refresh]
        self.current_date: Optional[pd.Timestamp] = None
        self.full: Optional[CorrelationModel] = None
        self.restricted: Dict[FrozenSet[str], CorrelationModel] = {}

    def get(self, day: pd.Timestamp, names) -> Optional[CorrelationModel]:
        ctx = self.context
        pos = self.refresh_dates.searchsorted(day, side="right") - 1
        refresh = self.refresh_dates[pos]
        if refresh != self.current_date:
            self.current_date = refresh
            self.restricted = {}
            self.full = estimate_correlation(
                ctx.panel, refresh, ctx.corr_window, ctx.regularization,
                ctx.corr_min_coverage, instruments=sorted(ctx.calendar.members_on(refresh) | set(names)),
            )
        usable = sorted(set(names) & set(self.full.instruments))
        if len(usable) < 2:
            return None
        key = frozenset(usable)
        if key not in self.restricted:
            self.restricted[key] = self.full.restrict(usable)
        return self.restricted[key]


def _signal(context: StrategyContext, kind: str, day, names, metric: Optional[pd.DataFrame], label: str):
    sigma_row = context.sigma.loc[day, names]
    if metric is not None:
        return rank_signal(metric.loc[day, names], "ascending", day, kind=label)
    if kind == "low-vol":
        return rank_signal(sigma_row, "descending", day, kind=kind)
    if kind == "low-beta":
        return rank_signal(context.beta.loc[day, names], "descending", day, kind=kind)
    return sector_rank_signal(sigma_row, context.panel.sectors, "descending", day, kind=kind)


def first_tradable_date(context: StrategyContext) -> pd.Timestamp:
    """First date on which every estimator window is filled."""
    need = max(
        context.vol_window + context.lag,
        context.beta_window + context.beta_block - 1 + context.lag,
        context.corr_window,
    )
    start = context.calendar.start
    if start is None:
        raise InsufficientDataError(f"pool {context.calendar.pool_name} never has members")
    loc = max(context.panel.loc_of(start), need)
    if loc >= len(context.panel.dates):
        raise InsufficientDataError(
            f"need {need + 1} days of history for the estimators, panel has {len(context.panel.dates)}"
        )
    return context.panel.dates[loc]


def run_strategy(
    context: StrategyContext,
    kind: str = "low-vol",
    metric: Optional[pd.DataFrame] = None,
    name: Optional[str] = None,
) -> StrategyResult:
    """
    Daily market-neutral positions for a built-in strategy `kind`, or for an
    arbitrary `metric` frame (date x instrument; higher values are bought).
    """
    if metric is None and kind not in STRATEGIES:
        raise DomainError(f"unknown strategy {kind!r}; expected one of {STRATEGIES}")
    name = name or kind
    panel, calendar = context.panel, context.calendar
    if metric is not None:
        metric = metric.reindex(index=panel.dates, columns=panel.instruments)
    use_beta = metric is None and kind == "low-beta"
    sector_neutral = metric is None and kind == "sector-neutral low-vol"

    dates = panel.dates[panel.loc_of(first_tradable_date(context)):]
    corr_cache = _CorrelationCache(context, dates)
    sigma = context.sigma
    values = metric if metric is not None else (context.beta if use_beta else sigma)

    # an instrument can only be held overnight if it has a return tomorrow
    next_ok = panel.total.shift(-1).notna()
    last_day = panel.dates[-1]

    rows: Dict[pd.Timestamp, pd.Series] = {}
    diag: Dict[pd.Timestamp, Dict] = {}
    previous = pd.Series(dtype=float)

    for day in dates:
        members = calendar.members_on(day)
        exiting = calendar.exiting(day)
        ok = sigma.loc[day].notna() & values.loc[day].notna()
        if day != last_day:
            ok &= next_ok.loc[day]
        names = sorted(i for i in members if ok.get(i, False))

        x = pd.Series(dtype=float)
        info: Dict = {"n_instruments": len(names)}
        corr = corr_cache.get(day, names) if len(names) >= 2 else None
        if corr is not None:
            names = corr.instruments
            signal = _signal(context, kind, day, names, metric, name)
            s = sigma.loc[day, names]
            pv = markowitz_positions(signal, s, corr, context.target_risk)
            pre = pv.market_exposure
            if context.project:
                neutral = panel.sectors if sector_neutral else None
                pv = scale_to_risk(project_market_mode(pv, corr, s, neutral), corr, s, context.target_risk)
            x = pv.positions
            info.update({
                "market_exposure_pre": pre,
                "market_exposure_post": pv.market_exposure,
                "lambda0": corr.lambda0,
                "flat_overlap": flat_overlap(corr, s),
                "closed_form_ratio": closed_form_ratio(SpikeMoments.from_sigma(s.to_numpy())),
            })
        else:
            logger.debug(f"[strategy] {name}: no tradable cross-section on {day.date()}")

        carried = previous.reindex(sorted(exiting)).dropna()
        if day != last_day:
            carried = carried[next_ok.loc[day].reindex(carried.index, fill_value=False).to_numpy()]
        carried = carried[carried != 0]
        if len(carried):
            x = pd.concat([x, carried])

        nmv, gmv = float(x.sum()), float(x.abs().sum())
        sectors = sector_exposures(x, panel.sectors) if gmv > 0 else pd.Series(dtype=float)
        info.update({
            "nmv": nmv,
            "gmv": gmv,
            "nmv_over_gmv": nmv / gmv if gmv > 0 else None,
            "max_sector_nmv_share": float(sectors.abs().max() / gmv) if gmv > 0 else None,
        })
        rows[day] = x
        diag[day] = info
        previous = x

    positions = pd.DataFrame.from_dict(rows, orient="index").reindex(columns=panel.instruments).fillna(0.0)
    positions = positions.loc[:, (positions != 0).any(axis=0)]
    positions.index.name = "date"
    diagnostics = pd.DataFrame.from_dict(diag, orient="index")
    diagnostics.index.name = "date"
    ratio = diagnostics["nmv_over_gmv"].astype(float)
    logger.info(
        f"[strategy] {name}: {len(dates)} days from {dates[0].date()}, "
        f"mean NMV/GMV {np.nanmean(ratio) if ratio.notna().any() else float('nan'):.3f}"
    )
    return StrategyResult(name=name, positions=positions, diagnostics=diagnostics)
