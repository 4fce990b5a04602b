# lowvol/factor_lab.py
"""
Comparison factors built through the same pipeline as the low-vol strategy,
monthly P&L correlations, residualization and holdings-bias diagnostics.

metrics.csv (long format):  date,instrument,metric,value
holdings.csv:               date,fund,instrument,dollar_value
"""
from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Dict, Mapping, Optional, Sequence, Union

import numpy as np
import pandas as pd
import statsmodels.api as sm
from statsmodels.regression.rolling import RollingOLS

from .backtest_engine import PnlSeries, decile_returns
from .data_core import TRADING_DAYS, ReturnPanel, _parse_dates, _parse_numbers, _read_csv, _reject_duplicates
from .errors import DataError, DomainError, InsufficientDataError
from .estimators import equal_weight_index
from .strategy_bridge import StrategyContext, StrategyResult, first_tradable_date, run_strategy

logger = logging.getLogger(__name__)

MIN_METRIC_COVERAGE = 0.5
MIN_OVERLAP_MONTHS = 24
MAX_CONDITION = 1e8
MOMENTUM_LOOKBACK = 252
MOMENTUM_SKIP = 21
NORMALIZATIONS = ("cap", "fund_total")


@dataclass(frozen=True)
class FactorDefinition:
    """
    A factor is the pipeline applied to one metric; `sign` = +1 buys high
    values, -1 buys low values. `log` ranks log(metric) (same ranks, kept
    for readability of SMB).
    """
    name: str
    metric: Optional[str]
    sign: float = 1.0
    log: bool = False


FACTORS: Dict[str, FactorDefinition] = {
    "MKT": FactorDefinition("MKT", None),
    "UMD": FactorDefinition("UMD", "momentum"),
    "SMB": FactorDefinition("SMB", "cap", sign=-1.0, log=True),
    "HML": FactorDefinition("HML", "book_to_price"),
    "EP": FactorDefinition("EP", "earnings_to_price"),
    "DP": FactorDefinition("DP", "dividend_to_price"),
    "LOWVOL": FactorDefinition("LOWVOL", "sigma", sign=-1.0),
    "LOWBETA": FactorDefinition("LOWBETA", "beta", sign=-1.0),
}


@dataclass(frozen=True, eq=False)
class ResidualReport:
    coefficients: pd.Series          # const + one slope per regressor
    residual: pd.Series              # monthly target minus the factor part (alpha kept)
    target: pd.Series
    residual_sharpe: Optional[float]
    target_sharpe: Optional[float]
    correlations: pd.Series          # in-sample corr(residual, regressor)
    r_squared: Optional[float]
    rolling_coefficients: Optional[pd.DataFrame] = None

    @property
    def cumulative(self) -> pd.Series:
        return self.residual.cumsum()

    def to_frame(self) -> pd.DataFrame:
        out = pd.DataFrame({"target": self.target, "residual": self.residual})
        out["cumulative"] = out["residual"].cumsum()
        return out


@dataclass(frozen=True, eq=False)
class DyDecileReport:
    betas: pd.Series
    high_minus_low_index_correlation: Optional[float]
    returns: pd.DataFrame


# ==========================================
# METRICS
# ==========================================

def load_metrics(metrics_file) -> pd.DataFrame:
    df, path = _read_csv(metrics_file, ["date", "instrument", "metric", "value"])
    df["date"] = _parse_dates(df, "date", path)
    df["value"] = _parse_numbers(df, "value", path)
    _reject_duplicates(df, ["date", "instrument", "metric"], path)
    return df[["date", "instrument", "metric", "value"]]


def dividend_yield_frame(panel: ReturnPanel, lookback: int = TRADING_DAYS) -> pd.DataFrame:
    """Trailing `lookback`-day dividends over the current close."""
    paid = panel.dividend_cash.rolling(lookback, min_periods=lookback).sum()
    return paid / panel.close


def momentum_frame(panel: ReturnPanel, lookback: int = MOMENTUM_LOOKBACK, skip: int = MOMENTUM_SKIP) -> pd.DataFrame:
    """Total return from t - lookback to t - skip (12-1 month momentum)."""
    logs = np.log1p(panel.total)
    return np.expm1(logs.rolling(lookback - skip, min_periods=lookback - skip).sum().shift(skip))


def metric_frame(metrics: pd.DataFrame, name: str, dates: pd.DatetimeIndex, instruments: Sequence[str]) -> pd.DataFrame:
    """Wide (date x instrument) view of one metric, carried forward between reports."""
    rows = metrics[metrics["metric"] == name]
    if rows.empty:
        raise DataError(f"metrics file has no rows for metric {name!r}")
    wide = rows.pivot(index="date", columns="instrument", values="value").sort_index()
    union = wide.index.union(dates)
    return wide.reindex(union).ffill().reindex(index=dates, columns=list(instruments))


def factor_metric(
    definition: FactorDefinition,
    context: StrategyContext,
    metrics: Optional[pd.DataFrame] = None,
) -> pd.DataFrame:
    """Signed metric frame fed to the pipeline (higher is bought)."""
    panel = context.panel
    name = definition.metric
    if name == "sigma":
        raw = context.sigma
    elif name == "beta":
        raw = context.beta
    elif name == "momentum":
        raw = momentum_frame(panel)
    elif name == "dividend_to_price" and (metrics is None or not (metrics["metric"] == name).any()):
        raw = dividend_yield_frame(panel)
    else:
        if metrics is None:
            raise DataError(f"factor {definition.name} needs a metrics file with {name!r}")
        raw = metric_frame(metrics, name, panel.dates, panel.instruments)
    if definition.log:
        raw = np.log(raw.where(raw > 0))
    return raw if definition.sign > 0 else -raw


def _check_coverage(definition: FactorDefinition, metric: pd.DataFrame, context: StrategyContext):
    dates = context.panel.dates[context.panel.loc_of(first_tradable_date(context)):]
    held = total = 0
    for day in dates:
        members = list(context.calendar.members_on(day))
        total += len(members)
        held += int(metric.loc[day].reindex(members).notna().sum())
    coverage = held / total if total else 0.0
    if coverage < MIN_METRIC_COVERAGE:
        raise DomainError(
            f"factor {definition.name}: metric {definition.metric!r} covers {coverage:.0%} of the pool "
            f"(minimum {MIN_METRIC_COVERAGE:.0%})"
        )


# ==========================================
# FACTOR P&L
# ==========================================

def market_positions(context: StrategyContext) -> pd.DataFrame:
    """Equal-weight long positions on every member, $1 gross."""
    panel, calendar = context.panel, context.calendar
    dates = panel.dates[panel.loc_of(first_tradable_date(context)):]
    members = calendar.membership_frame().reindex(index=dates, columns=panel.instruments, fill_value=False)
    tradable = members & panel.total.shift(-1).reindex(dates).notna()
    tradable.iloc[-1] = members.iloc[-1]
    counts = tradable.sum(axis=1).replace(0, np.nan)
    return tradable.astype(float).div(counts, axis=0).fillna(0.0)


def factor_strategy(
    definition: Union[str, FactorDefinition],
    context: StrategyContext,
    metrics: Optional[pd.DataFrame] = None,
) -> StrategyResult:
    if isinstance(definition, str):
        if definition not in FACTORS:
            raise DomainError(f"unknown factor {definition!r}; expected one of {sorted(FACTORS)}")
        definition = FACTORS[definition]
    if definition.metric is None:
        x = market_positions(context)
        diag = pd.DataFrame({"nmv": x.sum(axis=1), "gmv": x.abs().sum(axis=1)})
        return StrategyResult(name=definition.name, positions=x, diagnostics=diag)
    metric = factor_metric(definition, context, metrics)
    _check_coverage(definition, metric, context)
    return run_strategy(context, metric=metric, name=definition.name)


def build_factor(
    definition: Union[str, FactorDefinition],
    context: StrategyContext,
    metrics: Optional[pd.DataFrame] = None,
) -> PnlSeries:
    """Market-neutral factor P&L under the shared construction (MKT: long index)."""
    result = factor_strategy(definition, context, metrics)
    return result.backtest(context)


def build_factors(
    names: Sequence[str],
    context: StrategyContext,
    metrics: Optional[pd.DataFrame] = None,
    workers: int = 1,
) -> Dict[str, PnlSeries]:
    """Build several factors, in parallel threads when workers > 1."""
    # fill the lazily computed estimator frames before threads share the context
    _ = context.sigma, context.beta, context.index
    if workers <= 1:
        return {n: build_factor(n, context, metrics) for n in names}
    with ThreadPoolExecutor(max_workers=workers) as pool:
        futures = {n: pool.submit(build_factor, n, context, metrics) for n in names}
        return {n: f.result() for n, f in futures.items()}


# ==========================================
# CORRELATIONS / RESIDUALS
# ==========================================

def _monthly(series: Union[PnlSeries, pd.Series], name: str) -> pd.Series:
    if isinstance(series, PnlSeries):
        return series.monthly().rename(name)
    s = pd.Series(series)
    if isinstance(s.index, pd.PeriodIndex):
        return s.rename(name)
    return s.groupby(pd.DatetimeIndex(s.index).to_period("M")).sum().rename(name)


def monthly_table(series: Mapping[str, Union[PnlSeries, pd.Series]], min_months: int = MIN_OVERLAP_MONTHS) -> pd.DataFrame:
    """Calendar-month P&L sums on the months every series covers."""
    table = pd.concat([_monthly(s, name) for name, s in series.items()], axis=1, join="inner").dropna()
    if len(table) < min_months:
        raise InsufficientDataError(f"only {len(table)} overlapping months; at least {min_months} required")
    return table


def pnl_correlation(
    series: Mapping[str, Union[PnlSeries, pd.Series]],
    min_months: int = MIN_OVERLAP_MONTHS,
) -> pd.DataFrame:
    """Pearson correlation of monthly P&L."""
    corr = monthly_table(series, min_months).corr()
    values = corr.to_numpy(copy=True)
    np.fill_diagonal(values, 1.0)
    return pd.DataFrame(values, index=corr.index, columns=corr.columns)


def _collinear_pair(x: pd.DataFrame) -> str:
    flat = [c for c in x.columns if x[c].std() == 0]
    if flat:
        return f"{flat[0]} / const"
    if x.shape[1] == 1:
        return f"{x.columns[0]} / const"
    c = x.corr().abs().to_numpy(copy=True)
    np.fill_diagonal(c, -1.0)
    i, j = np.unravel_index(np.nanargmax(c), c.shape)
    return f"{x.columns[i]} / {x.columns[j]}"


def _monthly_ratio(s: pd.Series) -> Optional[float]:
    if len(s) < 2 or s.std(ddof=1) == 0:
        return None
    return float(s.mean() / s.std(ddof=1) * np.sqrt(12))


def residualize(
    target: Union[PnlSeries, pd.Series],
    regressors: Mapping[str, Union[PnlSeries, pd.Series]],
    rolling_months: Optional[int] = None,
    min_months: int = MIN_OVERLAP_MONTHS,
) -> ResidualReport:
    """
    OLS (with intercept) of the monthly target P&L on the monthly regressor
    P&Ls. The residual is target minus the fitted factor part, so the
    unexplained drift (alpha) stays in it. `rolling_months` re-fits the
    coefficients on a trailing window instead of the full sample.
    """
    name = target.name if isinstance(target, PnlSeries) else (getattr(target, "name", None) or "target")
    if not regressors:
        y = _monthly(target, "target")
        return ResidualReport(
            coefficients=pd.Series({"const": 0.0}),
            residual=y.rename("residual"),
            target=y,
            residual_sharpe=_monthly_ratio(y),
            target_sharpe=_monthly_ratio(y),
            correlations=pd.Series(dtype=float),
            r_squared=None,
        )

    table = monthly_table({"target": target, **regressors}, min_months)
    y, x = table["target"], table.drop(columns="target")
    design = sm.add_constant(x, has_constant="add")
    d = design.to_numpy()
    with np.errstate(invalid="ignore", divide="ignore"):
        cond = np.linalg.cond(d / np.linalg.norm(d, axis=0))
    if not np.isfinite(cond) or cond > MAX_CONDITION:
        raise DomainError(f"collinear regressors (condition number {cond:.3g}): {_collinear_pair(x)}")

    fit = sm.OLS(y, design).fit()
    rolling = None
    if rolling_months:
        if rolling_months <= x.shape[1] + 1:
            raise DomainError(f"rolling window of {rolling_months} months is too short for {x.shape[1]} regressors")
        rolling = RollingOLS(y, design, window=rolling_months).fit().params
        slopes = rolling[x.columns]
        residual = (y - (x * slopes).sum(axis=1, min_count=1)).dropna()
    else:
        residual = y - x @ fit.params[x.columns]
    residual = residual.rename("residual")

    flat = residual.std() <= 1e-12 * max(y.std(), 1e-300)
    correlations = pd.Series(
        {
            c: 0.0 if flat or x[c].std() == 0 else float(np.corrcoef(residual, x.loc[residual.index, c])[0, 1])
            for c in x.columns
        },
        name="correlation",
    )
    report = ResidualReport(
        coefficients=fit.params.rename("coefficient"),
        residual=residual,
        target=y,
        residual_sharpe=_monthly_ratio(residual),
        target_sharpe=_monthly_ratio(y),
        correlations=correlations,
        r_squared=float(fit.rsquared),
        rolling_coefficients=rolling,
    )
    logger.info(
        f"[factors] residualized {name} on {list(x.columns)}: R2 {report.r_squared:.3f}, "
        f"sharpe {report.target_sharpe} -> {report.residual_sharpe}"
    )
    return report


# ==========================================
# HOLDINGS / DIVIDEND-YIELD DECILES
# ==========================================

def load_holdings(holdings_file) -> pd.DataFrame:
    df, path = _read_csv(holdings_file, ["date", "fund", "instrument", "dollar_value"])
    df["date"] = _parse_dates(df, "date", path)
    df["dollar_value"] = _parse_numbers(df, "dollar_value", path)
    _reject_duplicates(df, ["date", "fund", "instrument"], path)
    return df[["date", "fund", "instrument", "dollar_value"]]


def _normalized_holdings(holdings: pd.DataFrame, normalization: str, caps: Optional[pd.DataFrame]) -> pd.DataFrame:
    if normalization == "fund_total":
        totals = holdings.groupby(["date", "fund"])["dollar_value"].transform("sum")
        share = holdings.assign(w=holdings["dollar_value"] / totals)
        n_funds = holdings.groupby("date")["fund"].nunique()
        wide = share.pivot_table(index="date", columns="instrument", values="w", aggfunc="sum")
        return wide.div(n_funds, axis=0)

    if caps is None:
        raise DomainError("by-market-cap normalization needs capitalization data")
    wide = holdings.pivot_table(index="date", columns="instrument", values="dollar_value", aggfunc="sum")
    cap = caps.reindex(caps.index.union(wide.index)).ffill().reindex(index=wide.index, columns=wide.columns)
    missing = wide.notna() & cap.isna()
    if missing.to_numpy().any():
        d, inst = missing.stack()[lambda s: s].index[0]
        raise DomainError(f"no market cap for held instrument {inst} on {d.date()}")
    return wide / cap


def holdings_bias(
    holdings: pd.DataFrame,
    signals: Mapping[str, pd.DataFrame],
    normalization: str = "cap",
    caps: Optional[pd.DataFrame] = None,
    window: str = "365D",
) -> pd.DataFrame:
    """
    Cross-sectional correlation between aggregated (normalized) fund holdings
    and each signal on every holdings date, smoothed with a trailing
    `window` time-based mean. Instruments with a signal but no holding
    count as zero weight; a constant cross-section correlates at 0.
    """
    if normalization not in NORMALIZATIONS:
        raise DomainError(f"normalization must be one of {NORMALIZATIONS}, got {normalization!r}")
    weights = _normalized_holdings(holdings, normalization, caps)

    raw = pd.DataFrame(index=weights.index, columns=list(signals), dtype=float)
    for name, frame in signals.items():
        frame = frame.sort_index()
        for day in weights.index:
            pos = frame.index.searchsorted(day, side="right") - 1
            if pos < 0:
                continue
            s = frame.iloc[pos].dropna()
            w = weights.loc[day].reindex(s.index).fillna(0.0)
            if len(s) < 2:
                continue
            if w.std() == 0 or s.std() == 0:
                raw.loc[day, name] = 0.0
            else:
                raw.loc[day, name] = float(np.corrcoef(w, s)[0, 1])
    raw.index.name = "date"
    smoothed = raw.rolling(window, min_periods=1).mean()
    logger.info(f"[factors] holdings bias over {len(raw)} dates ({normalization} normalization)")
    return smoothed


def dy_decile_betas(
    panel: ReturnPanel,
    dy: Optional[pd.DataFrame] = None,
    index: Optional[pd.Series] = None,
    n_deciles: int = 10,
    calendar=None,
) -> DyDecileReport:
    """
    Beta of each dividend-yield decile portfolio (long-only, equal weight,
    monthly rebalance; decile 10 = highest yield) against the equi-weighted
    index, plus the index correlation of the high-minus-low yield portfolio.
    """
    if dy is None:
        dy = dividend_yield_frame(panel)
    if index is None:
        index = equal_weight_index(panel, calendar)
    daily, _ = decile_returns(dy, panel.total, n_deciles, "M", descending=False, calendar=calendar)
    idx = index.reindex(daily.index)
    ok = idx.notna() & daily.notna().all(axis=1)
    daily, idx = daily.loc[ok], idx.loc[ok]
    if len(idx) < 2 or idx.var(ddof=1) == 0:
        raise InsufficientDataError("index variance is zero or too few days for decile betas")

    dm = idx - idx.mean()
    betas = daily.sub(daily.mean()).mul(dm, axis=0).sum() / (dm ** 2).sum()
    betas.index.name = "decile"
    hml = daily[n_deciles] - daily[1]
    corr = None if hml.std() == 0 else float(np.corrcoef(hml, idx)[0, 1])
    return DyDecileReport(betas=betas.rename("beta"), high_minus_low_index_correlation=corr, returns=daily)
