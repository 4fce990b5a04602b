# lowvol/backtest_engine.py
"""
Daily P&L accounting, decile portfolios and performance statistics.

Positions are taken at the close of day t and earn the returns of day t+1:

    pnl(t+1) = sum_i x_i(t) * (r_i(t+1) - r_RF(t+1))

split into a price leg, a dividend leg and a financing leg. The financing
leg is also reported netted (-NMV * r_RF), which is the same number.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Union

import numpy as np
import pandas as pd

from .data_core import TRADING_DAYS, PoolCalendar, ReturnPanel, RiskFreeCurve
from .errors import DomainError, InsufficientDataError
from .neutral_portfolio import PositionVector

logger = logging.getLogger(__name__)

LEGS = ("price", "dividend", "financing")
HORIZONS = (1, 5, 10, 20)
N_DECILES = 10
MIN_STATS_OBS = TRADING_DAYS
AVERAGES = ("arithmetic", "geometric")
DY_SIGMA_WINDOW = 250
DY_BIN_SIZE = 2000


# ==========================================
# TYPES
# ==========================================

@dataclass(frozen=True, eq=False)
class PnlSeries:
    """
    Daily P&L legs indexed by the date the return is earned.
    Columns: total, price, dividend, financing, financing_netted, nmv, gmv.
    """
    frame: pd.DataFrame
    name: str = "strategy"

    @property
    def dates(self) -> pd.DatetimeIndex:
        return self.frame.index

    @property
    def total(self) -> pd.Series:
        return self.frame["total"]

    @property
    def unfinanced(self) -> pd.Series:
        return (self.frame["price"] + self.frame["dividend"]).rename("unfinanced")

    def leg(self, name: str) -> pd.Series:
        return self.frame[name]

    @property
    def cumulative(self) -> pd.DataFrame:
        return self.frame[["total", *LEGS]].cumsum()

    def monthly(self, column: str = "total") -> pd.Series:
        s = self.unfinanced if column == "unfinanced" else self.frame[column]
        return s.groupby(s.index.to_period("M")).sum().rename(self.name)

    def to_frame(self) -> pd.DataFrame:
        out = self.frame[["total", *LEGS, "financing_netted", "nmv", "gmv"]].copy()
        out["cumulative"] = out["total"].cumsum()
        return out


@dataclass(frozen=True)
class PerfStats:
    sharpe: Optional[float]
    information_ratio: Optional[float]
    skewness: Optional[float]
    t_stat: Optional[float]
    mean: float
    std: float
    n_obs: int
    years: float

    def to_dict(self) -> Dict:
        return {
            "sharpe": self.sharpe,
            "ir": self.information_ratio,
            "skewness": self.skewness,
            "t_stat": self.t_stat,
            "mean": self.mean,
            "std": self.std,
            "n_obs": self.n_obs,
            "years": self.years,
        }


def aggregate_pnl(series: Mapping[str, PnlSeries], name: str = "aggregate") -> PnlSeries:
    """
    Equal-weight average of several pools' P&L legs. Each day averages the
    pools that trade on it, so pools with shorter histories still count.
    """
    if not series:
        raise DomainError("no P&L series to aggregate")
    stacked = pd.concat([s.frame for s in series.values()], keys=list(series), names=["pool", "date"])
    frame = stacked.groupby(level="date").mean().sort_index()
    logger.debug(f"[backtest] aggregated {len(series)} pools over {len(frame)} days")
    return PnlSeries(frame=frame, name=name)


@dataclass(frozen=True, eq=False)
class DecileReport:
    """Decile 1 holds the most volatile names, decile 10 the least."""
    returns: pd.DataFrame      # date x decile, daily equal-weight returns
    stats: pd.DataFrame        # decile x (information_ratio, sharpe, skewness, mean_<n>)
    assignments: pd.DataFrame  # rebalance date x instrument -> decile
    mode: str = "total"

    def profile(self, column: str = "information_ratio") -> pd.Series:
        return self.stats[column]


# ==========================================
# STATISTICS
# ==========================================

def annualized_ratio(returns: pd.Series) -> Optional[float]:
    """mean / std * sqrt(252); None for fewer than 2 points or zero variance."""
    x = pd.Series(returns).dropna().to_numpy(dtype=float)
    if len(x) < 2:
        return None
    std = x.std(ddof=1)
    if not np.isfinite(std) or std <= 1e-15 * max(np.abs(x).max(), 1e-300):
        return None
    return float(x.mean() / std * np.sqrt(TRADING_DAYS))


def mean_median_skew(returns: pd.Series) -> Optional[float]:
    """(mean - median) / rms; odd under a sign flip, zero on symmetric samples."""
    x = pd.Series(returns).dropna().to_numpy(dtype=float)
    if len(x) == 0:
        return None
    rms = np.sqrt(np.mean(x ** 2))
    if rms == 0:
        return None
    return float((x.mean() - np.median(x)) / rms)


def series_stats(returns: pd.Series, excess: Optional[pd.Series] = None) -> Dict[str, Optional[float]]:
    """
    Common statistics of one daily return series. `excess` (returns net of
    the risk-free rate) feeds the Sharpe ratio; without it sharpe == ir.
    """
    r = pd.Series(returns).dropna()
    ir = annualized_ratio(r)
    sharpe = annualized_ratio(excess) if excess is not None else ir
    return {
        "information_ratio": ir,
        "sharpe": sharpe,
        "skewness": mean_median_skew(r),
        "mean": float(r.mean()) if len(r) else float("nan"),
        "std": float(r.std(ddof=1)) if len(r) > 1 else float("nan"),
        "n_obs": int(len(r)),
    }


def perf_stats(pnl: PnlSeries, min_obs: int = MIN_STATS_OBS) -> PerfStats:
    """Sharpe on financed P&L, IR on un-financed P&L, t-stat = sharpe * sqrt(years)."""
    n = int(pnl.total.notna().sum())
    if n < min_obs:
        raise InsufficientDataError(f"perf stats need at least {min_obs} daily observations, got {n}")
    sharpe = annualized_ratio(pnl.total)
    years = n / TRADING_DAYS
    return PerfStats(
        sharpe=sharpe,
        information_ratio=annualized_ratio(pnl.unfinanced),
        skewness=mean_median_skew(pnl.total),
        t_stat=None if sharpe is None else sharpe * np.sqrt(years),
        mean=float(pnl.total.mean()),
        std=float(pnl.total.std(ddof=1)),
        n_obs=n,
        years=years,
    )


# ==========================================
# ACCOUNTING
# ==========================================

def positions_frame(positions: Union[pd.DataFrame, Iterable[PositionVector]]) -> pd.DataFrame:
    """date x instrument dollar positions from a frame or a sequence of PositionVector."""
    if isinstance(positions, pd.DataFrame):
        return positions.astype(float)
    rows = {}
    for pv in positions:
        if pv.date is None:
            raise DomainError("position vectors must be dated to be backtested")
        rows[pv.date] = pv.positions
    if not rows:
        raise InsufficientDataError("no positions to backtest")
    return pd.DataFrame.from_dict(rows, orient="index").sort_index().fillna(0.0)


def run_backtest(
    positions: Union[pd.DataFrame, Iterable[PositionVector]],
    panel: ReturnPanel,
    rates: Optional[RiskFreeCurve] = None,
    calendar: Optional[PoolCalendar] = None,
    dividend_tax: float = 0.0,
    name: str = "strategy",
) -> PnlSeries:
    """
    P&L of dollar positions held close-to-close. A date missing from the
    positions frame (inside its range) means a flat book that day.
    """
    if not 0.0 <= dividend_tax <= 1.0:
        raise DomainError(f"dividend tax must lie in [0, 1], got {dividend_tax}")
    x = positions_frame(positions)
    unknown = x.index.difference(panel.dates)
    if len(unknown):
        raise DomainError(f"positions dated off the return panel: {unknown[0].date()}")
    extra = [c for c in x.columns if c not in set(panel.instruments)]
    if extra and (x[extra].abs() > 0).to_numpy().any():
        raise DomainError(f"positions in instruments without returns: {extra[:5]}")

    if calendar is not None:
        _check_holdable(x, calendar)

    start, stop = panel.loc_of(x.index[0]), panel.loc_of(x.index[-1])
    dates = panel.dates[start:stop + 2]
    if len(dates) < 2:
        raise InsufficientDataError("positions must be held over at least one return day")
    cols = panel.instruments
    held = x.reindex(index=dates, columns=cols).fillna(0.0).shift(1).iloc[1:]
    earn_dates = dates[1:]

    price = panel.price.loc[earn_dates, cols]
    div = panel.dividend.loc[earn_dates, cols]
    gap = held.ne(0.0) & price.isna()
    if gap.to_numpy().any():
        d, inst = gap.stack()[lambda s: s].index[0]
        raise DomainError(f"no return for held position {inst} on {d.date()}")

    long_scale = np.where(held.to_numpy() > 0, 1.0 - dividend_tax, 1.0)
    pnl_price = (held * price.fillna(0.0)).sum(axis=1)
    pnl_div = (held * div.fillna(0.0) * long_scale).sum(axis=1)

    rf = rates.daily(earn_dates) if rates is not None else pd.Series(0.0, index=earn_dates)
    rf = pd.Series(rf.to_numpy(dtype=float), index=earn_dates)
    nmv = held.sum(axis=1)
    gmv = held.abs().sum(axis=1)
    pnl_fin = -(held.mul(rf, axis=0)).sum(axis=1)

    frame = pd.DataFrame({
        "price": pnl_price,
        "dividend": pnl_div,
        "financing": pnl_fin,
    }, index=earn_dates)
    frame.insert(0, "total", frame["price"] + frame["dividend"] + frame["financing"])
    frame["financing_netted"] = -nmv * rf
    frame["nmv"] = nmv
    frame["gmv"] = gmv
    frame.index.name = "date"

    logger.info(
        f"[backtest] {name}: {len(frame)} days, cumulative total {frame['total'].sum():.4f} "
        f"(dividend {frame['dividend'].sum():.4f})"
    )
    return PnlSeries(frame=frame, name=name)


def _check_holdable(x: pd.DataFrame, calendar: PoolCalendar):
    for day, row in x.iterrows():
        held = set(row.index[row.to_numpy() != 0])
        if not held:
            continue
        outside = held - calendar.holdable(day)
        if outside:
            raise DomainError(f"position in non-member instrument(s) {sorted(outside)[:5]} on {day.date()}")


def dividend_attribution(pnl: PnlSeries, financed: bool = True) -> Optional[float]:
    """Cumulative dividend leg / cumulative total; None when the total is ~0."""
    div = float(pnl.frame["dividend"].sum())
    total = float(pnl.total.sum() if financed else pnl.unfinanced.sum())
    if abs(total) <= 1e-12 * max(1.0, abs(div)):
        return None
    return div / total


def dividend_tax_scenario(
    positions: Union[pd.DataFrame, Iterable[PositionVector]],
    panel: ReturnPanel,
    tax_rate: float,
    rates: Optional[RiskFreeCurve] = None,
    calendar: Optional[PoolCalendar] = None,
) -> PnlSeries:
    """Re-run the accounting with long-side dividends scaled by (1 - tax)."""
    if not 0.0 <= tax_rate <= 1.0:
        raise DomainError(f"tax rate must lie in [0, 1], got {tax_rate}")
    return run_backtest(positions, panel, rates, calendar, dividend_tax=tax_rate, name=f"tax={tax_rate:g}")


# ==========================================
# DECILES
# ==========================================

def decile_assignment(values: pd.Series, n_deciles: int = N_DECILES, descending: bool = True) -> pd.Series:
    """
    Split instruments into `n_deciles` groups of sizes differing by at most 1.
    Group 1 holds the largest values when `descending`; ties break on the
    instrument id.
    """
    valid = values.dropna()
    if len(valid) < n_deciles:
        raise DomainError(f"{len(valid)} instruments cannot fill {n_deciles} deciles")
    frame = pd.DataFrame({"v": valid.to_numpy(), "id": valid.index.astype(str)}, index=valid.index)
    order = frame.sort_values(["v", "id"], ascending=[not descending, True], kind="mergesort").index
    labels = np.empty(len(order), dtype=int)
    for k, chunk in enumerate(np.array_split(np.arange(len(order)), n_deciles), start=1):
        labels[chunk] = k
    return pd.Series(labels, index=order, name="decile").reindex(valid.index)


def _formation_values(values: pd.DataFrame, calendar: Optional[PoolCalendar]) -> pd.DataFrame:
    if calendar is None:
        return values
    members = calendar.membership_frame().reindex(index=values.index, columns=values.columns, fill_value=False)
    return values.where(members)


def _rebalance_dates(index: pd.DatetimeIndex, rebalance: str) -> pd.DatetimeIndex:
    if rebalance == "D":
        return index
    if rebalance != "M":
        raise DomainError(f"rebalance must be 'M' or 'D', got {rebalance!r}")
    months = index.to_period("M")
    first = ~pd.Series(months).duplicated().to_numpy()
    return index[first]


def decile_returns(
    values: pd.DataFrame,
    returns: pd.DataFrame,
    n_deciles: int = N_DECILES,
    rebalance: str = "M",
    descending: bool = True,
    calendar: Optional[PoolCalendar] = None,
):
    """
    Daily equal-weight decile returns. Groups are formed at the close of
    each rebalance date and held until the next one.
    Returns (date x decile returns, rebalance date x instrument assignments).
    """
    values = _formation_values(values.reindex(index=returns.index, columns=returns.columns), calendar)
    counts = values.notna().sum(axis=1)
    eligible = values.index[counts >= n_deciles]
    if len(eligible) == 0:
        raise InsufficientDataError(f"no date with at least {n_deciles} ranked instruments")
    formation = _rebalance_dates(values.index, rebalance).intersection(eligible)

    rows = {d: decile_assignment(values.loc[d], n_deciles, descending) for d in formation}
    assignments = pd.DataFrame.from_dict(rows, orient="index").reindex(columns=returns.columns).sort_index()
    # whole rows carry forward: an instrument unranked at a rebalance leaves its group
    held = assignments.reindex(returns.index, method="ffill").shift(1)
    if calendar is not None:
        members = calendar.membership_frame().reindex(
            index=returns.index, columns=returns.columns, fill_value=False
        ).shift(1, fill_value=False)
        held = held.where(members)

    first = held.notna().any(axis=1)
    out = pd.DataFrame(
        {k: returns.where(held == k).mean(axis=1) for k in range(1, n_deciles + 1)},
        index=returns.index,
    ).loc[first]
    out.columns.name = "decile"
    return out, assignments


def decile_horizon_returns(
    values: pd.DataFrame,
    returns: pd.DataFrame,
    horizons: Sequence[int] = HORIZONS,
    n_deciles: int = N_DECILES,
    average: str = "arithmetic",
    descending: bool = True,
    calendar: Optional[PoolCalendar] = None,
) -> pd.DataFrame:
    """
    Mean n-day compounded return of the instruments in each decile.

    Every horizon n cuts the same span of days into consecutive
    non-overlapping n-day blocks (the span is a multiple of the largest n);
    instruments are grouped at the close before each block. "arithmetic"
    averages (1 + R) - 1 over (block, instrument); "geometric" averages
    log(1 + R) and maps back.
    """
    if average not in AVERAGES:
        raise DomainError(f"average must be one of {AVERAGES}, got {average!r}")
    horizons = sorted(int(n) for n in horizons)
    if horizons[0] < 1:
        raise DomainError("horizons must be positive")
    values = _formation_values(values.reindex(index=returns.index, columns=returns.columns), calendar)
    counts = values.notna().sum(axis=1).to_numpy()
    ok = np.flatnonzero(counts >= n_deciles)
    if len(ok) == 0:
        raise InsufficientDataError(f"no date with at least {n_deciles} ranked instruments")
    s0 = int(ok[0])
    span = (len(returns) - 1 - s0) // horizons[-1] * horizons[-1]
    if span <= 0:
        raise InsufficientDataError(f"need more than {horizons[-1]} days after the first ranked date")

    logs = np.log1p(returns.to_numpy(dtype=float))
    vals = values.to_numpy(dtype=float)
    cols = returns.columns
    out = pd.DataFrame(index=pd.Index(range(1, n_deciles + 1), name="decile"), dtype=float)

    for n in horizons:
        n_blocks = span // n
        block_logs = logs[s0 + 1:s0 + 1 + n_blocks * n].reshape(n_blocks, n, -1).sum(axis=1)
        sums = np.zeros(n_deciles)
        counts_k = np.zeros(n_deciles)
        for b in range(n_blocks):
            row = pd.Series(vals[s0 + b * n], index=cols)
            if row.notna().sum() < n_deciles:
                continue
            labels = decile_assignment(row, n_deciles, descending).reindex(cols).to_numpy()
            g = block_logs[b]
            fine = np.isfinite(g) & ~np.isnan(labels)
            for k in range(1, n_deciles + 1):
                sel = fine & (labels == k)
                if average == "geometric":
                    sums[k - 1] += g[sel].sum()
                else:
                    sums[k - 1] += np.expm1(g[sel]).sum()
                counts_k[k - 1] += sel.sum()
        with np.errstate(invalid="ignore", divide="ignore"):
            mean = sums / counts_k
        out[f"mean_{n}"] = np.expm1(mean) if average == "geometric" else mean
    return out


def decile_portfolios(
    sigma: pd.DataFrame,
    panel: ReturnPanel,
    mode: str = "total",
    rates: Optional[RiskFreeCurve] = None,
    calendar: Optional[PoolCalendar] = None,
    n_deciles: int = N_DECILES,
    horizons: Sequence[int] = HORIZONS,
    rebalance: str = "M",
    descending: bool = True,
) -> DecileReport:
    """
    Long-only equal-weight decile portfolios of `sigma` (already lagged),
    rebalanced monthly. IR is un-financed; sharpe subtracts the risk-free rate.
    """
    returns = panel.with_mode(mode).returns
    daily, assignments = decile_returns(sigma, returns, n_deciles, rebalance, descending, calendar)
    rf = rates.daily(daily.index) if rates is not None else None

    stats = {}
    for k in daily.columns:
        r = daily[k]
        excess = r - rf.to_numpy() if rf is not None else None
        s = series_stats(r, excess)
        stats[k] = {"information_ratio": s["information_ratio"], "sharpe": s["sharpe"], "skewness": s["skewness"]}
    table = pd.DataFrame.from_dict(stats, orient="index")
    table.index.name = "decile"
    means = decile_horizon_returns(sigma, returns, horizons, n_deciles, "arithmetic", descending, calendar)
    table = table.join(means)

    logger.info(
        f"[backtest] deciles ({mode}): IR decile 1 {table['information_ratio'].iloc[0]}, "
        f"decile {n_deciles} {table['information_ratio'].iloc[-1]}"
    )
    return DecileReport(returns=daily, stats=table, assignments=assignments, mode=mode)


def average_decile_profiles(reports: Dict[str, DecileReport], column: str = "information_ratio") -> pd.DataFrame:
    """Per-pool decile profiles side by side, plus their average."""
    table = pd.DataFrame({pool: r.profile(column) for pool, r in reports.items()})
    table["average"] = table.mean(axis=1)
    return table


# ==========================================
# COMPOUNDING
# ==========================================

def compound(*returns: float) -> float:
    """Compounded return of a sequence of simple returns."""
    return float(np.prod([1.0 + r for r in returns]) - 1.0)


def recoup(loss: float) -> float:
    """Gain needed to recover from `loss` (e.g. -0.20 -> +0.25)."""
    if loss <= -1.0:
        raise DomainError("a loss of 100% or more cannot be recouped")
    return float(-loss / (1.0 + loss))


def compounding_ratio(
    panel: ReturnPanel,
    sigma: pd.DataFrame,
    horizons: Sequence[int] = HORIZONS,
    average: str = "arithmetic",
    n_deciles: int = N_DECILES,
    calendar: Optional[PoolCalendar] = None,
) -> Dict[int, Optional[float]]:
    """
    Mean n-day ex-dividend return of the most volatile decile divided by that
    of the least volatile one, per horizon. None where the denominator vanishes.
    """
    table = decile_horizon_returns(sigma, panel.price, horizons, n_deciles, average, True, calendar)
    out: Dict[int, Optional[float]] = {}
    for n in sorted(horizons):
        top, bottom = table.loc[1, f"mean_{n}"], table.loc[n_deciles, f"mean_{n}"]
        if not np.isfinite(bottom) or abs(bottom) <= 1e-15 or not np.isfinite(top):
            logger.warning(f"[backtest] compounding ratio undefined at n={n}")
            out[n] = None
        else:
            out[n] = float(top / bottom)
    return out


# ==========================================
# CONDITIONAL / CROSS-SECTIONAL DIAGNOSTICS
# ==========================================

def updown_differential(
    panel: ReturnPanel,
    sigma: pd.DataFrame,
    index: Optional[pd.Series] = None,
    n_deciles: int = N_DECILES,
    calendar: Optional[PoolCalendar] = None,
    rebalance: str = "M",
) -> Dict[str, Optional[float]]:
    """
    High-minus-low volatility decile gap split by the sign of the index.
    ratio = |mean gap on down days| / |mean gap on up days|; zero-index days
    are discarded.
    """
    from .estimators import equal_weight_index

    if index is None:
        index = equal_weight_index(panel, calendar)
    daily, _ = decile_returns(sigma, panel.total, n_deciles, rebalance, True, calendar)
    gap = (daily[1] - daily[n_deciles]).dropna()
    idx = index.reindex(gap.index)
    up, down = gap[idx > 0], gap[idx < 0]
    result: Dict[str, Optional[float]] = {
        "gap_up": float(up.mean()) if len(up) else None,
        "gap_down": float(down.mean()) if len(down) else None,
        "up_days": int(len(up)),
        "down_days": int(len(down)),
        "ratio": None,
    }
    if len(up) and len(down) and abs(result["gap_up"]) > 0:
        result["ratio"] = abs(result["gap_down"]) / abs(result["gap_up"])
    else:
        logger.warning("[backtest] up/down ratio undefined (no down days or zero up-day gap)")
    return result


@dataclass(frozen=True, eq=False)
class DyVolReport:
    correlation: Optional[float]
    points: pd.DataFrame  # year_end, instrument, sigma, dy
    bins: pd.DataFrame    # mean sigma / mean dy per bin of `bin_size` points


def dy_vol_correlation(
    panel: ReturnPanel,
    sigma_window: int = DY_SIGMA_WINDOW,
    bin_size: int = DY_BIN_SIZE,
    calendar: Optional[PoolCalendar] = None,
) -> DyVolReport:
    """
    Pooled cross-sectional correlation of dividend yield and volatility, one
    point per (year end, instrument). Yield = trailing 12-month dividends /
    close on the last trading day of the year; volatility = trailing
    `sigma_window`-day std of total returns, annualized.
    """
    dates = panel.dates
    year_ends = dates[~pd.Series(dates.year).duplicated(keep="last").to_numpy()]
    sigma = panel.total.rolling(sigma_window, min_periods=sigma_window).std(ddof=1) * np.sqrt(TRADING_DAYS)
    cash = panel.dividend_cash
    first_obs = panel.close.apply(pd.Series.first_valid_index)

    rows: List[pd.DataFrame] = []
    for d in year_ends:
        since = d - pd.DateOffset(years=1)
        covered = first_obs <= since
        if calendar is not None:
            covered &= pd.Series(covered.index.isin(list(calendar.members_on(d))), index=covered.index)
        names = covered.index[covered.to_numpy()]
        if len(names) == 0:
            continue
        paid = cash.loc[(cash.index > since) & (cash.index <= d), names].sum(axis=0)
        part = pd.DataFrame({
            "year_end": d,
            "instrument": names,
            "sigma": sigma.loc[d, names].to_numpy(),
            "dy": (paid / panel.close.loc[d, names]).to_numpy(),
        })
        rows.append(part)

    points = (
        pd.concat(rows, ignore_index=True).dropna()
        if rows else pd.DataFrame(columns=["year_end", "instrument", "sigma", "dy"])
    )
    corr = None
    if len(points) >= 2 and points["sigma"].std() > 0 and points["dy"].std() > 0:
        corr = float(np.corrcoef(points["sigma"], points["dy"])[0, 1])

    ordered = points.sort_values("sigma").reset_index(drop=True)
    bin_id = ordered.index // bin_size
    bins = ordered.groupby(bin_id).agg(sigma=("sigma", "mean"), dy=("dy", "mean"), count=("dy", "size"))
    bins.index.name = "bin"
    logger.info(f"[backtest] DY-sigma correlation {corr} over {len(points)} points")
    return DyVolReport(correlation=corr, points=points, bins=bins)
