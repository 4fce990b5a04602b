# lowvol/data_core.py
"""
Canonical data model and CSV ingestion
--------------------------------------
Prices, dividends, pool membership, sector tags and risk-free rates,
aligned on one trading calendar.

Input CSVs (UTF-8, header row required):
- prices.csv:     date,instrument,close
- dividends.csv:  date,instrument,amount
- membership.csv: date,pool,instrument
- sectors.csv:    instrument,sector
- rates.csv:      date,annual_rate

Calendar rules:
- the trading calendar is the union of all dates in the price file
- a missing price inside an instrument's coverage carries the last close
  forward (zero return); after STALE_AFTER consecutive carried days the
  day is flagged stale
- membership is read as snapshots: the members on a calendar day are
  those of the latest snapshot on or before that day
"""
from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, FrozenSet, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from .errors import DataError, DomainError, InsufficientDataError

logger = logging.getLogger(__name__)

TRADING_DAYS = 252
STALE_AFTER = 10
MAX_RATE_GAP = 10
RETURN_MODES = ("total", "price")
UNKNOWN_SECTOR = "UNKNOWN"


# ==========================================
# DOMAIN TYPES
# ==========================================

@dataclass(frozen=True, eq=False)
class InstrumentSeries:
    """Daily closes and cash dividends of one instrument over its coverage."""
    instrument_id: str
    dates: pd.DatetimeIndex
    close: np.ndarray
    dividend: np.ndarray
    sector: str = UNKNOWN_SECTOR
    currency: str = "USD"
    carried: Optional[np.ndarray] = None  # True where the close was carried forward

    def __post_init__(self):
        n = len(self.dates)
        if len(self.close) != n or len(self.dividend) != n:
            raise DataError(f"{self.instrument_id}: dates/close/dividend lengths differ")
        if n and not self.dates.is_monotonic_increasing or self.dates.has_duplicates:
            raise DataError(f"{self.instrument_id}: dates must be strictly increasing")
        if np.any(~np.isfinite(self.close)) or np.any(self.close <= 0):
            raise DataError(f"{self.instrument_id}: close must be positive on every covered day")
        if np.any(~np.isfinite(self.dividend)) or np.any(self.dividend < 0):
            raise DataError(f"{self.instrument_id}: dividends must be >= 0")
        if self.carried is None:
            object.__setattr__(self, "carried", np.zeros(n, dtype=bool))

    @property
    def stale(self) -> np.ndarray:
        """Days that sit more than STALE_AFTER carried days into a price gap."""
        return _run_lengths(self.carried) > STALE_AFTER


@dataclass(frozen=True, eq=False)
class PoolCalendar:
    """Per-day membership sets of one pool on the trading calendar."""
    pool_name: str
    dates: pd.DatetimeIndex
    members: Tuple[FrozenSet[str], ...]
    max_size: int

    def __post_init__(self):
        if len(self.members) != len(self.dates):
            raise DataError(f"pool {self.pool_name}: one membership set per date required")
        for d, m in zip(self.dates, self.members):
            if len(m) > self.max_size:
                raise DataError(
                    f"pool {self.pool_name}: {len(m)} members on {d.date()} exceeds max size {self.max_size}"
                )

    def index_of(self, date) -> int:
        loc = self.dates.get_indexer([pd.Timestamp(date)])[0]
        if loc < 0:
            raise DomainError(f"{pd.Timestamp(date).date()} is not on the trading calendar")
        return int(loc)

    def members_on(self, date) -> FrozenSet[str]:
        return self.members[self.index_of(date)]

    def exiting(self, date) -> FrozenSet[str]:
        """Instruments that left the pool on `date`; liquidated at the next close."""
        i = self.index_of(date)
        if i == 0:
            return frozenset()
        return self.members[i - 1] - self.members[i]

    def holdable(self, date) -> FrozenSet[str]:
        """Instruments that may carry a position at the close of `date`."""
        return self.members_on(date) | self.exiting(date)

    @property
    def start(self) -> Optional[pd.Timestamp]:
        for d, m in zip(self.dates, self.members):
            if m:
                return d
        return None

    @property
    def instruments(self) -> List[str]:
        out = set()
        for m in self.members:
            out |= m
        return sorted(out)

    def membership_frame(self) -> pd.DataFrame:
        """Boolean (date x instrument) membership matrix."""
        cols = self.instruments
        pos = {c: j for j, c in enumerate(cols)}
        mat = np.zeros((len(self.dates), len(cols)), dtype=bool)
        for i, m in enumerate(self.members):
            for inst in m:
                mat[i, pos[inst]] = True
        return pd.DataFrame(mat, index=self.dates, columns=cols)


@dataclass(frozen=True, eq=False)
class RiskFreeCurve:
    """Annualized risk-free rate history, converted to daily with Act/252."""
    dates: pd.DatetimeIndex
    rate: np.ndarray
    daycount: str = "ACT/252"

    def __post_init__(self):
        if len(self.dates) != len(self.rate):
            raise DataError("rates: dates and rate lengths differ")
        if np.any(~np.isfinite(self.rate)):
            raise DataError("rates: non-finite rate")

    @classmethod
    def constant(cls, annual_rate: float, dates: Sequence) -> "RiskFreeCurve":
        idx = pd.DatetimeIndex(dates)
        return cls(dates=idx, rate=np.full(len(idx), float(annual_rate)))

    def annual(self, dates: Sequence) -> pd.Series:
        """Annual rate on `dates`, forward-filling gaps of at most MAX_RATE_GAP days."""
        target = pd.DatetimeIndex(dates)
        s = pd.Series(self.rate, index=self.dates)
        union = s.index.union(target)
        filled = s.reindex(union).ffill(limit=MAX_RATE_GAP).reindex(target)
        if filled.isna().any():
            first = filled.index[filled.isna().to_numpy()][0]
            raise DomainError(
                f"risk-free rate missing on {first.date()} (gap longer than {MAX_RATE_GAP} days)"
            )
        return filled

    def daily(self, dates: Sequence) -> pd.Series:
        return self.annual(dates) / TRADING_DAYS


@dataclass(frozen=True, eq=False)
class ReturnPanel:
    """
    Daily returns by (date, instrument).

    total    = (close + dividend) / previous close - 1
    price    = close / previous close - 1
    dividend = dividend / previous close   (so total - price == dividend)
    """
    total: pd.DataFrame
    price: pd.DataFrame
    dividend: pd.DataFrame
    close: pd.DataFrame
    dividend_cash: pd.DataFrame
    stale: pd.DataFrame
    sectors: pd.Series
    mode: str = "total"

    def __post_init__(self):
        if self.mode not in RETURN_MODES:
            raise DomainError(f"unknown return mode {self.mode!r}; expected one of {RETURN_MODES}")

    @property
    def returns(self) -> pd.DataFrame:
        return self.total if self.mode == "total" else self.price

    @property
    def dates(self) -> pd.DatetimeIndex:
        return self.total.index

    @property
    def instruments(self) -> List[str]:
        return list(self.total.columns)

    def with_mode(self, mode: str) -> "ReturnPanel":
        return dataclasses.replace(self, mode=mode)

    def loc_of(self, date) -> int:
        loc = self.dates.get_indexer([pd.Timestamp(date)])[0]
        if loc < 0:
            raise DomainError(f"{pd.Timestamp(date).date()} is not in the return panel")
        return int(loc)

    def subset(self, instruments: Sequence[str]) -> "ReturnPanel":
        cols = list(instruments)
        return dataclasses.replace(
            self,
            total=self.total[cols],
            price=self.price[cols],
            dividend=self.dividend[cols],
            close=self.close[cols],
            dividend_cash=self.dividend_cash[cols],
            stale=self.stale[cols],
            sectors=self.sectors.reindex(cols).fillna(UNKNOWN_SECTOR),
        )


# ==========================================
# CSV READING HELPERS
# ==========================================

def _run_lengths(flags: np.ndarray) -> np.ndarray:
    """Length of the current run of True values ending at each position."""
    out = np.zeros(len(flags), dtype=int)
    run = 0
    for i, f in enumerate(flags):
        run = run + 1 if f else 0
        out[i] = run
    return out


def _read_csv(path, required: List[str], may_be_empty: Sequence[str] = ()) -> Tuple[pd.DataFrame, Path]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"{path}: file not found")
    try:
        df = pd.read_csv(path, dtype=str, encoding="utf-8-sig", keep_default_na=False)
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as e:
        raise DataError(f"{path}: unable to parse CSV ({e})") from e

    df.columns = df.columns.str.strip().str.lower()
    missing = set(required) - set(df.columns)
    if missing:
        raise DataError(f"{path}: missing required columns {sorted(missing)}")

    df = df[required].apply(lambda col: col.str.strip())
    for col in required:
        if col in may_be_empty:
            continue
        empty = df[col] == ""
        if empty.any():
            row = int(np.flatnonzero(empty.to_numpy())[0])
            raise DataError(f"{path}:{row + 2}: empty value in column {col!r}")
    return df, path


def _parse_dates(df: pd.DataFrame, col: str, path: Path) -> pd.Series:
    parsed = pd.to_datetime(df[col], format="%Y-%m-%d", errors="coerce")
    bad = parsed.isna().to_numpy()
    if bad.any():
        row = int(np.flatnonzero(bad)[0])
        raise DataError(f"{path}:{row + 2}: invalid date {df[col].iloc[row]!r}")
    return parsed


def _parse_numbers(df: pd.DataFrame, col: str, path: Path) -> pd.Series:
    parsed = pd.to_numeric(df[col], errors="coerce")
    bad = ~np.isfinite(parsed.to_numpy(dtype=float))
    if bad.any():
        row = int(np.flatnonzero(bad)[0])
        raise DataError(f"{path}:{row + 2}: invalid number {df[col].iloc[row]!r} in column {col!r}")
    return parsed.astype(float)


def _reject_duplicates(df: pd.DataFrame, keys: List[str], path: Path):
    dup = df.duplicated(subset=keys, keep="first").to_numpy()
    if dup.any():
        row = int(np.flatnonzero(dup)[0])
        values = ",".join(str(df[k].iloc[row]) for k in keys)
        raise DataError(f"{path}:{row + 2}: duplicate ({','.join(keys)}) = ({values})")


# ==========================================
# LOADERS
# ==========================================

def _load_prices(prices_file) -> pd.DataFrame:
    df, path = _read_csv(prices_file, ["date", "instrument", "close"])
    df["date"] = _parse_dates(df, "date", path)
    df["close"] = _parse_numbers(df, "close", path)
    nonpos = (df["close"] <= 0).to_numpy()
    if nonpos.any():
        row = int(np.flatnonzero(nonpos)[0])
        raise DataError(f"{path}:{row + 2}: non-positive close {df['close'].iloc[row]}")
    _reject_duplicates(df, ["date", "instrument"], path)
    if df.empty:
        raise DataError(f"{path}: no price rows")
    return df


def _load_dividends(dividends_file, calendar: pd.DatetimeIndex) -> pd.DataFrame:
    df, path = _read_csv(dividends_file, ["date", "instrument", "amount"])
    df["date"] = _parse_dates(df, "date", path)
    df["amount"] = _parse_numbers(df, "amount", path)
    neg = (df["amount"] < 0).to_numpy()
    if neg.any():
        row = int(np.flatnonzero(neg)[0])
        raise DataError(f"{path}:{row + 2}: negative dividend {df['amount'].iloc[row]}")
    off = ~df["date"].isin(calendar).to_numpy()
    if off.any():
        row = int(np.flatnonzero(off)[0])
        raise DataError(f"{path}:{row + 2}: dividend date {df['date'].iloc[row].date()} is not a trading day")
    _reject_duplicates(df, ["date", "instrument"], path)
    return df


def _load_sectors(sectors_file) -> pd.Series:
    df, path = _read_csv(sectors_file, ["instrument", "sector"])
    _reject_duplicates(df, ["instrument"], path)
    return pd.Series(df["sector"].to_numpy(), index=df["instrument"].to_numpy(), name="sector")


def load_pools(
    membership_file,
    calendar: pd.DatetimeIndex,
    covered: Optional[pd.DataFrame] = None,
    max_size: Optional[int] = None,
) -> Dict[str, PoolCalendar]:
    """
    Read membership snapshots and expand them onto the trading calendar.

    `covered` is a boolean (date x instrument) frame of price coverage;
    members without a price on a day are dropped from that day.
    """
    df, path = _read_csv(membership_file, ["date", "pool", "instrument"], may_be_empty=["instrument"])
    df["date"] = _parse_dates(df, "date", path)
    _reject_duplicates(df, ["date", "pool", "instrument"], path)
    if df.empty:
        raise DataError(f"{path}: no membership rows")

    priced_sets: Optional[List[FrozenSet[str]]] = None
    if covered is not None:
        cols = np.asarray(covered.columns)
        flags = covered.reindex(calendar, fill_value=False).to_numpy(dtype=bool)
        priced_sets = [frozenset(cols[row]) for row in flags]

    pools: Dict[str, PoolCalendar] = {}
    for pool_name, rows in df.groupby("pool", sort=True):
        # an empty instrument cell is a snapshot with no members
        snapshots = rows.groupby("date")["instrument"].agg(lambda s: frozenset(i for i in s if i))
        snap_dates = pd.DatetimeIndex(snapshots.index)
        # index of the latest snapshot on or before each calendar day
        pos = snap_dates.searchsorted(calendar, side="right") - 1

        members: List[FrozenSet[str]] = []
        dropped = 0
        for i, (day, p) in enumerate(zip(calendar, pos)):
            if p < 0:
                members.append(frozenset())
                continue
            m = snapshots.iloc[p]
            if priced_sets is not None:
                priced = m & priced_sets[i]
                dropped += len(m) - len(priced)
                m = priced
                if not m and snapshots.iloc[p]:
                    raise DataError(f"{path}: pool {pool_name} has no priced members on {day.date()}")
            members.append(m)
        if dropped:
            logger.warning(f"[data] pool {pool_name}: dropped {dropped} member-days without a price")

        size = max_size if max_size is not None else max((len(m) for m in members), default=0)
        pools[str(pool_name)] = PoolCalendar(
            pool_name=str(pool_name),
            dates=calendar,
            members=tuple(members),
            max_size=int(size),
        )
        logger.info(f"[data] pool {pool_name}: {len(snap_dates)} snapshots, max {size} members")
    return pools


def load_panel_pools(
    prices_file,
    dividends_file,
    membership_file,
    sectors_file,
    max_size: Optional[int] = None,
) -> Tuple[Dict[str, InstrumentSeries], Dict[str, PoolCalendar]]:
    """
    Load the four panel files into calendar-aligned series and one calendar
    per pool of the membership file.
    """
    prices = _load_prices(prices_file)
    calendar = pd.DatetimeIndex(sorted(prices["date"].unique()))

    close = prices.pivot(index="date", columns="instrument", values="close").reindex(calendar)
    dividends = _load_dividends(dividends_file, calendar)
    div = dividends.pivot(index="date", columns="instrument", values="amount")
    sectors = _load_sectors(sectors_file)

    series: Dict[str, InstrumentSeries] = {}
    covered = pd.DataFrame(False, index=calendar, columns=close.columns)
    for inst in close.columns:
        col = close[inst]
        first, last = col.first_valid_index(), col.last_valid_index()
        window = col.loc[first:last]
        carried = window.isna().to_numpy()
        filled = window.ffill().to_numpy(dtype=float)
        cash = np.zeros(len(window))
        if inst in div.columns:
            d = div[inst].reindex(calendar)
            outside = d.notna() & ~d.index.isin(window.index)
            if outside.any():
                raise DataError(
                    f"{dividends_file}: dividend for {inst} on {outside[outside].index[0].date()} "
                    f"outside its price coverage"
                )
            cash = d.reindex(window.index).fillna(0.0).to_numpy(dtype=float)
        if inst not in sectors.index:
            logger.warning(f"[data] {inst}: no sector tag, using {UNKNOWN_SECTOR}")
        series[str(inst)] = InstrumentSeries(
            instrument_id=str(inst),
            dates=pd.DatetimeIndex(window.index),
            close=filled,
            dividend=cash,
            sector=str(sectors.get(inst, UNKNOWN_SECTOR)),
            carried=carried,
        )
        covered.loc[first:last, inst] = True

    unknown_div = set(div.columns) - set(close.columns)
    if unknown_div:
        raise DataError(f"{dividends_file}: dividends for instruments without prices: {sorted(unknown_div)[:5]}")

    pools = load_pools(membership_file, calendar, covered=covered, max_size=max_size)
    logger.info(f"[data] loaded {len(series)} instruments over {len(calendar)} trading days")
    return series, pools


def load_panel(
    prices_file,
    dividends_file,
    membership_file,
    sectors_file,
    pool: Optional[str] = None,
    max_size: Optional[int] = None,
) -> Tuple[Dict[str, InstrumentSeries], PoolCalendar]:
    """Load the panel files for one pool (the only one when `pool` is None)."""
    series, pools = load_panel_pools(prices_file, dividends_file, membership_file, sectors_file, max_size)
    if pool is None:
        if len(pools) != 1:
            raise DataError(f"{membership_file}: several pools {sorted(pools)}; choose one")
        pool = next(iter(pools))
    if pool not in pools:
        raise DataError(f"{membership_file}: pool {pool!r} not found")
    return series, pools[pool]


def load_rates(rates_file) -> RiskFreeCurve:
    df, path = _read_csv(rates_file, ["date", "annual_rate"])
    df["date"] = _parse_dates(df, "date", path)
    df["annual_rate"] = _parse_numbers(df, "annual_rate", path)
    _reject_duplicates(df, ["date"], path)
    df = df.sort_values("date")
    return RiskFreeCurve(dates=pd.DatetimeIndex(df["date"]), rate=df["annual_rate"].to_numpy(dtype=float))


# ==========================================
# RETURNS
# ==========================================

def aligned_frames(series: Dict[str, InstrumentSeries]) -> Tuple[pd.DataFrame, pd.DataFrame, pd.DataFrame]:
    """(close, dividend cash, stale) frames on the union calendar; NaN outside coverage."""
    calendar = pd.DatetimeIndex(sorted(set().union(*(s.dates for s in series.values()))))
    ids = sorted(series)
    close = pd.DataFrame(np.nan, index=calendar, columns=ids)
    cash = pd.DataFrame(0.0, index=calendar, columns=ids)
    stale = pd.DataFrame(False, index=calendar, columns=ids)
    for inst in ids:
        s = series[inst]
        close.loc[s.dates, inst] = s.close
        cash.loc[s.dates, inst] = s.dividend
        stale.loc[s.dates, inst] = s.stale
    return close, cash, stale


def compute_returns(series: Dict[str, InstrumentSeries], mode: str = "total") -> ReturnPanel:
    """
    Build the return panel. The first covered day of every instrument has no
    return (NaN).
    """
    if mode not in RETURN_MODES:
        raise DomainError(f"unknown return mode {mode!r}")
    if not series:
        raise InsufficientDataError("no instruments to compute returns for")

    close, cash, stale = aligned_frames(series)
    if len(close.index) < 2:
        raise InsufficientDataError("at least 2 days of data are required")

    prev = close.shift(1)
    price = close / prev - 1.0
    total = (close + cash) / prev - 1.0
    dividend = cash / prev

    sectors = pd.Series({k: s.sector for k, s in series.items()}).reindex(close.columns)
    return ReturnPanel(
        total=total,
        price=price,
        dividend=dividend,
        close=close,
        dividend_cash=cash,
        stale=stale,
        sectors=sectors,
        mode=mode,
    )


# ==========================================
# CANONICAL CSV OUTPUT
# ==========================================

def write_panel(
    series: Dict[str, InstrumentSeries],
    calendar: PoolCalendar,
    out_dir,
    rates: Optional[RiskFreeCurve] = None,
) -> Dict[str, Path]:
    """
    Write the canonical CSV bundle; re-loading it reproduces the same panel.
    Membership is written as snapshots on the days it changes; a pool that
    empties gets one row with a blank instrument.
    """
    from .reports import write_csv

    out = Path(out_dir)
    price_rows = []
    div_rows = []
    for inst in sorted(series):
        s = series[inst]
        observed = ~s.carried
        price_rows.append(pd.DataFrame({
            "date": s.dates[observed].strftime("%Y-%m-%d"),
            "instrument": inst,
            "close": s.close[observed],
        }))
        paid = s.dividend > 0
        if paid.any():
            div_rows.append(pd.DataFrame({
                "date": s.dates[paid].strftime("%Y-%m-%d"),
                "instrument": inst,
                "amount": s.dividend[paid],
            }))

    member_rows = []
    previous: Optional[FrozenSet[str]] = None
    for day, members in zip(calendar.dates, calendar.members):
        if members != previous and (members or previous):
            for inst in sorted(members) or [""]:
                member_rows.append((day.strftime("%Y-%m-%d"), calendar.pool_name, inst))
        previous = members

    paths = {
        "prices": write_csv(pd.concat(price_rows, ignore_index=True), out / "prices.csv"),
        "dividends": write_csv(
            pd.concat(div_rows, ignore_index=True) if div_rows
            else pd.DataFrame(columns=["date", "instrument", "amount"]),
            out / "dividends.csv",
        ),
        "membership": write_csv(pd.DataFrame(member_rows, columns=["date", "pool", "instrument"]), out / "membership.csv"),
        "sectors": write_csv(
            pd.DataFrame({"instrument": sorted(series), "sector": [series[i].sector for i in sorted(series)]}),
            out / "sectors.csv",
        ),
    }
    if rates is not None:
        paths["rates"] = write_csv(
            pd.DataFrame({"date": rates.dates.strftime("%Y-%m-%d"), "annual_rate": rates.rate}),
            out / "rates.csv",
        )
    logger.info(f"[data] wrote panel bundle to {out}")
    return paths
