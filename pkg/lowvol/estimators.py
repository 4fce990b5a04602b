# lowvol/estimators.py
"""
Rolling risk estimators and cross-sectional rank signals.

- volatility: 100-day sample std of daily total returns, annualized (x sqrt 252)
- beta: Cov / Var of overlapping 3-day returns against the equi-weighted
  pool index, over 100 blocks
- both are lagged by 20 trading days: the estimate dated t only sees
  returns up to t - 20
- signals: midrank scores s_i = 2 (rank_i - (N+1)/2) / (N-1) in [-1, 1]
- correlation: 4-year empirical matrix with optional eigenvalue cleaning
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np
import pandas as pd

from .data_core import TRADING_DAYS, PoolCalendar, ReturnPanel
from .errors import DomainError, InsufficientDataError

logger = logging.getLogger(__name__)

VOL_WINDOW = 100
BETA_WINDOW = 100
BETA_BLOCK = 3
SIGNAL_LAG = 20
CORR_WINDOW = 4 * TRADING_DAYS  # 1008 days
CORR_MIN_COVERAGE = 0.6
REGULARIZATIONS = ("clip", "spike", "none")
DIRECTIONS = ("ascending", "descending")

# variances below this are treated as exactly zero
_ZERO_VAR = 1e-24


# ==========================================
# TYPES
# ==========================================

@dataclass(frozen=True, eq=False)
class RiskEstimate:
    date: pd.Timestamp
    sigma: pd.Series
    beta: pd.Series
    stale: pd.Series
    window_vol: int = VOL_WINDOW
    beta_block: int = BETA_BLOCK
    lag: int = SIGNAL_LAG


@dataclass(frozen=True, eq=False)
class SignalVector:
    date: Optional[pd.Timestamp]
    scores: pd.Series
    kind: str = "low-vol"

    def __post_init__(self):
        s = self.scores.to_numpy(dtype=float)
        if len(s) and (np.nanmax(np.abs(s)) > 1.0 + 1e-12):
            raise DomainError(f"signal {self.kind}: scores must lie in [-1, 1]")


@dataclass(frozen=True, eq=False)
class CorrelationModel:
    """
    Correlation matrix with its spectrum.

    `matrix` is the (possibly regularized) matrix used for inversion,
    `raw` the empirical one. Eigenvalues are sorted descending.
    """
    date: Optional[pd.Timestamp]
    instruments: List[str]
    matrix: np.ndarray
    raw: np.ndarray
    eigenvalues: np.ndarray
    eigenvectors: np.ndarray
    regularization: str
    n_obs: int
    _inverse: Optional[np.ndarray] = field(default=None, repr=False)

    @property
    def n(self) -> int:
        return len(self.instruments)

    @property
    def lambda0(self) -> float:
        return float(self.eigenvalues[0])

    @property
    def v0(self) -> np.ndarray:
        return self.eigenvectors[:, 0]

    @property
    def epsilon2(self) -> float:
        """Flat bulk eigenvalue that keeps Tr C = N."""
        return (self.n - self.lambda0) / (self.n - 1)

    @classmethod
    def from_matrix(
        cls,
        raw: np.ndarray,
        instruments: Sequence[str],
        regularization: str = "clip",
        n_obs: Optional[int] = None,
        date=None,
    ) -> "CorrelationModel":
        if regularization not in REGULARIZATIONS:
            raise DomainError(f"unknown regularization {regularization!r}")
        raw = np.asarray(raw, dtype=float)
        n = raw.shape[0]
        n_obs = int(n_obs) if n_obs is not None else n + 1

        if regularization == "none":
            if n > n_obs:
                raise DomainError(
                    f"correlation matrix is singular: {n} instruments but only {n_obs} observations"
                )
            matrix = raw
        elif regularization == "clip":
            matrix = clip_bulk(raw, n_obs)
        else:
            vals, vecs = _eigh_desc(raw)
            matrix = spike_matrix(vals[0], vecs[:, 0])

        vals, vecs = _eigh_desc(matrix)
        return cls(
            date=pd.Timestamp(date) if date is not None else None,
            instruments=list(instruments),
            matrix=matrix,
            raw=raw,
            eigenvalues=vals,
            eigenvectors=vecs,
            regularization=regularization,
            n_obs=n_obs,
        )

    @classmethod
    def spike(cls, lambda0: float, v0: np.ndarray, instruments: Sequence[str], date=None) -> "CorrelationModel":
        """Exact spike model built from its market mode; only v0 is stored as eigenvector."""
        v0 = np.asarray(v0, dtype=float)
        v0 = v0 / np.linalg.norm(v0)
        if v0.sum() < 0:
            v0 = -v0
        n = len(v0)
        matrix = spike_matrix(lambda0, v0)
        eps2 = (n - lambda0) / (n - 1)
        if lambda0 < eps2:
            raise DomainError(f"market eigenvalue {lambda0} below the bulk ({eps2:.3f})")
        return cls(
            date=pd.Timestamp(date) if date is not None else None,
            instruments=list(instruments),
            matrix=matrix,
            raw=matrix,
            eigenvalues=np.concatenate([[lambda0], np.full(n - 1, eps2)]),
            eigenvectors=v0[:, None],
            regularization="spike",
            n_obs=n + 1,
        )

    def inverse(self) -> np.ndarray:
        if self._inverse is None:
            if self.regularization == "spike":
                inv = spike_inverse(self.lambda0, self.v0)
            else:
                floor = 1e-12 * self.n
                if self.eigenvalues[-1] <= floor:
                    raise DomainError(
                        f"correlation matrix is singular (smallest eigenvalue {self.eigenvalues[-1]:.3e})"
                    )
                vecs = self.eigenvectors
                inv = (vecs / self.eigenvalues) @ vecs.T
            object.__setattr__(self, "_inverse", inv)
        return self._inverse

    def restrict(self, instruments: Sequence[str]) -> "CorrelationModel":
        """Same estimate on a subset of instruments, regularized again."""
        instruments = list(instruments)
        if instruments == self.instruments:
            return self
        pos = {k: i for i, k in enumerate(self.instruments)}
        missing = [i for i in instruments if i not in pos]
        if missing:
            raise DomainError(f"instruments not in correlation model: {missing[:5]}")
        idx = [pos[i] for i in instruments]
        return CorrelationModel.from_matrix(
            self.raw[np.ix_(idx, idx)],
            instruments,
            regularization=self.regularization,
            n_obs=self.n_obs,
            date=self.date,
        )


# ==========================================
# SPECTRAL HELPERS
# ==========================================

def _eigh_desc(matrix: np.ndarray):
    vals, vecs = np.linalg.eigh(matrix)
    vals, vecs = vals[::-1], vecs[:, ::-1]
    # market mode points towards the flat vector
    if vecs[:, 0].sum() < 0:
        vecs = vecs.copy()
        vecs[:, 0] = -vecs[:, 0]
    return vals, vecs


def _unit_diagonal(matrix: np.ndarray) -> np.ndarray:
    d = np.sqrt(np.diag(matrix))
    out = matrix / np.outer(d, d)
    np.fill_diagonal(out, 1.0)
    return (out + out.T) / 2.0


def clip_bulk(raw: np.ndarray, n_obs: int) -> np.ndarray:
    """
    Replace the eigenvalues below the Marchenko-Pastur edge (1 + sqrt(N/T))^2
    by their mean (trace preserved), keep the market mode and any other
    eigenvalue above the edge, then restore the unit diagonal.
    """
    n = raw.shape[0]
    vals, vecs = _eigh_desc(raw)
    edge = (1.0 + np.sqrt(n / max(n_obs, 1))) ** 2
    noise = vals < edge
    noise[0] = False
    if noise.sum() < 2:
        return raw.copy()
    cleaned = vals.copy()
    cleaned[noise] = vals[noise].mean()
    return _unit_diagonal((vecs * cleaned) @ vecs.T)


def spike_matrix(lambda0: float, v0: np.ndarray) -> np.ndarray:
    """lambda0 P0 + eps^2 (1 - P0) with eps^2 = (N - lambda0) / (N - 1)."""
    v0 = np.asarray(v0, dtype=float)
    n = len(v0)
    _check_spike(lambda0, n)
    eps2 = (n - lambda0) / (n - 1)
    p0 = np.outer(v0, v0)
    return lambda0 * p0 + eps2 * (np.eye(n) - p0)


def spike_inverse(lambda0: float, v0: np.ndarray) -> np.ndarray:
    """
    Closed-form inverse of the spike matrix:

        C^-1 = (1 / eps^2) [ delta - (1 - eps^2 / lambda0) P0 ]

    which tends to (1 / (1 - lambda0/N)) [ delta - (1 - 1/lambda0) P0 ] for large N.
    """
    v0 = np.asarray(v0, dtype=float)
    n = len(v0)
    _check_spike(lambda0, n)
    eps2 = (n - lambda0) / (n - 1)
    return (np.eye(n) - (1.0 - eps2 / lambda0) * np.outer(v0, v0)) / eps2


def spike_inverse_asymptotic(lambda0: float, v0: np.ndarray) -> np.ndarray:
    v0 = np.asarray(v0, dtype=float)
    n = len(v0)
    _check_spike(lambda0, n)
    return (np.eye(n) - (1.0 - 1.0 / lambda0) * np.outer(v0, v0)) / (1.0 - lambda0 / n)


def _check_spike(lambda0: float, n: int):
    if n < 2:
        raise DomainError("spike model needs at least 2 instruments")
    if not (0.0 < lambda0 < n):
        raise DomainError(f"market eigenvalue {lambda0} outside (0, N={n})")


# ==========================================
# WINDOWS
# ==========================================

def _window(panel: ReturnPanel, date, window: int, lag: int, extra: int = 0):
    """Row bounds [start, end] of `window` (+ `extra`) rows ending `lag` rows before `date`."""
    if window <= 1:
        raise DomainError(f"window must exceed 1, got {window}")
    loc = panel.loc_of(date)
    end = loc - lag
    start = end - window - extra + 1
    if start < 0:
        raise InsufficientDataError(
            f"{pd.Timestamp(date).date()}: need {window + extra + lag} days of history, have {loc + 1}"
        )
    return start, end


def block_returns(returns: pd.DataFrame, block: int = BETA_BLOCK) -> pd.DataFrame:
    """Overlapping compounded `block`-day returns; NaN until a full block exists."""
    logs = np.log1p(returns)
    return np.expm1(logs.rolling(block, min_periods=block).sum())


def equal_weight_index(panel: ReturnPanel, calendar: Optional[PoolCalendar] = None) -> pd.Series:
    """Equi-weighted mean daily total return of the pool members (all instruments if no calendar)."""
    returns = panel.total
    if calendar is not None:
        members = calendar.membership_frame().reindex(
            index=returns.index, columns=returns.columns, fill_value=False
        )
        returns = returns.where(members)
    return returns.mean(axis=1, skipna=True).rename("index")


# ==========================================
# VOLATILITY / BETA
# ==========================================

def rolling_volatility(
    panel: ReturnPanel,
    date,
    window: int = VOL_WINDOW,
    lag: int = SIGNAL_LAG,
) -> pd.Series:
    """
    Annualized volatility per instrument on `date`. Instruments without a
    full window, or with zero variance, are left out.
    """
    start, end = _window(panel, date, window, lag)
    block = panel.total.iloc[start:end + 1]
    complete = block.notna().all(axis=0)
    sigma = block.loc[:, complete].std(ddof=1) * np.sqrt(TRADING_DAYS)
    degenerate = sigma ** 2 <= _ZERO_VAR
    if degenerate.any():
        logger.debug(f"[estimators] {int(degenerate.sum())} instruments with zero volatility excluded")
    return sigma[~degenerate].rename("sigma")


def volatility_frame(panel: ReturnPanel, window: int = VOL_WINDOW, lag: int = SIGNAL_LAG) -> pd.DataFrame:
    """rolling_volatility for every date at once (row t uses returns up to t - lag)."""
    std = panel.total.rolling(window, min_periods=window).std(ddof=1)
    sigma = (std * np.sqrt(TRADING_DAYS)).shift(lag)
    return sigma.where(sigma ** 2 > _ZERO_VAR)


def rolling_beta(
    panel: ReturnPanel,
    date,
    index: Optional[pd.Series] = None,
    window: int = BETA_WINDOW,
    lag: int = SIGNAL_LAG,
    block: int = BETA_BLOCK,
) -> pd.Series:
    """
    Beta per instrument on `date` from `window` overlapping `block`-day
    returns ending `lag` days before `date`.
    """
    if index is None:
        index = equal_weight_index(panel)
    start, end = _window(panel, date, window, lag, extra=block - 1)
    daily = panel.total.iloc[start:end + 1]
    idx_daily = index.reindex(daily.index)

    stock = block_returns(daily, block).iloc[block - 1:]
    market = block_returns(idx_daily.to_frame(), block).iloc[block - 1:, 0]
    if market.isna().any():
        raise InsufficientDataError(f"{pd.Timestamp(date).date()}: index return missing inside the beta window")

    var = market.var(ddof=1)
    if not np.isfinite(var) or var <= _ZERO_VAR:
        raise DomainError(f"{pd.Timestamp(date).date()}: zero index variance (degenerate market)")

    complete = stock.notna().all(axis=0)
    stock = stock.loc[:, complete]
    dm = market - market.mean()
    cov = stock.sub(stock.mean(axis=0), axis=1).mul(dm, axis=0).sum(axis=0) / (len(dm) - 1)
    return (cov / var).rename("beta")


def beta_frame(
    panel: ReturnPanel,
    index: Optional[pd.Series] = None,
    window: int = BETA_WINDOW,
    lag: int = SIGNAL_LAG,
    block: int = BETA_BLOCK,
) -> pd.DataFrame:
    """rolling_beta for every date at once; NaN where the index variance vanishes."""
    if index is None:
        index = equal_weight_index(panel)
    stock = block_returns(panel.total, block)
    market = block_returns(index.reindex(panel.dates).to_frame(), block).iloc[:, 0]
    cov = stock.rolling(window, min_periods=window).cov(market)
    var = market.rolling(window, min_periods=window).var(ddof=1)
    var = var.where(var > _ZERO_VAR)
    return cov.div(var, axis=0).shift(lag)


def estimate_risk(
    panel: ReturnPanel,
    date,
    index: Optional[pd.Series] = None,
    vol_window: int = VOL_WINDOW,
    beta_window: int = BETA_WINDOW,
    block: int = BETA_BLOCK,
    lag: int = SIGNAL_LAG,
) -> RiskEstimate:
    """Sigma and beta on `date`, with a flag for windows that contain stale prices."""
    sigma = rolling_volatility(panel, date, vol_window, lag)
    beta = rolling_beta(panel, date, index, beta_window, lag, block)
    start, end = _window(panel, date, vol_window, lag)
    stale = panel.stale.iloc[start:end + 1].any(axis=0).reindex(sigma.index, fill_value=False)
    if stale.any():
        logger.warning(f"[estimators] {int(stale.sum())} instruments have stale prices in the volatility window")
    return RiskEstimate(
        date=pd.Timestamp(date),
        sigma=sigma,
        beta=beta,
        stale=stale,
        window_vol=vol_window,
        beta_block=block,
        lag=lag,
    )


def residual_volatility(returns: pd.DataFrame, index: pd.Series) -> pd.Series:
    """Annualized std of each instrument's residual after regressing on `index`."""
    market = index.reindex(returns.index)
    dm = market - market.mean()
    dr = returns - returns.mean(axis=0)
    beta = dr.mul(dm, axis=0).sum(axis=0) / (dm ** 2).sum()
    resid = dr - np.outer(dm.to_numpy(), beta.to_numpy())
    return (resid.std(ddof=1) * np.sqrt(TRADING_DAYS)).rename("residual_sigma")


# ==========================================
# SIGNALS
# ==========================================

def rank_signal(
    values: pd.Series,
    direction: str = "ascending",
    date=None,
    kind: str = "low-vol",
) -> SignalVector:
    """
    Midrank score in [-1, 1]. With direction "ascending" rank 1 (score -1)
    goes to the smallest value; "descending" reverses the order. Ties share
    their average rank, so the scores always sum to zero.
    """
    if direction not in DIRECTIONS:
        raise DomainError(f"direction must be one of {DIRECTIONS}, got {direction!r}")
    valid = values.dropna()
    n = len(valid)
    if n < 2:
        raise InsufficientDataError(f"rank signal needs at least 2 valid values, got {n}")
    ranks = valid.rank(method="average", ascending=(direction == "ascending"))
    scores = 2.0 * (ranks - (n + 1) / 2.0) / (n - 1)
    return SignalVector(
        date=pd.Timestamp(date) if date is not None else None,
        scores=scores.astype(float).rename("signal"),
        kind=kind,
    )


def sector_rank_signal(
    values: pd.Series,
    sectors: pd.Series,
    direction: str = "ascending",
    date=None,
    kind: str = "sector-neutral low-vol",
) -> SignalVector:
    """rank_signal inside every sector; single-member sectors score 0."""
    valid = values.dropna()
    tags = sectors.reindex(valid.index)
    if tags.isna().any():
        missing = list(tags.index[tags.isna()])[:5]
        raise DomainError(f"instruments without a sector: {missing}")

    parts = []
    for _, members in valid.groupby(tags, sort=True):
        if len(members) < 2:
            parts.append(pd.Series(0.0, index=members.index))
        else:
            parts.append(rank_signal(members, direction).scores)
    scores = pd.concat(parts).reindex(valid.index)
    return SignalVector(
        date=pd.Timestamp(date) if date is not None else None,
        scores=scores.rename("signal"),
        kind=kind,
    )


# ==========================================
# CORRELATION
# ==========================================

def empirical_correlation(returns: pd.DataFrame) -> np.ndarray:
    """
    Correlation of columns with gaps: each column is standardized on its own
    observations, gaps count as zero, and the result is rescaled to a unit
    diagonal (positive semi-definite by construction).
    """
    x = returns.to_numpy(dtype=float)
    mask = np.isfinite(x)
    counts = mask.sum(axis=0)
    mean = np.where(mask, x, 0.0).sum(axis=0) / counts
    centered = np.where(mask, x - mean, 0.0)
    std = np.sqrt((centered ** 2).sum(axis=0) / (counts - 1))
    z = centered / std
    s = z.T @ z / (len(x) - 1)
    return _unit_diagonal(s)


def estimate_correlation(
    panel: ReturnPanel,
    date,
    window: int = CORR_WINDOW,
    regularization: str = "clip",
    min_coverage: float = CORR_MIN_COVERAGE,
    instruments: Optional[Sequence[str]] = None,
) -> CorrelationModel:
    """
    Correlation of daily total returns over the `window` days ending on `date`.
    Instruments observed on fewer than `min_coverage` of those days, or with
    zero variance, are left out (and therefore receive no position).
    """
    start, end = _window(panel, date, window, lag=0)
    block = panel.total.iloc[start:end + 1]
    if instruments is not None:
        block = block.reindex(columns=list(instruments))

    coverage = block.notna().sum(axis=0) / window
    keep = coverage >= min_coverage
    std = block.std(ddof=1)
    keep &= std.fillna(0.0) ** 2 > _ZERO_VAR
    dropped = int((~keep).sum())
    if dropped:
        logger.debug(f"[estimators] correlation on {pd.Timestamp(date).date()}: {dropped} instruments below coverage")
    block = block.loc[:, keep]
    if block.shape[1] < 2:
        raise InsufficientDataError(f"{pd.Timestamp(date).date()}: fewer than 2 instruments for a correlation matrix")

    n_obs = int(block.notna().any(axis=1).sum())
    raw = empirical_correlation(block)
    model = CorrelationModel.from_matrix(
        raw,
        list(block.columns),
        regularization=regularization,
        n_obs=n_obs,
        date=date,
    )
    logger.debug(
        f"[estimators] correlation on {pd.Timestamp(date).date()}: N={model.n}, "
        f"lambda0={model.lambda0:.2f} ({regularization})"
    )
    return model
