# lowvol/synthetic_market.py
"""
One-factor Monte-Carlo market.

    r_i(t) = beta_i Phi(t) + eps_i(t) + drift_i,   beta_i = sigma_i / sigma_av

with Var(Phi) = rho0 sigma_av^2 and Var(eps_i) = sigma_i^2 (1 - rho0), so
that every pair of instruments has correlation rho0 and Var(r_i) = sigma_i^2.
Annual volatilities are inverse-gamma; dividends are paid quarterly with a
yield that is a noisy linear function of 1/sigma, calibrated so its
cross-sectional correlation with sigma is `dy_link`.

The generated bundle uses the same types (and CSV formats) as real data.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Literal, Optional

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, field_validator
from scipy import stats

from .data_core import TRADING_DAYS, InstrumentSeries, PoolCalendar, ReturnPanel, RiskFreeCurve, compute_returns
from .errors import DomainError

logger = logging.getLogger(__name__)

QUARTER = 63
START_PRICE = 100.0
RETURN_FLOOR = -0.95


class MarketSpec(BaseModel):
    """Parameters of a synthetic market; defaults give a desk-scale equity pool."""
    model_config = ConfigDict(extra="forbid")

    n_instruments: int = Field(500, ge=10)
    n_days: int = Field(5000, ge=2)
    rho0: float = Field(0.3, gt=0.0, lt=1.0)
    sigma_shape: float = Field(6.0, gt=4.0)
    sigma_scale: float = Field(1.5, gt=0.0)       # mean annual sigma = scale / (shape - 1)
    dy_link: float = Field(0.0, ge=-1.0, le=1.0)
    dy_mean: float = Field(0.03, ge=0.0)
    dy_std: float = Field(0.015, ge=0.0)
    drift: float = 0.0                            # annual ex-dividend drift, all instruments
    decile_drift: Optional[List[float]] = None    # extra annual drift per sigma-decile (1 = most volatile)
    innovations: Literal["gaussian", "student"] = "gaussian"
    student_df: float = Field(5.0, gt=2.0)
    beta_asymmetry: float = 0.0                   # down-day loading beta + a (beta - 1)
    n_sectors: int = Field(10, ge=1)
    risk_free: float = 0.0
    fundamentals: bool = True
    moment_match: bool = True
    start_date: str = "2000-01-03"
    pool: str = "SYN"
    seed: int = Field(42, ge=0, lt=2 ** 64)

    @field_validator("decile_drift")
    @classmethod
    def _ten_deciles(cls, v):
        if v is not None and len(v) != 10:
            raise ValueError("decile_drift needs one value per decile (10)")
        return v

    @property
    def mean_sigma(self) -> float:
        return self.sigma_scale / (self.sigma_shape - 1.0)


@dataclass(frozen=True, eq=False)
class SyntheticMarket:
    spec: MarketSpec
    series: Dict[str, InstrumentSeries]
    calendar: PoolCalendar
    rates: RiskFreeCurve
    sigma: pd.Series        # true annual volatility
    beta: pd.Series         # true factor loading sigma_i / sigma_av
    dy: pd.Series           # planted annual dividend yield
    factor: pd.Series       # daily common factor Phi
    sectors: pd.Series
    metrics: pd.DataFrame   # long format: date, instrument, metric, value

    def panel(self, mode: str = "total") -> ReturnPanel:
        return compute_returns(self.series, mode)

    def write_csv(self, out_dir) -> Dict[str, Path]:
        """Emit prices/dividends/membership/sectors/rates CSVs plus metrics.csv."""
        from .data_core import write_panel
        from .reports import write_csv

        paths = write_panel(self.series, self.calendar, out_dir, rates=self.rates)
        if not self.metrics.empty:
            out = self.metrics.copy()
            out["date"] = out["date"].dt.strftime("%Y-%m-%d")
            paths["metrics"] = write_csv(out, Path(out_dir) / "metrics.csv")
        return paths


# ==========================================
# DRAWS
# ==========================================

def _standard_draws(rng: np.random.Generator, size, spec: MarketSpec) -> np.ndarray:
    if spec.innovations == "student":
        x = rng.standard_t(spec.student_df, size=size)
        return x / np.sqrt(spec.student_df / (spec.student_df - 2.0))
    return rng.standard_normal(size)


def _standardize(x: np.ndarray) -> np.ndarray:
    x = x - x.mean()
    return x / x.std()


def _orthogonal_to(x: np.ndarray, *basis: np.ndarray) -> np.ndarray:
    """Center x, remove its least-squares projection on the centered basis, standardize."""
    x = x - x.mean()
    b = np.column_stack([v - v.mean() for v in basis])
    coef, *_ = np.linalg.lstsq(b, x, rcond=None)
    x = x - b @ coef
    return x / x.std()


def _dividend_yields(sigma: np.ndarray, rng: np.random.Generator, spec: MarketSpec) -> np.ndarray:
    """
    Annual yields linear in 1/sigma plus noise. The loading on standardized
    1/sigma is dy_link / corr(1/sigma, sigma), so |dy_link| is bounded by
    |corr(1/sigma, sigma)| of the drawn sample.
    """
    g = _standardize(1.0 / sigma)
    h = _standardize(sigma)
    kappa = float(np.mean(g * h))
    loading = spec.dy_link / kappa
    if abs(loading) > 1.0:
        raise DomainError(
            f"dy_link {spec.dy_link} is not attainable (|dy_link| must be <= {abs(kappa):.3f} for this sigma sample)"
        )
    eta = rng.standard_normal(len(sigma))
    eta = _orthogonal_to(eta, g, h) if spec.moment_match else eta
    dy = spec.dy_mean + spec.dy_std * (loading * g + np.sqrt(1.0 - loading * loading) * eta)
    clipped = int((dy < 0).sum())
    if clipped:
        logger.debug(f"[synthetic] {clipped} negative dividend yields clipped to 0")
    return np.clip(dy, 0.0, None)


def _sigma_deciles(sigma: np.ndarray) -> np.ndarray:
    """1 for the most volatile tenth, 10 for the least."""
    order = np.argsort(-sigma, kind="mergesort")
    labels = np.empty(len(sigma), dtype=int)
    for k, chunk in enumerate(np.array_split(order, 10), start=1):
        labels[chunk] = k
    return labels


def generate(spec: MarketSpec) -> SyntheticMarket:
    """
    Draw a market. Identical specs (seed included) give bitwise-identical
    markets; every instrument draws from its own substream of the seed.
    """
    n, t = spec.n_instruments, spec.n_days
    root = np.random.SeedSequence(spec.seed)
    market_seq, yield_seq, fund_seq, *inst_seqs = root.spawn(n + 3)
    market_rng = np.random.default_rng(market_seq)

    sigma = stats.invgamma.rvs(a=spec.sigma_shape, scale=spec.sigma_scale, size=n, random_state=market_rng)
    sigma_av = sigma.mean()
    beta = sigma / sigma_av
    daily_sigma = sigma / np.sqrt(TRADING_DAYS)
    daily_av = sigma_av / np.sqrt(TRADING_DAYS)

    steps = t - 1
    z = _standard_draws(market_rng, steps, spec)
    if spec.moment_match:
        z = _standardize(z)
    phi = np.sqrt(spec.rho0) * daily_av * z

    down_beta = beta + spec.beta_asymmetry * (beta - 1.0)
    deciles = _sigma_deciles(sigma)
    drift = np.full(n, spec.drift / TRADING_DAYS)
    if spec.decile_drift is not None:
        drift += np.asarray(spec.decile_drift)[deciles - 1] / TRADING_DAYS

    dy = _dividend_yields(sigma, np.random.default_rng(yield_seq), spec)
    dates = pd.bdate_range(spec.start_date, periods=t)
    ids = [f"{spec.pool}{i:04d}" for i in range(n)]

    sector_rng = np.random.default_rng(fund_seq)
    sector_of = sector_rng.permutation(n) % spec.n_sectors
    sectors = pd.Series([f"S{k + 1:02d}" for k in sector_of], index=ids, name="sector")

    series: Dict[str, InstrumentSeries] = {}
    closes = np.empty((t, n))
    for i, seq in enumerate(inst_seqs):
        rng = np.random.default_rng(seq)
        xi = _standard_draws(rng, steps, spec)
        if spec.moment_match:
            xi = _orthogonal_to(xi, z)
        eps = daily_sigma[i] * np.sqrt(1.0 - spec.rho0) * xi
        loading = np.where(z < 0, down_beta[i], beta[i])
        r = np.maximum(loading * phi + eps + drift[i], RETURN_FLOOR)

        close = START_PRICE * np.concatenate([[1.0], np.cumprod(1.0 + r)])
        cash = np.zeros(t)
        first_pay = int(rng.integers(1, QUARTER + 1))
        pay_days = np.arange(first_pay, t, QUARTER)
        cash[pay_days] = dy[i] / 4.0 * close[pay_days - 1]
        closes[:, i] = close

        series[ids[i]] = InstrumentSeries(
            instrument_id=ids[i],
            dates=dates,
            close=close,
            dividend=cash,
            sector=sectors[ids[i]],
        )

    calendar = PoolCalendar(
        pool_name=spec.pool,
        dates=dates,
        members=tuple(frozenset(ids) for _ in range(t)),
        max_size=n,
    )
    metrics = _fundamentals(closes, dates, ids, sector_rng) if spec.fundamentals else pd.DataFrame(
        columns=["date", "instrument", "metric", "value"]
    )

    logger.info(
        f"[synthetic] seed {spec.seed}: {n} instruments x {t} days, rho0={spec.rho0}, "
        f"mean sigma {sigma.mean():.3f}, dy_link {spec.dy_link}"
    )
    return SyntheticMarket(
        spec=spec,
        series=series,
        calendar=calendar,
        rates=RiskFreeCurve.constant(spec.risk_free, dates),
        sigma=pd.Series(sigma, index=ids, name="sigma"),
        beta=pd.Series(beta, index=ids, name="beta"),
        dy=pd.Series(dy, index=ids, name="dy"),
        factor=pd.Series(phi, index=dates[1:], name="phi"),
        sectors=sectors,
        metrics=metrics,
    )


def _fundamentals(closes: np.ndarray, dates: pd.DatetimeIndex, ids: List[str], rng: np.random.Generator) -> pd.DataFrame:
    """Monthly cap, book-to-price and earnings-to-price from static shares, book and earnings."""
    n = len(ids)
    shares = np.exp(rng.normal(np.log(1e7), 1.0, size=n))
    book = START_PRICE * np.exp(rng.normal(np.log(0.5), 0.5, size=n))
    earnings = START_PRICE * rng.normal(0.06, 0.03, size=n)

    months = dates.to_period("M")
    first = np.flatnonzero(~pd.Series(months).duplicated().to_numpy())
    px = closes[first]
    frames = []
    for name, values in (
        ("cap", px * shares),
        ("book_to_price", book / px),
        ("earnings_to_price", earnings / px),
    ):
        frame = pd.DataFrame(values, index=dates[first], columns=ids).stack().rename("value").reset_index()
        frame.columns = ["date", "instrument", "value"]
        frame.insert(2, "metric", name)
        frames.append(frame)
    return pd.concat(frames, ignore_index=True)


# ==========================================
# ORACLES
# ==========================================

def oracle_beta(spec: MarketSpec, sigma: pd.Series) -> pd.Series:
    """
    Full-sample regression slope on the market factor. The loading is
    beta_i = sigma_i / sigma_av on up days and beta_i + a (beta_i - 1) on
    down days; with a symmetric factor the slope is their average.
    """
    beta = sigma / sigma.mean()
    return (beta + 0.5 * spec.beta_asymmetry * (beta - 1.0)).rename("beta")


def oracle_idio_vol(spec: MarketSpec, sigma: pd.Series) -> pd.Series:
    """Idiosyncratic variance beta_i^2 (1 - rho0) sigma_av^2 = sigma_i^2 (1 - rho0)."""
    return (sigma ** 2 * (1.0 - spec.rho0)).rename("idio_var")
