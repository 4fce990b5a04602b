# lowvol/neutral_portfolio.py
"""
Market-neutral Markowitz construction
-------------------------------------
Positions from a predictor p, volatilities sigma and a correlation model C:

    x_i = (1 / 2 mu sigma_i) sum_j C^-1_ij (p_j / sigma_j)

with mu solved so that the portfolio risk sqrt(sum x_i s_i C_ij x_j s_j)
equals the requested target risk R (mu itself is never exposed).

The market mode is removed by orthogonalizing the risk-space vector
(x_i sigma_i) against the leading eigenvector v0.

Closed-form diagnostics of the spike model use the cross-sectional
moments of y = 1 / sigma.
"""
from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np
import pandas as pd

from .errors import DomainError
from .estimators import CorrelationModel, SignalVector

logger = logging.getLogger(__name__)

# largest market eigenvalue (as a fraction of N) accepted by the closed forms
MAX_LAMBDA0_FRACTION = 0.95


@dataclass(frozen=True, eq=False)
class PositionVector:
    """Dollar positions on one date, with exposure diagnostics."""
    date: Optional[pd.Timestamp]
    positions: pd.Series
    target_risk: float
    market_exposure: float
    market_exposure_pre: Optional[float] = None

    @property
    def nmv(self) -> float:
        return float(self.positions.sum())

    @property
    def gmv(self) -> float:
        return float(self.positions.abs().sum())

    @property
    def nmv_over_gmv(self) -> Optional[float]:
        gmv = self.gmv
        return self.nmv / gmv if gmv > 0 else None


@dataclass(frozen=True)
class SpikeMoments:
    """Cross-sectional moments of y = 1 / sigma."""
    y1: float
    y2: float
    y3: float
    y4: float
    y_abs_dev: float  # < y |y^2 - <y^2>| >

    def __post_init__(self):
        values = (self.y1, self.y2, self.y3, self.y4, self.y_abs_dev)
        if not all(np.isfinite(v) for v in values):
            raise DomainError("spike moments must be finite")
        if self.y4 < self.y2 ** 2 * (1.0 - 1e-12):
            raise DomainError("spike moments violate <y^4> >= <y^2>^2")

    @classmethod
    def from_sigma(cls, sigma) -> "SpikeMoments":
        s = np.asarray(sigma, dtype=float)
        if len(s) == 0 or np.any(~np.isfinite(s)) or np.any(s <= 0):
            raise DomainError("volatilities must be positive and finite")
        y = 1.0 / s
        y2 = float(np.mean(y ** 2))
        return cls(
            y1=float(np.mean(y)),
            y2=y2,
            y3=float(np.mean(y ** 3)),
            y4=float(np.mean(y ** 4)),
            y_abs_dev=float(np.mean(y * np.abs(y ** 2 - y2))),
        )

    @property
    def y2_variance(self) -> float:
        return max(self.y4 - self.y2 ** 2, 0.0)


# ==========================================
# CONSTRUCTION
# ==========================================

def _aligned(corr: CorrelationModel, *series: pd.Series) -> CorrelationModel:
    common = [i for i in corr.instruments if all(i in s.index and np.isfinite(s[i]) for s in series)]
    if len(common) < 2:
        raise DomainError("fewer than 2 instruments shared by predictor, volatilities and correlation model")
    return corr.restrict(common)


def _risk_vector(positions: pd.Series, corr: CorrelationModel, sigma: pd.Series) -> np.ndarray:
    outside = positions.drop(index=corr.instruments, errors="ignore")
    if (outside.abs() > 0).any():
        raise DomainError(f"positions outside the correlation model: {list(outside.index[outside != 0])[:5]}")
    x = positions.reindex(corr.instruments, fill_value=0.0).to_numpy(dtype=float)
    s = sigma.reindex(corr.instruments).to_numpy(dtype=float)
    if np.any(~np.isfinite(s[x != 0])) or np.any(s[x != 0] <= 0):
        raise DomainError("positions held in instruments without a positive volatility")
    return np.where(x != 0, x * np.nan_to_num(s), 0.0)


def portfolio_risk(positions: pd.Series, corr: CorrelationModel, sigma: pd.Series) -> float:
    w = _risk_vector(positions, corr, sigma)
    return float(np.sqrt(max(w @ corr.matrix @ w, 0.0)))


def market_risk_exposure(positions: pd.Series, corr: CorrelationModel, sigma: pd.Series) -> float:
    """R0 = sqrt(lambda0) sum_i x_i sigma_i v0_i."""
    w = _risk_vector(positions, corr, sigma)
    return float(np.sqrt(corr.lambda0) * (w @ corr.v0))


def markowitz_weights(
    predictor: pd.Series,
    sigma: pd.Series,
    corr: CorrelationModel,
    target_risk: float,
    date=None,
) -> PositionVector:
    """
    Markowitz positions for an arbitrary predictor, scaled to `target_risk`.
    Instruments missing from the correlation model get a zero position.
    """
    if not np.isfinite(target_risk) or target_risk <= 0:
        raise DomainError(f"target risk must be positive, got {target_risk}")
    model = _aligned(corr, predictor, sigma)
    names = model.instruments
    p = predictor.reindex(names).to_numpy(dtype=float)
    s = sigma.reindex(names).to_numpy(dtype=float)
    if np.any(s <= 0):
        raise DomainError("volatilities must be positive")

    w = model.inverse() @ (p / s)
    risk2 = float(w @ model.matrix @ w)
    x = pd.Series(0.0, index=predictor.index, dtype=float)
    if risk2 > 0:
        x.loc[names] = (target_risk / np.sqrt(risk2)) * w / s
    else:
        logger.debug("[portfolio] predictor carries no risk; all positions zero")

    return PositionVector(
        date=pd.Timestamp(date) if date is not None else None,
        positions=x,
        target_risk=float(target_risk),
        market_exposure=market_risk_exposure(x, model, sigma),
    )


def markowitz_positions(
    signal: SignalVector,
    sigma: pd.Series,
    corr: CorrelationModel,
    target_risk: float,
) -> PositionVector:
    """Markowitz positions using the signal scores as predictor."""
    return markowitz_weights(signal.scores, sigma, corr, target_risk, date=signal.date)


def project_market_mode(
    positions: PositionVector,
    corr: CorrelationModel,
    sigma: pd.Series,
    sectors: Optional[pd.Series] = None,
) -> PositionVector:
    """
    Remove the market-mode component of the risk-space position vector.
    With `sectors`, the per-sector dollar sums are projected out in the same
    step, which makes every sector dollar-neutral.
    """
    model = _aligned(corr, sigma)
    x = positions.positions
    w = _risk_vector(x, model, sigma)
    s = sigma.reindex(model.instruments).to_numpy(dtype=float)

    if sectors is None:
        v0 = model.v0
        w = w - (w @ v0) * v0
    else:
        tags = sectors.reindex(model.instruments).fillna("UNKNOWN").to_numpy()
        rows = [model.v0] + [np.where(tags == t, 1.0 / s, 0.0) for t in np.unique(tags)]
        a = np.vstack(rows)
        # a sector row can be parallel to v0, so solve in the least-squares sense
        c = np.linalg.lstsq(a.T, w, rcond=None)[0]
        w = w - a.T @ c

    index = x.index.append(pd.Index(model.instruments).difference(x.index))
    projected = pd.Series(0.0, index=index, dtype=float)
    projected.loc[model.instruments] = np.where(w != 0, w / s, 0.0)

    pre = market_risk_exposure(x, model, sigma)
    return dataclasses.replace(
        positions,
        positions=projected,
        market_exposure=market_risk_exposure(projected, model, sigma),
        market_exposure_pre=pre if positions.market_exposure_pre is None else positions.market_exposure_pre,
    )


def scale_to_risk(
    positions: PositionVector,
    corr: CorrelationModel,
    sigma: pd.Series,
    target_risk: Optional[float] = None,
) -> PositionVector:
    """
    Rescale positions so their risk equals the target again (e.g. after
    projection). The pre-projection exposure is left as measured.
    """
    target = positions.target_risk if target_risk is None else float(target_risk)
    model = _aligned(corr, sigma)
    risk = portfolio_risk(positions.positions, model, sigma)
    if risk <= 0:
        return positions
    k = target / risk
    scaled = positions.positions * k
    return dataclasses.replace(
        positions,
        positions=scaled,
        target_risk=target,
        market_exposure=positions.market_exposure * k,
    )


# ==========================================
# CLOSED-FORM DIAGNOSTICS
# ==========================================

def closed_form_ratio(moments: SpikeMoments) -> Optional[float]:
    """
    NMV / GMV of the low-vol Markowitz portfolio in the spike model:

        (<y^3> - <y><y^2>) / < y |y^2 - <y^2>| >

    None when the volatilities are all equal (0 / 0).
    """
    num = moments.y3 - moments.y1 * moments.y2
    den = moments.y_abs_dev
    scale = moments.y3 if moments.y3 > 0 else 1.0
    if abs(den) <= 1e-12 * scale:
        return None
    return num / den


def _check_lambda0(lambda0: float, n: int):
    if not (0 < lambda0 <= MAX_LAMBDA0_FRACTION * n):
        raise DomainError(
            f"market eigenvalue {lambda0:.2f} outside (0, {MAX_LAMBDA0_FRACTION} N]; closed forms diverge"
        )


def closed_form_market_exposure(moments: SpikeMoments, target_risk: float, lambda0: float, n: int) -> Optional[float]:
    """R0 ~ R <y^2> / sqrt(lambda0 (1 - lambda0/N) (<y^4> - <y^2>^2)) for the un-projected portfolio."""
    _check_lambda0(lambda0, n)
    var = moments.y2_variance
    if var <= 0:
        return None
    return target_risk * moments.y2 / np.sqrt(lambda0 * (1.0 - lambda0 / n) * var)


def closed_form_nmv(moments: SpikeMoments, target_risk: float, lambda0: float, n: int) -> Optional[float]:
    """NMV ~ R N / sqrt(N - lambda0) (<y^3> - <y><y^2>) / sqrt(<y^4> - <y^2>^2)."""
    _check_lambda0(lambda0, n)
    var = moments.y2_variance
    if var <= 0:
        return None
    return target_risk * n / np.sqrt(n - lambda0) * (moments.y3 - moments.y1 * moments.y2) / np.sqrt(var)


def flat_overlap(corr: CorrelationModel, sigma: pd.Series) -> float:
    """Cosine between the flat dollar vector and the dollar image v0 / sigma of the market mode."""
    model = _aligned(corr, sigma)
    s = sigma.reindex(model.instruments).to_numpy(dtype=float)
    image = model.v0 / s
    return float(image.sum() / (np.sqrt(len(image)) * np.linalg.norm(image)))


def sector_exposures(positions: pd.Series, sectors: pd.Series) -> pd.Series:
    """Dollar NMV per sector."""
    tags = sectors.reindex(positions.index).fillna("UNKNOWN")
    return positions.groupby(tags).sum().rename("nmv")
