# lowvol/config.py
"""
Run configuration.

A YAML file is validated into RunConfig; `--set a.b=value` overrides are
applied on top (values parsed as YAML scalars) and the dedicated flags
(--seed, --out, --strategy, --tax) win over both. Unknown keys are errors.
"""
from __future__ import annotations

import logging
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Sequence

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .errors import ConfigError
from .estimators import BETA_BLOCK, BETA_WINDOW, CORR_MIN_COVERAGE, CORR_WINDOW, SIGNAL_LAG, VOL_WINDOW
from .factor_lab import FACTORS
from .strategy_bridge import CORR_REFRESH, STRATEGIES
from .synthetic_market import MarketSpec

logger = logging.getLogger(__name__)


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class DataConfig(_Section):
    prices: Path
    dividends: Path
    membership: Path
    sectors: Path
    rates: Optional[Path] = None
    risk_free: float = 0.0            # used when no rates file is given
    pools: Optional[List[str]] = None  # None: every pool in the membership file
    max_size: Optional[int] = Field(None, gt=0)


class EstimatorConfig(_Section):
    vol_window: int = Field(VOL_WINDOW, gt=1)
    beta_window: int = Field(BETA_WINDOW, gt=1)
    beta_block: int = Field(BETA_BLOCK, gt=0)
    lag: int = Field(SIGNAL_LAG, ge=0)
    corr_window: int = Field(CORR_WINDOW, gt=1)
    corr_min_coverage: float = Field(CORR_MIN_COVERAGE, gt=0.0, le=1.0)
    corr_refresh: int = Field(CORR_REFRESH, gt=0)
    regularization: Literal["clip", "spike", "none"] = "clip"


class PortfolioConfig(_Section):
    target_risk: float = Field(1.0, gt=0.0)
    project_market_mode: bool = True


class BacktestConfig(_Section):
    tax_rate: float = Field(0.0, ge=0.0, le=1.0)
    return_mode: Literal["total", "price"] = "total"
    decile_rebalance: Literal["M", "D"] = "M"
    n_deciles: int = Field(10, ge=2)
    horizons: List[int] = [1, 5, 10, 20]


class FactorsConfig(_Section):
    names: List[str] = ["LOWVOL", "LOWBETA", "MKT", "UMD", "DP"]
    metrics: Optional[Path] = None
    holdings: Optional[Path] = None
    normalization: Literal["cap", "fund_total"] = "cap"

    @field_validator("names")
    @classmethod
    def _known(cls, v):
        unknown = [n for n in v if n not in FACTORS]
        if unknown:
            raise ValueError(f"unknown factors {unknown}; expected among {sorted(FACTORS)}")
        return v


class ResidualizeConfig(_Section):
    target: str = "LOWVOL"
    regressors: List[str] = ["MKT", "UMD", "DP"]
    rolling_months: Optional[int] = Field(None, gt=2)


class VerifyConfig(_Section):
    seeds: int = Field(20, ge=1)
    only: Optional[List[str]] = None   # e.g. ["A1", "A5"]
    n_instruments: int = Field(200, ge=20)   # pipeline-level criteria (A4, A7, A9)
    n_days: int = Field(4000, ge=500)


class RunConfig(_Section):
    data: Optional[DataConfig] = None
    synthetic: Optional[MarketSpec] = None
    strategy: str = "low-vol"
    estimators: EstimatorConfig = Field(default_factory=EstimatorConfig)
    portfolio: PortfolioConfig = Field(default_factory=PortfolioConfig)
    backtest: BacktestConfig = Field(default_factory=BacktestConfig)
    factors: FactorsConfig = Field(default_factory=FactorsConfig)
    residualize: ResidualizeConfig = Field(default_factory=ResidualizeConfig)
    verify: VerifyConfig = Field(default_factory=VerifyConfig)
    output_dir: Path = Path("out")
    seed: Optional[int] = Field(None, ge=0, lt=2 ** 64)
    workers: int = Field(1, ge=1)

    @field_validator("strategy")
    @classmethod
    def _known_strategy(cls, v):
        if v not in STRATEGIES and v not in FACTORS:
            raise ValueError(f"unknown strategy {v!r}; expected one of {list(STRATEGIES) + sorted(FACTORS)}")
        return v

    @model_validator(mode="after")
    def _one_source(self):
        if (self.data is None) == (self.synthetic is None):
            raise ValueError("exactly one of 'data' and 'synthetic' must be configured")
        if self.synthetic is not None and self.seed is not None:
            self.synthetic = self.synthetic.model_copy(update={"seed": self.seed})
        return self


# ==========================================
# LOADING
# ==========================================

def _set_path(raw: Dict[str, Any], dotted: str, value: Any):
    keys = dotted.split(".")
    node = raw
    for key in keys[:-1]:
        child = node.get(key)
        if child is None:
            child = node[key] = {}
        if not isinstance(child, dict):
            raise ConfigError(f"--set {dotted}: '{key}' is not a section")
        node = child
    node[keys[-1]] = value


def apply_overrides(raw: Dict[str, Any], overrides: Sequence[str]) -> Dict[str, Any]:
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        key, text = item.split("=", 1)
        try:
            value = yaml.safe_load(text)
        except yaml.YAMLError as e:
            raise ConfigError(f"--set {key}: cannot parse {text!r}: {e}") from e
        _set_path(raw, key.strip(), value)
    return raw


def _resolve_paths(raw: Dict[str, Any], base: Path):
    for section, keys in (
        ("data", ("prices", "dividends", "membership", "sectors", "rates")),
        ("factors", ("metrics", "holdings")),
    ):
        node = raw.get(section)
        if not isinstance(node, dict):
            continue
        for key in keys:
            if node.get(key) is not None and not Path(node[key]).is_absolute():
                node[key] = str(base / node[key])


def load_config(
    path=None,
    overrides: Sequence[str] = (),
    seed: Optional[int] = None,
    out=None,
    strategy: Optional[str] = None,
    tax: Optional[float] = None,
    default_synthetic: bool = False,
) -> RunConfig:
    """
    Build a RunConfig from an optional YAML file, --set overrides and flags.
    With `default_synthetic` and no data source configured, a default
    synthetic market is used.
    """
    raw: Dict[str, Any] = {}
    if path is not None:
        path = Path(path)
        try:
            loaded = yaml.safe_load(path.read_text(encoding="utf-8"))
        except FileNotFoundError as e:
            raise ConfigError(f"config file not found: {path}") from e
        except yaml.YAMLError as e:
            raise ConfigError(f"{path}: invalid YAML: {e}") from e
        if loaded is None:
            loaded = {}
        if not isinstance(loaded, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        raw = loaded
        _resolve_paths(raw, path.parent)

    apply_overrides(raw, overrides)
    if seed is not None:
        raw["seed"] = seed
    if out is not None:
        raw["output_dir"] = str(out)
    if strategy is not None:
        raw["strategy"] = strategy
    if tax is not None:
        _set_path(raw, "backtest.tax_rate", tax)
    if default_synthetic and raw.get("data") is None and raw.get("synthetic") is None:
        raw["synthetic"] = {}

    try:
        config = RunConfig.model_validate(raw)
    except ValidationError as e:
        raise ConfigError(f"invalid configuration:\n{e}") from e
    logger.debug(f"[config] resolved: {config.model_dump(mode='json')}")
    return config
