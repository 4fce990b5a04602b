import numpy as np
import pandas as pd
import pytest
from numpy.testing import assert_allclose, assert_array_equal
from pydantic import ValidationError

from lowvol.errors import DomainError
from lowvol.synthetic_market import QUARTER, MarketSpec, generate, oracle_beta, oracle_idio_vol

SMALL = dict(n_instruments=20, n_days=300, seed=3)


def test_same_seed_same_market():
    a, b = generate(MarketSpec(**SMALL)), generate(MarketSpec(**SMALL))
    for inst in a.series:
        assert_array_equal(a.series[inst].close, b.series[inst].close)
        assert_array_equal(a.series[inst].dividend, b.series[inst].dividend)
    assert_array_equal(a.factor.to_numpy(), b.factor.to_numpy())
    pd.testing.assert_frame_equal(a.metrics, b.metrics)


def test_different_seed_different_market():
    a = generate(MarketSpec(**SMALL))
    b = generate(MarketSpec(**{**SMALL, "seed": 4}))
    assert not np.array_equal(a.series["SYN0000"].close, b.series["SYN0000"].close)


def _offdiagonal(matrix: np.ndarray) -> np.ndarray:
    return matrix[np.triu_indices(matrix.shape[0], k=1)]


def test_moment_matched_draws_hit_targets():
    spec = MarketSpec(n_instruments=30, n_days=500, rho0=0.3, dy_mean=1.0, dy_std=0.2, dy_link=-0.4, seed=9)
    market = generate(spec)
    # no clipping at this mean yield, so the planted link is exact
    assert np.corrcoef(market.sigma, market.dy)[0, 1] == pytest.approx(-0.4, abs=1e-10)
    kappa = np.corrcoef(1.0 / market.sigma, market.sigma)[0, 1]
    assert np.corrcoef(1.0 / market.sigma, market.dy)[0, 1] == pytest.approx(-0.4 / kappa, abs=1e-10)

    price = market.panel("price").price.iloc[1:]
    assert_allclose(price.mean().to_numpy(), 0.0, atol=1e-15)
    assert_allclose(price.var(ddof=0).to_numpy() * 252, market.sigma.to_numpy() ** 2, rtol=1e-10)

    # mean pairwise covariance of measured returns recovers the factor variance
    beta = market.sigma / market.sigma.mean()
    n = spec.n_instruments
    expected = spec.rho0 * market.sigma.mean() ** 2 * (n * n - (beta ** 2).sum()) / (n * (n - 1))
    cov = np.cov(price.to_numpy(), rowvar=False, ddof=0) * 252
    assert _offdiagonal(cov).mean() == pytest.approx(expected, rel=2e-2)


def test_mean_pairwise_correlation_near_rho0():
    market = generate(MarketSpec(n_instruments=30, n_days=1000, rho0=0.3, dy_mean=0.0, dy_std=0.0,
                                 fundamentals=False, seed=21))
    price = market.panel("price").price.iloc[1:].to_numpy()
    pairs = _offdiagonal(np.corrcoef(price, rowvar=False))
    se = pairs.std(ddof=1) / np.sqrt(len(pairs))
    assert abs(pairs.mean() - 0.3) <= 3.0 * se


def test_unmatched_draws_only_sample_the_targets():
    spec = MarketSpec(n_instruments=20, n_days=2000, moment_match=False, dy_link=-0.3, seed=5)
    market = generate(spec)
    factor_var = np.var(market.factor.to_numpy()) * 252
    target = spec.rho0 * market.sigma.mean() ** 2
    assert factor_var != pytest.approx(target, rel=1e-6)
    # relative standard error of a variance over 2000 days is about 3%
    assert factor_var == pytest.approx(target, rel=0.15)
    price = market.panel("price").price.iloc[1:]
    assert_allclose(price.var(ddof=0).to_numpy() * 252, market.sigma.to_numpy() ** 2, rtol=0.25)


def test_quarterly_dividends():
    market = generate(MarketSpec(**{**SMALL, "dy_mean": 0.04, "dy_std": 0.0}))
    for s in market.series.values():
        paid = np.flatnonzero(s.dividend > 0)
        assert len(paid) >= 300 // QUARTER
        assert_array_equal(np.diff(paid), QUARTER)
        assert_allclose(s.dividend[paid], 0.01 * s.close[paid - 1])


def test_shapes_and_calendar():
    market = generate(MarketSpec(**SMALL))
    panel = market.panel()
    assert panel.total.shape == (300, 20)
    assert len(market.factor) == 299
    assert market.calendar.members_on(panel.dates[0]) == set(market.series)
    assert market.sectors.nunique() == 10
    assert set(market.metrics["metric"]) == {"cap", "book_to_price", "earnings_to_price"}


def test_no_fundamentals():
    market = generate(MarketSpec(**{**SMALL, "fundamentals": False}))
    assert market.metrics.empty


def test_student_innovations_keep_variance():
    market = generate(MarketSpec(**{**SMALL, "innovations": "student", "dy_mean": 0.0, "dy_std": 0.0}))
    price = market.panel("price").price.iloc[1:]
    assert_allclose(price.var(ddof=0).to_numpy() * 252, market.sigma.to_numpy() ** 2, rtol=1e-10)
    assert price.kurt().mean() > 0.5


def test_decile_drift_rewards_low_volatility():
    drift = [-0.5] * 5 + [0.5] * 5
    market = generate(MarketSpec(**{**SMALL, "decile_drift": drift, "dy_mean": 0.0, "dy_std": 0.0}))
    price = market.panel("price").price.iloc[1:]
    calm = market.sigma.sort_values().index[:4]
    wild = market.sigma.sort_values().index[-4:]
    assert price[calm].mean().mean() > price[wild].mean().mean()


def test_oracles():
    market = generate(MarketSpec(**SMALL))
    beta = oracle_beta(market.spec, market.sigma)
    assert beta.mean() == pytest.approx(1.0)
    assert_allclose(beta.to_numpy(), market.beta.to_numpy())
    idio = oracle_idio_vol(market.spec, market.sigma)
    assert_allclose(idio.to_numpy(), 0.7 * market.sigma.to_numpy() ** 2)


def test_oracle_beta_averages_asymmetric_loadings():
    spec = MarketSpec(n_instruments=20, n_days=4000, beta_asymmetry=0.5, dy_mean=0.0, dy_std=0.0,
                      fundamentals=False, seed=13)
    market = generate(spec)
    price = market.panel("price").price.iloc[1:]
    phi = market.factor.to_numpy()
    slopes = np.array([np.polyfit(phi, price[c].to_numpy(), 1)[0] for c in price.columns])
    oracle = oracle_beta(spec, market.sigma).reindex(price.columns).to_numpy()
    assert_allclose(slopes, oracle, atol=0.05)
    # the up-day loading alone misses the widest instruments
    assert np.abs(slopes - market.beta.reindex(price.columns).to_numpy()).max() > 0.1


class TestSpecValidation:
    def test_unattainable_dy_link(self):
        with pytest.raises(DomainError, match="dy_link"):
            generate(MarketSpec(**{**SMALL, "dy_link": 0.995}))

    def test_unknown_field(self):
        with pytest.raises(ValidationError):
            MarketSpec(n_instruments=20, volatility=0.2)

    def test_decile_drift_length(self):
        with pytest.raises(ValidationError):
            MarketSpec(decile_drift=[0.1, 0.2])

    def test_rho0_range(self):
        with pytest.raises(ValidationError):
            MarketSpec(rho0=1.0)


def test_write_csv(tmp_path):
    market = generate(MarketSpec(**SMALL))
    paths = market.write_csv(tmp_path)
    assert {"prices", "dividends", "membership", "sectors", "rates", "metrics"} <= set(paths)
    prices = pd.read_csv(paths["prices"])
    assert len(prices) == 20 * 300
    assert list(prices.columns) == ["date", "instrument", "close"]
