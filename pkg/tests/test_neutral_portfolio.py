import numpy as np
import pandas as pd
import pytest
from numpy.testing import assert_allclose

from lowvol.errors import DomainError
from lowvol.estimators import CorrelationModel, rank_signal
from lowvol.neutral_portfolio import (
    SpikeMoments,
    closed_form_market_exposure,
    closed_form_nmv,
    closed_form_ratio,
    flat_overlap,
    market_risk_exposure,
    markowitz_positions,
    markowitz_weights,
    portfolio_risk,
    project_market_mode,
    scale_to_risk,
    sector_exposures,
)


@pytest.fixture
def spike_world(rng):
    n = 50
    ids = [f"I{i:02d}" for i in range(n)]
    model = CorrelationModel.spike(15.0, 1.0 + 0.1 * rng.standard_normal(n), ids)
    sigma = pd.Series(rng.uniform(0.15, 0.6, n), index=ids)
    return model, sigma


class TestMarkowitz:
    def test_matches_dense_solution(self, spike_world, rng):
        model, sigma = spike_world
        p = pd.Series(rng.standard_normal(model.n), index=model.instruments)
        pv = markowitz_weights(p, sigma, model, target_risk=2.0)

        s = sigma.to_numpy()
        w = np.linalg.inv(model.matrix) @ (p.to_numpy() / s)
        expected = 2.0 * w / np.sqrt(w @ model.matrix @ w) / s
        assert_allclose(pv.positions.loc[model.instruments].to_numpy(), expected, rtol=1e-8)
        assert portfolio_risk(pv.positions, model, sigma) == pytest.approx(2.0, rel=1e-10)

    def test_positions_scale_linearly_with_target_risk(self, spike_world, rng):
        model, sigma = spike_world
        p = pd.Series(rng.standard_normal(model.n), index=model.instruments)
        one = markowitz_weights(p, sigma, model, target_risk=1.0)
        three = markowitz_weights(p, sigma, model, target_risk=3.0)
        assert_allclose(three.positions.to_numpy(), 3.0 * one.positions.to_numpy(), rtol=1e-12)
        projected = [scale_to_risk(project_market_mode(pv, model, sigma), model, sigma) for pv in (one, three)]
        assert_allclose(projected[1].positions.to_numpy(), 3.0 * projected[0].positions.to_numpy(), rtol=1e-10)

    def test_missing_instruments_get_zero(self, spike_world):
        model, sigma = spike_world
        p = pd.Series(1.0 / sigma.to_numpy(), index=model.instruments)
        p["EXTRA"] = 5.0
        pv = markowitz_weights(p, sigma, model, target_risk=1.0)
        assert pv.positions["EXTRA"] == 0.0

    def test_rejects_non_positive_target(self, spike_world):
        model, sigma = spike_world
        with pytest.raises(DomainError):
            markowitz_weights(1.0 / sigma, sigma, model, target_risk=0.0)

    def test_signal_entry_point(self, spike_world):
        model, sigma = spike_world
        signal = rank_signal(sigma, "descending", date="2020-01-02")
        pv = markowitz_positions(signal, sigma, model, target_risk=1.0)
        assert pv.date == pd.Timestamp("2020-01-02")
        assert pv.positions.abs().sum() > 0


class TestProjection:
    def test_removes_market_mode(self, spike_world):
        model, sigma = spike_world
        pv = markowitz_weights(1.0 / sigma, sigma, model, target_risk=1.0)
        assert abs(pv.market_exposure) > 0.1
        projected = project_market_mode(pv, model, sigma)
        assert abs(projected.market_exposure) <= 1e-10 * abs(pv.market_exposure)
        assert projected.market_exposure_pre == pytest.approx(pv.market_exposure)

        scaled = scale_to_risk(projected, model, sigma)
        assert portfolio_risk(scaled.positions, model, sigma) == pytest.approx(1.0, rel=1e-10)
        assert abs(market_risk_exposure(scaled.positions, model, sigma)) <= 1e-9
        assert scaled.market_exposure_pre == projected.market_exposure_pre

    def test_projection_is_idempotent(self, spike_world):
        model, sigma = spike_world
        sectors = pd.Series(["A", "B", "C", "D", "E"] * 10, index=model.instruments)
        pv = markowitz_weights(1.0 / sigma, sigma, model, target_risk=1.0)
        for tags in (None, sectors):
            once = project_market_mode(pv, model, sigma, tags)
            twice = project_market_mode(once, model, sigma, tags)
            assert_allclose(twice.positions.to_numpy(), once.positions.to_numpy(), rtol=1e-10, atol=1e-12)
            assert twice.market_exposure_pre == once.market_exposure_pre

    def test_sector_dollar_neutral(self, spike_world):
        model, sigma = spike_world
        sectors = pd.Series(["A", "B", "C", "D", "E"] * 10, index=model.instruments)
        pv = markowitz_weights(1.0 / sigma, sigma, model, target_risk=1.0)
        projected = scale_to_risk(project_market_mode(pv, model, sigma, sectors), model, sigma)

        assert_allclose(sector_exposures(projected.positions, sectors).to_numpy(), 0.0, atol=1e-10)
        assert abs(projected.market_exposure) <= 1e-9
        assert portfolio_risk(projected.positions, model, sigma) == pytest.approx(1.0, rel=1e-10)

    def test_two_volatility_levels(self):
        # y = 1 / sigma in {1, 2}: ratio (4.5 - 1.5 * 2.5) / 2.25 = 1/3
        ids = list("abcd")
        sigma = pd.Series([1.0, 0.5, 1.0, 0.5], index=ids)
        model = CorrelationModel.spike(2.0, np.ones(4), ids)
        pv = project_market_mode(markowitz_weights(1.0 / sigma, sigma, model, 1.0), model, sigma)
        assert pv.nmv_over_gmv == pytest.approx(1.0 / 3.0, abs=1e-12)
        assert closed_form_ratio(SpikeMoments.from_sigma(sigma.to_numpy())) == pytest.approx(1.0 / 3.0)


class TestClosedForms:
    def test_equal_volatilities_are_undefined(self):
        moments = SpikeMoments.from_sigma(np.full(10, 0.2))
        assert closed_form_ratio(moments) is None
        assert closed_form_nmv(moments, 1.0, 3.0, 10) is None
        assert closed_form_market_exposure(moments, 1.0, 3.0, 10) is None

    def test_lambda0_near_n_rejected(self):
        moments = SpikeMoments.from_sigma(np.array([0.1, 0.2, 0.3, 0.4]))
        with pytest.raises(DomainError):
            closed_form_nmv(moments, 1.0, 3.9, 4)

    def test_invalid_moments(self):
        with pytest.raises(DomainError):
            SpikeMoments(y1=1.0, y2=2.0, y3=3.0, y4=1.0, y_abs_dev=1.0)
        with pytest.raises(DomainError):
            SpikeMoments.from_sigma(np.array([0.2, -0.1]))

    def test_ratio_tracks_construction(self, rng):
        from scipy import stats

        n = 400
        ids = [f"I{i}" for i in range(n)]
        sigma = pd.Series(stats.invgamma.rvs(a=10.0, scale=2.7, size=n, random_state=rng), index=ids)
        model = CorrelationModel.spike(0.3 * n, np.ones(n), ids)
        pv = project_market_mode(markowitz_weights(1.0 / sigma, sigma, model, 1.0), model, sigma)
        closed = closed_form_ratio(SpikeMoments.from_sigma(sigma.to_numpy()))
        assert pv.nmv_over_gmv == pytest.approx(closed, abs=1e-10)
        assert 0.0 < closed < 1.0


def test_flat_overlap_of_flat_world():
    ids = list("abcdef")
    model = CorrelationModel.spike(2.0, np.ones(6), ids)
    assert flat_overlap(model, pd.Series(0.3, index=ids)) == pytest.approx(1.0)


def test_sector_exposures():
    x = pd.Series([1.0, -2.0, 3.0], index=list("abc"))
    sectors = pd.Series(["X", "Y", "X"], index=list("abc"))
    out = sector_exposures(x, sectors)
    assert out["X"] == 4.0 and out["Y"] == -2.0
