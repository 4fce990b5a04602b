import dataclasses

import pytest

from lowvol.estimators import equal_weight_index, spike_inverse
from lowvol.verification import CRITERIA, RATIO_BAND, Scale, VerificationSuite, verify

TINY = Scale(
    a1_sizes=(20, 60),
    a2_draws=5,
    a2_size=500,
    a5_instruments=30,
    a5_days=600,
    a6_paths=1000,
    a6_instruments=20,
    a6_days=1001,
    a3_instruments=200,
    a3_days=2000,
    a8_instruments=40,
    a8_days=1500,
    a10_instruments=20,
    a10_days=600,
    corr_window=200,
)


def test_spike_inverse_passes():
    result = VerificationSuite([1], TINY).run(["A1"])["A1"]
    assert result.passed
    assert all(c["max_abs_error"] <= 1e-10 for c in result.details["cases"])
    assert result.to_dict()["budget_seconds"] == 1.0


def test_fault_injected_inverse_fails():
    broken = lambda lambda0, v0: spike_inverse(lambda0 * 1.01, v0)
    result = VerificationSuite([1], TINY, inverse=broken).run(["A1"])["A1"]
    assert not result.passed


def test_closed_form_agreement():
    result = VerificationSuite([2], TINY).run(["A2"])["A2"]
    assert result.passed
    assert result.details["max_gap"] <= 0.05
    assert result.details["sigma_shape"] == 6.0
    assert RATIO_BAND[0] <= result.details["mean_ratio"] <= RATIO_BAND[1]
    assert result.details["mean_ratio"] == pytest.approx(0.46, abs=0.05)


class TestBetaOracle:
    def test_measured_moments_match(self):
        result = VerificationSuite([8], TINY).run(["A3"])["A3"]
        d = result.details
        assert result.passed, d
        assert d["slope"] == pytest.approx(1.0, abs=0.05)
        assert d["factor_variance_rel_error"] <= 0.02
        assert d["idio_variance_max_rel_error"] <= 0.02

    def test_biased_index_fails(self):
        biased = lambda panel, calendar=None: equal_weight_index(panel, calendar) * 1.05
        result = VerificationSuite([8], TINY, index=biased).run(["A3"])["A3"]
        assert not result.passed
        assert result.details["factor_variance_rel_error"] > 0.05


def test_strategy_pair_runs_on_beta_oracle_market():
    scale = dataclasses.replace(TINY, a3_instruments=40, a3_days=900, a4_seeds=1)
    d = VerificationSuite([9, 10], scale).run(["A4"])["A4"].details
    assert (d["instruments"], d["days"]) == (40, 900)
    assert [r["seed"] for r in d["seeds"]] == [9]
    assert -1.0 <= d["seeds"][0]["correlation"] <= 1.0


def test_accounting_and_look_ahead():
    result = VerificationSuite([3], TINY).run(["A5"])["A5"]
    d = result.details
    assert d["legs_max_abs_error"] <= 1e-12
    assert d["financing_netting_rel_error"] <= 1e-12
    assert d["lookahead_max_abs_change"] <= 1e-12
    assert d["post_shock_change"] > 0


def test_compounding():
    result = VerificationSuite([4, 5], TINY).run(["A6"])["A6"]
    assert result.passed
    assert result.details["am_gm_holds"]
    assert result.details["monotone_pass_rate"] == 1.0


def test_residualization():
    result = VerificationSuite([6], TINY).run(["A8"])["A8"]
    row = result.details["seeds"][0]
    assert row["coefficient_max_error"] <= 1e-10
    assert row["residual_correlation_max"] <= 1e-10
    assert row["raw_sharpe"] is not None and row["residual_sharpe"] is not None
    assert result.details["mean_raw_sharpe"] == pytest.approx(row["raw_sharpe"])


def test_determinism():
    result = VerificationSuite([7], TINY).run(["A10"])["A10"]
    assert result.passed
    assert "pnl.csv" in result.details["files"]
    assert result.details["differing"] == []


def test_unknown_criterion():
    with pytest.raises(ValueError, match="unknown criteria"):
        VerificationSuite([1], TINY).run(["A11"])


def test_verify_seeds_and_selection():
    results = verify(seeds=2, base_seed=100, only=["a1", "A6"], scale=TINY)
    assert list(results) == ["A1", "A6"]
    assert set(results) <= set(CRITERIA)
