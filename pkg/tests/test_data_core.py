import numpy as np
import pandas as pd
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from lowvol.data_core import (
    InstrumentSeries,
    PoolCalendar,
    RiskFreeCurve,
    compute_returns,
    load_panel,
    load_panel_pools,
    load_rates,
    write_panel,
)
from lowvol.errors import DataError, DomainError

from .conftest import DAYS


def _load(bundle, **replace):
    files = {**bundle, **replace}
    return load_panel_pools(files["prices"], files["dividends"], files["membership"], files["sectors"])


class TestLoadBundle:
    def test_instruments_and_pools(self, csv_bundle):
        series, pools = _load(csv_bundle)
        assert sorted(series) == ["A", "B", "C"]
        assert sorted(pools) == ["P", "Q"]
        assert series["C"].dates[0] == pd.Timestamp(DAYS[2])
        assert series["A"].sector == "Tech"

    def test_membership_snapshots(self, csv_bundle):
        _, pools = _load(csv_bundle)
        p = pools["P"]
        assert p.members_on(DAYS[0]) == {"A", "B"}
        assert p.members_on(DAYS[4]) == {"A", "B"}
        assert p.members_on(DAYS[6]) == {"A", "C"}
        assert p.exiting(DAYS[5]) == {"B"}
        assert p.exiting(DAYS[6]) == frozenset()
        assert p.holdable(DAYS[5]) == {"A", "B", "C"}

    def test_unpriced_members_are_dropped(self, csv_bundle):
        _, pools = _load(csv_bundle)
        q = pools["Q"]
        assert q.members_on(DAYS[0]) == {"B"}
        assert q.members_on(DAYS[2]) == {"B", "C"}

    def test_missing_close_is_carried(self, csv_bundle):
        series, _ = _load(csv_bundle)
        b = series["B"]
        assert_array_equal(np.flatnonzero(b.carried), [5])
        assert b.close[5] == 54.0
        assert not b.stale.any()

    def test_returns(self, csv_bundle):
        series, _ = _load(csv_bundle)
        panel = compute_returns(series)
        d4, d5, d6 = (pd.Timestamp(DAYS[k]) for k in (4, 5, 6))
        assert panel.total.loc[d4, "A"] == pytest.approx(105.0 / 103.0 - 1.0)
        assert panel.price.loc[d4, "A"] == pytest.approx(104.0 / 103.0 - 1.0)
        assert panel.dividend.loc[d4, "A"] == pytest.approx(1.0 / 103.0)
        assert panel.price.loc[d5, "B"] == 0.0
        assert panel.price.loc[d6, "B"] == pytest.approx(55.0 / 54.0 - 1.0)
        assert panel.total["C"].iloc[:3].isna().all()
        assert panel.total.iloc[0].isna().all()

    def test_total_minus_price_is_dividend(self, csv_bundle):
        series, _ = _load(csv_bundle)
        panel = compute_returns(series)
        assert_allclose(
            (panel.total - panel.price).to_numpy(), panel.dividend.to_numpy(), atol=1e-15, equal_nan=True
        )

    def test_load_panel_needs_pool_choice(self, csv_bundle):
        with pytest.raises(DataError, match="several pools"):
            load_panel(csv_bundle["prices"], csv_bundle["dividends"], csv_bundle["membership"], csv_bundle["sectors"])
        _, calendar = load_panel(
            csv_bundle["prices"], csv_bundle["dividends"], csv_bundle["membership"], csv_bundle["sectors"], pool="Q"
        )
        assert calendar.pool_name == "Q"


class TestMalformedInput:
    def test_duplicate_row_names_line(self, csv_bundle, tmp_path):
        bad = tmp_path / "dup.csv"
        bad.write_text("date,instrument,close\n2020-01-01,A,1\n2020-01-01,A,2\n", encoding="utf-8")
        with pytest.raises(DataError, match=r"dup\.csv:3: duplicate"):
            _load(csv_bundle, prices=bad)

    def test_invalid_date(self, csv_bundle, tmp_path):
        bad = tmp_path / "bad_date.csv"
        bad.write_text("date,instrument,close\n2020-01-01,A,1\n2020-13-01,A,2\n", encoding="utf-8")
        with pytest.raises(DataError, match=r":3: invalid date"):
            _load(csv_bundle, prices=bad)

    def test_non_positive_close(self, csv_bundle, tmp_path):
        bad = tmp_path / "neg.csv"
        bad.write_text("date,instrument,close\n2020-01-01,A,-1\n", encoding="utf-8")
        with pytest.raises(DataError, match="non-positive close"):
            _load(csv_bundle, prices=bad)

    def test_missing_column(self, csv_bundle, tmp_path):
        bad = tmp_path / "cols.csv"
        bad.write_text("date,ticker,close\n2020-01-01,A,1\n", encoding="utf-8")
        with pytest.raises(DataError, match="missing required columns"):
            _load(csv_bundle, prices=bad)

    def test_dividend_off_calendar(self, csv_bundle, tmp_path):
        bad = tmp_path / "div.csv"
        bad.write_text("date,instrument,amount\n2020-01-04,A,1.0\n", encoding="utf-8")
        with pytest.raises(DataError, match="not a trading day"):
            _load(csv_bundle, dividends=bad)

    def test_missing_file(self, csv_bundle, tmp_path):
        with pytest.raises(DataError, match="file not found"):
            _load(csv_bundle, sectors=tmp_path / "nope.csv")


class TestDomainTypes:
    def test_stale_after_ten_carried_days(self):
        dates = pd.bdate_range("2020-01-01", periods=15)
        carried = np.zeros(15, dtype=bool)
        carried[1:13] = True
        s = InstrumentSeries("X", dates, np.full(15, 10.0), np.zeros(15), carried=carried)
        assert_array_equal(np.flatnonzero(s.stale), [11, 12])

    def test_rejects_non_positive_close(self):
        dates = pd.bdate_range("2020-01-01", periods=3)
        with pytest.raises(DataError):
            InstrumentSeries("X", dates, np.array([1.0, 0.0, 1.0]), np.zeros(3))

    def test_pool_max_size(self):
        dates = pd.bdate_range("2020-01-01", periods=2)
        with pytest.raises(DataError, match="exceeds max size"):
            PoolCalendar("P", dates, (frozenset({"A"}), frozenset({"A", "B"})), max_size=1)

    def test_unknown_return_mode(self, small_market):
        with pytest.raises(DomainError):
            small_market.panel().with_mode("log")


class TestRates:
    def test_daily_rate_act_252(self, csv_bundle):
        curve = load_rates(csv_bundle["rates"])
        daily = curve.daily(pd.DatetimeIndex(DAYS))
        assert_allclose(daily.to_numpy(), 0.0252 / 252)

    def test_gap_longer_than_limit(self):
        dates = pd.bdate_range("2020-01-01", periods=20)
        curve = RiskFreeCurve.constant(0.01, dates[:1])
        with pytest.raises(DomainError, match="risk-free rate missing"):
            curve.daily(dates)


def test_write_panel_reloads_same_returns(small_market, tmp_path):
    paths = write_panel(small_market.series, small_market.calendar, tmp_path, rates=small_market.rates)
    series, calendar = load_panel(paths["prices"], paths["dividends"], paths["membership"], paths["sectors"])
    reloaded = compute_returns(series)
    original = small_market.panel()

    assert calendar.pool_name == small_market.calendar.pool_name
    assert calendar.members_on(calendar.dates[-1]) == small_market.calendar.members_on(calendar.dates[-1])
    assert list(reloaded.instruments) == list(original.instruments)
    assert_allclose(reloaded.total.to_numpy(), original.total.to_numpy(), rtol=1e-12, equal_nan=True)
    assert_allclose(reloaded.dividend.to_numpy(), original.dividend.to_numpy(), rtol=1e-12, atol=1e-15, equal_nan=True)
    assert (reloaded.sectors == original.sectors).all()

    rates = load_rates(paths["rates"])
    assert_allclose(rates.daily(original.dates).to_numpy(), small_market.rates.daily(original.dates).to_numpy())


def test_emptied_pool_round_trips(tmp_path):
    dates = pd.bdate_range("2021-01-04", periods=6)
    series = {
        i: InstrumentSeries(i, dates, 100.0 + np.arange(6.0) * k, np.zeros(6), sector="S1")
        for k, i in enumerate(["A", "B"], start=1)
    }
    ab, a, none = frozenset({"A", "B"}), frozenset({"A"}), frozenset()
    calendar = PoolCalendar("P", dates, (ab, ab, none, none, a, a), max_size=2)
    paths = write_panel(series, calendar, tmp_path)

    rows = pd.read_csv(paths["membership"], keep_default_na=False)
    exit_row = rows[rows["date"] == dates[2].strftime("%Y-%m-%d")]
    assert list(exit_row["instrument"]) == [""]

    _, reloaded = load_panel(paths["prices"], paths["dividends"], paths["membership"], paths["sectors"])
    assert reloaded.members == calendar.members
    assert reloaded.exiting(dates[2]) == {"A", "B"}
