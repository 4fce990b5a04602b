import dataclasses

import numpy as np
import pandas as pd
import pytest
from numpy.testing import assert_allclose

from lowvol.backtest_engine import run_backtest
from lowvol.data_core import PoolCalendar
from lowvol.errors import DomainError
from lowvol.strategy_bridge import StrategyContext, first_tradable_date, run_strategy


def test_first_tradable_date(small_context):
    # corr_window 200 dominates vol 40 + lag 5 and beta 40 + 2 + 5
    assert first_tradable_date(small_context) == small_context.panel.dates[200]


def test_low_vol_positions(small_context):
    result = run_strategy(small_context, "low-vol")
    d = result.diagnostics
    assert result.positions.index[0] == small_context.panel.dates[200]
    assert len(result.positions) == len(small_context.panel.dates) - 200

    pre = d["market_exposure_pre"].abs()
    post = d["market_exposure_post"].abs()
    assert (post <= 1e-8 * pre).all()
    # low-vol books are net long in dollars
    assert d["nmv"].mean() > 0
    assert (d["gmv"] > 0).all()


def test_low_beta_and_sector_neutral_run(small_context):
    for kind in ("low-beta", "sector-neutral low-vol"):
        result = run_strategy(small_context, kind)
        assert (result.diagnostics["gmv"] > 0).all()


def test_sector_neutral_books_are_flat_per_sector(small_context):
    d = run_strategy(small_context, "sector-neutral low-vol").diagnostics
    assert (d["max_sector_nmv_share"] <= 0.05).all()
    assert (d["market_exposure_post"].abs() <= 1e-8 * d["market_exposure_pre"].abs()).all()


def test_unknown_kind(small_context):
    with pytest.raises(DomainError):
        run_strategy(small_context, "high-vol")


def test_no_look_ahead(small_context):
    panel = small_context.panel
    cut = 500
    total = panel.total.copy()
    total.iloc[cut + 1:] = total.iloc[cut + 1:] * -2.0
    shocked = StrategyContext(
        panel=dataclasses.replace(panel, total=total),
        calendar=small_context.calendar,
        rates=small_context.rates,
        vol_window=40, beta_window=40, lag=5, corr_window=200, corr_refresh=10,
    )
    a = run_strategy(small_context, "low-vol").positions
    b = run_strategy(shocked, "low-vol").positions
    cols = a.columns.union(b.columns)
    before = panel.dates[cut]
    assert_allclose(
        a.reindex(columns=cols, fill_value=0.0).loc[:before].to_numpy(),
        b.reindex(columns=cols, fill_value=0.0).loc[:before].to_numpy(),
        atol=1e-12,
    )


def test_exiting_instrument_is_carried_one_day(small_market, small_context):
    cal = small_market.calendar
    leaver = sorted(small_market.series)[3]
    k = 400
    members = tuple(m - {leaver} if i >= k else m for i, m in enumerate(cal.members))
    calendar = PoolCalendar(cal.pool_name, cal.dates, members, cal.max_size)
    ctx = StrategyContext(
        panel=small_context.panel, calendar=calendar, rates=small_context.rates,
        vol_window=40, beta_window=40, lag=5, corr_window=200, corr_refresh=10,
    )
    result = run_strategy(ctx, "low-vol")
    x = result.positions[leaver]
    dates = ctx.panel.dates
    assert x.loc[dates[k - 1]] != 0
    assert x.loc[dates[k]] == x.loc[dates[k - 1]]
    assert (x.loc[dates[k + 1]:] == 0).all()

    pnl = run_backtest(result.positions, ctx.panel, ctx.rates, calendar)
    # the last day's book has no next return to earn
    assert len(pnl.frame) == len(result.positions) - 1


def test_backtest_from_result(small_context):
    result = run_strategy(small_context, "low-vol")
    pnl = result.backtest(small_context)
    f = pnl.frame
    assert_allclose(f["total"], f["price"] + f["dividend"] + f["financing"], atol=1e-12)
    assert pnl.name == "low-vol"
