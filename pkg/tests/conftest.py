import numpy as np
import pandas as pd
import pytest

from lowvol.strategy_bridge import StrategyContext
from lowvol.synthetic_market import MarketSpec, generate

# business days 2020-01-01 .. 2020-01-14
DAYS = [d.strftime("%Y-%m-%d") for d in pd.bdate_range("2020-01-01", periods=10)]


@pytest.fixture(scope="session")
def small_market():
    return generate(MarketSpec(n_instruments=40, n_days=700, dy_link=-0.3, seed=11))


@pytest.fixture
def small_context(small_market):
    return StrategyContext(
        panel=small_market.panel("total"),
        calendar=small_market.calendar,
        rates=small_market.rates,
        vol_window=40,
        beta_window=40,
        lag=5,
        corr_window=200,
        corr_refresh=10,
    )


def _write(path, header, rows):
    lines = [header] + [",".join(str(v) for v in row) for row in rows]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


@pytest.fixture
def csv_bundle(tmp_path):
    """
    Three instruments over ten days:
      A priced every day, pays 1.0 on day 4
      B misses day 5 (carried forward)
      C starts on day 2
    Pool P holds {A, B} then {A, C} from day 5; pool Q holds {B, C}.
    """
    a = [100.0, 101.0, 102.0, 103.0, 104.0, 105.0, 104.0, 103.0, 102.0, 101.0]
    b = [50.0, 51.0, 52.0, 53.0, 54.0, None, 55.0, 56.0, 57.0, 58.0]
    c = [None, None, 20.0, 21.0, 22.0, 23.0, 24.0, 25.0, 26.0, 27.0]
    prices = []
    for inst, closes in (("A", a), ("B", b), ("C", c)):
        for day, close in zip(DAYS, closes):
            if close is not None:
                prices.append((day, inst, close))
    paths = {
        "prices": _write(tmp_path / "prices.csv", "date,instrument,close", prices),
        "dividends": _write(tmp_path / "dividends.csv", "date,instrument,amount", [(DAYS[4], "A", 1.0)]),
        "membership": _write(
            tmp_path / "membership.csv",
            "date,pool,instrument",
            [
                (DAYS[0], "P", "A"), (DAYS[0], "P", "B"),
                (DAYS[5], "P", "A"), (DAYS[5], "P", "C"),
                (DAYS[0], "Q", "B"), (DAYS[0], "Q", "C"),
            ],
        ),
        "sectors": _write(tmp_path / "sectors.csv", "instrument,sector", [("A", "Tech"), ("B", "Energy"), ("C", "Tech")]),
        "rates": _write(tmp_path / "rates.csv", "date,annual_rate", [(DAYS[0], 0.0252)]),
    }
    return paths


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
