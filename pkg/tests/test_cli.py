import math
from pathlib import Path

import orjson
import pandas as pd
import pytest
import yaml
from numpy.testing import assert_allclose

from lowvol.cli import main
from lowvol.config import load_config
from lowvol.errors import ConfigError
from lowvol.reports import write_json
from lowvol.synthetic_market import MarketSpec, generate
from run_lowvol import run_command

SMALL_RUN = {
    "synthetic": {"n_instruments": 30, "n_days": 600, "seed": 5},
    "estimators": {"vol_window": 40, "beta_window": 40, "lag": 5, "corr_window": 200},
}


def _config(tmp_path, body, name="run.yaml"):
    path = tmp_path / name
    path.write_text(yaml.safe_dump(body), encoding="utf-8")
    return path


class TestConfig:
    def test_precedence(self, tmp_path):
        path = _config(tmp_path, {**SMALL_RUN, "seed": 1})
        config = load_config(path, overrides=["estimators.lag=40", "seed=2"], seed=9, tax=0.3)
        assert config.estimators.lag == 40
        assert config.seed == 9
        assert config.synthetic.seed == 9
        assert config.backtest.tax_rate == 0.3

    def test_relative_data_paths(self, tmp_path):
        body = {"data": {"prices": "p.csv", "dividends": "d.csv", "membership": "m.csv", "sectors": "s.csv"}}
        config = load_config(_config(tmp_path, body))
        assert config.data.prices == tmp_path / "p.csv"

    def test_unknown_key(self, tmp_path):
        with pytest.raises(ConfigError):
            load_config(_config(tmp_path, {**SMALL_RUN, "estimator": {"lag": 3}}))

    def test_needs_one_source(self, tmp_path):
        with pytest.raises(ConfigError, match="exactly one"):
            load_config(_config(tmp_path, {"estimators": {"lag": 3}}))

    def test_unknown_strategy(self, tmp_path):
        with pytest.raises(ConfigError):
            load_config(_config(tmp_path, SMALL_RUN), strategy="high-vol")

    def test_synthetic_default(self):
        config = load_config(default_synthetic=True)
        assert config.synthetic is not None and config.data is None


class TestExitCodes:
    def test_config_error_is_2(self, tmp_path):
        path = _config(tmp_path, {**SMALL_RUN, "estimator": {}})
        assert main(["backtest", "--config", str(path)]) == 2

    def test_bad_override_is_2(self, tmp_path):
        assert main(["backtest", "--config", str(_config(tmp_path, SMALL_RUN)), "--set", "lag"]) == 2

    def test_data_error_is_1(self, tmp_path):
        body = {"data": {"prices": "p.csv", "dividends": "d.csv", "membership": "m.csv", "sectors": "s.csv"}}
        assert main(["backtest", "--config", str(_config(tmp_path, body)), "--out", str(tmp_path / "out")]) == 1


class TestCommands:
    def test_simulate(self, tmp_path):
        out = tmp_path / "synth"
        code = main([
            "simulate", "--out", str(out), "--seed", "3",
            "--set", "synthetic.n_instruments=12", "--set", "synthetic.n_days=50",
        ])
        assert code == 0
        for name in ("prices.csv", "dividends.csv", "membership.csv", "sectors.csv", "rates.csv", "truth.csv", "config.yaml"):
            assert (out / name).exists()
        truth = pd.read_csv(out / "truth.csv")
        assert list(truth.columns) == ["instrument", "sigma", "beta", "dy", "sector"]
        assert len(truth) == 12
        assert yaml.safe_load((out / "config.yaml").read_text())["synthetic"]["seed"] == 3

    def test_backtest_outputs_are_reproducible(self, tmp_path):
        path = _config(tmp_path, SMALL_RUN)
        for run in ("a", "b"):
            assert main(["backtest", "--config", str(path), "--out", str(tmp_path / run)]) == 0
        for name in ("positions.csv", "diagnostics.csv", "pnl.csv", "stats.json"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

        stats = orjson.loads((tmp_path / "a" / "stats.json").read_bytes())
        assert stats["strategy"] == "low-vol"
        assert stats["n_obs"] == 399
        assert stats["companion"]["strategy"] == "low-beta"
        pnl = pd.read_csv(tmp_path / "a" / "pnl.csv")
        assert list(pnl.columns[:5]) == ["date", "total", "price", "dividend", "financing"]

    def test_backtest_aggregates_pools(self, tmp_path):
        market = generate(MarketSpec(n_instruments=40, n_days=800, seed=6))
        paths = market.write_csv(tmp_path / "data")
        first = market.calendar.dates[0].strftime("%Y-%m-%d")
        rows = [f"{first},{'EU' if k < 20 else 'US'},{iid}" for k, iid in enumerate(sorted(market.series))]
        paths["membership"].write_text("date,pool,instrument\n" + "\n".join(rows) + "\n", encoding="utf-8")
        files = ("prices", "dividends", "membership", "sectors", "rates")
        body = {"data": {k: str(paths[k]) for k in files}, "estimators": SMALL_RUN["estimators"]}
        out = tmp_path / "out"
        assert main(["backtest", "--config", str(_config(tmp_path, body)), "--out", str(out)]) == 0

        summary = orjson.loads((out / "aggregate.json").read_bytes())
        assert summary["pools"] == ["EU", "US"]
        corr = summary["pool_correlations"]
        assert corr["EU"]["EU"] == 1.0
        assert -1.0 <= corr["EU"]["US"] <= 1.0

        combined = pd.read_csv(out / "aggregate_pnl.csv", index_col="date")["total"]
        eu = pd.read_csv(out / "EU" / "pnl.csv", index_col="date")["total"]
        us = pd.read_csv(out / "US" / "pnl.csv", index_col="date")["total"]
        assert_allclose(combined.to_numpy(), ((eu + us) / 2).reindex(combined.index).to_numpy(), rtol=1e-12)

    def test_deciles(self, tmp_path):
        path = _config(tmp_path, SMALL_RUN)
        assert main(["deciles", "--config", str(path), "--out", str(tmp_path / "d")]) == 0
        deciles = pd.read_csv(tmp_path / "d" / "deciles.csv")
        assert set(deciles["mode"]) == {"total", "price"}
        assert len(deciles) == 20
        summary = orjson.loads((tmp_path / "d" / "deciles.json").read_bytes())
        assert len(summary["SYN"]["ir_total"]) == 10

    def test_residualize(self, tmp_path):
        body = {**SMALL_RUN, "synthetic": {**SMALL_RUN["synthetic"], "n_days": 800}}
        path = _config(tmp_path, body)
        assert main(["residualize", "--config", str(path), "--out", str(tmp_path / "r")]) == 0
        result = orjson.loads((tmp_path / "r" / "coefficients.json").read_bytes())
        assert set(result["coefficients"]) == {"const", "MKT", "UMD", "DP"}
        assert result["months"] >= 24
        for value in result["residual_correlations"].values():
            assert abs(value) <= 1e-8

    def test_verify_single_criterion(self, tmp_path):
        out = tmp_path / "v"
        assert main(["verify", "--out", str(out), "--set", "verify.only=[A1]", "--set", "verify.seeds=1"]) == 0
        report = orjson.loads((out / "verify.json").read_bytes())
        assert report["passed"] is True
        assert list(report["criteria"]) == ["A1"]
        assert report["base_seed"] == 42


def test_json_writer_maps_nan_to_null(tmp_path):
    path = write_json({"a": float("nan"), "b": pd.Series({"x": 1.5}), "c": math.inf}, tmp_path / "x.json")
    assert orjson.loads(path.read_bytes()) == {"a": None, "b": {"x": 1.5}, "c": None}


@pytest.mark.parametrize("name", ["synthetic.yaml", "pools.yaml"])
def test_shipped_configs_validate(name):
    path = Path(__file__).resolve().parent.parent / "configs" / name
    config = load_config(path)
    assert (config.data is None) != (config.synthetic is None)


def test_runner_entry_point(tmp_path):
    paths = run_command(
        "simulate", out=tmp_path, seed=2,
        overrides=["synthetic.n_instruments=10", "synthetic.n_days=40"],
    )
    assert paths["truth"].exists()
