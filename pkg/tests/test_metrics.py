import numpy as np
import pytest

from app.core.errors import DataError, NumericError
from app.models.schemas import format_month, parse_month
from app.services.metrics import (
    ForecastLedger,
    accumulated,
    accuracy,
    error_rate,
    mae,
    management_fee,
    max_drawdown,
    mean_vol,
    relative_mae,
    sharpe,
    solve_monthly_fee,
    subperiod_report,
)
from app.services.portfolio import StrategyReturns, expost_scale


def brute_force_drawdown(series):
    path = np.concatenate([[0.0], np.cumsum(series)])
    worst = 0.0
    for j in range(len(path)):
        worst = max(worst, float(np.max(-np.expm1(path[j] - path[: j + 1]))))
    return worst * 100.0


def make_ledger(shat, s, signs=None, asset_id="A", start=2000 * 12):
    shat = np.asarray(shat, dtype=float)
    signs = np.where(shat >= 0.5, 1, -1) if signs is None else signs
    return ForecastLedger.from_arrays(asset_id, np.arange(start, start + len(shat)), shat, s, signs)


def make_returns(net, name="s", start=2000 * 12, held=None):
    net = np.asarray(net, dtype=float)
    months = np.arange(start, start + len(net))
    scaled, factor = expost_scale(net, 0.10)
    turnover = np.full(len(net), 50.0)
    turnover[0] = np.nan
    return StrategyReturns(
        name=name,
        months=months,
        labels=[format_month(int(m)) for m in months],
        gross=net,
        cost=np.zeros(len(net)),
        net=net,
        n_assets=np.ones(len(net), dtype=int) if held is None else np.asarray(held),
        turnover=turnover,
        scaled=scaled,
        scale_factor=factor,
    )


def test_accuracy_and_error_rate():
    s = np.array([1, 0, 1, 1])
    perfect = make_ledger(np.where(s == 1, 0.8, 0.2), s)
    assert accuracy(perfect) == 1.0
    mixed = make_ledger([0.6, 0.6, 0.4, 0.7], s)
    assert accuracy(mixed) == 0.5
    assert accuracy(mixed) + error_rate(mixed) == 1.0
    with pytest.raises(NumericError):
        accuracy(ForecastLedger.concat([]))


def test_coin_flip_accuracy():
    rng = np.random.default_rng(0)
    s = rng.integers(0, 2, 20000)
    signs = rng.choice([-1, 1], 20000)
    assert accuracy(make_ledger(np.full(20000, 0.5), s, signs)) == pytest.approx(0.5, abs=0.02)


def test_mae():
    s = np.array([1, 0, 0, 1])
    assert mae(make_ledger(np.full(4, 0.5), s)) == 0.5
    assert mae(make_ledger(s.astype(float), s)) == 0.0
    ledger = make_ledger([0.7, 0.4, 0.5, 0.55], s)
    assert relative_mae(ledger, ledger) == 0.0
    assert relative_mae(make_ledger(s * 0.8 + 0.1, s), make_ledger(np.full(4, 0.5), s)) == pytest.approx(80.0)


def test_relative_mae_needs_the_same_keys():
    s = np.array([1, 0, 1])
    with pytest.raises(DataError):
        relative_mae(make_ledger([0.5] * 3, s), make_ledger([0.5] * 3, s, start=2001 * 12))


def test_ledger_concat_and_window():
    a = make_ledger([0.6, 0.4], [1, 0], asset_id="B")
    b = make_ledger([0.5, 0.5, 0.5], [1, 1, 0], asset_id="A")
    stacked = ForecastLedger.concat([a, b])
    assert stacked.frame["asset_id"].tolist() == ["A", "A", "A", "B", "B"]
    assert len(stacked.window("2000-02", None)) == 3
    with pytest.raises(DataError):
        ForecastLedger.concat([a, a])


def test_mean_vol_and_sharpe():
    rng = np.random.default_rng(1)
    series = rng.normal(0.01, 0.02, 100_000)
    assert sharpe(series) == pytest.approx(0.01 * 12 / (0.02 * np.sqrt(12)), rel=0.02)
    assert sharpe(-series) == pytest.approx(-sharpe(series))
    mean, vol = mean_vol([0.01, 0.03])
    assert mean == pytest.approx(24.0)
    assert vol == pytest.approx(np.std([0.01, 0.03], ddof=1) * np.sqrt(12) * 100)
    with pytest.raises(NumericError):
        sharpe(np.full(24, 0.01))
    with pytest.raises(NumericError):
        mean_vol([0.01])


def test_max_drawdown_cases():
    assert max_drawdown([0.01, 0.02, 0.03]) == 0.0
    assert max_drawdown([-0.10]) == pytest.approx((1 - np.exp(-0.10)) * 100)
    assert max_drawdown([0.05, -0.10, 0.02, -0.03]) == pytest.approx((1 - np.exp(-0.11)) * 100)


def test_max_drawdown_equals_pair_scan():
    rng = np.random.default_rng(2)
    for _ in range(100):
        series = rng.normal(0.005, 0.05, 500)
        assert max_drawdown(series) == brute_force_drawdown(series)


def test_accumulated_is_additive():
    series = np.random.default_rng(3).normal(0, 0.05, 30)
    assert accumulated(series[:10]) + accumulated(series[10:]) == pytest.approx(accumulated(series))


def test_fee_of_identical_series_is_zero():
    R = 1.0 + np.random.default_rng(4).normal(0.005, 0.03, 120)
    assert solve_monthly_fee(R, R) == 0.0
    assert management_fee(R, R) == 0.0


def test_fee_plug_back_residual():
    rng = np.random.default_rng(5)
    gamma = 10.0
    k = gamma / (2 * (1 + gamma))
    for _ in range(100):
        dcm = 1.0 + rng.normal(0.006, 0.03, 240)
        bench = 1.0 + rng.normal(0.004, 0.03, 240)
        phi = solve_monthly_fee(dcm, bench, gamma)
        net = dcm - phi
        residual = np.mean(net - k * net**2) - np.mean(bench - k * bench**2)
        assert abs(residual) < 1e-12


def test_linear_utility_fee_is_the_mean_gap():
    rng = np.random.default_rng(6)
    for _ in range(20):
        dcm = 1.0 + rng.normal(0.006, 0.03, 120)
        bench = 1.0 + rng.normal(0.004, 0.03, 120)
        expected = np.mean(dcm) - np.mean(bench)
        assert solve_monthly_fee(dcm, bench, gamma=0.0) == pytest.approx(expected, abs=1e-12)
        assert management_fee(dcm, bench, gamma=0.0) == pytest.approx(expected * 12 * 1e4, abs=1e-7)


def test_fee_without_a_root():
    with pytest.raises(NumericError):
        solve_monthly_fee(np.full(12, 3.0), np.full(12, 1.0), gamma=10.0)


def test_full_window_report():
    net = np.random.default_rng(7).normal(0.01, 0.04, 48)
    returns = make_returns(net)
    full = subperiod_report(returns)
    explicit = subperiod_report(returns, (returns.labels[0], returns.labels[-1]))
    assert full == explicit
    assert full.window == ("2000-01", "2003-12")
    assert full.months == 48
    assert full.vol == pytest.approx(10.0, abs=1e-8)
    assert full.turnover == pytest.approx(50.0)
    assert full.max_dd >= 0


def test_one_month_window():
    returns = make_returns(np.random.default_rng(8).normal(0.01, 0.04, 24))
    report = subperiod_report(returns, ("2000-05", "2000-05"))
    assert report.months == 1
    assert report.mean == pytest.approx(returns.scaled[4] * 1200)
    assert report.vol is None and report.sharpe is None


def test_split_windows_add_up():
    returns = make_returns(np.random.default_rng(9).normal(0.01, 0.04, 36))
    first = subperiod_report(returns, ("2000-01", "2001-06"), crash=True)
    second = subperiod_report(returns, ("2001-07", "2002-12"))
    assert first.max_dd is None
    # each window carries its own scale factor; unscaled they add up to the whole
    unscaled = first.accumulated / first.scale_factor + second.accumulated / second.scale_factor
    assert unscaled == pytest.approx(np.sum(returns.net) * 100.0)


def test_every_window_is_rescaled_to_the_target():
    rng = np.random.default_rng(13)
    net = np.concatenate([rng.normal(0.01, 0.02, 30), rng.normal(0.0, 0.08, 30)])
    returns = make_returns(net)
    bench = make_returns(rng.normal(0.005, 0.05, 60), name="naive")
    for window in [None, ("2000-01", "2002-06"), ("2002-07", "2004-12"), ("2001-03", "2003-08")]:
        report = subperiod_report(returns, window, benchmark=bench)
        assert report.vol == pytest.approx(10.0, abs=1e-10)
    calm = subperiod_report(returns, ("2000-01", "2002-06"))
    assert calm.scale_factor > returns.scale_factor
    assert calm.sharpe == pytest.approx(sharpe(net[:30]), abs=1e-12)


def test_window_fee_uses_rescaled_benchmark():
    rng = np.random.default_rng(14)
    net = rng.normal(0.01, 0.04, 48)
    returns = make_returns(net, name="dma")
    # the benchmark doubles its risk in the second half; windowed it is the same series
    bench = make_returns(np.concatenate([net[:24], 2.0 * net[24:]]), name="naive")
    report = subperiod_report(returns, ("2002-01", "2003-12"), benchmark=bench)
    assert report.phi == pytest.approx(0.0, abs=1e-9)


def test_empty_window():
    returns = make_returns(np.random.default_rng(10).normal(0.01, 0.04, 12))
    with pytest.raises(NumericError):
        subperiod_report(returns, ("2010-01", "2010-12"))


def test_months_without_positions_are_skipped():
    held = np.ones(12, dtype=int)
    held[3] = 0
    returns = make_returns(np.random.default_rng(11).normal(0.01, 0.04, 12), held=held)
    assert subperiod_report(returns).months == 11


def test_report_against_benchmarks():
    rng = np.random.default_rng(12)
    returns = make_returns(rng.normal(0.01, 0.04, 24), name="dma")
    s = rng.integers(0, 2, 24)
    ledger = make_ledger(rng.uniform(0.3, 0.7, 24), s)
    report = subperiod_report(returns, ledger=ledger, benchmark=returns, mae_benchmark=ledger)
    assert report.phi == 0.0
    assert report.relative_mae == 0.0
    assert report.accuracy == accuracy(ledger)
    assert parse_month(report.window[1]) - parse_month(report.window[0]) == 23
