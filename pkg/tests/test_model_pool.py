import numpy as np
import pandas as pd
import pytest
from scipy.special import expit

from app.core.errors import ConfigError
from app.models.schemas import AlphaGrid, LambdaGrid, LookbackSet, SyntheticSpec
from app.services.data_ingest import generate_synthetic
from app.services.dlr_filter import run_filter
from app.services.features import build_features, regressors
from app.services.model_pool import (
    dma_forecast,
    dms_forecast,
    enumerate_models,
    forecast_model_probs,
    inclusion_probability,
    inclusion_vector,
    init_pool,
    model_masks,
    run_pool,
    step_pool,
    update_model_probs,
    write_filter_trace,
    write_pool_trace,
)

LOOKBACKS = (1, 2, 4, 6, 8, 10, 12)


def _stream(T, seed, d=3):
    rng = np.random.default_rng(seed)
    X = np.column_stack([np.ones(T), rng.normal(0, 0.3, (T, d - 1))])
    s = (rng.uniform(size=T) < expit(X @ np.linspace(0.2, 2.0, d))).astype(int)
    return X, s


@pytest.mark.parametrize("lookbacks, M", [((1,), 1), ((1, 2), 3), (LOOKBACKS, 127)])
def test_pool_size(lookbacks, M):
    pool = init_pool(LookbackSet(lookbacks=lookbacks))
    assert pool.M == M
    assert pool.pi_post.sum() == pytest.approx(1.0)


def test_enumeration_order():
    models = enumerate_models((3, 6))
    assert [m.lookbacks for m in models] == [(3,), (6,), (3, 6)]
    assert [m.model_id for m in models] == [1, 2, 3]
    mask = model_masks(models, 2)
    assert mask.tolist() == [[True, True, False], [True, False, True], [True, True, True]]


def test_too_many_lookbacks():
    with pytest.raises(ConfigError):
        init_pool(LookbackSet(lookbacks=(1, 2, 3)), max_lookbacks=2)


def test_forecast_model_probs():
    assert np.allclose(forecast_model_probs(np.array([0.8, 0.2]), 1.0), [0.8, 0.2])
    pred = forecast_model_probs(np.array([0.8, 0.2]), 0.99)
    assert pred == pytest.approx([0.7978, 0.2022], abs=1e-4)
    assert np.allclose(forecast_model_probs(np.full(5, 0.2), 0.5), 0.2)


@pytest.mark.parametrize(
    "pred, liks, expected",
    [
        ([0.5, 0.5], [0.2, 0.1], [2 / 3, 1 / 3]),
        ([0.25] * 4, [1.0, 0.1, 0.1, 0.1], [10 / 13, 1 / 13, 1 / 13, 1 / 13]),
        ([0.1, 0.3, 0.6], [0.4, 0.4, 0.4], [0.1, 0.3, 0.6]),
    ],
)
def test_update_model_probs(pred, liks, expected):
    post = update_model_probs(np.array(pred), np.log(liks))
    assert post == pytest.approx(expected, abs=1e-12)


def test_update_floors_vanishing_models():
    post = update_model_probs(np.array([0.5, 0.5]), np.array([0.0, -1e4]), floor=1e-12)
    assert post[1] > 0
    assert post.sum() == pytest.approx(1.0, abs=1e-15)


def test_forgetting_is_a_discounted_likelihood_product():
    alpha = 0.99
    liks = np.array([[0.6, 0.3, 0.5], [0.2, 0.7, 0.4], [0.9, 0.1, 0.5]])
    post = np.full(3, 1 / 3)
    for step_liks in liks:
        pred = forecast_model_probs(post, alpha)
        post = update_model_probs(pred, np.log(step_liks), floor=0.0)
    pred = forecast_model_probs(post, alpha)
    product = liks[0] ** alpha**3 * liks[1] ** alpha**2 * liks[2] ** alpha
    assert np.allclose(pred, product / product.sum(), atol=1e-12, rtol=0)


def test_dma_forecast():
    assert dma_forecast(np.array([0.25, 0.75]), np.array([0.4, 0.6])) == pytest.approx(0.55)
    assert dma_forecast(np.array([0.1, 0.2, 0.7]), np.full(3, 0.3)) == pytest.approx(0.3)
    assert dma_forecast(np.array([1.0]), np.array([0.42])) == 0.42


def test_dma_is_permutation_invariant():
    rng = np.random.default_rng(0)
    w = rng.dirichlet(np.ones(6))
    p = rng.uniform(size=6)
    perm = rng.permutation(6)
    assert dma_forecast(w[perm], p[perm]) == pytest.approx(dma_forecast(w, p), abs=1e-15)


def test_dms_forecast():
    models = enumerate_models((1, 2))
    probs = np.array([0.3, 0.6, 0.9])
    assert dms_forecast(np.array([0.2, 0.5, 0.3]), probs, models) == (0.6, 2)
    # uniform: one-predictor models beat {1, 2}; lower id wins between them
    assert dms_forecast(np.full(3, 1 / 3), probs, models) == (0.3, 1)
    point = np.array([0.0, 0.0, 1.0])
    assert dms_forecast(point, probs, models)[0] == dma_forecast(point, probs)


def test_inclusion_probabilities():
    models = enumerate_models(LOOKBACKS)
    uniform = np.full(127, 1 / 127)
    for L in LOOKBACKS:
        assert inclusion_probability(uniform, models, L) == pytest.approx(64 / 127)
    point = np.zeros(127)
    point[0] = 1.0  # model {1}
    assert inclusion_vector(point, models, LOOKBACKS).tolist() == [1.0] + [0.0] * 6
    with pytest.raises(ConfigError):
        inclusion_probability(uniform, models, 3)


def test_inclusion_double_counting_identity():
    models = enumerate_models(LOOKBACKS)
    pi = np.random.default_rng(1).dirichlet(np.ones(127))
    sizes = np.array([len(m.lookbacks) for m in models])
    assert inclusion_vector(pi, models, LOOKBACKS).sum() == pytest.approx(pi @ sizes)


def test_alpha_tie_takes_the_largest():
    pool = init_pool(LookbackSet(lookbacks=(1, 2)))
    _, record = step_pool(
        pool, np.zeros(3), 1, LambdaGrid(values=(1.0,)), AlphaGrid(values=(0.99, 1.0))
    )
    assert record.chosen_alpha == 1.0


def test_probabilities_stay_normalized():
    X, s = _stream(80, 2)
    pool = init_pool(LookbackSet(lookbacks=(1, 2)))
    for t in range(len(X)):
        pool, record = step_pool(pool, X[t], int(s[t]), LambdaGrid(), AlphaGrid())
        assert abs(record.pi_pred.sum() - 1.0) < 1e-10
        assert abs(pool.pi_post.sum() - 1.0) < 1e-10
        assert min(record.model_probs) <= record.shat_dma <= max(record.model_probs)


def test_forecasts_are_made_before_the_update():
    X, s = _stream(5, 3)
    pool = init_pool(LookbackSet(lookbacks=(1, 2)))
    expected = pool.bank.predict_probs(X[0])
    _, record = step_pool(pool, X[0], int(s[0]), LambdaGrid(), AlphaGrid())
    assert np.array_equal(record.model_probs, expected)
    assert np.allclose(record.model_probs, 0.5)


def test_alpha_timing_next_uses_previous_weights():
    X, s = _stream(30, 4)
    run = run_pool(X, s, (1, 2), alpha_timing="next")
    assert run.alpha[0] == 1.0
    assert np.allclose(run.pi_pred[0], 1 / 3)


def test_single_model_pool_is_the_filter():
    X, s = _stream(150, 5, d=2)
    grid = LambdaGrid(values=(0.98, 0.99, 1.0))
    run = run_pool(X, s, (1,), lambda_grid=grid, alpha_grid=AlphaGrid(values=(1.0,)))
    reference = run_filter(X, s, grid)
    assert np.allclose(run.pi_pred, 1.0)
    assert np.allclose(run.shat_dma, reference.probs, atol=1e-9)
    assert np.array_equal(run.shat_dma, run.shat_dms)


def test_nested_model_matches_direct_pool():
    X, s = _stream(60, 6)
    full = run_pool(X, s, (1, 2))
    alone = run_pool(X[:, [0, 2]], s, (2,))
    column = full.column((2,))
    assert np.allclose(full.probs[:, column], alone.probs[:, 0], atol=1e-12)
    assert np.array_equal(full.lambdas[:, column], alone.lambdas[:, 0])


def test_recorded_states():
    X, s = _stream(10, 7)
    run = run_pool(X, s, (1, 2), record_states=True)
    assert run.means.shape == (10, 3, 3)
    assert np.all(run.variances > 0)
    with pytest.raises(ConfigError):
        run.column((4,))


def test_trace_files_keep_full_precision(tmp_path):
    X, s = _stream(12, 8)
    run = run_pool(X, s, (1, 2), record_states=True)
    months = [f"2001-{m:02d}" for m in range(1, 13)]
    pool = pd.read_csv(write_pool_trace(run, months, str(tmp_path / "pool.csv")), float_precision="round_trip")
    assert list(pool.columns) == ["t", "alpha", "dms_model_id", "IP_1", "IP_2", "shat_dma", "shat_dms"]
    assert pool["t"].tolist() == months
    assert np.array_equal(pool["shat_dma"].to_numpy(), run.shat_dma)
    assert np.array_equal(pool[["IP_1", "IP_2"]].to_numpy(), run.inclusion)
    column = run.column((2,))
    single = pd.read_csv(
        write_filter_trace(run, column, months, str(tmp_path / "single.csv")), float_precision="round_trip"
    )
    assert list(single.columns) == ["t", "lambda", "loglik", "shat", "m_const", "m_mom_2", "var_const", "var_mom_2"]
    assert np.array_equal(single["loglik"].to_numpy(), run.logliks[:, column])
    assert np.array_equal(single["m_mom_2"].to_numpy(), run.means[:, column, 2])


@pytest.mark.slow
def test_planted_model_is_recovered():
    spec = SyntheticSpec(
        generator="regime-switching-logit",
        n_months=600,
        vol=1.0,
        planted_lookbacks=(1,),
        coefficients=(8.0,),
    )
    for seed in range(20):
        panel, _ = generate_synthetic(spec, seed)
        frame = build_features(panel.assets[0], LOOKBACKS)
        X = regressors(frame, LOOKBACKS)
        run = run_pool(X, frame["s"].to_numpy(), LOOKBACKS, lambda_grid=LambdaGrid(values=(1.0,)))
        last_quarter = slice(len(X) - len(X) // 4, None)
        assert run.pi_pred[last_quarter, run.column((1,))].mean() > 5 / 127, seed
        assert run.inclusion[last_quarter, 0].mean() > 0.5, seed
