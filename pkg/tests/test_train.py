from __future__ import annotations

import warnings
from datetime import datetime

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from xgpa.bench import benchmark_scaling, naive_quadratic_attention
from xgpa.checkpoint import encode
from xgpa.data import SplitBounds, SyntheticSpec, TrafficDataset, WindowSpec, generate_synthetic, make_windows
from xgpa.errors import ContractError, DivergenceError
from xgpa.model import XGPAConfig, XGPAModel
from xgpa.train import HorizonMAE, _mae, evaluate_mae, ha_forecast, train, window_targets


def test_mae_examples():
    t = np.random.default_rng(0).uniform(30, 60, size=(4, 3, 6, 1))
    assert evaluate_mae(t, t).per_step == [0.0] * 6
    assert evaluate_mae(t + 3.0, t).per_step == pytest.approx([3.0] * 6, abs=1e-12)
    single = evaluate_mae(np.array([[[[1.0]], [[3.0]]]]), np.zeros((1, 2, 1, 1)))
    assert single.per_step == [2.0]
    with pytest.raises(ContractError):
        evaluate_mae(np.zeros((1, 2, 3, 1)), np.zeros((1, 2, 4, 1)))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 1000), st.floats(-20, 20))
def test_mae_is_translation_faithful(seed, c):
    t = np.random.default_rng(seed).uniform(0, 70, size=(3, 2, 5, 1))
    assert evaluate_mae(t + c, t).per_step == pytest.approx([abs(c)] * 5, abs=1e-9)


def test_horizon_buckets_follow_lead_time():
    m = HorizonMAE.from_per_step(np.arange(24, dtype=float), 30)
    assert list(m.buckets) == ["30min", "1h", "2h", "4h", "8h", "12h"]
    assert m.buckets["30min"] == 0.0 and m.buckets["1h"] == 1.0
    assert m.buckets["2h"] == 2.5 and m.buckets["12h"] == np.mean(np.arange(16, 24))
    five = HorizonMAE.from_per_step(np.ones(12), 5)
    assert list(five.buckets) == ["15min", "30min", "1h"]


def periodic_dataset(weeks: int, nodes: int = 3) -> TrafficDataset:
    _, ds = generate_synthetic(SyntheticSpec(num_nodes=nodes, weeks=weeks, noise_std=0.0, event_rate_per_day=0.0))
    return ds


def test_ha_is_exact_and_flat_on_periodic_data():
    ds = periodic_dataset(10)
    spec = WindowSpec.for_case("case4", 30)
    ha = ha_forecast(ds, spec, "test")
    mae = evaluate_mae(ha, window_targets(make_windows(ds, spec, "test")))
    assert mae.per_step == [0.0] * 24
    assert len(set(mae.buckets.values())) == 1


def test_ha_averages_prior_weeks():
    week = 336
    speeds = np.full((1, 4 * week), 50.0)
    speeds[0, 5] = 40.0
    speeds[0, week + 5] = 46.0
    ds = TrafficDataset(["a"], 30, datetime(2017, 1, 2), speeds, SplitBounds((0, week), (week, week), (0, 4 * week)))
    spec = WindowSpec("custom", 4, 1)
    windows = make_windows(ds, spec, "test")
    target = 2 * week + 5
    w = int(np.flatnonzero(windows.target_starts == target)[0])
    assert ha_forecast(ds, spec, "test")[w, 0, 0, 0] == 43.0


def test_ha_falls_back_to_training_mean_without_history():
    ds = periodic_dataset(3)
    spec = WindowSpec.for_case("case1", 30)
    ha = ha_forecast(ds, spec, "val")
    mean, _ = ds.normalization()
    np.testing.assert_allclose(ha[0, :, 0, 0], mean[:, 0])


def small_problem(seed=0, **cfg):
    graph, ds = generate_synthetic(SyntheticSpec(num_nodes=4, weeks=3, seed=seed))
    spec = WindowSpec("custom", 16, 4)
    config = XGPAConfig(**{**dict(m_gc=1, patch_sizes=[2], k=2, d_hidden=4, input_len=16, horizon=4,
                                   max_epochs=3, max_batches_per_epoch=4, batch_size=4, seed=seed), **cfg})
    return graph, ds, spec, config


def test_zero_learning_rate_leaves_parameters_unchanged():
    graph, ds, spec, cfg = small_problem(lr=0.0)
    model = XGPAModel(cfg)
    before = encode(model)
    report = train(model, ds, graph, spec, evaluate_test=False, max_eval_windows=40)
    assert not report.improved
    model.norm_mean = model.norm_std = None
    assert encode(model) == before


def test_constant_dataset_converges_within_50_epochs():
    speeds = np.full((3, 60), 57.25)
    ds = TrafficDataset(["a", "b", "c"], 30, datetime(2017, 1, 2), speeds, SplitBounds((0, 40), (40, 50), (50, 60)))
    graph, _, _, _ = small_problem()
    graph = type(graph)(["a", "b", "c"], [(0, 1, 900.0), (1, 2, 900.0)])
    cfg = XGPAConfig(m_gc=1, patch_sizes=[2], k=2, d_hidden=4, input_len=8, horizon=2, max_epochs=50, lr=1e-2)
    model = XGPAModel(cfg)
    model.head.bias.data[...] = 1.5  # start away from the target
    report = train(model, ds, graph, WindowSpec("custom", 8, 2))
    assert len(report.epochs) <= 50
    assert report.best_val_mae < 0.1
    assert max(report.test.per_step) < 0.1


def test_training_reduces_validation_mae_and_restores_best():
    graph, ds, spec, cfg = small_problem(lr=1e-2, max_epochs=4)
    model = XGPAModel(cfg)
    report = train(model, ds, graph, spec, max_eval_windows=60)
    assert report.improved and report.best_val_mae < report.initial_val_mae
    assert report.best_val_mae == min(e.val_mae for e in report.epochs)
    val = make_windows(ds, spec, "val", normalize=True)
    _, std = ds.normalization()
    assert _mae(model, graph, val, std, cfg.batch_size, 60) == report.best_val_mae
    assert report.test is not None and report.ha_test is not None


def test_training_is_deterministic():
    outputs = []
    for _ in range(2):
        graph, ds, spec, cfg = small_problem(seed=3)
        model = XGPAModel(cfg)
        report = train(model, ds, graph, spec, max_eval_windows=40)
        outputs.append((encode(model), report.to_dict(include_timing=False)))
    assert outputs[0][0] == outputs[1][0]
    assert outputs[0][1] == outputs[1][1]


def test_non_finite_loss_raises_divergence():
    graph, ds, spec, cfg = small_problem()
    model = XGPAModel(cfg)
    model.head.bias.data[...] = np.nan
    with pytest.raises(DivergenceError) as info:
        train(model, ds, graph, spec, evaluate_test=False, max_eval_windows=20)
    assert info.value.step == 0


def test_training_rejects_mismatched_layout():
    graph, ds, spec, cfg = small_problem()
    with pytest.raises(ContractError):
        train(XGPAModel(cfg), ds, graph, WindowSpec("custom", 12, 4))


def test_missing_validation_windows_fall_back_to_training():
    graph, ds, _, cfg = small_problem(input_len=120, horizon=4, max_epochs=1, max_batches_per_epoch=1, patch_sizes=[], k=1)
    spec = WindowSpec("custom", 120, 4)  # val split is 2 days (96 steps), shorter than the window
    with pytest.warns(UserWarning, match="training MAE"):
        report = train(XGPAModel(cfg), ds, graph, spec, evaluate_test=False, max_eval_windows=10)
    assert report.validation_source == "train"


def test_naive_attention_rows_are_softmax_weighted():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(2, 5, 3))
    wq, wk = rng.normal(size=(2, 3, 3))
    out = naive_quadratic_attention(x, wq, wk, chunk=2)
    s = (x @ wq) @ np.swapaxes(x @ wk, 1, 2) / np.sqrt(3)
    p = np.exp(s - s.max(axis=-1, keepdims=True))
    p /= p.sum(axis=-1, keepdims=True)
    np.testing.assert_allclose(out, p @ x, atol=1e-12)


def test_benchmark_table_is_monotonic():
    for component in ("pyramid_attention", "naive_quadratic_attention"):
        result = benchmark_scaling(component, [256, 512, 1024], repeats=3)
        assert result.monotonic(), result.rows()
        assert len(result.rows()) == 3
    with pytest.raises(ValueError):
        benchmark_scaling("pyramid_attention", [512, 256])
    with pytest.raises(ValueError):
        benchmark_scaling("pyramid_attention", [32, 64])
