from __future__ import annotations

from datetime import datetime, timedelta

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from xgpa.data import (
    SplitBounds,
    SyntheticSpec,
    TrafficDataset,
    WindowSpec,
    build_topology,
    generate_synthetic,
    load_csv,
    make_windows,
    split,
    write_csv,
)
from xgpa.errors import ConfigError, FormatError, IngestionError
from xgpa.spectral import autocorrelation

QUIET = dict(noise_std=0.0, event_rate_per_day=0.0)


def test_clean_series_is_exactly_weekly_periodic():
    _, ds = generate_synthetic(SyntheticSpec(num_nodes=4, weeks=3, **QUIET))
    week = ds.steps_per_week
    assert np.array_equal(ds.speeds[:, week:], ds.speeds[:, :-week])
    day = ds.steps_per_day
    assert not np.array_equal(ds.speeds[:, day:], ds.speeds[:, :-day])  # weekends differ


def test_flat_weekend_makes_series_daily_periodic():
    _, ds = generate_synthetic(SyntheticSpec(num_nodes=3, weeks=2, weekend_factor=1.0, **QUIET))
    day = ds.steps_per_day
    assert np.array_equal(ds.speeds[:, day:], ds.speeds[:, :-day])


def test_generator_is_deterministic_per_seed():
    a = generate_synthetic(SyntheticSpec(num_nodes=5, weeks=2, seed=4))[1].speeds
    b = generate_synthetic(SyntheticSpec(num_nodes=5, weeks=2, seed=4))[1].speeds
    c = generate_synthetic(SyntheticSpec(num_nodes=5, weeks=2, seed=5))[1].speeds
    assert a.tobytes() == b.tobytes()
    assert a.tobytes() != c.tobytes()


def test_speeds_are_nonnegative_and_below_free_flow():
    _, ds = generate_synthetic(SyntheticSpec(num_nodes=6, weeks=2, event_depth=60.0, event_rate_per_day=2.0))
    assert ds.speeds.min() >= 0.0
    assert ds.speeds.max() < 65.0 + 6 * 2.0 + 6 * 2.0


@pytest.mark.parametrize("noise", [2.0, 4.0])
def test_weekly_lag_recovered_on_most_nodes(noise):
    _, ds = generate_synthetic(SyntheticSpec(noise_std=noise, seed=1))
    x = ds.speeds - ds.speeds.mean(axis=1, keepdims=True)
    r = autocorrelation(x, x, unbiased=True)
    week = ds.steps_per_week
    lo, hi = ds.steps_per_day // 2, 2 * week
    peaks = np.argmax(r[:, lo:hi], axis=1) + lo
    assert np.mean(np.abs(peaks - week) <= 1) >= 0.95


def test_events_spread_to_neighbors():
    base = SyntheticSpec(num_nodes=6, weeks=1, noise_std=0.0, event_rate_per_day=0.0)
    with_events = SyntheticSpec(num_nodes=6, weeks=1, noise_std=0.0, event_rate_per_day=1.0, seed=3)
    clean = generate_synthetic(base)[1].speeds
    busy = generate_synthetic(with_events)[1].speeds
    dropped = (clean - busy) > 0.5
    assert dropped.any(axis=1).sum() >= 3


def test_spec_validation_names_fields():
    with pytest.raises(ConfigError, match="dip_depth"):
        SyntheticSpec(dip_depth=70.0).validate()
    with pytest.raises(ConfigError, match="topology"):
        SyntheticSpec(topology="star").validate()
    with pytest.raises(ConfigError, match="unknown fields"):
        SyntheticSpec.from_dict({"lanes": 3})


@pytest.mark.parametrize("topology", ["ring", "grid", "two-highway-cross"])
def test_topologies_are_connected(topology):
    g = build_topology(SyntheticSpec(topology=topology, num_nodes=9))
    seen, frontier = {0}, [0]
    while frontier:
        nxt = [v for u in frontier for v in g.neighbors(u) if v not in seen]
        seen.update(nxt)
        frontier = nxt
    assert seen == set(range(9))
    if topology == "ring":
        assert all(len(g.neighbors(i)) == 3 for i in range(9))


# --- splits -----------------------------------------------------------------------


def dataset_of(steps: int, nodes: int = 2, resolution: int = 30, seed: int = 0) -> TrafficDataset:
    speeds = np.random.default_rng(seed).uniform(30, 70, size=(nodes, steps))
    return TrafficDataset([f"n{i}" for i in range(nodes)], resolution, datetime(2017, 1, 2), speeds)


def test_ten_weeks_split_seven_one_two():
    ds = dataset_of(10 * 336)
    b = ds.bounds
    assert b.train == (0, 7 * 336) and b.val == (7 * 336, 8 * 336) and b.test == (8 * 336, 10 * 336)


def test_degenerate_all_train_split():
    b = split(dataset_of(5 * 48), (1, 0, 0))
    assert b.train == (0, 240) and b.val == (240, 240) and b.test == (240, 240)


@settings(max_examples=40, deadline=None)
@given(st.integers(3, 60), st.sampled_from([15, 30, 60]), st.floats(0.3, 0.8), st.floats(0.0, 0.2))
def test_split_boundaries_fall_on_whole_days(days, resolution, f_train, f_val):
    per_day = 1440 // resolution
    ds = dataset_of(days * per_day + 7, resolution=resolution)
    b = split(ds, (f_train, f_val, 1 - f_train - f_val))
    assert b.train[0] == 0 and b.train[1] == b.val[0] and b.val[1] == b.test[0] and b.test[1] == ds.num_steps
    assert b.val[0] % per_day == 0 and b.test[0] % per_day == 0


def test_split_rejects_short_or_bad_inputs():
    short = dataset_of(2 * 48)
    assert short.bounds is None
    with pytest.raises(ValueError):
        split(short)
    with pytest.raises(ConfigError):
        short.normalization()
    with pytest.raises(ValueError):
        split(dataset_of(4 * 48), (0.5, 0.5, 0.5))


def test_normalization_uses_training_range_only():
    ds = dataset_of(10 * 48)
    mean, std = ds.normalization()
    lo, hi = ds.bounds.train
    np.testing.assert_allclose(mean[:, 0], ds.speeds[:, lo:hi].mean(axis=1))
    np.testing.assert_allclose(std[:, 0], ds.speeds[:, lo:hi].std(axis=1))
    ds.speeds[:, hi:] += 1000.0
    fresh = TrafficDataset(ds.node_ids, 30, ds.start, ds.speeds, ds.bounds)
    np.testing.assert_allclose(fresh.normalization()[0], mean)


# --- windows ----------------------------------------------------------------------


def test_case_layouts():
    assert (WindowSpec.for_case("case1").input_len, WindowSpec.for_case("case1").horizon) == (2, 2)
    c4 = WindowSpec.for_case("case4", 30)
    assert (c4.input_len, c4.horizon) == (336, 24)
    c3 = WindowSpec.for_case("case3", 30)
    assert (c3.input_len, c3.horizon) == (336, 2)
    c2 = WindowSpec.for_case("case2", 30)
    assert (c2.input_len, c2.horizon) == (16, 2)
    assert WindowSpec.for_case("case4", 5).input_len == 2016
    with pytest.raises(ConfigError):
        WindowSpec.for_case("case5")


def test_exactly_one_window_when_split_fits_once():
    spec = WindowSpec("custom", 6, 3)
    ds = TrafficDataset(["a"], 30, datetime(2017, 1, 2), np.ones((1, 150)), SplitBounds((0, 9), (9, 150), (150, 150)))
    w = make_windows(ds, spec, "train")
    assert len(w) == 1
    x, y, when = w[0]
    assert x.shape == (1, 6, 1) and y.shape == (1, 3, 1)
    assert when == datetime(2017, 1, 2, 3, 0)


def test_short_split_warns_and_is_empty():
    ds = dataset_of(10 * 48)
    with pytest.warns(UserWarning, match="no case4 windows"):
        w = make_windows(ds, WindowSpec.for_case("case4"), "val")
    assert len(w) == 0


def test_case2_context_blocks_are_a_day_apart():
    ds = dataset_of(21 * 48)
    spec = WindowSpec.for_case("case2", 30)
    w = make_windows(ds, spec, "train")
    idx = w.input_indices(0)
    blocks = [idx[i * 2 : (i + 1) * 2] for i in range(7)]
    starts = [ds.timestamp(int(b[0])) for b in blocks]
    assert all(b - a == timedelta(hours=24) for a, b in zip(starts, starts[1:]))
    # each daily block covers the same hour as the targets, the recent hour directly precedes them
    first_target = int(w.target_starts[0])
    assert ds.timestamp(first_target) - starts[-1] == timedelta(hours=24)
    assert idx[-2:].tolist() == [first_target - 2, first_target - 1]
    assert np.all(np.diff(idx) > 0)


@pytest.mark.parametrize("case", ["case1", "case2", "case3", "case4"])
def test_windows_never_leak_across_splits(case):
    ds = dataset_of(21 * 48, nodes=1)  # three weeks: 14 / 2 / 5 days
    spec = WindowSpec.for_case(case, 30)
    for name in ("train", "val", "test"):
        lo, hi = ds.bounds.range(name)
        with _maybe_warn():
            w = make_windows(ds, spec, name)
        for i in range(len(w)):
            inp, tgt = w.input_indices(i), w.target_indices(i)
            assert inp.min() >= lo and tgt.max() < hi
            assert inp.max() < tgt.min()


class _maybe_warn:
    def __enter__(self):
        import warnings

        self._ctx = warnings.catch_warnings()
        self._ctx.__enter__()
        warnings.simplefilter("ignore")

    def __exit__(self, *exc):
        return self._ctx.__exit__(*exc)


def test_batch_normalization_round_trips():
    ds = dataset_of(10 * 48)
    spec = WindowSpec("custom", 5, 2)
    raw = make_windows(ds, spec, "train")
    norm = make_windows(ds, spec, "train", normalize=True)
    mean, std = ds.normalization()
    x, y = raw.batch([0, 3])
    xn, yn = norm.batch([0, 3])
    np.testing.assert_allclose(xn * std[:, None, :] + mean[:, None, :], x, atol=1e-12)
    np.testing.assert_allclose(yn * std[:, None, :] + mean[:, None, :], y, atol=1e-12)


# --- CSV --------------------------------------------------------------------------

SPEEDS = """timestamp,a,b
2017-01-02T00:00:00,60.5,58
2017-01-02T00:30:00,61,57.25
2017-01-02T01:00:00,59.125,56
2017-01-02T01:30:00,62,55.5
"""
GRAPH = """node_a,node_b,distance_m
a,b,1200.5
"""


def write(tmp_path, speeds=SPEEDS, graph=GRAPH):
    s, g = tmp_path / "speeds.csv", tmp_path / "graph.csv"
    s.write_text(speeds)
    g.write_text(graph)
    return s, g


def test_minimal_csv_parse(tmp_path):
    graph, ds = load_csv(*write(tmp_path))
    assert ds.num_nodes == 2 and ds.num_steps == 4
    assert ds.resolution_min == 30
    assert graph.neighbors(0) == [0, 1] and graph.distance(0, 1) == 1200.5
    assert ds.speeds[1, 1] == 57.25


def test_missing_cell_forward_filled(tmp_path):
    text = SPEEDS.replace("61,57.25", "61,").replace("60.5,58", ",58")
    _, ds = load_csv(*write(tmp_path, speeds=text))
    assert ds.speeds[1, 1] == 58.0  # previous step
    assert ds.speeds[0, 0] == 61.0  # leading gap back-filled


def test_unknown_adjacency_id_is_ingestion_error(tmp_path):
    with pytest.raises(IngestionError, match="zz"):
        load_csv(*write(tmp_path, graph=GRAPH + "a,zz,10\n"))


def test_non_monotonic_timestamps_rejected(tmp_path):
    text = SPEEDS.replace("2017-01-02T01:00:00", "2017-01-02T00:15:00")
    with pytest.raises(FormatError):
        load_csv(*write(tmp_path, speeds=text))


def test_negative_speed_reports_row(tmp_path):
    with pytest.raises(FormatError, match="row 4"):
        load_csv(*write(tmp_path, speeds=SPEEDS.replace("59.125", "-1")))


def test_csv_round_trip(tmp_path):
    s, g = write(tmp_path)
    graph, ds = load_csv(s, g)
    s2, g2 = tmp_path / "s2.csv", tmp_path / "g2.csv"
    write_csv(graph, ds, s2, g2)
    norm = lambda p: [line.replace(" ", "") for line in p.read_text().split()]
    assert norm(s2) == norm(s)
    assert norm(g2) == norm(g)


def test_generated_dataset_round_trips_through_csv(tmp_path):
    graph, ds = generate_synthetic(SyntheticSpec(num_nodes=4, weeks=1))
    write_csv(graph, ds, tmp_path / "s.csv", tmp_path / "g.csv")
    graph2, ds2 = load_csv(tmp_path / "s.csv", tmp_path / "g.csv")
    assert ds2.speeds.tobytes() == ds.speeds.tobytes()
    assert graph2.node_ids == graph.node_ids
    assert ds2.start == ds.start and ds2.resolution_min == ds.resolution_min
