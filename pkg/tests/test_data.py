import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sparsefed.data import (
    DataError,
    TimeSeries,
    build_client,
    cell_splits,
    inject_anomalies,
    inject_mcar,
    load_csv,
    make_windows,
    overlap_average,
    partition,
    save_csv,
    standardize,
)


def _series(d, t, seed=0):
    rng = np.random.default_rng(seed)
    return TimeSeries.from_values(rng.normal(size=(d, t)) + 5.0)


# --- load_csv ---------------------------------------------------------------

def test_load_csv_shape(tmp_path):
    path = tmp_path / "a.csv"
    path.write_text("\n".join(",".join(str(r * 3 + c) for c in range(3)) for r in range(5)) + "\n")
    ts = load_csv(path)
    assert ts.values.shape == (3, 5)
    assert ts.obs_mask.all() and not ts.anomaly_labels.any()
    assert ts.values[1, 2] == 7.0


def test_load_csv_nan_cell_is_reported(tmp_path):
    path = tmp_path / "a.csv"
    path.write_text("1,2,3\n4,NaN,6\n")
    with pytest.raises(DataError, match=r"row 2, column 2"):
        load_csv(path)


def test_load_csv_text_cell_and_ragged_rows(tmp_path):
    path = tmp_path / "a.csv"
    path.write_text("1,2\n3,x\n")
    with pytest.raises(DataError, match=r"row 2, column 2.*'x'"):
        load_csv(path)
    path.write_text("1,2\n3\n")
    with pytest.raises(DataError, match=r"row 2 has 1 columns"):
        load_csv(path)


def test_load_csv_missing_file(tmp_path):
    with pytest.raises(DataError, match="cannot read"):
        load_csv(tmp_path / "nope.csv")


def test_load_csv_header_and_delimiter(tmp_path):
    path = tmp_path / "a.csv"
    path.write_text("temp;energy\n1.5;2\n3;4\n")
    ts = load_csv(path, delimiter=";", header=True)
    assert ts.feature_names == ["temp", "energy"]
    np.testing.assert_array_equal(ts.values, [[1.5, 3.0], [2.0, 4.0]])


def test_load_csv_full_size_dataset(tmp_path):
    # same shape as the building-energy data: 24 sensors, 19000 steps
    ts = _series(24, 19000)
    path = tmp_path / "big.csv"
    save_csv(ts, path, header=False)
    loaded = load_csv(path)
    assert (loaded.n_features, loaded.n_steps) == (24, 19000)
    np.testing.assert_array_equal(loaded.values, ts.values)


# --- standardize ------------------------------------------------------------

def test_standardize_idempotent_on_standard_input():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(2, 200))
    x = (x - x.mean(axis=1, keepdims=True)) / x.std(axis=1, keepdims=True)
    out, _ = standardize(TimeSeries.from_values(x), train_fraction=1.0)
    np.testing.assert_allclose(out.values, x, atol=1e-9)


def test_standardize_constant_feature_rejected():
    x = np.vstack([np.ones(50), np.arange(50.0)])
    with pytest.raises(DataError, match="zero variance"):
        standardize(TimeSeries.from_values(x))


def test_standardize_uses_training_prefix_moments():
    rng = np.random.default_rng(2)
    prefix = rng.normal(size=700)
    prefix = 10 + 2 * (prefix - prefix.mean()) / prefix.std()
    tail = rng.normal(50, 9, size=300)  # must not influence the statistics
    ts = TimeSeries.from_values(np.concatenate([prefix, tail])[None, :])
    out, stats = standardize(ts, train_fraction=0.7)
    np.testing.assert_allclose(stats.mean, [10.0], atol=1e-9)
    np.testing.assert_allclose(stats.std, [2.0], atol=1e-9)
    train = out.values[0, :700]
    assert abs(train.mean()) < 1e-9
    assert abs(train.std() - 1.0) < 1e-9
    np.testing.assert_allclose(stats.inverse(out.values), ts.values, atol=1e-12)


# --- make_windows -----------------------------------------------------------

def test_single_window_when_length_equals_w():
    win, mask = make_windows(np.arange(5.0)[None, :], None, 5)
    assert win.shape == (1, 5) and mask.all()


def test_window_count_at_full_scale():
    win, _ = make_windows(np.zeros((1, 19000)), None, 50)
    assert win.shape == (18951, 50)


def test_multivariate_windows_by_hand():
    series = np.array([[1.0, 2.0, 3.0, 4.0],
                       [10.0, 20.0, 30.0, 40.0]])
    win, _ = make_windows(series, None, 3)
    # column-stacked: (y_q, y_{q+1}, y_{q+2}), each y_t = (feature0, feature1)
    np.testing.assert_array_equal(win, [[1, 10, 2, 20, 3, 30],
                                        [2, 20, 3, 30, 4, 40]])


def test_windows_too_short():
    with pytest.raises(DataError):
        make_windows(np.zeros((1, 3)), None, 4)


@settings(max_examples=40, deadline=None)
@given(m=st.integers(1, 3), w=st.integers(1, 8), extra=st.integers(0, 20), seed=st.integers(0, 10_000))
def test_overlap_average_reconstructs_series(m, w, extra, seed):
    x = np.random.default_rng(seed).normal(size=(m, w + extra))
    win, _ = make_windows(x, None, w)
    np.testing.assert_allclose(overlap_average(win, m, w + extra), x, atol=1e-12)


# --- injection --------------------------------------------------------------

def test_mcar_identity_and_boundary():
    ts = _series(3, 100)
    assert inject_mcar(ts, 0.0, 1).obs_mask.all()
    assert not inject_mcar(ts, 1.0, 1).obs_mask.any()


def test_mcar_rate_and_values_retained():
    ts = _series(24, 19000)
    out = inject_mcar(ts, 0.3, 7)
    assert abs((~out.obs_mask).mean() - 0.3) <= 0.01
    np.testing.assert_array_equal(out.values, ts.values)


def test_mcar_deterministic_and_validated():
    ts = _series(4, 500)
    np.testing.assert_array_equal(inject_mcar(ts, 0.2, 3).obs_mask, inject_mcar(ts, 0.2, 3).obs_mask)
    with pytest.raises(DataError):
        inject_mcar(ts, 1.5, 0)


def test_anomalies_identity_at_zero_rate():
    ts = _series(2, 40)
    out = inject_anomalies(ts, 0.0, 3.0, 0)
    np.testing.assert_array_equal(out.values, ts.values)
    assert not out.anomaly_labels.any()


def test_anomaly_values_and_counts():
    rng = np.random.default_rng(0)
    x = rng.uniform(0, 4, size=(2, 200))
    x[0, 17] = 5.0
    ts = TimeSeries.from_values(x)
    out = inject_anomalies(ts, 0.1, 3.0, 11)
    assert out.anomaly_labels.sum(axis=1).tolist() == [math.ceil(0.1 * 200)] * 2
    np.testing.assert_array_equal(out.values[0, out.anomaly_labels[0]], 15.0)
    np.testing.assert_array_equal(out.values[~out.anomaly_labels], x[~out.anomaly_labels])
    np.testing.assert_array_equal(out.ground_truth, x)


def test_anomalies_everywhere_at_rate_one():
    out = inject_anomalies(_series(2, 30), 1.0, 3.0, 0)
    assert out.anomaly_labels.all()


def test_anomaly_rate_validated():
    with pytest.raises(DataError):
        inject_anomalies(_series(1, 10), -0.1, 3.0, 0)


def test_injection_determinism():
    ts = _series(3, 300)
    a = inject_anomalies(ts, 0.3, 3.0, 5)
    b = inject_anomalies(ts, 0.3, 3.0, 5)
    assert a.anomaly_labels.tobytes() == b.anomaly_labels.tobytes()
    assert a.values.tobytes() == b.values.tobytes()


# --- partition --------------------------------------------------------------

def test_centralized_partition():
    clients = partition(_series(24, 300), "centralized", 50)
    assert len(clients) == 1 and clients[0].n_features == 24
    assert clients[0].input_dim == 24 * 50


def test_multivariate_partition_full_scale():
    clients = partition(_series(24, 19000), "multivariate", 50, n_clients=5)
    assert len(clients) == 5
    assert all(c.n_features == 24 and c.n_steps == 3800 for c in clients)
    assert [c.time_range for c in clients] == [(i * 3800, (i + 1) * 3800) for i in range(5)]


def test_multivariate_last_client_absorbs_remainder():
    clients = partition(_series(2, 103), "multivariate", 5, n_clients=4)
    assert [c.n_steps for c in clients] == [25, 25, 25, 28]


def test_univariate_partition():
    clients = partition(_series(24, 200), "univariate", 50)
    assert len(clients) == 24
    assert [c.features for c in clients] == [(i,) for i in range(24)]
    assert all(c.n_windows == 200 - 50 + 1 for c in clients)


def test_partition_errors():
    ts = _series(2, 50)
    with pytest.raises(DataError):
        partition(ts, "ring", 5)
    with pytest.raises(DataError):
        partition(ts, "multivariate", 5, n_clients=0)


@pytest.mark.parametrize("scheme,n", [("centralized", 1), ("univariate", 1), ("multivariate", 3)])
def test_partition_covers_every_cell_once(scheme, n):
    ts = _series(4, 90)
    cover = np.zeros(ts.values.shape, dtype=int)
    for c in partition(ts, scheme, 10, n_clients=n):
        start, stop = c.time_range
        cover[list(c.features), start:stop] += 1
        # windows of each client reproduce its own cells
        local = overlap_average(c.windows, c.n_features, c.n_steps)
        np.testing.assert_allclose(local, ts.values[list(c.features), start:stop])
    assert (cover == 1).all()


def test_window_split_never_leaks_into_training():
    ts = _series(1, 200)
    client = build_client(ts, 0, [0], (0, 200), 20)
    steps = cell_splits(200)
    for q, name in enumerate(client.split):
        last = q + 19
        assert steps[last] == name
        if name == "train":
            assert (steps[q:last + 1] == "train").all()


def test_missing_cells_enter_windows_as_zero():
    ts = inject_mcar(_series(1, 30), 0.5, 0)
    client = build_client(ts, 0, [0], (0, 30), 5)
    win, mask = client.windows, client.window_obs_masks
    assert (win[~mask] == 0).all()
    assert (win[mask] != 0).all()


def test_client_windows_are_read_only():
    client = partition(_series(2, 30), "univariate", 5)[0]
    with pytest.raises(ValueError):
        client.windows[0, 0] = 1.0
