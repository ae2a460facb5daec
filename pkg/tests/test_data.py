import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from d2pcca import data
from d2pcca import training as tr
from d2pcca.errors import DataError, ShapeError
from d2pcca.flows import attach_flow
from d2pcca.model import D2pccaModel, LatentLayout, NetWidths
from d2pcca.synthetic import BENCHMARK_SPLIT, benchmark_panel, embed_linear, set_names


def _write(tmp_path, header, rows, sets, split=None):
    table = tmp_path / "t.csv"
    table.write_text("\n".join([",".join(header)] + [",".join(map(str, r)) for r in rows]) + "\n")
    lines = ["sets:"]
    for name, cols in sets:
        lines += [f"  - name: {name}", f"    columns: [{', '.join(cols)}]"]
    if split is not None:
        lines.append(f"split: {split}")
    man = tmp_path / "m.yaml"
    man.write_text("\n".join(lines) + "\n")
    return table, man


def _rows(n, p, rng):
    return [[f"2020-01-{d + 1:02d}", *rng.normal(size=p).round(6)] for d in range(n)]


def test_load_two_by_two(tmp_path, rng):
    t, m = _write(tmp_path, ["date", "a", "b", "c", "d"], _rows(10, 4, rng), [("s1", ["a", "b"]), ("s2", ["c", "d"])])
    ds = data.load_panel(t, m)
    assert ds.n_sets == 2 and ds.values.shape == (10, 4)
    assert ds.obs_dims == (2, 2)


def test_columns_follow_manifest_order(tmp_path, rng):
    rows = _rows(5, 4, rng)
    t, m = _write(tmp_path, ["date", "a", "b", "c", "d"], rows, [("s1", ["d", "b"]), ("s2", ["a", "c"])])
    ds = data.load_panel(t, m)
    assert ds.columns == ["d", "b", "a", "c"]
    raw = np.array([r[1:] for r in rows], dtype=float)
    np.testing.assert_array_equal(ds.values, raw[:, [3, 1, 0, 2]])
    assert ds.column_sets() == ["s1", "s1", "s2", "s2"]


def test_unknown_column_named(tmp_path, rng):
    t, m = _write(tmp_path, ["date", "a", "b"], _rows(4, 2, rng), [("s1", ["a", "zzz"])])
    with pytest.raises(DataError, match="zzz"):
        data.load_panel(t, m)


def test_missing_value_rejected(tmp_path, rng):
    rows = _rows(4, 2, rng)
    rows[2][2] = ""
    t, m = _write(tmp_path, ["date", "a", "b"], rows, [("s1", ["a", "b"])])
    with pytest.raises(DataError, match="missing value"):
        data.load_panel(t, m)


def test_non_monotone_dates_rejected(tmp_path, rng):
    rows = _rows(4, 2, rng)
    rows[1][0], rows[2][0] = rows[2][0], rows[1][0]
    t, m = _write(tmp_path, ["date", "a", "b"], rows, [("s1", ["a", "b"])])
    with pytest.raises(DataError, match="strictly increasing"):
        data.load_panel(t, m)


def test_duplicate_set_membership_rejected(tmp_path, rng):
    t, m = _write(tmp_path, ["date", "a", "b"], _rows(4, 2, rng), [("s1", ["a", "b"]), ("s2", ["a"])])
    with pytest.raises(DataError, match="more than one set"):
        data.load_panel(t, m)


def test_bad_date_and_text_rejected(tmp_path, rng):
    rows = _rows(4, 2, rng)
    rows[1][0] = "yesterday"
    t, m = _write(tmp_path, ["date", "a", "b"], rows, [("s1", ["a", "b"])])
    with pytest.raises(DataError, match="ISO-8601"):
        data.load_panel(t, m)
    rows = _rows(4, 2, rng)
    rows[3][1] = "abc"
    t, m = _write(tmp_path, ["date", "a", "b"], rows, [("s1", ["a", "b"])])
    with pytest.raises(DataError, match="non-numeric"):
        data.load_panel(t, m)


def test_save_load_round_trip(tmp_path, rng):
    ds = data.PanelDataset(data.daily_dates(7), rng.normal(size=(7, 3)), ("x", "y"), (("x1",), ("y1", "y2")), 5)
    data.save_panel(ds, tmp_path / "p.csv", tmp_path / "manifest.yaml")
    back = data.load_panel(tmp_path / "p.csv", tmp_path / "manifest.yaml")
    np.testing.assert_array_equal(back.values, ds.values)
    assert back.set_columns == ds.set_columns and back.split == 5 and back.dates == ds.dates


# ---------------------------------------------------------------------------
# windows


@pytest.fixture(scope="module")
def bench():
    p = benchmark_panel()
    names = set_names(5)
    cols = tuple(tuple(f"{n}_{k}" for k in range(10)) for n in names)
    return data.PanelDataset(data.daily_dates(len(p.values)), p.values, names, cols, BENCHMARK_SPLIT)


def test_window_counts(bench):
    train, test = data.make_windows(bench, 30, 1)
    assert len(train) == 424 and len(test) == 21
    assert train.sequences.shape == (424, 30, 50)


def test_window_centering_and_scale(bench):
    train, test = data.make_windows(bench, 30, 1)
    for w in (train, test):
        assert np.max(np.abs(w.sequences.mean(axis=1))) < 1e-12
    np.testing.assert_allclose(train.scale, bench.values[:BENCHMARK_SPLIT].std(axis=0), rtol=1e-15)


def test_windows_stay_inside_split(bench):
    for T, step in [(30, 1), (30, 7), (11, 5)]:
        train, test = data.make_windows(bench, T, step)
        assert np.all(train.starts + T <= BENCHMARK_SPLIT)
        assert np.all(test.starts >= BENCHMARK_SPLIT)
        assert len(train) == (BENCHMARK_SPLIT - T) // step + 1


def test_no_leakage_from_test_rows(bench):
    train, test = data.make_windows(bench, 30, 1)
    moved = bench.values.copy()
    moved[BENCHMARK_SPLIT:] = 100.0 * moved[BENCHMARK_SPLIT:] + 7.0
    other = data.PanelDataset(bench.dates, moved, bench.set_names, bench.set_columns, bench.split)
    train2, test2 = data.make_windows(other, 30, 1)
    np.testing.assert_array_equal(train2.sequences, train.sequences)
    np.testing.assert_array_equal(train2.scale, train.scale)
    np.testing.assert_allclose(test2.sequences, 100.0 * test.sequences, rtol=1e-12, atol=1e-12)


def test_split_too_small(bench):
    with pytest.raises(DataError, match="fewer than one window"):
        data.make_windows(bench, 30, 1, split=20)
    with pytest.raises(DataError, match="test part"):
        data.make_windows(bench, 30, 1, split=490)


def test_constant_column_rejected():
    v = np.random.default_rng(0).normal(size=(60, 2))
    v[:, 1] = 3.0
    ds = data.PanelDataset(data.daily_dates(60), v, ("s",), (("a", "b"),), 40)
    with pytest.raises(DataError, match="constant"):
        data.make_windows(ds, 10, 1)


# ---------------------------------------------------------------------------
# rmse


def loop_rmse(recon, truth):
    N, T, p = truth.shape
    acc = 0.0
    for i in range(N):
        for t in range(T):
            s = 0.0
            for k in range(p):
                s += (recon[i, t, k] - truth[i, t, k]) ** 2
            acc += s
    return (acc / (N * T)) ** 0.5


def test_rmse_loop_oracle(rng):
    a, b = rng.normal(size=(2, 3, 4)), rng.normal(size=(2, 3, 4))
    assert abs(data.rmse(a, b) - loop_rmse(a, b)) < 1e-12


def test_rmse_trivial_cases(rng):
    x = rng.normal(size=(3, 5, 2))
    assert data.rmse(x, x) == 0.0
    y = rng.normal(size=(4, 7, 1))
    assert data.rmse(y + 0.1, y) == pytest.approx(0.1, abs=1e-12)
    with pytest.raises(ShapeError):
        data.rmse(x, x[:, :, :1])


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_rmse_permutation_invariant_and_monotone(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(4, 3, 5)), rng.normal(size=(4, 3, 5))
    perm = rng.permutation(4)
    assert data.rmse(a[perm], b[perm]) == pytest.approx(data.rmse(a, b), rel=1e-14)
    idx = tuple(rng.integers(0, s) for s in a.shape)
    bigger = a.copy()
    bigger[idx] = b[idx] + (a[idx] - b[idx]) * 1.5 + np.sign(a[idx] - b[idx]) * 0.01
    assert data.rmse(bigger, b) > data.rmse(a, b)


# ---------------------------------------------------------------------------
# evaluation and bands

SMALL = NetWidths(transition_hidden=8, emission_hidden=8, encoder_hidden=8)


@pytest.fixture
def small_model():
    return D2pccaModel(LatentLayout(1, (1, 1), (2, 3)), 2, widths=SMALL)


def test_evaluate_rmse_matches_reconstruct(small_model, rng):
    x = rng.normal(size=(4, 6, 5))
    m = data.evaluate(small_model, x, "d2pcca", np.random.default_rng(1))
    rec = small_model.reconstruct(x, mode="posterior-mean")
    assert m.rmse == data.rmse(rec.mean, x)
    again = data.evaluate(small_model, x, "d2pcca", np.random.default_rng(1))
    assert again == m


def test_flow_model_uses_sampled_latents(small_model):
    assert data.reconstruction_mode(small_model) == "posterior-mean"
    attach_flow(small_model, 2, 6, rng=0)
    assert data.reconstruction_mode(small_model) == "sampled"


def test_metrics_file_round_trip(tmp_path):
    rows = [data.Metrics("dpcca-em", -52.5, 3.9), data.Metrics("d2pcca", -41.25, 4.1)]
    data.write_metrics(tmp_path / "m.csv", rows)
    assert (tmp_path / "m.csv").read_text().splitlines()[0] == "variant,elbo_per_step,rmse"
    assert data.read_metrics(tmp_path / "m.csv") == rows


def test_band_file_contract(small_model, rng, tmp_path):
    x = rng.normal(size=(6, 5))
    mode = data.export_bands(small_model, x, tmp_path / "b.csv")
    assert mode == "posterior-mean"
    lines = (tmp_path / "b.csv").read_text().splitlines()
    assert len(lines) == 6 * 5 + 1
    assert lines[0] == ",".join(data.BAND_FIELDS)
    b = data.read_bands(tmp_path / "b.csv")
    rec = small_model.reconstruct(x[None], mode="posterior-mean")
    np.testing.assert_array_equal(b["mean"], rec.mean[0].ravel())
    np.testing.assert_allclose((b["upper"] - b["lower"]) / 2, 1.96 * np.sqrt(rec.variance[0].ravel()), rtol=1e-12)
    np.testing.assert_array_equal(b["truth"], x.ravel())
    assert list(b["set"][:5]) == ["set1", "set1", "set2", "set2", "set2"]


def test_band_coverage_on_model_data(tmp_path):
    lay = LatentLayout(1, (1, 1), (4, 4))
    model, _ = embed_linear(lay, np.random.default_rng(5), widths=SMALL)
    fit, _ = model.generate(20, 40, np.random.default_rng(6))
    held, _ = model.generate(200, 1, np.random.default_rng(7))
    # fit the inference networks (and refine the generator) on data from the model itself
    cfg = tr.TrainConfig(epochs=20, batch_size=10, workers=1, optimizer=tr.OptimizerConfig(lr=1e-2, weight_decay=0.0))
    tr.train(model, fit, cfg)
    data.export_bands(model, held[0], tmp_path / "b.csv")
    b = data.read_bands(tmp_path / "b.csv")
    inside = np.mean((b["truth"] >= b["lower"]) & (b["truth"] <= b["upper"]))
    assert inside >= 0.9


def test_export_bands_rejects_batch(small_model, rng, tmp_path):
    with pytest.raises(ShapeError):
        data.export_bands(small_model, rng.normal(size=(2, 6, 5)), tmp_path / "b.csv")
