import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from d2pcca import checkpoint as ck
from d2pcca import diffmath as dm
from d2pcca import training as tr
from d2pcca.errors import ConfigError, NumericalError
from d2pcca.model import D2pccaModel, LatentLayout, NetWidths
from d2pcca.synthetic import linear_panel

TINY = NetWidths(transition_hidden=4, emission_hidden=6, encoder_hidden=6)


def scalar_adam(x0, g, steps, lr, b1, b2, eps, wd):
    """Hand-rolled scalar Adam with decoupled shrinkage, written from the update rule."""
    x, m, v, out = x0, 0.0, 0.0, []
    for t in range(1, steps + 1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mhat = m / (1 - b1**t)
        vhat = v / (1 - b2**t)
        x = x * (1 - lr * wd)
        x = x - lr * mhat / (vhat**0.5 + eps)
        out.append(x)
    return out


def _params(*arrays):
    return [dm.parameter(np.array(a, dtype=float)) for a in arrays]


@pytest.fixture(scope="module")
def windows():
    lay = LatentLayout(1, (1, 1), (3, 3))
    panel, _ = linear_panel(260, lay, np.random.default_rng(3), noise=0.3)
    x = panel.values
    starts = range(0, len(x) - 12 + 1, 4)
    w = np.stack([x[s: s + 12] for s in starts])
    return (w - w.mean(axis=1, keepdims=True)) / x.std(axis=0)


def _model(seed=1):
    return D2pccaModel(LatentLayout(1, (1, 1), (3, 3)), seed, widths=TINY)


def _cfg(**kw):
    base = dict(epochs=3, batch_size=20, seed=11, workers=1)
    base.update(kw)
    return tr.TrainConfig(**base)


# ---------------------------------------------------------------------------
# optimizer


def test_clip_rescales_to_half():
    cfg = tr.OptimizerConfig(lr=0.1, weight_decay=0.0, clip_norm=10.0)
    g = np.array([12.0, 16.0])  # norm 20
    a = _params([0.0, 0.0])
    sa = tr.AdamState.zeros_like(a)
    norm = tr.clipped_adam_step(a, [g], sa, cfg)
    assert norm == pytest.approx(20.0)
    np.testing.assert_allclose(sa.m[0], (1 - cfg.beta1) * 0.5 * g, rtol=1e-15)
    np.testing.assert_allclose(sa.v[0], (1 - cfg.beta2) * (0.5 * g) ** 2, rtol=1e-15)


def test_decay_only_shrinks_monotonically():
    cfg = tr.OptimizerConfig(weight_decay=2.0)
    p = _params([1.5, -2.0, 0.3])
    s = tr.AdamState.zeros_like(p)
    prev = np.abs(p[0].data.copy())
    for _ in range(50):
        tr.clipped_adam_step(p, [np.zeros(3)], s, cfg)
        cur = np.abs(p[0].data)
        assert np.all(cur < prev)
        prev = cur.copy()
    np.testing.assert_allclose(p[0].data, np.array([1.5, -2.0, 0.3]) * (1 - 3e-4 * 2.0) ** 50, rtol=1e-12)


@pytest.mark.parametrize("wd", [0.0, 2.0])
def test_scalar_adam_matches_reference(wd):
    cfg = tr.OptimizerConfig(lr=1e-2, weight_decay=wd)
    p = _params([0.7])
    s = tr.AdamState.zeros_like(p)
    got = []
    for _ in range(100):
        tr.clipped_adam_step(p, [np.array([0.3])], s, cfg)
        got.append(float(p[0].data[0]))
    ref = scalar_adam(0.7, 0.3, 100, 1e-2, 0.96, 0.999, 1e-8, wd)
    np.testing.assert_allclose(got, ref, rtol=1e-13, atol=1e-15)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.01, 0.99))
def test_no_clip_below_threshold(seed, frac):
    rng = np.random.default_rng(seed)
    g = [rng.normal(size=3), rng.normal(size=(2, 2))]
    g = [x * (frac * 10.0 / tr.global_norm(g)) for x in g]
    init = [rng.normal(size=3), rng.normal(size=(2, 2))]
    cfg = tr.OptimizerConfig()
    unclipped = dataclasses.replace(cfg, clip_norm=1e300)
    a, b = _params(*init), _params(*init)
    sa, sb = tr.AdamState.zeros_like(a), tr.AdamState.zeros_like(b)
    tr.clipped_adam_step(a, g, sa, cfg)
    tr.clipped_adam_step(b, g, sb, unclipped)
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x.data, y.data)


def test_l2_mode_adds_decay_to_gradient():
    cfg = tr.OptimizerConfig(lr=0.1, weight_decay=0.5, decay_mode="l2")
    p = _params([2.0])
    s = tr.AdamState.zeros_like(p)
    tr.clipped_adam_step(p, [np.array([0.0])], s, cfg)
    np.testing.assert_allclose(s.m[0], (1 - cfg.beta1) * 1.0)


def test_non_finite_gradient_names_parameter():
    p = _params([1.0], [2.0])
    s = tr.AdamState.zeros_like(p)
    with pytest.raises(NumericalError, match="emit.w"):
        tr.clipped_adam_step(p, [np.array([0.0]), np.array([np.nan])], s, tr.OptimizerConfig(), ["a", "emit.w"])
    np.testing.assert_array_equal(p[0].data, [1.0])


@pytest.mark.parametrize(
    "kw", [{"lr": 0.0}, {"beta1": 1.0}, {"beta2": 0.0}, {"clip_norm": -1.0}, {"decay_mode": "weird"}]
)
def test_optimizer_config_rejects(kw):
    with pytest.raises(ConfigError):
        tr.OptimizerConfig(**kw)


# ---------------------------------------------------------------------------
# annealing


def test_kl_weight_endpoints():
    s = tr.AnnealSchedule()
    assert tr.kl_weight(s, 0) == 0.01
    assert tr.kl_weight(s, 50) == pytest.approx(0.505, abs=1e-15)
    assert tr.kl_weight(s, 100) == 1.0
    assert tr.kl_weight(s, 250) == 1.0
    assert tr.kl_weight(None, 0) == 1.0
    with pytest.raises(ValueError):
        tr.kl_weight(s, -1)


def test_kl_weight_monotone_and_continuous():
    s = tr.AnnealSchedule()
    b = np.array([tr.kl_weight(s, e) for e in range(130)])
    assert np.all(np.diff(b) >= 0)
    assert np.max(np.diff(b)) <= 0.99 / 100 + 1e-15


def test_beta_one_objective_bit_identical(windows):
    model = _model()
    noise = np.random.default_rng(0).standard_normal((12, 5, model.layout.total_dim))
    terms = model.elbo_terms(windows[:5], 1, None, noise)
    np.testing.assert_array_equal(terms.mean(tr.kl_weight(tr.AnnealSchedule(), 100)).data, terms.mean().data)


# ---------------------------------------------------------------------------
# loop


def test_split_validation_tail():
    w = np.arange(50).reshape(50, 1, 1).astype(float)
    a, b = tr.split_validation(w, 0.1)
    assert len(a) == 45 and len(b) == 5
    assert b[0, 0, 0] == 45.0


def test_moment_shapes_mirror_params():
    model = _model()
    s = tr.new_state(model, _cfg())
    assert [m.shape for m in s.adam.m] == [p.data.shape for p in model.parameters()]
    assert [v.shape for v in s.adam.v] == [p.data.shape for p in model.parameters()]


def _strip(trace):
    return [(r.epoch, r.beta, r.train_elbo_per_step, r.val_elbo_per_step) for r in trace]


def test_fixed_seed_bit_identical(windows):
    runs = []
    for _ in range(2):
        m = _model()
        res = tr.train(m, windows, _cfg(anneal=tr.AnnealSchedule()))
        runs.append((_strip(res.trace), m.state_dict()))
    assert runs[0][0] == runs[1][0]
    for k in runs[0][1]:
        np.testing.assert_array_equal(runs[0][1][k], runs[1][1][k])


def test_worker_threads_match_serial(windows):
    traces = []
    for workers in (1, 3, 3):
        m = _model()
        res = tr.train(m, windows, _cfg(epochs=2, workers=workers))
        traces.append(np.array(_strip(res.trace)))
    np.testing.assert_array_equal(traces[1], traces[2])
    np.testing.assert_allclose(traces[0], traces[1], rtol=1e-9)


def test_workers_from_environment(monkeypatch):
    monkeypatch.setenv(tr.WORKERS_ENV, "4")
    assert tr._worker_count(tr.TrainConfig()) == 4
    monkeypatch.setenv(tr.WORKERS_ENV, "many")
    with pytest.raises(ConfigError):
        tr._worker_count(tr.TrainConfig())


def test_resume_continues_exactly(windows, tmp_path):
    full = _model()
    ref = tr.train(full, windows, _cfg(epochs=4, anneal=tr.AnnealSchedule(ramp_epochs=3)))

    part = _model()
    first = tr.train(part, windows, _cfg(epochs=2, anneal=tr.AnnealSchedule(ramp_epochs=3)))
    ck.write(tmp_path / "a.ckpt", ck.model_checkpoint(part, "d2pcca+kl", 11, first.state))
    back = ck.read(tmp_path / "a.ckpt")
    model = ck.restore_model(back)
    state = ck.restore_state(back, model)
    second = tr.train(model, windows, _cfg(epochs=4, anneal=tr.AnnealSchedule(ramp_epochs=3)), state)

    assert [r.epoch for r in second.trace] == [0, 1, 2, 3]
    assert _strip(second.trace) == _strip(ref.trace)
    for k, v in full.state_dict().items():
        np.testing.assert_array_equal(model.state_dict()[k], v)


def test_short_final_batch_used(windows):
    m = _model()
    seen = []
    orig = tr._batch_grads

    def spy(model, params, x, *a):
        seen.append(x.shape[0])
        return orig(model, params, x, *a)

    tr._batch_grads = spy
    try:
        tr.train(m, windows[:33], _cfg(epochs=1, val_fraction=0.1))
    finally:
        tr._batch_grads = orig
    assert seen == [20, 10]


def test_non_finite_objective_restores_best(windows):
    m = _model()
    best = {}

    def sabotage(record, state):
        if record.epoch == 1:
            best.update(state.best_params)
            for p in m.parameters():
                p.data[...] = np.nan

    with pytest.raises(NumericalError, match="restored parameters from epoch"):
        tr.train(m, windows, _cfg(epochs=4), on_epoch=sabotage)
    for k, v in m.state_dict().items():
        assert np.all(np.isfinite(v))
        np.testing.assert_array_equal(v, best[k])


def test_loss_trend_decreases(windows):
    m = _model(4)
    res = tr.train(m, windows, _cfg(epochs=50))
    neg = -np.array([r.train_elbo_per_step for r in res.trace])
    assert neg[5:15].mean() > neg[35:45].mean()


def test_trace_round_trip(tmp_path):
    recs = [tr.EpochRecord(0, 0.01, -3.25, -4.5, 0.125), tr.EpochRecord(1, 0.0199, -3.0, -4.25, 0.5)]
    tr.write_trace(tmp_path / "t.csv", recs)
    assert (tmp_path / "t.csv").read_text().splitlines()[0] == ",".join(tr.TRACE_FIELDS)
    assert tr.read_trace(tmp_path / "t.csv") == recs
