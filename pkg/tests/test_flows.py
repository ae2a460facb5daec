import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from d2pcca import diffmath as dm
from d2pcca import lds
from d2pcca.errors import ShapeError
from d2pcca.flows import AffineArFlow, FlowStack, attach_flow, flow_elbo, made_masks
from d2pcca.model import D2pccaModel, LatentLayout, NetWidths
from d2pcca.synthetic import embed_linear

from oracles import central_diff_jacobian


def _randomize(stack, rng, scale=0.3):
    for layer in stack.layers if isinstance(stack, FlowStack) else [stack]:
        for p in (layer.w_shift, layer.w_scale, layer.b_shift, layer.b_scale, layer.b_in):
            p.data[:] = rng.normal(scale=scale, size=p.shape)


def test_fresh_flow_is_identity(rng):
    stack = FlowStack(4, 5, rng)
    u = rng.normal(size=(6, 4))
    z, ld = stack.forward(u)
    np.testing.assert_array_equal(z.data, u)
    np.testing.assert_array_equal(ld.data, 0.0)


def test_constant_scale_log_det(rng):
    layer = AffineArFlow(3, rng)
    layer.b_scale.data[:] = np.log(2.0)
    u = rng.normal(size=(5, 3))
    z, ld = layer.forward(u)
    np.testing.assert_allclose(z.data, 2 * u, atol=1e-15)
    np.testing.assert_allclose(ld.data, 3 * np.log(2.0), atol=1e-12)


@pytest.mark.parametrize("n_layers", [1, 3, 5])
def test_log_det_matches_numerical_jacobian(n_layers, rng):
    stack = FlowStack(4, n_layers, rng, hidden=12)
    _randomize(stack, rng)
    for _ in range(3):
        u = rng.normal(size=4)
        _, ld = stack.forward(u[None])
        J = central_diff_jacobian(lambda v: stack.forward(v[None])[0].data[0], u)
        _, ref = np.linalg.slogdet(J)
        assert ld.data[0] == pytest.approx(ref, rel=1e-4, abs=1e-7)


def test_jacobian_triangular_in_order(rng):
    order = [2, 0, 3, 1]
    layer = AffineArFlow(4, rng, order=order, hidden=16)
    _randomize(layer, rng)
    u = rng.normal(size=4)
    J = central_diff_jacobian(lambda v: layer.forward(v[None])[0].data[0], u)
    P = J[np.ix_(order, order)]
    np.testing.assert_allclose(np.triu(P, 1), 0.0, atol=1e-9)


def test_masks_strictly_autoregressive():
    order = [1, 3, 0, 2]
    m_in, m_out = made_masks(order, 9)
    reach = (m_in @ m_out) > 0  # input i -> output k
    rank = {k: r for r, k in enumerate(order)}
    for i in range(4):
        for k in range(4):
            if reach[i, k]:
                assert rank[i] < rank[k]


def test_round_trip_many_points(rng):
    stack = FlowStack(5, 5, rng)
    _randomize(stack, rng, scale=0.2)
    u = rng.normal(size=(1000, 5))
    z, _ = stack.forward(u)
    np.testing.assert_allclose(stack.inverse(z.data), u, atol=1e-8)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 6), st.integers(1, 4), st.integers(0, 2**31 - 1))
def test_round_trip_property(dim, n_layers, seed):
    rng = np.random.default_rng(seed)
    stack = FlowStack(dim, n_layers, rng, hidden=10)
    _randomize(stack, rng, scale=0.3)
    u = rng.normal(size=(7, dim))
    z, _ = stack.forward(u)
    np.testing.assert_allclose(stack.inverse(z.data), u, atol=1e-8)


def test_composition_adds_log_dets(rng):
    stack = FlowStack(3, 3, rng, hidden=8)
    _randomize(stack, rng)
    u = rng.normal(size=(4, 3))
    total = np.zeros(4)
    v = u
    for layer in stack.layers:
        v, ld = layer.forward(v)
        total += ld.data
    z, ld = stack.forward(u)
    np.testing.assert_array_equal(z.data, v.data)
    np.testing.assert_allclose(ld.data, total, atol=1e-12)


def test_log_scale_clamped(rng):
    layer = AffineArFlow(2, rng)
    layer.b_scale.data[:] = 50.0
    _, ld = layer.forward(np.zeros((1, 2)))
    assert ld.data[0] == pytest.approx(14.0)


def test_order_must_be_permutation(rng):
    with pytest.raises(ValueError):
        AffineArFlow(3, rng, order=[0, 0, 1])
    with pytest.raises(ShapeError):
        AffineArFlow(3, rng).forward(np.zeros((1, 4)))


def test_flow_gradient(rng):
    stack = FlowStack(3, 2, rng, hidden=6)
    _randomize(stack, rng)
    u = rng.normal(size=(4, 3))
    err = dm.grad_check(lambda: dm.sum(dm.add(dm.sum(stack.forward(u)[0]), stack.forward(u)[1])), stack.parameters())
    assert err < 1e-6


@pytest.mark.parametrize("kl", ["analytic", "sampled"])
def test_identity_flow_elbo_equals_plain(kl, rng):
    model = D2pccaModel(LatentLayout(1, (2, 2), (3, 3)), 2)
    stack = attach_flow(model, rng=rng)
    x = rng.normal(size=(3, 6, 6))
    noise = rng.normal(size=(6, 3, 5))
    plain = model.elbo(x, noise=noise, kl=kl).per_sequence().data
    flowed = flow_elbo(model, stack, x, noise=noise, kl=kl).per_sequence().data
    np.testing.assert_allclose(flowed, plain, atol=1e-10)


def test_flow_estimators_agree_in_expectation(rng):
    model = D2pccaModel(LatentLayout(1, (1, 1), (2, 2)), 2)
    stack = attach_flow(model, n_layers=2, hidden=8, rng=rng)
    _randomize(stack, rng, scale=0.2)
    x = rng.normal(size=(1, 4, 4))
    a = flow_elbo(model, stack, x, sample_count=4000, rng=rng, kl="analytic").per_sequence().data
    b = flow_elbo(model, stack, x, sample_count=4000, rng=rng, kl="sampled").per_sequence().data
    se = np.sqrt(a.var() / a.size + b.var() / b.size)
    assert abs(a.mean() - b.mean()) < 3.5 * se


def test_flow_elbo_gradient(rng):
    widths = NetWidths(transition_hidden=4, emission_hidden=4, encoder_hidden=4)
    model = D2pccaModel(LatentLayout(1, (1, 1), (2, 2)), 3, widths=widths)
    stack = attach_flow(model, n_layers=2, hidden=6, rng=rng)
    _randomize(stack, rng, scale=0.2)
    for name, p in model.named_parameters():
        if name.endswith("bias") or name == "z0":
            p.data[:] += rng.normal(scale=0.1, size=p.shape)
    x = rng.normal(size=(2, 3, 4))
    noise = rng.normal(size=(3, 2, 3))
    for kl in ("analytic", "sampled"):
        err = dm.grad_check(lambda: flow_elbo(model, stack, x, noise=noise, kl=kl).mean(), model.parameters())
        assert err < 1e-6


def test_flow_elbo_below_exact_loglik(rng):
    model, params = embed_linear(LatentLayout(1, (1, 1), (2, 2)), rng)
    stack = attach_flow(model, n_layers=3, hidden=8, rng=rng)
    _randomize(stack, rng, scale=0.2)
    x, _ = lds.simulate(params, 6, 3, rng)
    exact = lds.kalman_filter(params, x).loglik
    per = flow_elbo(model, stack, x, sample_count=400, rng=rng).per_sequence().data.reshape(400, 3)
    assert np.all(per.mean(0) < exact + 3 * per.std(0) / 20)


def test_flow_dim_checked(rng):
    model = D2pccaModel(LatentLayout(1, (1,), (2,)), 0)
    with pytest.raises(ShapeError):
        flow_elbo(model, FlowStack(3, 1, rng), np.zeros((1, 2, 2)))


def test_change_of_variables_density(rng):
    """Pushing N(0, I) through a 1-d flow: histogram matches the transformed density."""
    layer = AffineArFlow(1, rng)
    layer.b_shift.data[:] = 0.7
    layer.b_scale.data[:] = np.log(1.5)
    z, _ = layer.forward(rng.normal(size=(200_000, 1)))
    assert z.data.mean() == pytest.approx(0.7, abs=4 * 1.5 / np.sqrt(200_000))
    assert z.data.std() == pytest.approx(1.5, rel=0.01)


def test_reconstruct_with_flow_requires_sampling(rng):
    model = D2pccaModel(LatentLayout(1, (1,), (2,)), 0)
    attach_flow(model, n_layers=1, hidden=4, rng=rng)
    x = rng.normal(size=(1, 3, 2))
    with pytest.raises(ValueError, match="sampled"):
        model.reconstruct(x)
    assert model.reconstruct(x, mode="sampled", rng=rng).mean.shape == (1, 3, 2)
