"""Synthetic data sources so every experiment runs without external data.

* :func:`linear_panel` simulates a linear multiset model.
* :func:`nonlinear_panel` simulates the nonlinear benchmark: saturating
  transitions, ``tanh`` emissions and a shared factor that sets the noise
  scale of every set.
* :func:`embed_linear` builds a deep model whose networks reproduce a given
  linear-Gaussian model exactly, which lets the Kalman filter serve as an
  exact-likelihood reference for the deep objective.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from d2pcca import lds
from d2pcca.model import D2pccaModel, LatentLayout, NetWidths
from d2pcca.nets import VAR_FLOOR


@dataclass
class Panel:
    values: np.ndarray  # (rows, p)
    latents: np.ndarray  # (rows, n)
    layout: LatentLayout
    truth: dict  # generating parameters, JSON-friendly


def set_names(n_sets: int) -> tuple[str, ...]:
    return tuple(f"set{j + 1}" for j in range(n_sets))


def linear_panel(
    rows: int, layout: LatentLayout, rng: np.random.Generator, noise: float = 0.3
) -> tuple[Panel, lds.DpccaParams]:
    params = lds.random_params(layout.chain_dims, layout.obs_dims, rng, noise=noise)
    x, z = lds.simulate(params, rows, 1, rng)
    truth = {"kind": "linear", **{k: v.tolist() for k, v in params.to_arrays().items()}}
    return Panel(x[0], z[0], layout, truth), params


def nonlinear_panel(
    rows: int,
    rng: np.random.Generator,
    n_sets: int = 5,
    obs_per_set: int = 10,
    set_dim: int = 2,
    noise_scale: float = 0.5,
    hetero: float = 1.0,
    shared_mean: float = 0.3,
    persistence: float = 0.8,
) -> Panel:
    """Nonlinear multiset panel with a common volatility factor.

    The shared chain is a unit-variance AR(1), ``z0_t = r z0_{t-1} + sqrt(1 - r^2) e_t``.
    Private chains follow ``z_t = a z_{t-1} + b sin(c z_{t-1}) + q e_t``.  Set
    ``j`` emits ``shared_mean * W_j tanh(z0) + B_j tanh(zj)`` plus noise with
    standard deviation ``noise_scale * exp(hetero * z0)``, so the sets share
    their volatility, which no linear-Gaussian model can express.
    """
    if not 0.0 <= persistence < 1.0:
        raise ValueError("persistence must lie in [0, 1)")
    layout = LatentLayout(1, (set_dim,) * n_sets, (obs_per_set,) * n_sets, set_names(n_sets))
    n = layout.total_dim
    k = n - 1
    a = rng.uniform(0.85, 0.97, size=k)
    b = rng.uniform(0.2, 0.5, size=k)
    c = rng.uniform(1.5, 3.0, size=k)
    q = rng.uniform(0.15, 0.3, size=k)
    W = [rng.normal(size=(obs_per_set, 1)) for _ in range(n_sets)]
    B = [rng.normal(size=(obs_per_set, set_dim)) for _ in range(n_sets)]
    off = layout.chain_offsets

    z = np.empty((rows, n))
    z[0] = rng.normal(size=n)
    innov = np.sqrt(1.0 - persistence**2)
    for t in range(1, rows):
        e = rng.normal(size=n)
        z[t, 0] = persistence * z[t - 1, 0] + innov * e[0]
        prev = z[t - 1, 1:]
        z[t, 1:] = a * prev + b * np.sin(c * prev) + q * e[1:]
    x = np.empty((rows, layout.obs_total))
    shared = np.tanh(z[:, :1])
    scale = noise_scale * np.exp(hetero * z[:, :1])
    for j in range(n_sets):
        own = np.tanh(z[:, off[j + 1]: off[j + 2]])
        mean = shared_mean * shared @ W[j].T + own @ B[j].T
        x[:, layout.obs_slice(j)] = mean + scale * rng.normal(size=(rows, obs_per_set))
    truth = {
        "kind": "nonlinear",
        "a": a.tolist(), "b": b.tolist(), "c": c.tolist(), "q": q.tolist(),
        "W": [w.tolist() for w in W], "B": [v.tolist() for v in B],
        "noise_scale": noise_scale, "hetero": hetero, "shared_mean": shared_mean,
        "persistence": persistence,
    }
    return Panel(x, z, layout, truth)


def _softplus_inv(v: float) -> float:
    return float(np.log(np.expm1(v)))


def embed_linear(
    layout: LatentLayout,
    rng: np.random.Generator,
    trans_var: float | np.ndarray = 0.3,
    obs_var: float | np.ndarray = 0.2,
    widths: NetWidths = NetWidths(),
) -> tuple[D2pccaModel, lds.DpccaParams]:
    """A deep model with linear-Gaussian transitions and emissions, plus its linear twin.

    Gates are shut exactly (``sigmoid(-1000) == 0``), variance heads are
    constant, and each emission trunk passes ``[s, -s]`` through its ReLUs so
    the mean head can recover any linear map of ``s = [z0, zj]``.  The
    inference networks keep their random initialization.
    """
    model = D2pccaModel(layout, rng, widths=widths)
    n = layout.total_dim
    dims = layout.chain_dims
    tv = np.broadcast_to(np.asarray(trans_var, dtype=float), (n,))
    ov = np.broadcast_to(np.asarray(obs_var, dtype=float), (layout.n_sets,))
    off = layout.chain_offsets

    A, V = [], []
    for i, net in enumerate(model.transitions):
        k = dims[i]
        q, _ = np.linalg.qr(rng.normal(size=(k, k)))
        Ai = q @ np.diag(rng.uniform(0.5, 0.9, size=k)) @ q.T
        net.gate.layers[-1].weight.data[:] = 0.0
        net.gate.layers[-1].bias.data[:] = -1000.0
        net.shortcut.weight.data[:] = Ai.T
        net.shortcut.bias.data[:] = 0.0
        net.scale.weight.data[:] = 0.0
        net.scale.bias.data[:] = [_softplus_inv(v - VAR_FLOOR) for v in tv[off[i]: off[i + 1]]]
        A.append(Ai)
    model.z0.data[:] = rng.normal(scale=0.5, size=n)

    W, B, sigma2 = [], [], []
    for j, net in enumerate(model.emissions):
        k = layout.shared_dim + layout.set_dims[j]
        H = net.trunk.layers[0].n_out
        if H < 2 * k:
            raise ValueError(f"emission hidden width {H} too small to embed a linear map of dim {k}")
        L = rng.normal(size=(layout.obs_dims[j], k))
        first, second = net.trunk.layers
        first.weight.data[:] = 0.0
        first.weight.data[:, :k] = np.eye(k)
        first.weight.data[:, k: 2 * k] = -np.eye(k)
        first.bias.data[:] = 0.0
        second.weight.data[:] = 0.0
        second.weight.data[: 2 * k, : 2 * k] = np.eye(2 * k)
        second.bias.data[:] = 0.0
        net.mean_head.weight.data[:] = 0.0
        net.mean_head.weight.data[:k] = L.T
        net.mean_head.weight.data[k: 2 * k] = -L.T
        net.mean_head.bias.data[:] = 0.0
        net.logvar_head.weight.data[:] = 0.0
        net.logvar_head.bias.data[:] = np.log(ov[j])
        W.append(L[:, : layout.shared_dim].copy())
        B.append(L[:, layout.shared_dim:].copy())

    # read the realized variances back from the networks so both models agree to roundoff
    _, pv = model.prior_step(model.z0.data[None])
    pv = pv.data[0]
    for j, (_, ev) in enumerate(model.emit_step(np.zeros((1, n)))):
        sigma2.append(float(ev.data[0, 0]))
    V = [np.diag(pv[off[i]: off[i + 1]]) for i in range(len(dims))]
    mu1 = [A[i] @ model.z0.data[off[i]: off[i + 1]] for i in range(len(dims))]
    params = lds.DpccaParams(A, V, W, B, np.array(sigma2), mu1, [v.copy() for v in V])
    return model, params


BENCHMARK_ROWS = 503
BENCHMARK_SPLIT = 453
BENCHMARK_SEED = 2024


def benchmark_panel(seed: int = BENCHMARK_SEED, rows: int = BENCHMARK_ROWS) -> Panel:
    """The shipped nonlinear benchmark: 5 sets of 10 coordinates, 453 training rows and 50 test rows."""
    return nonlinear_panel(rows, np.random.default_rng(seed))
