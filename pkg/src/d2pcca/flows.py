"""Affine autoregressive flows for the posterior and the flow-augmented ELBO."""

from __future__ import annotations

from collections.abc import Sequence

import numpy as np

from d2pcca import diffmath as dm
from d2pcca.diffmath import Tensor
from d2pcca.errors import ShapeError
from d2pcca.nets import Module, glorot

LOG_SCALE_BOUND = 7.0


def made_masks(order: Sequence[int], hidden: int) -> tuple[np.ndarray, np.ndarray]:
    """Input->hidden and hidden->output masks for a MADE conditioner.

    ``order`` lists coordinates in autoregressive order; output ``k`` may only
    see inputs strictly earlier than ``k`` in that order.
    """
    n = len(order)
    rank = np.empty(n, dtype=int)
    rank[np.asarray(order)] = np.arange(1, n + 1)
    if n == 1:
        hidden_deg = np.zeros(hidden, dtype=int)  # unconnected; outputs reduce to biases
    else:
        hidden_deg = np.arange(hidden) % (n - 1) + 1
    m_in = (rank[:, None] <= hidden_deg[None, :]).astype(np.float64)
    m_out = (hidden_deg[:, None] < rank[None, :]).astype(np.float64)
    if n == 1:
        m_in[:] = 0.0
        m_out[:] = 0.0
    return m_in, m_out


class AffineArFlow(Module):
    """``z_k = u_k * exp(s_k(u_<k)) + mu_k(u_<k)`` with a masked one-hidden-layer conditioner."""

    def __init__(self, dim: int, rng: np.random.Generator, order: Sequence[int] | None = None, hidden: int = 70):
        self.dim, self.hidden = dim, hidden
        self.order = list(range(dim)) if order is None else [int(k) for k in order]
        if sorted(self.order) != list(range(dim)):
            raise ValueError("order must be a permutation of the coordinates")
        m_in, m_out = made_masks(self.order, hidden)
        self.mask_in, self.mask_out = m_in, m_out
        self.w_in = dm.parameter(glorot(rng, dim, hidden) * m_in)
        self.b_in = dm.parameter(np.zeros(hidden))
        self.w_shift = dm.parameter(np.zeros((hidden, dim)))
        self.b_shift = dm.parameter(np.zeros(dim))
        self.w_scale = dm.parameter(np.zeros((hidden, dim)))
        self.b_scale = dm.parameter(np.zeros(dim))

    def conditioner(self, u) -> tuple[Tensor, Tensor]:
        """Shift and clamped log-scale for every coordinate."""
        h = dm.relu(dm.add(dm.matmul(u, dm.mul(self.w_in, self.mask_in)), self.b_in))
        shift = dm.add(dm.matmul(h, dm.mul(self.w_shift, self.mask_out)), self.b_shift)
        raw = dm.add(dm.matmul(h, dm.mul(self.w_scale, self.mask_out)), self.b_scale)
        return shift, dm.clip(raw, -LOG_SCALE_BOUND, LOG_SCALE_BOUND)

    def forward(self, u) -> tuple[Tensor, Tensor]:
        u = dm.constant(u)
        if u.shape[-1] != self.dim:
            raise ShapeError(f"flow: input dim {u.shape[-1]} != flow dim {self.dim}")
        shift, log_scale = self.conditioner(u)
        z = dm.add(dm.mul(u, dm.exp(log_scale)), shift)
        return z, dm.sum(log_scale, axis=-1)

    def inverse(self, z) -> np.ndarray:
        z = np.asarray(z.data if isinstance(z, Tensor) else z, dtype=np.float64)
        if z.shape[-1] != self.dim:
            raise ShapeError(f"flow: input dim {z.shape[-1]} != flow dim {self.dim}")
        u = np.zeros_like(z)
        for k in self.order:
            shift, log_scale = self.conditioner(u)
            u[..., k] = (z[..., k] - shift.data[..., k]) * np.exp(-log_scale.data[..., k])
        return u


class FlowStack(Module):
    def __init__(self, dim: int, n_layers: int, rng: np.random.Generator, hidden: int = 70):
        self.dim = dim
        order = list(range(dim))
        self.layers = []
        for _ in range(n_layers):
            self.layers.append(AffineArFlow(dim, rng, order, hidden))
            order = order[::-1]

    def forward(self, u) -> tuple[Tensor, Tensor]:
        z = dm.constant(u)
        total = None
        for layer in self.layers:
            z, ld = layer.forward(z)
            total = ld if total is None else dm.add(total, ld)
        if total is None:
            total = dm.Tensor(np.zeros(z.shape[:-1]))
        return z, total

    def inverse(self, z) -> np.ndarray:
        u = np.asarray(z.data if isinstance(z, Tensor) else z, dtype=np.float64)
        for layer in reversed(self.layers):
            u = layer.inverse(u)
        return u


def flow_forward(stack: FlowStack, u) -> tuple[Tensor, Tensor]:
    return stack.forward(u)


def flow_inverse(stack: FlowStack, z) -> np.ndarray:
    return stack.inverse(z)


def attach_flow(model, n_layers: int = 5, hidden: int = 70, rng: np.random.Generator | int = 0) -> FlowStack:
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    stack = FlowStack(model.layout.total_dim, n_layers, rng, hidden)
    model.flow = stack
    return stack


def flow_elbo(model, stack: FlowStack, x, sample_count: int = 1, rng=None, noise=None, kl: str = "sampled"):
    """ELBO with a flow posterior: ``z_t = f(u_t)`` with ``u_t`` from the combiner density.

    ``kl="sampled"`` scores ``log p(x|z) + log p(z|z_prev) - log q(u) + log|det J|``
    term by term.  ``kl="analytic"`` replaces the sampled base log ratio
    ``log q(u) - log p(u|z_prev)`` with its closed form, which has the same
    expectation.
    """
    if stack.dim != model.layout.total_dim:
        raise ShapeError(f"flow dim {stack.dim} != total latent dim {model.layout.total_dim}")
    return model.elbo_terms(x, sample_count, rng, noise, kl, flow=stack)
