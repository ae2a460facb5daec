"""Neural building blocks: MLPs, gated transitions, emissions, the backward
recurrent encoder and the posterior combiner.

All of them evaluate on batches shaped ``(batch, features)`` and record onto
the active :class:`~d2pcca.diffmath.Tape`.
"""

from __future__ import annotations

from collections.abc import Iterator, Sequence

import numpy as np

from d2pcca import diffmath as dm
from d2pcca.diffmath import Tensor
from d2pcca.errors import ShapeError

VAR_FLOOR = 1e-5

ACTIVATIONS = {
    "relu": dm.relu,
    "tanh": dm.tanh,
    "sigmoid": dm.sigmoid,
    "softplus": dm.softplus,
    "identity": lambda x: x,
}


class Module:
    """Minimal parameter container; parameters are discovered from attributes in definition order."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, Tensor) and val.requires_grad:
                yield name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(name + ".")
            elif isinstance(val, (list, tuple)):
                for k, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{k}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        if missing:
            raise KeyError(f"missing parameters: {sorted(missing)[:5]}")
        for k, p in own.items():
            arr = np.asarray(state[k], dtype=np.float64)
            if arr.shape != p.shape:
                raise ShapeError(f"parameter {k}: expected shape {p.shape}, got {arr.shape}")
            p.data[...] = arr


def glorot(rng: np.random.Generator, n_in: int, n_out: int) -> np.ndarray:
    lim = np.sqrt(6.0 / (n_in + n_out))
    return rng.uniform(-lim, lim, size=(n_in, n_out))


def orthogonal(rng: np.random.Generator, n: int) -> np.ndarray:
    q, r = np.linalg.qr(rng.normal(size=(n, n)))
    return q * np.sign(np.diag(r))


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, bias: float = 0.0):
        self.weight = dm.parameter(glorot(rng, n_in, n_out))
        self.bias = dm.parameter(np.full(n_out, bias))

    @property
    def n_in(self) -> int:
        return self.weight.shape[0]

    @property
    def n_out(self) -> int:
        return self.weight.shape[1]

    def __call__(self, x) -> Tensor:
        return dm.add(dm.matmul(x, self.weight), self.bias)


class Mlp(Module):
    """``MLP(x, f1, ..., fn)``: ``n`` affine layers, each followed by its activation."""

    def __init__(self, widths: Sequence[int], activations: Sequence[str], rng: np.random.Generator):
        if len(widths) != len(activations) + 1:
            raise ShapeError("need one activation per layer")
        for a in activations:
            if a not in ACTIVATIONS:
                raise ValueError(f"unknown activation {a!r}")
        self.layers = [Linear(a, b, rng) for a, b in zip(widths[:-1], widths[1:])]
        self.activations = list(activations)

    @property
    def widths(self) -> list[int]:
        return [self.layers[0].n_in] + [layer.n_out for layer in self.layers]

    def __call__(self, x) -> Tensor:
        x = dm.constant(x)
        if x.shape[-1] != self.layers[0].n_in:
            raise ShapeError(f"mlp: input width {x.shape[-1]} != first layer width {self.layers[0].n_in}")
        for layer, act in zip(self.layers, self.activations):
            x = ACTIVATIONS[act](layer(x))
        return x


def transition_hidden(dim: int) -> int:
    return max(16, 4 * dim)


class TransitionNet(Module):
    """Gated transition for one latent chain.

    ``variant="gru"`` mixes the nonlinear proposal and a linear shortcut with
    ``g`` and ``1 - g``; ``variant="lstm"`` learns a second gate ``w`` for the
    shortcut.
    """

    def __init__(self, dim: int, rng: np.random.Generator, hidden: int | None = None, variant: str = "gru"):
        if variant not in ("gru", "lstm"):
            raise ValueError(f"unknown transition variant {variant!r}")
        hidden = hidden or transition_hidden(dim)
        self.dim = dim
        self.variant = variant
        self.proposal = Mlp([dim, hidden, dim], ["relu", "identity"], rng)
        self.gate = Mlp([dim, hidden, dim], ["relu", "sigmoid"], rng)
        self.gate.layers[-1].bias.data[:] = -1.0
        self.shortcut = Linear(dim, dim, rng)
        self.scale = Linear(dim, dim, rng)
        if variant == "lstm":
            self.keep = Mlp([dim, hidden, dim], ["relu", "sigmoid"], rng)

    def __call__(self, z_prev) -> tuple[Tensor, Tensor]:
        z_prev = dm.constant(z_prev)
        if z_prev.shape[-1] != self.dim:
            raise ShapeError(f"transition: input dim {z_prev.shape[-1]} != chain dim {self.dim}")
        h = self.proposal(z_prev)
        g = self.gate(z_prev)
        lin = self.shortcut(z_prev)
        if self.variant == "gru":
            mean = dm.add(dm.mul(g, h), dm.mul(dm.sub(1.0, g), lin))
        else:
            mean = dm.add(dm.mul(g, h), dm.mul(self.keep(z_prev), lin))
        var = dm.add(dm.softplus(self.scale(dm.relu(h))), VAR_FLOOR)
        return mean, var


class EmissionNet(Module):
    """Gaussian emission for one observation set from ``[z0, zj]``; the variance head is ``exp``."""

    def __init__(self, shared_dim: int, own_dim: int, obs_dim: int, rng: np.random.Generator, hidden: int = 32):
        self.shared_dim, self.own_dim, self.obs_dim = shared_dim, own_dim, obs_dim
        self.trunk = Mlp([shared_dim + own_dim, hidden, hidden], ["relu", "relu"], rng)
        self.mean_head = Linear(hidden, obs_dim, rng)
        self.logvar_head = Linear(hidden, obs_dim, rng)

    def __call__(self, z0, zj) -> tuple[Tensor, Tensor]:
        z0, zj = dm.constant(z0), dm.constant(zj)
        if z0.shape[-1] != self.shared_dim or zj.shape[-1] != self.own_dim:
            raise ShapeError(
                f"emission: got latent widths ({z0.shape[-1]}, {zj.shape[-1]}), "
                f"expected ({self.shared_dim}, {self.own_dim})"
            )
        h = self.trunk(dm.concat([z0, zj], axis=-1))
        mean = self.mean_head(h)
        var = dm.clip(dm.exp(self.logvar_head(h)), lo=VAR_FLOOR)
        return mean, var


class BackwardEncoder(Module):
    """Gated recurrent cell run from the last observation to the first."""

    def __init__(self, obs_dim: int, rng: np.random.Generator, hidden: int = 64):
        self.obs_dim, self.hidden = obs_dim, hidden
        self.w_input = dm.parameter(np.concatenate([glorot(rng, obs_dim, hidden) for _ in range(3)], axis=1))
        self.w_hidden = dm.parameter(np.concatenate([orthogonal(rng, hidden) for _ in range(3)], axis=1))
        self.bias = dm.parameter(np.zeros(3 * hidden))
        self.h0 = dm.parameter(np.zeros(hidden))

    def cell(self, x_t, h) -> Tensor:
        H = self.hidden
        xp = dm.add(dm.matmul(x_t, self.w_input), self.bias)
        hp = dm.matmul(h, self.w_hidden)
        reset = dm.sigmoid(dm.add(dm.take(xp, 0, H), dm.take(hp, 0, H)))
        update = dm.sigmoid(dm.add(dm.take(xp, H, 2 * H), dm.take(hp, H, 2 * H)))
        cand = dm.tanh(dm.add(dm.take(xp, 2 * H, 3 * H), dm.mul(reset, dm.take(hp, 2 * H, 3 * H))))
        return dm.add(dm.mul(dm.sub(1.0, update), cand), dm.mul(update, h))

    def __call__(self, x: np.ndarray) -> list[Tensor]:
        """Hidden states ``h_1 .. h_T`` for observations ``x`` of shape ``(batch, T, p)``."""
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 3 or x.shape[-1] != self.obs_dim or x.shape[1] < 1:
            raise ShapeError(f"encoder: expected (batch, T>=1, {self.obs_dim}), got {x.shape}")
        B, T, _ = x.shape
        h = dm.add(np.zeros((B, self.hidden)), self.h0)
        out: list[Tensor] = [None] * T  # type: ignore[list-item]
        for t in range(T - 1, -1, -1):
            h = self.cell(x[:, t], h)
            out[t] = h
        return out


def mix(a, b) -> Tensor:
    """Equal-weight average used to merge the latent summary with the encoder state."""
    return dm.add(dm.mul(a, 0.5), dm.mul(b, 0.5))


class CombinerNet(Module):
    def __init__(self, latent_dim: int, rng: np.random.Generator, hidden: int = 64):
        self.latent_dim, self.hidden = latent_dim, hidden
        self.summary = Mlp([latent_dim, hidden], ["tanh"], rng)
        self.mean_head = Linear(hidden, latent_dim, rng)
        self.var_head = Linear(hidden, latent_dim, rng)

    def merged(self, z_prev, h_r) -> Tensor:
        h_r = dm.constant(h_r)
        m = self.summary(z_prev)
        if m.shape[-1] != h_r.shape[-1]:
            raise ShapeError(f"combiner: summary width {m.shape[-1]} != encoder width {h_r.shape[-1]}")
        return mix(m, h_r)

    def __call__(self, z_prev, h_r) -> tuple[Tensor, Tensor]:
        h = self.merged(z_prev, h_r)
        return self.mean_head(h), dm.add(dm.softplus(self.var_head(h)), VAR_FLOOR)
