"""The deep multiset model: generative networks, structured posterior, ELBO.

Latents are stacked as ``[z0, z1, ..., zD]``: a shared chain followed by one
private chain per observation set.  Each chain has its own transition network
and set ``j`` is emitted from ``(z0, zj)`` only.  For speed the per-chain and
per-set networks are packed into block-structured matrices on every call;
the structural zeros are exact, so the factorization holds bit-for-bit.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from d2pcca import diffmath as dm
from d2pcca.diffmath import Tensor
from d2pcca.errors import NumericalError, ShapeError
from d2pcca.nets import (
    VAR_FLOOR,
    BackwardEncoder,
    CombinerNet,
    EmissionNet,
    Module,
    TransitionNet,
)

LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass(frozen=True)
class LatentLayout:
    shared_dim: int
    set_dims: tuple[int, ...]
    obs_dims: tuple[int, ...]
    set_names: tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "set_dims", tuple(int(d) for d in self.set_dims))
        object.__setattr__(self, "obs_dims", tuple(int(d) for d in self.obs_dims))
        object.__setattr__(self, "set_names", tuple(self.set_names))
        if len(self.set_dims) != len(self.obs_dims) or not self.set_dims:
            raise ShapeError("need one private latent dim per observation set")
        if self.shared_dim < 1 or min(self.set_dims) < 1 or min(self.obs_dims) < 1:
            raise ShapeError("all latent and observation dims must be positive")
        if self.set_names and len(self.set_names) != len(self.obs_dims):
            raise ShapeError("one name per observation set")

    @classmethod
    def uniform(cls, n_sets: int, obs_dim: int, shared_dim: int = 1, set_dim: int = 2) -> LatentLayout:
        return cls(shared_dim, (set_dim,) * n_sets, (obs_dim,) * n_sets)

    @property
    def n_sets(self) -> int:
        return len(self.set_dims)

    @property
    def chain_dims(self) -> tuple[int, ...]:
        return (self.shared_dim, *self.set_dims)

    @property
    def total_dim(self) -> int:
        return self.shared_dim + sum(self.set_dims)

    @property
    def obs_total(self) -> int:
        return sum(self.obs_dims)

    @property
    def chain_offsets(self) -> tuple[int, ...]:
        return tuple(int(v) for v in np.cumsum((0, *self.chain_dims)))

    @property
    def obs_offsets(self) -> tuple[int, ...]:
        return tuple(int(v) for v in np.cumsum((0, *self.obs_dims)))

    def chain_slice(self, i: int) -> slice:
        o = self.chain_offsets
        return slice(o[i], o[i + 1])

    def obs_slice(self, j: int) -> slice:
        o = self.obs_offsets
        return slice(o[j], o[j + 1])

    def to_dict(self) -> dict:
        return {
            "shared_dim": self.shared_dim,
            "set_dims": list(self.set_dims),
            "obs_dims": list(self.obs_dims),
            "set_names": list(self.set_names),
        }

    @classmethod
    def from_dict(cls, d: dict) -> LatentLayout:
        return cls(d["shared_dim"], tuple(d["set_dims"]), tuple(d["obs_dims"]), tuple(d.get("set_names", ())))


@dataclass(frozen=True)
class NetWidths:
    transition_hidden: int | None = None  # None: max(16, 4 * chain dim)
    emission_hidden: int = 32
    encoder_hidden: int = 64


# ---------------------------------------------------------------------------
# densities


def gauss_logpdf(x, mean, var) -> Tensor:
    """Diagonal Gaussian log density summed over the last axis."""
    d = dm.sub(x, mean)
    quad = dm.div(dm.mul(d, d), var)
    return dm.mul(dm.sum(dm.add(dm.add(dm.log(var), quad), LOG_2PI), axis=-1), -0.5)


def gauss_kl(mq, vq, mp, vp) -> Tensor:
    """KL(N(mq, vq) || N(mp, vp)) for diagonal Gaussians, summed over the last axis."""
    d = dm.sub(mq, mp)
    ratio = dm.div(dm.add(vq, dm.mul(d, d)), vp)
    inner = dm.sub(dm.add(dm.sub(dm.log(vp), dm.log(vq)), ratio), 1.0)
    return dm.mul(dm.sum(inner, axis=-1), 0.5)


def _check_finite(value: Tensor, step: int, term: str) -> None:
    if not np.all(np.isfinite(value.data)):
        raise NumericalError(f"non-finite {term} term at step {step}")


# ---------------------------------------------------------------------------
# model


@dataclass
class PosteriorSample:
    """One rollout of the structured posterior for ``M = samples * batch`` sequences.

    ``z`` holds the latents (after the flow when one is attached); ``u`` the
    base Gaussian draws.  ``log_q`` is the base density of ``u`` per step and
    ``log_det`` the flow log-determinant per step (zeros without a flow).
    """

    z: np.ndarray  # (M, T, n)
    u: np.ndarray  # (M, T, n)
    means: np.ndarray  # (M, T, n)
    variances: np.ndarray  # (M, T, n)
    log_q: np.ndarray  # (M, T)
    log_det: np.ndarray  # (M, T)
    noise: np.ndarray  # (T, M, n)
    sample_count: int


@dataclass
class ElboTerms:
    """Per-sequence reconstruction and KL totals, each shaped ``(samples * batch,)``."""

    recon: Tensor
    kl: Tensor
    sample_count: int
    batch: int
    steps: int
    recon_steps: list[float] = field(default_factory=list)
    kl_steps: list[float] = field(default_factory=list)

    def per_sequence(self, beta: float | None = None) -> Tensor:
        if beta is None:
            return dm.sub(self.recon, self.kl)
        return dm.sub(self.recon, dm.mul(self.kl, beta))

    def total(self, beta: float | None = None) -> Tensor:
        """Summed over the batch, averaged over posterior samples."""
        return dm.mul(dm.sum(self.per_sequence(beta)), 1.0 / self.sample_count)

    def mean(self, beta: float | None = None) -> Tensor:
        """Average per-sequence ELBO."""
        return dm.mean(self.per_sequence(beta))

    @property
    def value(self) -> float:
        return float(self.mean().data)

    def per_step(self) -> float:
        return self.value / self.steps


class D2pccaModel(Module):
    def __init__(
        self,
        layout: LatentLayout,
        rng: np.random.Generator | int = 0,
        transition_variant: str = "gru",
        widths: NetWidths = NetWidths(),
    ):
        rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
        self.layout = layout
        self.widths = widths
        self.transition_variant = transition_variant
        d0 = layout.shared_dim
        self.transitions = [
            TransitionNet(k, rng, widths.transition_hidden, transition_variant) for k in layout.chain_dims
        ]
        self.emissions = [
            EmissionNet(d0, dj, pj, rng, widths.emission_hidden)
            for dj, pj in zip(layout.set_dims, layout.obs_dims)
        ]
        self.encoder = BackwardEncoder(layout.obs_total, rng, widths.encoder_hidden)
        self.combiner = CombinerNet(layout.total_dim, rng, widths.encoder_hidden)
        self.z0 = dm.parameter(np.zeros(layout.total_dim))
        self.flow = None

    # -- parameter groups ---------------------------------------------------

    def generative_parameters(self) -> list[Tensor]:
        out = [p for t in self.transitions for p in t.parameters()]
        out += [p for e in self.emissions for p in e.parameters()]
        return out + [self.z0]

    def inference_parameters(self) -> list[Tensor]:
        out = self.encoder.parameters() + self.combiner.parameters()
        if self.flow is not None:
            out += self.flow.parameters()
        return out

    # -- packed generative maps ---------------------------------------------

    def _pack_transitions(self):
        lay = self.layout
        n = lay.total_dim
        zo = lay.chain_offsets
        hid = [t.proposal.layers[0].n_out for t in self.transitions]
        ho = np.concatenate([[0], np.cumsum(hid)]).astype(int)
        H = int(ho[-1])
        ts = self.transitions

        def up(get):
            return dm.embed((n, H), [(get(t), zo[i], ho[i]) for i, t in enumerate(ts)])

        def down(get):
            return dm.embed((H, n), [(get(t), ho[i], zo[i]) for i, t in enumerate(ts)])

        def square(get):
            return dm.embed((n, n), [(get(t), zo[i], zo[i]) for i, t in enumerate(ts)])

        def bias(get):
            return dm.concat([get(t) for t in ts])

        packed = {
            "p1": (up(lambda t: t.proposal.layers[0].weight), bias(lambda t: t.proposal.layers[0].bias)),
            "p2": (down(lambda t: t.proposal.layers[1].weight), bias(lambda t: t.proposal.layers[1].bias)),
            "g1": (up(lambda t: t.gate.layers[0].weight), bias(lambda t: t.gate.layers[0].bias)),
            "g2": (down(lambda t: t.gate.layers[1].weight), bias(lambda t: t.gate.layers[1].bias)),
            "lin": (square(lambda t: t.shortcut.weight), bias(lambda t: t.shortcut.bias)),
            "scale": (square(lambda t: t.scale.weight), bias(lambda t: t.scale.bias)),
        }
        if self.transition_variant == "lstm":
            packed["k1"] = (up(lambda t: t.keep.layers[0].weight), bias(lambda t: t.keep.layers[0].bias))
            packed["k2"] = (down(lambda t: t.keep.layers[1].weight), bias(lambda t: t.keep.layers[1].bias))
        return packed

    def _pack_emissions(self):
        lay = self.layout
        n, p, d0 = lay.total_dim, lay.obs_total, lay.shared_dim
        zo, xo = lay.chain_offsets, lay.obs_offsets
        He = self.widths.emission_hidden
        D = lay.n_sets
        first = []
        for j, e in enumerate(self.emissions):
            w = e.trunk.layers[0].weight
            first.append((dm.take_rows(w, 0, d0), 0, j * He))
            first.append((dm.take_rows(w, d0, w.shape[0]), zo[j + 1], j * He))
        es = self.emissions
        return {
            "t1": (dm.embed((n, D * He), first), dm.concat([e.trunk.layers[0].bias for e in es])),
            "t2": (
                dm.embed((D * He, D * He), [(e.trunk.layers[1].weight, j * He, j * He) for j, e in enumerate(es)]),
                dm.concat([e.trunk.layers[1].bias for e in es]),
            ),
            "mean": (
                dm.embed((D * He, p), [(e.mean_head.weight, j * He, xo[j]) for j, e in enumerate(es)]),
                dm.concat([e.mean_head.bias for e in es]),
            ),
            "logvar": (
                dm.embed((D * He, p), [(e.logvar_head.weight, j * He, xo[j]) for j, e in enumerate(es)]),
                dm.concat([e.logvar_head.bias for e in es]),
            ),
        }

    @staticmethod
    def _affine(x, wb) -> Tensor:
        return dm.add(dm.matmul(x, wb[0]), wb[1])

    def _prior(self, packed, z_prev) -> tuple[Tensor, Tensor]:
        aff = self._affine
        h = aff(dm.relu(aff(z_prev, packed["p1"])), packed["p2"])
        g = dm.sigmoid(aff(dm.relu(aff(z_prev, packed["g1"])), packed["g2"]))
        lin = aff(z_prev, packed["lin"])
        if self.transition_variant == "gru":
            mean = dm.add(dm.mul(g, h), dm.mul(dm.sub(1.0, g), lin))
        else:
            w = dm.sigmoid(aff(dm.relu(aff(z_prev, packed["k1"])), packed["k2"]))
            mean = dm.add(dm.mul(g, h), dm.mul(w, lin))
        var = dm.add(dm.softplus(aff(dm.relu(h), packed["scale"])), VAR_FLOOR)
        return mean, var

    def _emit(self, packed, z) -> tuple[Tensor, Tensor]:
        aff = self._affine
        h = dm.relu(aff(dm.relu(aff(z, packed["t1"])), packed["t2"]))
        mean = aff(h, packed["mean"])
        var = dm.clip(dm.exp(aff(h, packed["logvar"])), lo=VAR_FLOOR)
        return mean, var

    def _check_latent(self, z) -> Tensor:
        z = dm.constant(z)
        if z.shape[-1] != self.layout.total_dim:
            raise ShapeError(f"latent width {z.shape[-1]} != total latent dim {self.layout.total_dim}")
        return z

    def prior_step(self, z_prev) -> tuple[Tensor, Tensor]:
        """Mean and variance of ``z_t`` given ``z_{t-1}``; chain blocks are independent."""
        return self._prior(self._pack_transitions(), self._check_latent(z_prev))

    def emit_step(self, z) -> list[tuple[Tensor, Tensor]]:
        """Per-set emission mean and variance; set ``j`` reads only ``(z0, zj)``."""
        mean, var = self._emit(self._pack_emissions(), self._check_latent(z))
        xo = self.layout.obs_offsets
        return [
            (dm.take(mean, xo[j], xo[j + 1]), dm.take(var, xo[j], xo[j + 1]))
            for j in range(self.layout.n_sets)
        ]

    def emission_logpdf(self, x, z) -> Tensor:
        """Joint log density of all sets, which factorizes as the sum over sets."""
        mean, var = self._emit(self._pack_emissions(), self._check_latent(z))
        return gauss_logpdf(x, mean, var)

    # -- sampling -----------------------------------------------------------

    def generate(self, T: int, count: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        """Ancestral samples ``(x, z)`` shaped ``(count, T, p)`` and ``(count, T, n)``."""
        if T < 1:
            raise ShapeError("T must be at least 1")
        lay = self.layout
        tp, ep = self._pack_transitions(), self._pack_emissions()
        z_prev = np.broadcast_to(self.z0.data, (count, lay.total_dim))
        xs = np.empty((count, T, lay.obs_total))
        zs = np.empty((count, T, lay.total_dim))
        for t in range(T):
            m, v = self._prior(tp, z_prev)
            z = m.data + np.sqrt(v.data) * rng.standard_normal((count, lay.total_dim))
            em, ev = self._emit(ep, z)
            xs[:, t] = em.data + np.sqrt(ev.data) * rng.standard_normal((count, lay.obs_total))
            zs[:, t] = z
            z_prev = z
        return xs, zs

    def _check_obs(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 2:
            x = x[None]
        if x.ndim != 3 or x.shape[-1] != self.layout.obs_total:
            raise ShapeError(f"observations must be (batch, T, {self.layout.obs_total}), got {x.shape}")
        return x

    def _noise(self, T, M, rng, noise):
        n = self.layout.total_dim
        if noise is None:
            rng = rng if rng is not None else np.random.default_rng()
            return rng.standard_normal((T, M, n))
        noise = np.asarray(noise, dtype=np.float64)
        if noise.shape != (T, M, n):
            raise ShapeError(f"noise must have shape {(T, M, n)}, got {noise.shape}")
        return noise

    def _rollout(self, x, sample_count, rng, noise, flow):
        """Yield per-step posterior quantities for the replicated batch."""
        B, T, _ = x.shape
        M = B * sample_count
        eps = self._noise(T, M, rng, noise)
        h = self.encoder(x)
        if sample_count > 1:
            h = [dm.concat([ht] * sample_count, axis=0) for ht in h]
        z_prev = dm.add(np.zeros((M, self.layout.total_dim)), self.z0)
        for t in range(T):
            qm, qv = self.combiner(z_prev, h[t])
            u = dm.add(qm, dm.mul(dm.sqrt(qv), eps[t]))
            if flow is None:
                z, log_det = u, None
            else:
                z, log_det = flow.forward(u)
            yield t, z_prev, u, z, qm, qv, log_det
            z_prev = z

    def infer_posterior(
        self,
        x,
        sample_count: int = 1,
        rng: np.random.Generator | None = None,
        noise=None,
    ) -> PosteriorSample:
        x = self._check_obs(x)
        B, T, _ = x.shape
        M = B * sample_count
        n = self.layout.total_dim
        eps = self._noise(T, M, rng, noise)
        out = {k: np.empty((M, T, n)) for k in ("z", "u", "means", "variances")}
        log_q, log_det = np.empty((M, T)), np.zeros((M, T))
        for t, _, u, z, qm, qv, ld in self._rollout(x, sample_count, None, eps, self.flow):
            out["z"][:, t], out["u"][:, t] = z.data, u.data
            out["means"][:, t], out["variances"][:, t] = qm.data, qv.data
            log_q[:, t] = gauss_logpdf(u, qm, qv).data
            if ld is not None:
                log_det[:, t] = ld.data
        return PosteriorSample(noise=eps, sample_count=sample_count, log_q=log_q, log_det=log_det, **out)

    # -- objective ----------------------------------------------------------

    def elbo_terms(
        self,
        x,
        sample_count: int = 1,
        rng: np.random.Generator | None = None,
        noise=None,
        kl: str = "analytic",
        flow=None,
    ) -> ElboTerms:
        """Reconstruction and KL totals per sequence.

        ``kl="analytic"`` uses the closed-form Gaussian KL at each step given the
        sampled previous latent; ``kl="sampled"`` uses the single-sample log
        ratio.  With ``flow`` the base draw ``u`` is pushed through the flow and
        the log-determinant enters the KL part.
        """
        if kl not in ("analytic", "sampled"):
            raise ValueError(f"unknown KL estimator {kl!r}")
        if sample_count < 1:
            raise ValueError("sample_count must be >= 1")
        x = self._check_obs(x)
        B, T, _ = x.shape
        xr = np.concatenate([x] * sample_count, axis=0) if sample_count > 1 else x
        tp, ep = self._pack_transitions(), self._pack_emissions()
        recon = kl_tot = None
        recon_steps, kl_steps = [], []
        for t, z_prev, u, z, qm, qv, log_det in self._rollout(x, sample_count, rng, noise, flow):
            pm, pv = self._prior(tp, z_prev)
            em, ev = self._emit(ep, z)
            r_t = gauss_logpdf(xr[:, t], em, ev)
            if kl == "analytic":
                k_t = gauss_kl(qm, qv, pm, pv)
                if flow is not None:
                    k_t = dm.sub(dm.add(k_t, dm.sub(gauss_logpdf(u, pm, pv), gauss_logpdf(z, pm, pv))), log_det)
            else:
                log_q = gauss_logpdf(u, qm, qv)
                if flow is not None:
                    log_q = dm.sub(log_q, log_det)
                k_t = dm.sub(log_q, gauss_logpdf(z, pm, pv))
            _check_finite(r_t, t + 1, "reconstruction")
            _check_finite(k_t, t + 1, "KL")
            recon = r_t if recon is None else dm.add(recon, r_t)
            kl_tot = k_t if kl_tot is None else dm.add(kl_tot, k_t)
            recon_steps.append(float(r_t.data.mean()))
            kl_steps.append(float(k_t.data.mean()))
        return ElboTerms(recon, kl_tot, sample_count, B, T, recon_steps, kl_steps)

    def elbo(self, x, sample_count: int = 1, rng=None, noise=None, kl: str = "analytic") -> ElboTerms:
        """Plain (flow-free) ELBO of a batch of sequences."""
        return self.elbo_terms(x, sample_count, rng, noise, kl, flow=None)

    # -- reconstruction -------------------------------------------------------

    def reconstruct(self, x, mode: str = "posterior-mean", rng: np.random.Generator | None = None):
        """Emission mean and variance along a posterior latent path.

        ``posterior-mean`` feeds each step's combiner mean to the next step
        (zero injected noise); ``sampled`` draws the latents.  A flow posterior
        has no closed-form mean, so only ``sampled`` is allowed with one.
        """
        if mode not in ("posterior-mean", "sampled"):
            raise ValueError(f"unknown reconstruction mode {mode!r}")
        if mode == "posterior-mean" and self.flow is not None:
            raise ValueError("posterior-mean reconstruction is unsupported with a flow posterior; use 'sampled'")
        x = self._check_obs(x)
        B, T, _ = x.shape
        noise = np.zeros((T, B, self.layout.total_dim)) if mode == "posterior-mean" else None
        post = self.infer_posterior(x, 1, rng=rng, noise=noise)
        ep = self._pack_emissions()
        mean, var = self._emit(ep, post.z.reshape(B * T, -1))
        p = self.layout.obs_total
        return Reconstruction(mean.data.reshape(B, T, p), var.data.reshape(B, T, p), post.z)


@dataclass
class Reconstruction:
    mean: np.ndarray  # (B, T, p)
    variance: np.ndarray  # (B, T, p)
    latents: np.ndarray  # (B, T, n)
