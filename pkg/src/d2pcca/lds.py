"""Linear dynamic PCCA: exact Kalman/RTS inference and structured EM.

The latent state stacks one shared chain and one private chain per
observation set, ``z = [z0, z1, ..., zD]``.  Set ``j`` is emitted from
``(z0, zj)`` with spherical noise.  Viewed as one linear dynamical system the
transition and its noise are block diagonal and the emission matrix is
``[W, B]`` with ``B`` block diagonal.

Observations may be one sequence ``(T, p)`` or a batch ``(N, T, p)``.  There
is no missing data, so every covariance in the filter and smoother is the
same for all sequences of a batch and is computed once.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

from d2pcca.errors import NumericalError, ShapeError

RIDGE = 1e-8
COND_LIMIT = 1e12
LOG_2PI = np.log(2.0 * np.pi)


def _sym(m: np.ndarray) -> np.ndarray:
    return 0.5 * (m + np.swapaxes(m, -1, -2))


def _offsets(dims) -> np.ndarray:
    return np.concatenate([[0], np.cumsum(dims)]).astype(int)


@dataclass
class DpccaParams:
    """Per-chain and per-set parameters of the linear model.

    ``A[i]``, ``V[i]``, ``mu1[i]``, ``P1[i]`` belong to chain ``i`` (0 is the
    shared chain).  ``W[j]``, ``B[j]``, ``sigma2[j]`` belong to observation set
    ``j`` (0-based here, so set ``j`` reads chains 0 and ``j + 1``).
    """

    A: list[np.ndarray]
    V: list[np.ndarray]
    W: list[np.ndarray]
    B: list[np.ndarray]
    sigma2: np.ndarray
    mu1: list[np.ndarray]
    P1: list[np.ndarray]

    def __post_init__(self):
        self.sigma2 = np.asarray(self.sigma2, dtype=np.float64)
        D = len(self.W)
        if len(self.A) != D + 1 or len(self.V) != D + 1 or len(self.B) != D:
            raise ShapeError(f"expected {D + 1} chains and {D} sets")
        if len(self.mu1) != D + 1 or len(self.P1) != D + 1 or self.sigma2.shape != (D,):
            raise ShapeError("initial-state or noise parameters do not match the number of sets")
        d0 = self.A[0].shape[0]
        for i, (a, v, m, p) in enumerate(zip(self.A, self.V, self.mu1, self.P1)):
            k = a.shape[0]
            if a.shape != (k, k) or v.shape != (k, k) or m.shape != (k,) or p.shape != (k, k):
                raise ShapeError(f"chain {i}: inconsistent parameter shapes")
        for j, (w, b) in enumerate(zip(self.W, self.B)):
            if w.shape[1] != d0 or b.shape != (w.shape[0], self.A[j + 1].shape[0]):
                raise ShapeError(
                    f"set {j}: W shape {w.shape} / B shape {b.shape} do not match chain dims"
                )

    @property
    def n_sets(self) -> int:
        return len(self.W)

    @property
    def latent_dims(self) -> tuple[int, ...]:
        return tuple(a.shape[0] for a in self.A)

    @property
    def obs_dims(self) -> tuple[int, ...]:
        return tuple(w.shape[0] for w in self.W)

    def copy(self) -> DpccaParams:
        cp = lambda xs: [np.array(x) for x in xs]  # noqa: E731
        return DpccaParams(
            cp(self.A), cp(self.V), cp(self.W), cp(self.B), self.sigma2.copy(), cp(self.mu1), cp(self.P1)
        )

    def to_arrays(self) -> dict[str, np.ndarray]:
        out = {"sigma2": self.sigma2}
        for name in ("A", "V", "mu1", "P1", "W", "B"):
            for k, arr in enumerate(getattr(self, name)):
                out[f"{name}.{k}"] = arr
        return out

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray]) -> DpccaParams:
        D = len(arrays["sigma2"])
        get = lambda name, n: [np.asarray(arrays[f"{name}.{k}"]) for k in range(n)]  # noqa: E731
        return cls(
            get("A", D + 1), get("V", D + 1), get("W", D), get("B", D),
            np.asarray(arrays["sigma2"]), get("mu1", D + 1), get("P1", D + 1),
        )


@dataclass
class LdsForm:
    A: np.ndarray
    V: np.ndarray
    C: np.ndarray
    R: np.ndarray
    mu1: np.ndarray
    P1: np.ndarray
    latent_dims: tuple[int, ...]
    obs_dims: tuple[int, ...]


def assemble(params: DpccaParams) -> LdsForm:
    ld, od = params.latent_dims, params.obs_dims
    zo, xo = _offsets(ld), _offsets(od)
    C = np.zeros((xo[-1], zo[-1]))
    for j in range(params.n_sets):
        rows = slice(xo[j], xo[j + 1])
        C[rows, : ld[0]] = params.W[j]
        C[rows, zo[j + 1]: zo[j + 2]] = params.B[j]
    R = np.diag(np.repeat(params.sigma2, od))
    return LdsForm(
        A=linalg.block_diag(*params.A),
        V=linalg.block_diag(*params.V),
        C=C,
        R=R,
        mu1=np.concatenate(params.mu1),
        P1=linalg.block_diag(*params.P1),
        latent_dims=ld,
        obs_dims=od,
    )


def disassemble(lds: LdsForm) -> DpccaParams:
    ld, od = lds.latent_dims, lds.obs_dims
    zo, xo = _offsets(ld), _offsets(od)
    blk = lambda m, i: m[zo[i]: zo[i + 1], zo[i]: zo[i + 1]].copy()  # noqa: E731
    D = len(od)
    return DpccaParams(
        A=[blk(lds.A, i) for i in range(D + 1)],
        V=[blk(lds.V, i) for i in range(D + 1)],
        W=[lds.C[xo[j]: xo[j + 1], : ld[0]].copy() for j in range(D)],
        B=[lds.C[xo[j]: xo[j + 1], zo[j + 1]: zo[j + 2]].copy() for j in range(D)],
        sigma2=np.array([lds.R[xo[j], xo[j]] for j in range(D)]),
        mu1=[lds.mu1[zo[i]: zo[i + 1]].copy() for i in range(D + 1)],
        P1=[blk(lds.P1, i) for i in range(D + 1)],
    )


def random_params(
    latent_dims, obs_dims, rng: np.random.Generator, noise: float = 0.3
) -> DpccaParams:
    """A random stable instance, handy for tests and simulation."""
    ld, od = tuple(latent_dims), tuple(obs_dims)
    if len(ld) != len(od) + 1:
        raise ShapeError("need one more latent chain than observation sets")
    A, V, P1 = [], [], []
    for k in ld:
        q, _ = np.linalg.qr(rng.normal(size=(k, k)))
        A.append(q @ np.diag(rng.uniform(0.5, 0.95, size=k)) @ q.T)
        L = rng.normal(scale=0.3, size=(k, k))
        V.append(L @ L.T + 0.2 * np.eye(k))
        L = rng.normal(scale=0.3, size=(k, k))
        P1.append(L @ L.T + 0.5 * np.eye(k))
    W = [rng.normal(size=(p, ld[0])) for p in od]
    B = [rng.normal(size=(p, ld[j + 1])) for j, p in enumerate(od)]
    sigma2 = rng.uniform(0.5, 1.5, size=len(od)) * noise
    mu1 = [rng.normal(scale=0.5, size=k) for k in ld]
    return DpccaParams(A, V, W, B, sigma2, mu1, P1)


def simulate(params: DpccaParams, T: int, count: int, rng: np.random.Generator):
    """Ancestral samples; returns ``(x, z)`` of shapes ``(count, T, p)`` and ``(count, T, n)``."""
    lds = assemble(params)
    n, p = lds.A.shape[0], lds.C.shape[0]
    Lv = np.linalg.cholesky(lds.V)
    L1 = np.linalg.cholesky(lds.P1)
    r = np.sqrt(np.diag(lds.R))
    z = np.empty((count, T, n))
    z[:, 0] = lds.mu1 + rng.normal(size=(count, n)) @ L1.T
    for t in range(1, T):
        z[:, t] = z[:, t - 1] @ lds.A.T + rng.normal(size=(count, n)) @ Lv.T
    x = z @ lds.C.T + rng.normal(size=(count, T, p)) * r
    return x, z


# ---------------------------------------------------------------------------
# inference


@dataclass
class FilterResult:
    means: np.ndarray  # (N, T, n) filtered
    covs: np.ndarray  # (T, n, n) filtered, shared across sequences
    pred_means: np.ndarray  # (N, T, n)
    pred_covs: np.ndarray  # (T, n, n)
    loglik: np.ndarray  # (N,)
    squeeze: bool = False

    @property
    def total_loglik(self) -> float:
        return float(self.loglik.sum())


def _as_batch(x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        return x[None], True
    if x.ndim != 3:
        raise ShapeError(f"observations must be (T, p) or (N, T, p), got {x.shape}")
    return x, False


def kalman_filter(params: DpccaParams, x) -> FilterResult:
    """Forward filtering and the exact log-likelihood of each sequence."""
    lds = assemble(params)
    X, squeeze = _as_batch(x)
    N, T, p = X.shape
    if T < 1:
        raise ShapeError("need at least one time step")
    if p != lds.C.shape[0]:
        raise ShapeError(f"observation dim {p} does not match model dim {lds.C.shape[0]}")
    if not np.all(np.isfinite(X)):
        raise NumericalError("kalman_filter: non-finite observation")
    n = lds.A.shape[0]
    A, C, R = lds.A, lds.C, lds.R
    eye = np.eye(n)

    means = np.empty((N, T, n))
    covs = np.empty((T, n, n))
    pmeans = np.empty((N, T, n))
    pcovs = np.empty((T, n, n))
    loglik = np.zeros(N)

    m_pred = np.broadcast_to(lds.mu1, (N, n)).copy()
    P_pred = lds.P1.copy()
    for t in range(T):
        pmeans[:, t] = m_pred
        pcovs[t] = P_pred
        S = _sym(C @ P_pred @ C.T + R)
        eig = np.linalg.eigvalsh(S)
        if eig[0] <= 0 or eig[-1] / eig[0] > COND_LIMIT:
            raise NumericalError(f"kalman_filter: innovation covariance ill-conditioned at step {t + 1}")
        cS = linalg.cho_factor(S, lower=True)
        K = linalg.cho_solve(cS, C @ P_pred).T  # P C^T S^-1
        e = X[:, t] - m_pred @ C.T
        Sinv_e = linalg.cho_solve(cS, e.T).T
        logdet = 2.0 * np.sum(np.log(np.diag(cS[0])))
        loglik += -0.5 * (p * LOG_2PI + logdet + np.sum(e * Sinv_e, axis=1))
        means[:, t] = m_pred + e @ K.T
        IKC = eye - K @ C
        covs[t] = _sym(IKC @ P_pred @ IKC.T + K @ R @ K.T)
        m_pred = means[:, t] @ A.T
        P_pred = _sym(A @ covs[t] @ A.T + lds.V)
    return FilterResult(means, covs, pmeans, pcovs, loglik, squeeze)


def log_likelihood(params: DpccaParams, x) -> float:
    """Total exact log-likelihood of one sequence or a batch of sequences."""
    return kalman_filter(params, x).total_loglik


@dataclass
class SmoothedMoments:
    """Posterior moments given all observations.

    ``covs[t]`` is Cov(z_t) and ``cross_covs[t - 1]`` is Cov(z_t, z_{t-1}); both
    are shared across sequences.
    """

    means: np.ndarray  # (N, T, n)
    covs: np.ndarray  # (T, n, n)
    cross_covs: np.ndarray  # (T - 1, n, n)
    squeeze: bool = False
    latent_dims: tuple[int, ...] = field(default=())
    obs_dims: tuple[int, ...] = field(default=())

    def second_moment(self) -> np.ndarray:
        """<z_t z_t^T>, shape (N, T, n, n)."""
        m = self.means
        out = self.covs[None] + m[..., :, None] * m[..., None, :]
        return out[0] if self.squeeze else out

    def cross_moment(self) -> np.ndarray:
        """<z_t z_{t-1}^T> for t >= 2, shape (N, T - 1, n, n)."""
        m = self.means
        out = self.cross_covs[None] + m[:, 1:, :, None] * m[:, :-1, None, :]
        return out[0] if self.squeeze else out

    def mean(self) -> np.ndarray:
        return self.means[0] if self.squeeze else self.means


def rts_smooth(params: DpccaParams, filtered: FilterResult) -> SmoothedMoments:
    lds = assemble(params)
    A = lds.A
    N, T, n = filtered.means.shape
    ms = filtered.means.copy()
    Ps = filtered.covs.copy()
    cross = np.empty((max(T - 1, 0), n, n))
    for t in range(T - 2, -1, -1):
        Pp = filtered.pred_covs[t + 1]
        ev = np.linalg.eigvalsh(Pp)
        if ev[0] <= 0 or ev[-1] / ev[0] > COND_LIMIT:
            raise NumericalError(f"rts_smooth: predicted covariance ill-conditioned at step {t + 2}")
        J = linalg.solve(Pp, A @ filtered.covs[t], assume_a="pos").T  # P_t A^T Pp^-1
        ms[:, t] = filtered.means[:, t] + (ms[:, t + 1] - filtered.pred_means[:, t + 1]) @ J.T
        Ps[t] = _sym(filtered.covs[t] + J @ (Ps[t + 1] - Pp) @ J.T)
        cross[t] = Ps[t + 1] @ J.T
    return SmoothedMoments(ms, Ps, cross, filtered.squeeze, lds.latent_dims, lds.obs_dims)


def smooth(params: DpccaParams, x) -> SmoothedMoments:
    return rts_smooth(params, kalman_filter(params, x))


# ---------------------------------------------------------------------------
# learning


@dataclass
class SufficientStats:
    """Moment sums over sequences and time that the M-step needs."""

    zz_all: np.ndarray  # sum_t <z_t z_t^T> over all t
    zz_next: np.ndarray  # sum_{t>=2} <z_t z_t^T>
    zz_prev: np.ndarray  # sum_{t>=2} <z_{t-1} z_{t-1}^T>
    z_lag: np.ndarray  # sum_{t>=2} <z_t z_{t-1}^T>
    xz: np.ndarray  # sum_t x_t <z_t>^T
    xx_diag: np.ndarray  # sum_t x_t * x_t
    z1: np.ndarray  # sum_n <z_1>
    zz1: np.ndarray  # sum_n <z_1 z_1^T>
    n_seq: int
    n_steps: int  # per sequence


def sufficient_stats(moments: SmoothedMoments, x) -> SufficientStats:
    X, _ = _as_batch(x)
    m = moments.means
    N, T, _ = m.shape
    if X.shape[:2] != (N, T):
        raise ShapeError("moments and data disagree on sequence count or length")
    mm = np.einsum("nti,ntj->tij", m, m)
    zz_t = N * moments.covs + mm  # (T, n, n)
    lag = N * moments.cross_covs + np.einsum("nti,ntj->tij", m[:, 1:], m[:, :-1])
    return SufficientStats(
        zz_all=zz_t.sum(0),
        zz_next=zz_t[1:].sum(0),
        zz_prev=zz_t[:-1].sum(0),
        z_lag=lag.sum(0),
        xz=np.einsum("nti,ntj->ij", X, m),
        xx_diag=np.einsum("nti,nti->i", X, X),
        z1=m[:, 0].sum(0),
        zz1=zz_t[0],
        n_seq=N,
        n_steps=T,
    )


def _ridge_solve(lhs: np.ndarray, gram: np.ndarray) -> np.ndarray:
    """``lhs @ inv(gram + ridge I)`` for a symmetric PSD ``gram``."""
    g = _sym(gram) + RIDGE * np.eye(gram.shape[0])
    try:
        return linalg.solve(g, lhs.T, assume_a="pos").T
    except linalg.LinAlgError as exc:
        raise NumericalError(
            f"M-step moment matrix is singular even after adding ridge {RIDGE:g}*I"
        ) from exc


def em_m_step(
    moments: SmoothedMoments, x, prev: DpccaParams | None = None
) -> DpccaParams:
    """Closed-form maximizer of the expected complete log-likelihood under the block structure.

    With a single time step there are no transitions to learn; ``A`` and ``V``
    are then copied from ``prev``.
    """
    st = sufficient_stats(moments, x)
    ld = moments.latent_dims or (prev.latent_dims if prev else ())
    od = moments.obs_dims or (prev.obs_dims if prev else ())
    if not ld or not od:
        raise ShapeError("em_m_step: latent/observation layout unknown; pass prev params")
    D = len(ld) - 1
    zo, xo = _offsets(ld), _offsets(od)
    N, T = st.n_seq, st.n_steps

    A, V = [], []
    for i in range(D + 1):
        s = slice(zo[i], zo[i + 1])
        if T < 2:
            if prev is None:
                raise ShapeError("em_m_step: single-step data needs prev params for A and V")
            A.append(prev.A[i].copy())
            V.append(prev.V[i].copy())
            continue
        Ai = _ridge_solve(st.z_lag[s, s], st.zz_prev[s, s])
        Vi = (st.zz_next[s, s] - Ai @ st.z_lag[s, s].T) / (N * (T - 1))
        A.append(Ai)
        V.append(_sym(Vi))

    W, B, sigma2 = [], [], np.empty(D)
    for j in range(D):
        rows = slice(xo[j], xo[j + 1])
        cols = np.r_[zo[0]: zo[1], zo[j + 1]: zo[j + 2]]
        xz = st.xz[rows][:, cols]
        L = _ridge_solve(xz, st.zz_all[np.ix_(cols, cols)])
        W.append(L[:, : ld[0]].copy())
        B.append(L[:, ld[0]:].copy())
        resid = st.xx_diag[rows].sum() - np.sum(L * xz)
        sigma2[j] = resid / (N * T * od[j])

    mu_full = st.z1 / N
    P_full = st.zz1 / N - np.outer(mu_full, mu_full)
    mu1 = [mu_full[zo[i]: zo[i + 1]].copy() for i in range(D + 1)]
    P1 = [
        _sym(P_full[zo[i]: zo[i + 1], zo[i]: zo[i + 1]]) + RIDGE * np.eye(ld[i])
        for i in range(D + 1)
    ]
    return DpccaParams(A, V, W, B, sigma2, mu1, P1)


def expected_complete_loglik(params: DpccaParams, moments: SmoothedMoments, x) -> float:
    """E[log p(x, z)] under the given posterior moments, constants included."""
    lds = assemble(params)
    st = sufficient_stats(moments, x)
    N, T = st.n_seq, st.n_steps
    n, p = lds.A.shape[0], lds.C.shape[0]

    def gauss_term(count, cov, second):
        # -1/2 [count (k log 2pi + log|cov|) + tr(cov^-1 second)]
        k = cov.shape[0]
        sign, logdet = np.linalg.slogdet(cov)
        return -0.5 * (count * (k * LOG_2PI + logdet) + np.trace(linalg.solve(cov, second, assume_a="pos")))

    mu = lds.mu1
    init_second = st.zz1 - np.outer(st.z1, mu) - np.outer(mu, st.z1) + N * np.outer(mu, mu)
    total = gauss_term(N, lds.P1, init_second)
    if T > 1:
        A = lds.A
        trans = st.zz_next - A @ st.z_lag.T - st.z_lag @ A.T + A @ st.zz_prev @ A.T
        total += gauss_term(N * (T - 1), lds.V, trans)
    C = lds.C
    Sxx_full_trace_only = np.diag(st.xx_diag)  # off-diagonals never needed: R is diagonal
    emit = Sxx_full_trace_only - C @ st.xz.T - st.xz @ C.T + C @ st.zz_all @ C.T
    r = np.diag(lds.R)
    total += -0.5 * (N * T * (p * LOG_2PI + np.sum(np.log(r))) + np.sum(np.diag(emit) / r))
    return float(total)


def _inv_sqrt(S: np.ndarray) -> np.ndarray:
    lam, U = np.linalg.eigh(S)
    lam = np.maximum(lam, 1e-12 * max(lam.max(), 1e-300))
    return (U / np.sqrt(lam)) @ U.T


def initial_params(x, latent_dims, obs_dims) -> DpccaParams:
    """Starting point from a generalized CCA of the sets.

    The shared factor is the leading principal direction of the per-set
    whitened data, so it starts out coupling the sets; private loadings are
    the leading eigenvectors of each set's residual covariance.  ``A = 0.9 I``
    and ``V = I``.  Starting each set from its own PCA instead tends to park
    EM on a plateau for hundreds of iterations.
    """
    X, _ = _as_batch(x)
    ld, od = tuple(latent_dims), tuple(obs_dims)
    xo = _offsets(od)
    flat = X.reshape(-1, X.shape[-1])
    flat = flat - flat.mean(0)
    N = flat.shape[0]
    blocks = [flat[:, xo[j]: xo[j + 1]] for j in range(len(od))]
    covs = [b.T @ b / N for b in blocks]
    white = np.concatenate([b @ _inv_sqrt(S) for b, S in zip(blocks, covs)], axis=1)
    _, U = np.linalg.eigh(white.T @ white / N)
    shared = white @ U[:, ::-1][:, : ld[0]]
    shared = shared / np.maximum(shared.std(0), 1e-12)
    W, B, sigma2 = [], [], []
    for j, (b, S) in enumerate(zip(blocks, covs)):
        Wj = b.T @ shared / N
        lam, V = np.linalg.eigh(S - Wj @ Wj.T)
        lam, V = lam[::-1].clip(min=0.0), V[:, ::-1]
        k = ld[j + 1]
        Bj = np.zeros((od[j], k))
        m = min(k, od[j])
        Bj[:, :m] = V[:, :m] * np.sqrt(lam[:m])
        rest = lam[k:]
        s2 = rest.mean() if rest.size else 0.0
        W.append(Wj)
        B.append(Bj)
        sigma2.append(max(s2, 1e-3 * max(np.trace(S) / od[j], 1e-12)))
    return DpccaParams(
        A=[0.9 * np.eye(k) for k in ld],
        V=[np.eye(k) for k in ld],
        W=W,
        B=B,
        sigma2=np.array(sigma2),
        mu1=[np.zeros(k) for k in ld],
        P1=[np.eye(k) for k in ld],
    )


MONOTONE_SLACK = 1e-9


def em_fit(
    x,
    latent_dims,
    obs_dims,
    max_iters: int = 100,
    tol: float = 1e-6,
    init: DpccaParams | None = None,
    callback=None,
) -> tuple[DpccaParams, list[float]]:
    """Run EM until ``max_iters`` or an improvement below ``tol``.

    The returned trace starts with the log-likelihood of the initial
    parameters and gains one entry per iteration.
    """
    params = init.copy() if init is not None else initial_params(x, latent_dims, obs_dims)
    filt = kalman_filter(params, x)
    trace = [filt.total_loglik]
    for it in range(max_iters):
        moments = rts_smooth(params, filt)
        params = em_m_step(moments, x, prev=params)
        filt = kalman_filter(params, x)
        ll = filt.total_loglik
        if ll < trace[-1] - MONOTONE_SLACK:
            raise NumericalError(
                f"EM log-likelihood decreased at iteration {it + 1}: {trace[-1]!r} -> {ll!r}"
            )
        trace.append(ll)
        if callback is not None:
            callback(it + 1, ll)
        if ll - trace[-2] < tol:
            break
    return params, trace
