"""Optimization of the (annealed, optionally flow-augmented) ELBO.

The objective per mini-batch is the mean per-sequence ELBO with the KL part
weighted by ``beta``.  Gradients go through a global-norm clip and Adam; the
weight decay is applied as a separate shrinkage of the parameters.
"""

from __future__ import annotations

import csv
import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from d2pcca import diffmath as dm
from d2pcca.errors import ConfigError, NumericalError

log = logging.getLogger(__name__)

WORKERS_ENV = "D2PCCA_WORKERS"
DECAY_MODES = ("decoupled", "l2", "none")


@dataclass
class OptimizerConfig:
    lr: float = 3e-4
    beta1: float = 0.96
    beta2: float = 0.999
    clip_norm: float = 10.0
    weight_decay: float = 2.0
    eps: float = 1e-8
    # "decoupled": p <- p (1 - lr wd) after the Adam step; "l2": wd p added to the gradient
    decay_mode: str = "decoupled"

    def __post_init__(self):
        if not self.lr > 0:
            raise ConfigError(f"learning rate must be > 0, got {self.lr}")
        for name in ("beta1", "beta2"):
            b = getattr(self, name)
            if not 0.0 < b < 1.0:
                raise ConfigError(f"{name} must lie in (0, 1), got {b}")
        if not self.clip_norm > 0:
            raise ConfigError(f"clip norm must be > 0, got {self.clip_norm}")
        if self.weight_decay < 0 or self.eps <= 0:
            raise ConfigError("weight decay must be >= 0 and eps > 0")
        if self.decay_mode not in DECAY_MODES:
            raise ConfigError(f"decay_mode must be one of {DECAY_MODES}, got {self.decay_mode!r}")


@dataclass
class AnnealSchedule:
    initial: float = 0.01
    final: float = 1.0
    ramp_epochs: int = 100

    def __post_init__(self):
        if not 0.0 <= self.initial <= self.final:
            raise ConfigError("anneal schedule needs 0 <= initial <= final")
        if self.ramp_epochs < 0:
            raise ConfigError("ramp_epochs must be >= 0")


def kl_weight(schedule: AnnealSchedule | None, epoch: int) -> float:
    """KL weight for a 0-based epoch; no schedule means a constant 1."""
    if epoch < 0:
        raise ValueError(f"epoch must be >= 0, got {epoch}")
    if schedule is None:
        return 1.0
    if schedule.ramp_epochs == 0 or epoch >= schedule.ramp_epochs:
        return float(schedule.final)
    frac = epoch / schedule.ramp_epochs
    return schedule.initial + (schedule.final - schedule.initial) * frac


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    step: int
    m: list[np.ndarray]
    v: list[np.ndarray]

    @classmethod
    def zeros_like(cls, params) -> AdamState:
        return cls(0, [np.zeros_like(p.data) for p in params], [np.zeros_like(p.data) for p in params])


def global_norm(grads) -> float:
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads)))


def clipped_adam_step(params, grads, state: AdamState, cfg: OptimizerConfig, names=None) -> float:
    """One in-place update; returns the gradient norm before clipping."""
    names = names or [f"param[{k}]" for k in range(len(params))]
    for name, g in zip(names, grads):
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient for parameter {name}")
    norm = global_norm(grads)
    scale = cfg.clip_norm / norm if norm > cfg.clip_norm else None
    state.step += 1
    t = state.step
    c1 = 1.0 - cfg.beta1**t
    c2 = 1.0 - cfg.beta2**t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if scale is not None:
            g = g * scale
        if cfg.decay_mode == "l2" and cfg.weight_decay:
            g = g + cfg.weight_decay * p.data
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * g * g
        if cfg.decay_mode == "decoupled" and cfg.weight_decay:
            p.data *= 1.0 - cfg.lr * cfg.weight_decay
        p.data -= cfg.lr * (m / c1) / (np.sqrt(v / c2) + cfg.eps)
    return norm


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainConfig:
    epochs: int = 150
    batch_size: int = 20
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    anneal: AnnealSchedule | None = None  # None: plain ELBO, beta = 1 throughout
    kl_estimator: str = "analytic"
    sample_count: int = 1
    val_fraction: float = 0.1
    seed: int = 0
    workers: int | None = None  # None: read D2PCCA_WORKERS, default 1

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.sample_count < 1:
            raise ConfigError("epochs >= 0, batch_size >= 1 and sample_count >= 1 are required")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ConfigError(f"val_fraction must lie in [0, 1), got {self.val_fraction}")
        if self.kl_estimator not in ("analytic", "sampled"):
            raise ConfigError(f"unknown KL estimator {self.kl_estimator!r}")


@dataclass
class EpochRecord:
    epoch: int
    beta: float
    train_elbo_per_step: float
    val_elbo_per_step: float
    wall_seconds: float


TRACE_FIELDS = ["epoch", "beta", "train_elbo_per_step", "val_elbo_per_step", "wall_seconds"]


@dataclass
class TrainState:
    """Everything needed to continue a run exactly where it stopped."""

    epoch: int
    adam: AdamState
    rng_state: dict
    best_val: float = -np.inf
    best_epoch: int = -1
    best_params: dict[str, np.ndarray] | None = None
    trace: list[EpochRecord] = field(default_factory=list)


@dataclass
class TrainResult:
    model: object
    trace: list[EpochRecord]
    state: TrainState


def split_validation(windows: np.ndarray, fraction: float) -> tuple[np.ndarray, np.ndarray]:
    """Hold out the last ``fraction`` of the windows (in time order)."""
    n_val = int(np.floor(fraction * len(windows)))
    if n_val == 0:
        return windows, windows[:0]
    return windows[:-n_val], windows[-n_val:]


def _worker_count(cfg: TrainConfig) -> int:
    if cfg.workers is not None:
        return max(1, int(cfg.workers))
    raw = os.environ.get(WORKERS_ENV, "1")
    try:
        return max(1, int(raw))
    except ValueError as exc:
        raise ConfigError(f"{WORKERS_ENV} must be an integer, got {raw!r}") from exc


def _flow(model):
    return getattr(model, "flow", None)


def batch_objective(model, x, beta, noise, cfg: TrainConfig):
    terms = model.elbo_terms(x, cfg.sample_count, None, noise, cfg.kl_estimator, flow=_flow(model))
    return terms


def _grads(model, params, x, beta, noise, cfg, weight=1.0):
    with dm.Tape() as tape:
        terms = batch_objective(model, x, beta, noise, cfg)
        loss = dm.mul(terms.mean(beta), -weight)
    grads = tape.backward(loss, params)
    return grads, float(terms.per_sequence().data.sum())


def _batch_grads(model, params, x, beta, noise, cfg, pool):
    """Gradient of the negative mean ELBO; chunks of the batch may run on worker threads."""
    B = x.shape[0]
    if pool is None or B < 2:
        return _grads(model, params, x, beta, noise, cfg)
    n = min(pool._max_workers, B)
    cuts = np.linspace(0, B, n + 1).astype(int)
    jobs = []
    for a, b in zip(cuts[:-1], cuts[1:]):
        # the noise for replicated samples is laid out sample-major: rows s * B + i
        idx = np.concatenate([s * B + np.arange(a, b) for s in range(cfg.sample_count)])
        jobs.append(pool.submit(_grads, model, params, x[a:b], beta, noise[:, idx], cfg, (b - a) / B))
    grads, total = None, 0.0
    for job in jobs:  # reduce in a fixed order
        g, s = job.result()
        total += s
        grads = g if grads is None else [u + w for u, w in zip(grads, g)]
    return grads, total


def evaluate_elbo(model, windows: np.ndarray, rng: np.random.Generator, cfg: TrainConfig, batch: int = 64) -> float:
    """Unweighted ELBO per time step averaged over windows."""
    if len(windows) == 0:
        return float("nan")
    T = windows.shape[1]
    total = 0.0
    for start in range(0, len(windows), batch):
        x = windows[start: start + batch]
        terms = model.elbo_terms(x, cfg.sample_count, rng, None, cfg.kl_estimator, flow=_flow(model))
        total += float(terms.per_sequence().data.sum()) / cfg.sample_count
    return total / (len(windows) * T)


def new_state(model, cfg: TrainConfig) -> TrainState:
    rng = np.random.default_rng(cfg.seed)
    return TrainState(0, AdamState.zeros_like(model.parameters()), rng.bit_generator.state)


def train(model, windows: np.ndarray, cfg: TrainConfig, state: TrainState | None = None, on_epoch=None) -> TrainResult:
    """Maximize the ELBO over ``windows`` of shape ``(N, T, p)``.

    The last ``val_fraction`` of the windows is held out for best-checkpoint
    selection.  ``state`` resumes a previous run; ``on_epoch(record, state)``
    is called after every epoch (used for checkpointing).  If the objective
    turns non-finite, the best parameters seen so far are restored and a
    :class:`NumericalError` is raised.
    """
    windows = np.asarray(windows, dtype=np.float64)
    if windows.ndim != 3 or len(windows) == 0:
        raise ValueError(f"windows must be a non-empty (N, T, p) array, got shape {windows.shape}")
    train_w, val_w = split_validation(windows, cfg.val_fraction)
    named = list(model.named_parameters())
    names = [n for n, _ in named]
    params = [p for _, p in named]
    state = state or new_state(model, cfg)
    if len(state.adam.m) != len(params):
        raise ConfigError("optimizer state does not match the model parameters")
    rng = np.random.default_rng()
    rng.bit_generator.state = state.rng_state
    n_workers = _worker_count(cfg)
    pool = ThreadPoolExecutor(n_workers) if n_workers > 1 else None
    T, n = windows.shape[1], model.layout.total_dim
    log.info("training %d windows (%d held out) for epochs %d..%d", len(train_w), len(val_w), state.epoch, cfg.epochs - 1)
    try:
        while state.epoch < cfg.epochs:
            epoch = state.epoch
            t0 = time.perf_counter()
            beta = kl_weight(cfg.anneal, epoch)
            order = rng.permutation(len(train_w))
            elbo_sum = 0.0
            for start in range(0, len(order), cfg.batch_size):
                x = train_w[order[start: start + cfg.batch_size]]
                noise = rng.standard_normal((T, x.shape[0] * cfg.sample_count, n))
                try:
                    grads, total = _batch_grads(model, params, x, beta, noise, cfg, pool)
                    clipped_adam_step(params, grads, state.adam, cfg.optimizer, names)
                except NumericalError as exc:
                    _restore_best(model, state)
                    raise NumericalError(f"epoch {epoch}: {exc}; restored parameters from epoch {state.best_epoch}") from exc
                elbo_sum += total / cfg.sample_count
            train_elbo = elbo_sum / (len(train_w) * T)
            eval_rng = np.random.default_rng([cfg.seed, epoch, 1])
            held = val_w if len(val_w) else train_w
            try:
                val_elbo = evaluate_elbo(model, held, eval_rng, cfg)
            except NumericalError as exc:
                _restore_best(model, state)
                raise NumericalError(f"epoch {epoch} validation: {exc}; restored parameters from epoch {state.best_epoch}") from exc
            if not np.isfinite(train_elbo) or not np.isfinite(val_elbo):
                _restore_best(model, state)
                raise NumericalError(f"non-finite ELBO at epoch {epoch}; restored parameters from epoch {state.best_epoch}")
            if val_elbo > state.best_val:
                state.best_val, state.best_epoch = val_elbo, epoch
                state.best_params = model.state_dict()
            record = EpochRecord(epoch, beta, train_elbo, val_elbo, time.perf_counter() - t0)
            state.trace.append(record)
            state.epoch += 1
            state.rng_state = rng.bit_generator.state
            log.info(
                "epoch %d beta %.3f train %.4f val %.4f (%.1fs)",
                epoch, beta, train_elbo, val_elbo, record.wall_seconds,
            )
            if on_epoch is not None:
                on_epoch(record, state)
    finally:
        if pool is not None:
            pool.shutdown()
    return TrainResult(model, state.trace, state)


def _restore_best(model, state: TrainState) -> None:
    if state.best_params is not None:
        model.load_state_dict(state.best_params)


def write_trace(path, records) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=TRACE_FIELDS)
        w.writeheader()
        for r in records:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in asdict(r).items()})


def read_trace(path) -> list[EpochRecord]:
    with open(path, newline="") as fh:
        return [
            EpochRecord(int(row["epoch"]), float(row["beta"]), float(row["train_elbo_per_step"]),
                        float(row["val_elbo_per_step"]), float(row["wall_seconds"]))
            for row in csv.DictReader(fh)
        ]
