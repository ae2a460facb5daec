"""Run configuration: one YAML file, every hyperparameter a named key.

Defaults reproduce the reference training protocol, so a dataset path is the only
thing a run needs.  :func:`dump_config` writes the effective configuration,
and loading that echo gives back an identical :class:`RunConfig`.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from d2pcca.errors import ConfigError
from d2pcca.training import AnnealSchedule, OptimizerConfig

VARIANTS = ("dpcca-em", "d2pcca", "d2pcca+kl", "d2pcca+iaf", "d2pcca+kl+iaf")
DEFAULT_VARIANT = "d2pcca+kl+iaf"


def uses_flow(variant: str) -> bool:
    return variant.endswith("+iaf")


def uses_anneal(variant: str) -> bool:
    return "+kl" in variant


@dataclass
class DataConfig:
    table: str | None = None
    manifest: str | None = None  # None: manifest.yaml next to the table
    window: int = 30
    step: int = 1
    split: int | None = None  # None: take it from the manifest

    def manifest_path(self) -> str | None:
        if self.manifest is not None:
            return self.manifest
        if self.table is None:
            return None
        return str(Path(self.table).with_name("manifest.yaml"))


@dataclass
class LayoutConfig:
    shared_dim: int = 1
    set_dim: int = 2


@dataclass
class NetConfig:
    transition: str = "gru"
    transition_hidden: int | None = None
    emission_hidden: int = 32
    encoder_hidden: int = 64


@dataclass
class FlowConfig:
    layers: int = 5
    hidden: int = 70


@dataclass
class EmConfig:
    max_iters: int = 100
    tol: float = 1e-6


@dataclass
class GeneratorConfig:
    kind: str = "nonlinear"  # "nonlinear" benchmark or "linear" multiset model
    rows: int = 503
    split: int = 453
    n_sets: int = 5
    obs_per_set: int = 10
    noise_scale: float = 0.5
    hetero: float = 1.0
    shared_mean: float = 0.3
    persistence: float = 0.8
    linear_noise: float = 0.3


@dataclass
class RunConfig:
    variant: str = DEFAULT_VARIANT
    seed: int = 0
    out: str = "runs/latest"
    epochs: int = 150
    batch_size: int = 20
    kl_estimator: str = "analytic"
    sample_count: int = 1
    val_fraction: float = 0.1
    data: DataConfig = field(default_factory=DataConfig)
    layout: LayoutConfig = field(default_factory=LayoutConfig)
    nets: NetConfig = field(default_factory=NetConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    anneal: AnnealSchedule | None = field(default_factory=AnnealSchedule)
    flow: FlowConfig | None = field(default_factory=FlowConfig)
    em: EmConfig = field(default_factory=EmConfig)
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)

    def __post_init__(self):
        validate(self)


def validate(cfg: RunConfig) -> None:
    if cfg.variant not in VARIANTS:
        raise ConfigError(f"unknown variant {cfg.variant!r}; choose one of {', '.join(VARIANTS)}")
    if uses_flow(cfg.variant) and cfg.flow is None:
        raise ConfigError(f"variant {cfg.variant} needs a 'flow' section")
    if not uses_flow(cfg.variant) and cfg.flow is not None:
        raise ConfigError(f"'flow' settings only apply to +iaf variants, not {cfg.variant}")
    if uses_anneal(cfg.variant) and cfg.anneal is None:
        raise ConfigError(f"variant {cfg.variant} needs an 'anneal' section")
    if not uses_anneal(cfg.variant) and cfg.anneal is not None:
        raise ConfigError(f"'anneal' settings only apply to +kl variants, not {cfg.variant}")
    if cfg.seed < 0 or cfg.seed >= 2**64:
        raise ConfigError(f"seed must be an unsigned 64-bit integer, got {cfg.seed}")
    if cfg.data.window < 1 or cfg.data.step < 1:
        raise ConfigError("data.window and data.step must be >= 1")
    if cfg.layout.shared_dim < 1 or cfg.layout.set_dim < 1:
        raise ConfigError("latent dimensions must be >= 1")
    if cfg.nets.transition not in ("gru", "lstm"):
        raise ConfigError(f"nets.transition must be 'gru' or 'lstm', got {cfg.nets.transition!r}")
    if cfg.flow is not None and (cfg.flow.layers < 1 or cfg.flow.hidden < 1):
        raise ConfigError("flow.layers and flow.hidden must be >= 1")
    if cfg.generator.kind not in ("linear", "nonlinear"):
        raise ConfigError(f"generator.kind must be 'linear' or 'nonlinear', got {cfg.generator.kind!r}")
    if cfg.epochs < 0 or cfg.batch_size < 1:
        raise ConfigError("epochs must be >= 0 and batch_size >= 1")


def for_variant(variant: str, **overrides) -> RunConfig:
    """Defaults for ``variant`` with the sections it does not use removed."""
    base = {"variant": variant}
    if not uses_flow(variant):
        base["flow"] = None
    if not uses_anneal(variant):
        base["anneal"] = None
    base.update(overrides)
    return RunConfig(**base)


_SECTIONS = {
    "data": DataConfig,
    "layout": LayoutConfig,
    "nets": NetConfig,
    "optimizer": OptimizerConfig,
    "anneal": AnnealSchedule,
    "flow": FlowConfig,
    "em": EmConfig,
    "generator": GeneratorConfig,
}


def _build(cls, raw, where: str):
    if not isinstance(raw, dict):
        raise ConfigError(f"{where}: expected a mapping, got {type(raw).__name__}")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - names)
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {', '.join(unknown)}")
    try:
        return cls(**raw)
    except TypeError as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def from_dict(raw: dict | None, variant: str | None = None) -> RunConfig:
    """Build a config; sections a variant does not use default to absent."""
    raw = dict(raw or {})
    if variant is not None:
        # an explicit override drops the sections the new variant has no use for,
        # so one file can drive every variant; a file naming its own variant stays strict
        raw["variant"] = variant
        if variant in VARIANTS and not uses_flow(variant):
            raw.pop("flow", None)
        if variant in VARIANTS and not uses_anneal(variant):
            raw.pop("anneal", None)
    v = raw.get("variant", DEFAULT_VARIANT)
    top = {f.name for f in dataclasses.fields(RunConfig)}
    unknown = sorted(set(raw) - top)
    if unknown:
        raise ConfigError(f"config: unknown key(s) {', '.join(unknown)}")
    kwargs = {}
    for key, value in raw.items():
        if key in _SECTIONS:
            kwargs[key] = None if value is None else _build(_SECTIONS[key], value, key)
        else:
            kwargs[key] = value
    if "flow" not in kwargs and isinstance(v, str) and not uses_flow(v):
        kwargs["flow"] = None
    if "anneal" not in kwargs and isinstance(v, str) and not uses_anneal(v):
        kwargs["anneal"] = None
    try:
        return RunConfig(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"config: {exc}") from exc


def load_config(path, variant: str | None = None) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: malformed YAML: {exc}") from exc
    return from_dict(raw, variant)


def to_dict(cfg: RunConfig) -> dict:
    return dataclasses.asdict(cfg)


def dump_config(cfg: RunConfig, path) -> None:
    Path(path).write_text(yaml.safe_dump(to_dict(cfg), sort_keys=False))
