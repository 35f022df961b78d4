"""Run configuration: hyper-parameter defaults, TOML loading, validation.

Defaults mirror the published hyper-parameter table; desk-scale runs
override dimensions downward via config files. Unknown keys are rejected
so a typo cannot silently fall back to a default.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Optional

try:
    import tomllib  # py >= 3.11
except ModuleNotFoundError:  # pragma: no cover - depends on interpreter
    import tomli as tomllib

from .errors import ConfigError

VARIANTS = ("remap", "remap_m", "remap_b")
SCORERS = ("linear", "transe", "tucker")
DEFAULT_METAPATHS = ("DDx", "MC", "MBC", "MC,MC")


@dataclass
class DimsConfig:
    """Model dimensions (defaults: published table)."""

    d_l: int = 256        # max token sequence length
    d_hs: int = 768       # sentence-encoder hidden size
    d_ha: int = 100       # graph-encoder output size
    d_hi: int = 1000      # initial node-embedding size
    d_h: int = 100        # shared hidden size after text projection
    d_r: int = 100        # relation embedding size
    l_max: int = 12       # max sentences per bag
    n_heads: int = 4      # graph attention heads (d_ha must divide)


@dataclass
class TextTrainConfig:
    batch_size: int = 4
    eval_batch_size: int = 16
    grad_accum: int = 4
    lr: float = 1e-5
    weight_decay: float = 5e-5
    warmup_rate: float = 0.1
    epochs: int = 5


@dataclass
class GraphTrainConfig:
    batch_size: int = 512
    eval_batch_size: int = 512
    lr: float = 1e-3
    weight_decay: float = 1e-8
    step_gamma: float = 0.9
    epochs: int = 20
    neighbor_cap: int = 64


@dataclass
class TrainConfig:
    variant: str = "remap_b"
    scoring: str = "tucker"
    lambda_m: float = 1.0
    lambda_b: float = 1.0
    negative_ratio: float = 1.0
    cooc_threshold: int = 10
    unaligned_ratio: int = 4      # bag batches per graph-only batch
    unaligned_batch: int = 64
    cotrain_epochs: int = 3
    transe_gamma: float = 1.0
    transe_literal: bool = False
    include_na_bags: bool = True
    no_joint: bool = False
    no_ehr_init: bool = False
    no_unaligned: bool = False
    valid_fraction: float = 0.15
    test_fraction: float = 0.15


@dataclass
class PathsConfig:
    kg: Optional[str] = None
    bags: Optional[str] = None
    tokens: Optional[str] = None
    cooc: Optional[str] = None
    init_embeddings: Optional[str] = None
    out_dir: Optional[str] = None


@dataclass
class RunConfig:
    seed: int = 0
    metapaths: tuple[str, ...] = DEFAULT_METAPATHS
    dims: DimsConfig = field(default_factory=DimsConfig)
    text: TextTrainConfig = field(default_factory=TextTrainConfig)
    graph: GraphTrainConfig = field(default_factory=GraphTrainConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)

    def validate(self) -> "RunConfig":
        d, t = self.dims, self.train
        for name in ("d_l", "d_hs", "d_ha", "d_hi", "d_h", "d_r", "l_max",
                     "n_heads"):
            if getattr(d, name) < 1:
                raise ConfigError(f"dims.{name} must be a positive integer")
        if d.d_ha % d.n_heads:
            raise ConfigError(f"dims.n_heads={d.n_heads} must divide "
                              f"dims.d_ha={d.d_ha}")
        if t.variant not in VARIANTS:
            raise ConfigError(f"train.variant must be one of {VARIANTS}, "
                              f"got {t.variant!r}")
        if t.scoring not in SCORERS:
            raise ConfigError(f"train.scoring must be one of {SCORERS}, "
                              f"got {t.scoring!r}")
        if t.lambda_m < 0 or t.lambda_b < 0:
            raise ConfigError("loss weights must be >= 0")
        if t.negative_ratio < 0:
            raise ConfigError("train.negative_ratio must be >= 0")
        if t.cooc_threshold < 0:
            raise ConfigError("train.cooc_threshold must be >= 0")
        if t.unaligned_ratio < 1:
            raise ConfigError("train.unaligned_ratio must be >= 1")
        if not 0.0 <= t.valid_fraction < 1.0 \
                or not 0.0 <= t.test_fraction < 1.0 \
                or t.valid_fraction + t.test_fraction >= 1.0:
            raise ConfigError("split fractions must be in [0,1) and leave "
                              "room for a training split")
        if t.scoring in ("linear", "transe") and d.d_h != d.d_ha:
            raise ConfigError(f"scoring={t.scoring} shares relation vectors "
                              f"across modalities and needs dims.d_h == "
                              f"dims.d_ha (got {d.d_h} vs {d.d_ha})")
        if t.scoring == "transe" and d.d_r != d.d_h:
            raise ConfigError("scoring=transe needs dims.d_r == dims.d_h")
        for tc in (self.text, self.graph):
            if tc.batch_size < 1 or tc.epochs < 0 or tc.lr <= 0:
                raise ConfigError("batch sizes must be >= 1, epochs >= 0, "
                                  "learning rates > 0")
        if self.text.grad_accum < 1:
            raise ConfigError("text.grad_accum must be >= 1")
        if not 0.0 <= self.text.warmup_rate < 1.0:
            raise ConfigError("text.warmup_rate must be in [0, 1)")
        return self

    def as_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["metapaths"] = list(self.metapaths)
        return out


_SECTION_TYPES = {"dims": DimsConfig, "text": TextTrainConfig,
                  "graph": GraphTrainConfig, "train": TrainConfig,
                  "paths": PathsConfig}
_TOP_SCALARS = {"seed", "metapaths"}


def _fill_section(cls, data: dict, section: str):
    known = {f.name: f.type for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in data.items():
        if key not in known:
            raise ConfigError(f"unknown key {section}.{key}")
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"bad [{section}] section: {exc}") from None


def config_from_dict(data: dict) -> RunConfig:
    cfg = RunConfig()
    for key, value in data.items():
        if key in _SECTION_TYPES:
            if not isinstance(value, dict):
                raise ConfigError(f"[{key}] must be a table")
            setattr(cfg, key, _fill_section(_SECTION_TYPES[key], value, key))
        elif key == "seed":
            cfg.seed = int(value)
        elif key == "metapaths":
            if not isinstance(value, (list, tuple)) \
                    or not all(isinstance(v, str) for v in value):
                raise ConfigError("metapaths must be a list of strings")
            cfg.metapaths = tuple(value)
        else:
            raise ConfigError(f"unknown key {key}")
    return cfg.validate()


def load_config(path) -> RunConfig:
    try:
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return config_from_dict(data)


def default_config() -> RunConfig:
    return RunConfig().validate()


def desk_config(seed: int = 0) -> RunConfig:
    """Small dimensions sized for the synthetic world; training settings
    otherwise inherit the defaults."""
    cfg = RunConfig(seed=seed)
    cfg.dims = DimsConfig(d_l=64, d_hs=32, d_ha=32, d_hi=24, d_h=32, d_r=32,
                          l_max=4, n_heads=4)
    cfg.graph = GraphTrainConfig(batch_size=512, lr=1e-2, weight_decay=1e-8,
                                 step_gamma=0.9, epochs=20, neighbor_cap=16)
    cfg.text = TextTrainConfig(batch_size=4, grad_accum=4, lr=3e-3,
                               weight_decay=5e-5, warmup_rate=0.1, epochs=4,
                               eval_batch_size=16)
    return cfg.validate()
