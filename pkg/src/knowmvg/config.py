"""Run configuration: nested dataclasses loaded from / dumped to YAML."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    n_samples: int = 2000
    val_fraction: float = 0.1
    test_fraction: float = 0.1
    image_size: int = 128
    region_free_prob: float = 0.25  # reports that omit the region phrase


@dataclass
class ModelConfig:
    grid: int = 16  # z_enc is grid x grid x channels
    mask_size: int = 64
    channels: int = 64  # decoder width c
    d_model: int = 64  # latent token width d_m
    d_know: int = 64  # knowledge embedding width d
    heads: int = 4
    decoder_depth: int = 1
    encoder_depth: int = 2
    top_k: int = 4
    gcn_depth: int = 2
    pe_frequencies: int = 128
    pe_seed: int = 1234
    embedder_seed: int = 0
    max_tokens: int = 24
    share_head: bool = True
    score_weighted_prompts: bool = True


@dataclass
class TrainConfig:
    steps: int = 2000
    batch_size: int = 8
    lr: float = 3e-4
    weight_decay: float = 0.0
    warmup: int = 100
    eval_every: int = 250
    loss_weights: list = field(default_factory=lambda: [1.0, 1.0, 1.0])  # txt, l1, giou
    local_box_weight: float = 0.0
    freeze_backbone: bool = True


@dataclass
class Phase0Config:
    steps: int = 600
    batch_size: int = 8
    lr: float = 1e-3
    min_mask_iou: float = 0.5


@dataclass
class AblationConfig:
    kps_on: bool = True
    gla_on: bool = True


@dataclass
class PathsConfig:
    data_dir: str = "runs/data"
    out_dir: str = "runs/out"
    kg_file: str = ""


@dataclass
class RunConfig:
    seed: int = 0
    deterministic: bool = True
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    phase0: Phase0Config = field(default_factory=Phase0Config)
    ablation: AblationConfig = field(default_factory=AblationConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)

    def validate(self) -> "RunConfig":
        m, t = self.model, self.train
        positive = {
            "data.n_samples": self.data.n_samples,
            "data.image_size": self.data.image_size,
            "model.grid": m.grid,
            "model.mask_size": m.mask_size,
            "model.channels": m.channels,
            "model.d_model": m.d_model,
            "model.d_know": m.d_know,
            "model.heads": m.heads,
            "model.gcn_depth": m.gcn_depth,
            "model.pe_frequencies": m.pe_frequencies,
            "model.max_tokens": m.max_tokens,
            "train.batch_size": t.batch_size,
            "train.lr": t.lr,
            "phase0.batch_size": self.phase0.batch_size,
        }
        for name, value in positive.items():
            if value <= 0:
                raise ConfigError(f"{name} must be positive, got {value}")
        if m.top_k < 0 or t.steps < 0 or t.warmup < 0 or self.phase0.steps < 0:
            raise ConfigError("top_k, steps, warmup must be non-negative")
        if self.data.image_size % m.grid:
            raise ConfigError("data.image_size must be a multiple of model.grid")
        if m.channels % m.heads or m.d_model % m.heads:
            raise ConfigError("model.heads must divide channels and d_model")
        if m.mask_size % m.grid or (m.mask_size // m.grid) & (m.mask_size // m.grid - 1):
            raise ConfigError("model.mask_size must be grid times a power of two")
        if len(t.loss_weights) != 3:
            raise ConfigError("train.loss_weights needs exactly three entries (txt, l1, giou)")
        if not 0 <= self.data.val_fraction + self.data.test_fraction < 1:
            raise ConfigError("val + test fractions must be in [0, 1)")
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def dump(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)


def _build(cls, raw: Any, prefix: str):
    if not isinstance(raw, dict):
        raise ConfigError(f"{prefix or 'config'}: expected a mapping")
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(raw) - set(known)
    if unknown:
        raise ConfigError(f"unknown key(s) {sorted(unknown)} in {prefix or 'config'}")
    kwargs = {}
    defaults = cls()
    for name, value in raw.items():
        path = f"{prefix}.{name}" if prefix else name
        default = getattr(defaults, name)
        if dataclasses.is_dataclass(default):
            kwargs[name] = _build(type(default), value, path)
            continue
        if isinstance(default, bool):
            ok = isinstance(value, bool)
        elif isinstance(default, float):
            ok = isinstance(value, (int, float)) and not isinstance(value, bool)
            value = float(value) if ok else value
        elif isinstance(default, int):
            ok = isinstance(value, int) and not isinstance(value, bool)
        elif isinstance(default, list):
            ok = isinstance(value, list)
        else:
            ok = isinstance(value, type(default))
        if not ok:
            raise ConfigError(f"{path}: expected {type(default).__name__}, got {value!r}")
        kwargs[name] = value
    return cls(**kwargs)


def from_dict(raw: dict) -> RunConfig:
    return _build(RunConfig, raw, "").validate()


def load_config(path: str | Path | None, overrides: dict | None = None) -> RunConfig:
    raw = {}
    if path:
        raw = yaml.safe_load(Path(path).read_text()) or {}
    cfg = from_dict(raw)
    for key, value in (overrides or {}).items():
        set_path(cfg, key, value)
    return cfg.validate()


def set_path(cfg: RunConfig, dotted: str, value) -> None:
    """Set ``a.b.c`` on ``cfg`` in place, with the same type checks as a config file."""
    raw = cfg.to_dict()
    *parents, leaf = dotted.split(".")
    node = raw
    for p in parents:
        if not isinstance(node.get(p), dict):
            raise ConfigError(f"unknown key {dotted}")
        node = node[p]
    if leaf not in node:
        raise ConfigError(f"unknown key {dotted}")
    node[leaf] = value
    rebuilt = _build(RunConfig, raw, "")
    for f in dataclasses.fields(RunConfig):
        setattr(cfg, f.name, getattr(rebuilt, f.name))
