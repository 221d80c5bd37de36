"""Strict JSON run configuration with desk-scale defaults."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field
from typing import Any

from .errors import ConfigError, FormatError


@dataclass
class DatasetSection:
    preset: str = "memorization"
    n_classes: int = 12
    image_size: int = 16
    samples_per_class: int = 24
    noise: float = 0.1
    split: list = field(default_factory=lambda: [0.25, 0.75])
    # upstream data used to pretrain the teacher before fine-tuning
    upstream_preset: str = "standard"
    upstream_samples_per_class: int = 100
    upstream_noise: float = 0.15


@dataclass
class VitSection:
    patch_size: int = 4
    channels: int = 3
    d_embed: int = 32
    d_mlp: int = 64
    n_heads: int = 2
    n_layers: int = 4
    init_checkpoint: str | None = None


@dataclass
class RememSection:
    alpha_mlp: float = 1.0
    alpha_attn: float = 1.0
    prune_mlp_top_k: int = 0
    prune_attn_top_k: int = 0
    # False: the teacher answers distillation queries with alphas reset to 1 (pruning is kept)
    apply_at_distill: bool = True


@dataclass
class OptimizerSection:
    lr: float = 0.03
    momentum: float = 0.9
    weight_decay: float = 0.0
    batch_size: int = 36
    sam_rho: float = 0.0
    pretrain_lr: float = 0.05


@dataclass
class ScheduleSection:
    finetune_steps: int = 300
    warmup_steps: int = 30
    pretrain_steps: int = 1500
    pretrain_warmup_steps: int = 100


@dataclass
class DistillSection:
    algorithm: str = "logit_match"
    lam: float = 0.5
    temperature: float = 2.0
    dist_beta: float = 1.0
    dist_gamma: float = 1.0
    mixup_alpha: float = 0.8
    steps: int = 300
    batch_size: int = 36
    lr: float = 0.05
    warmup_steps: int = 20
    momentum: float = 0.9
    weight_decay: float = 1e-4
    d_hidden: int = 128
    teacher_checkpoint: str | None = None


@dataclass
class MiSection:
    updates: int = 1000
    # held-out probe set drawn from the downstream distribution; 0 uses the test split
    probe_samples_per_class: int = 80


@dataclass
class ExpertnessSection:
    k: int | None = None
    aggregate: str = "l2"
    n_images: int = 96
    layer: int = 3  # 0-based; used by criticality


@dataclass
class ProtocolSection:
    ckpt_steps: list = field(default_factory=lambda: [100, 300])
    teacher_lrs: list = field(default_factory=lambda: [0.03])
    student_lrs: list = field(default_factory=lambda: [0.05])
    lams: list = field(default_factory=lambda: [0.1, 0.5, 0.9])
    temperatures: list = field(default_factory=lambda: [1.0, 2.0, 4.0])
    rhos: list = field(default_factory=lambda: [0.5, 0.05, 0.005])
    alphas: list = field(default_factory=lambda: [0.8, 0.9])


@dataclass
class RunConfig:
    dataset: DatasetSection = field(default_factory=DatasetSection)
    vit: VitSection = field(default_factory=VitSection)
    remem: RememSection = field(default_factory=RememSection)
    optimizer: OptimizerSection = field(default_factory=OptimizerSection)
    schedule: ScheduleSection = field(default_factory=ScheduleSection)
    distill: DistillSection = field(default_factory=DistillSection)
    mi: MiSection = field(default_factory=MiSection)
    expertness: ExpertnessSection = field(default_factory=ExpertnessSection)
    protocol: ProtocolSection = field(default_factory=ProtocolSection)
    seed: int = 0
    output_dir: str = "runs/default"

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def content_hash(self) -> str:
        """Git-style blob hash of the canonical resolved config."""
        body = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha1(b"blob %d\0" % len(body) + body).hexdigest()


SECTIONS = {f.name: f for f in dataclasses.fields(RunConfig)}


def _section_type(name: str):
    return {
        "dataset": DatasetSection, "vit": VitSection, "remem": RememSection,
        "optimizer": OptimizerSection, "schedule": ScheduleSection, "distill": DistillSection,
        "mi": MiSection, "expertness": ExpertnessSection, "protocol": ProtocolSection,
    }.get(name)


def _coerce(value: Any, default: Any, key: str) -> Any:
    if default is None or value is None:
        return value
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected a boolean, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{key}: expected a string, got {value!r}")
        return value
    if isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigError(f"{key}: expected a list, got {value!r}")
        return value
    return value


def from_dict(doc: dict) -> RunConfig:
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    cfg = RunConfig()
    for key, value in doc.items():
        if key not in SECTIONS:
            raise ConfigError(f"unknown config key: {key}")
        kind = _section_type(key)
        if kind is None:
            setattr(cfg, key, _coerce(value, getattr(cfg, key), key))
            continue
        if not isinstance(value, dict):
            raise ConfigError(f"section {key} must be an object")
        section = getattr(cfg, key)
        names = {f.name for f in dataclasses.fields(kind)}
        for sub, v in value.items():
            if sub not in names:
                raise ConfigError(f"unknown config key: {key}.{sub}")
            setattr(section, sub, _coerce(v, getattr(section, sub), f"{key}.{sub}"))
    return cfg


def apply_override(cfg: RunConfig, assignment: str) -> None:
    """Apply one ``section.key=value`` override; the value is parsed as JSON when possible."""
    if "=" not in assignment:
        raise ConfigError(f"override must look like key=value: {assignment!r}")
    path, raw = assignment.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    parts = path.strip().split(".")
    if len(parts) == 1:
        doc = {parts[0]: value}
    elif len(parts) == 2:
        doc = {parts[0]: {parts[1]: value}}
    else:
        raise ConfigError(f"unknown config key: {path}")
    patch = from_dict(doc)
    if len(parts) == 1:
        setattr(cfg, parts[0], getattr(patch, parts[0]))
    else:
        setattr(getattr(cfg, parts[0]), parts[1], getattr(getattr(patch, parts[0]), parts[1]))


def load_config(path: str | os.PathLike | None, overrides=(), seed: int | None = None) -> RunConfig:
    if path is None:
        cfg = RunConfig()
    else:
        try:
            with open(path) as fh:
                doc = json.load(fh)
        except FileNotFoundError as exc:
            raise FormatError(f"config file not found: {path}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc
        cfg = from_dict(doc)
    for o in overrides:
        apply_override(cfg, o)
    if seed is not None:
        cfg.seed = seed
    return cfg
