"""Human-readable run configuration (YAML) with command-line overrides."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import yaml

from .adapters import ConfigurationError, Structure
from .datagen import DomainKind
from .trainer import FULL_EPOCHS, FULL_LR_STAGES, STAGE2_LR, AdaptConfig


@dataclass
class LabConfig:
    seed: int = 0
    preset: str = "desk"  # "desk" or "full"
    lmbda: float | None = None  # None: use the lambda stored in the model
    n_samples: int = 25
    structure: str = "conv1x1"
    rank: int = 10
    lora_std: float = 0.01
    patch: int | None = None
    batch: int = 4
    epochs: int | None = None  # flat per-stage budget; None uses the preset table
    lr_stages: list[float] = field(default_factory=lambda: list(FULL_LR_STAGES))
    stage2_lr: float = STAGE2_LR
    pretrain_steps: int = 2000
    pretrain_lr: float = 1e-3
    pretrain_patch: int = 64
    domain: str = "pixel_art"
    image_size: int = 64
    cell: int = 8
    count: int = 32
    data: str | None = None  # folder of images instead of generated data

    def validate(self) -> "LabConfig":
        if self.preset not in ("desk", "full"):
            raise ConfigurationError(f"preset must be 'desk' or 'full', got {self.preset!r}")
        try:
            Structure.parse(self.structure)
            DomainKind.parse(self.domain)
        except (KeyError, ValueError) as exc:
            raise ConfigurationError(str(exc)) from exc
        if self.lmbda is not None and self.lmbda <= 0:
            raise ConfigurationError("lambda must be positive")
        if self.rank < 1 or self.rank > 255:
            raise ConfigurationError("rank must be in [1, 255]")
        if self.n_samples < 1 or self.batch < 1 or self.count < 1:
            raise ConfigurationError("n_samples, batch and count must be positive")
        if self.epochs is not None and self.epochs < 0:
            raise ConfigurationError("epochs must be >= 0")
        if not self.lr_stages or any(v <= 0 for v in self.lr_stages):
            raise ConfigurationError("lr_stages must be positive")
        return self

    def adapt_config(self) -> AdaptConfig:
        base = AdaptConfig.full() if self.preset == "full" else AdaptConfig.desk()
        epochs = dict(base.epochs) if self.epochs is None else {k: self.epochs for k in FULL_EPOCHS}
        return AdaptConfig(
            patch=self.patch if self.patch is not None else base.patch,
            batch=self.batch,
            lr_stages=tuple(self.lr_stages),
            stage2_lr=self.stage2_lr,
            epochs=epochs,
            structure=Structure.parse(self.structure),
            rank=self.rank,
            lora_std=self.lora_std,
            early_stop=base.early_stop,
        )

    def to_dict(self) -> dict:
        return asdict(self)


_ALIASES = {"lambda": "lmbda"}


def _normalize(raw: dict) -> dict:
    known = {f.name for f in fields(LabConfig)}
    out = {}
    for key, value in raw.items():
        key = _ALIASES.get(str(key).replace("-", "_"), str(key).replace("-", "_"))
        if key not in known:
            raise ConfigurationError(f"unknown config key {key!r}")
        out[key] = value
    return out


def load_config(path=None, overrides: dict | None = None) -> LabConfig:
    """File values first, then non-None ``overrides``."""
    values: dict = {}
    if path is not None:
        try:
            raw = yaml.safe_load(Path(path).read_text()) or {}
        except yaml.YAMLError as exc:
            raise ConfigurationError(f"cannot parse config {path}: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigurationError(f"config {path} must be a mapping")
        values.update(_normalize(raw))
    if overrides:
        values.update(_normalize({k: v for k, v in overrides.items() if v is not None}))
    try:
        cfg = LabConfig(**values)
    except TypeError as exc:
        raise ConfigurationError(str(exc)) from exc
    if cfg.lmbda is not None:
        cfg.lmbda = float(cfg.lmbda)
    cfg.lr_stages = [float(v) for v in cfg.lr_stages]
    return cfg.validate()


def dump_config(path, cfg: LabConfig, extra: dict | None = None) -> None:
    doc = {"config": cfg.to_dict()}
    if extra:
        doc.update(extra)
    Path(path).write_text(yaml.safe_dump(doc, sort_keys=True))

