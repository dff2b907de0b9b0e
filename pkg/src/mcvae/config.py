"""Configuration records: modality layout, training hyperparameters, experiment setup."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

MODALITY_NAMES = ("clinical", "transcriptomics", "wsi", "methylation")
MODALITY_CODES = ("C", "T", "W", "M")


@dataclass(frozen=True)
class ModalitySpec:
    name: str
    dim: int
    depth: int
    reconstructable: bool = True

    def __post_init__(self):
        if self.dim < 1:
            raise ValueError(f"modality {self.name!r}: dimension must be >= 1, got {self.dim}")
        if self.depth < 1:
            raise ValueError(f"modality {self.name!r}: encoder depth must be >= 1, got {self.depth}")


def default_modalities(dims: tuple[int, int, int, int] = (16, 64, 64, 64)) -> tuple[ModalitySpec, ...]:
    """Clinical and WSI encoders are 2 layers deep, omics encoders 3; clinical is never decoded."""
    depths = (2, 3, 2, 3)
    return tuple(
        ModalitySpec(name, dim, depth, reconstructable=(i != 0))
        for i, (name, dim, depth) in enumerate(zip(MODALITY_NAMES, dims, depths))
    )


@dataclass
class TrainConfig:
    batch_size: int = 16
    max_epochs: int = 150
    patience: int = 20
    learning_rate: float = 5.28e-5
    weight_decay: float = 1.24e-4
    dropout: float = 0.521
    p_drop: float = 0.3
    beta_max: float = 1.0
    warmup_epochs: int = 30
    temperature: float = 0.1
    d_out: int = 128
    hidden: int = 256
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 (batch normalisation)")
        if self.patience >= self.max_epochs:
            raise ValueError(f"patience ({self.patience}) must be < max_epochs ({self.max_epochs})")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must be in [0, 1), got {self.dropout}")
        if not 0.0 <= self.p_drop <= 1.0:
            raise ValueError(f"p_drop must be in [0, 1], got {self.p_drop}")
        if self.warmup_epochs < 1:
            raise ValueError("warmup_epochs must be >= 1")
        if self.temperature <= 0:
            raise ValueError("temperature must be > 0")


# Tuned values for the two lung cohorts.
PROFILES: dict[str, dict[str, Any]] = {
    "luad": dict(d_out=128, hidden=256, dropout=0.521, beta_max=1.0,
                 learning_rate=5.28e-5, weight_decay=1.24e-4, batch_size=16),
    "lusc": dict(d_out=128, hidden=256, dropout=0.158, beta_max=0.106,
                 learning_rate=1.95e-4, weight_decay=5.88e-4, batch_size=64),
}


def profile_config(profile: str = "luad", **overrides) -> TrainConfig:
    try:
        values = dict(PROFILES[profile])
    except KeyError:
        raise ValueError(f"unknown profile {profile!r}; expected one of {sorted(PROFILES)}") from None
    values.update(overrides)
    return TrainConfig(**values)


EXPERIMENT_KINDS = ("survival", "combinations", "dropout-sweep", "missingness-sweep")

DEFAULT_GRIDS: dict[str, list] = {
    "survival": ["mcvae"],
    "combinations": ["C", "C+T", "C+W", "C+M", "C+T+W", "C+T+M", "C+W+M", "C+T+W+M"],
    "dropout-sweep": [0.0, 0.1, 0.3, 0.5, 0.7, 0.9],
    "missingness-sweep": [0.1, 0.3, 0.5, 0.7, 0.9],
}


@dataclass
class ExperimentConfig:
    kind: str = "survival"
    profile: str = "luad"
    cohort_path: str | None = None
    synthetic: dict[str, Any] = field(default_factory=dict)
    train: TrainConfig = field(default_factory=TrainConfig)
    grid: list | None = None
    out_dir: str = "results"
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2])
    n_folds: int = 5
    workers: int = 1

    def __post_init__(self):
        if self.kind not in EXPERIMENT_KINDS:
            raise ValueError(f"unknown experiment kind {self.kind!r}; expected one of {EXPERIMENT_KINDS}")
        if self.grid is None:
            self.grid = list(DEFAULT_GRIDS[self.kind])
        if not self.grid:
            raise ValueError(f"{self.kind}: sweep grid must be non-empty")
        if not self.seeds:
            raise ValueError("seeds list must be non-empty")
        if self.n_folds < 2:
            raise ValueError("n_folds must be >= 2")

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, raw: dict[str, Any], profile: str | None = None) -> "ExperimentConfig":
        raw = dict(raw)
        prof = profile or raw.pop("profile", "luad")
        raw.pop("profile", None)
        train = profile_config(prof, **raw.pop("train", {}))
        return cls(profile=prof, train=train, **raw)


def load_config(path: str | Path, **overrides) -> ExperimentConfig:
    """Read a JSON config mirroring :class:`ExperimentConfig`; keyword overrides win."""
    raw = json.loads(Path(path).read_text())
    profile = overrides.pop("profile", None)
    raw.update({k: v for k, v in overrides.items() if v is not None})
    return ExperimentConfig.from_dict(raw, profile=profile)
