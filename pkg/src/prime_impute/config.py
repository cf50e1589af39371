"""Training configuration shared by the model, trainer, manifest and CLI."""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass
from pathlib import Path


@dataclass
class TrainConfig:
    hidden_size: int = 128
    n_prototypes: int = 64
    lambda_pgru: float = 0.3
    lambda_s2p: float = 1.0
    lambda_p2s: float = 0.1
    lambda_sep: float = 0.1
    margin: float | None = None  # None means 50 / sqrt(n_prototypes)
    d_mlp: int | None = None  # None means hidden_size
    gelu: str = "exact"
    batch_size: int = 32
    epochs: int = 100
    learning_rate: float = 1e-3
    seed: int = 0
    prototype_start_epoch: int = 0
    disable_prototypes: bool = False
    disable_refinement: bool = False
    holdout_rate: float = 0.1
    kmeans_max_iters: int = 100
    warmup_cap: int = 50_000

    def __post_init__(self):
        for name in ("lambda_pgru", "lambda_s2p", "lambda_p2s", "lambda_sep"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.prototype_start_epoch < 0:
            raise ValueError("prototype_start_epoch must be non-negative")
        if self.n_prototypes < 2:
            raise ValueError("n_prototypes must be at least 2")
        if self.gelu not in ("exact", "tanh"):
            raise ValueError("gelu must be 'exact' or 'tanh'")
        if self.hidden_size < 1 or self.batch_size < 1 or self.epochs < 0:
            raise ValueError("hidden_size and batch_size must be positive, epochs non-negative")

    @property
    def effective_margin(self) -> float:
        return 50.0 / math.sqrt(self.n_prototypes) if self.margin is None else self.margin

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, values: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(values) - known
        if unknown:
            raise ValueError(f"unknown config fields: {', '.join(sorted(unknown))}")
        return cls(**values)

    @classmethod
    def from_file(cls, path) -> "TrainConfig":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)
