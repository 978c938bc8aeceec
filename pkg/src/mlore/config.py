"""Model hyperparameters and their text serialization."""

from __future__ import annotations

import json
import math
import zlib
from dataclasses import dataclass, fields, replace
from pathlib import Path

import numpy as np

TOY_TASKS = ("semseg", "boundary", "depth", "normals")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    tasks: tuple[str, ...] = TOY_TASKS
    num_experts: int = 15
    top_k: int = 9
    channels: int = 64
    rank_min: int = 16
    rank_max: int = 128
    rank_step: int = 8
    specific_rank: int = 64
    expert_out_channels: int | None = None
    scales: int = 4
    stack_per_scale: int = 2
    lb_weight: float = 0.01
    noise: bool = True
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "tasks", tuple(self.tasks))
        if self.expert_out_channels is None:
            object.__setattr__(self, "expert_out_channels", math.ceil(self.channels * 5 / 3))
        self.validate()

    @property
    def num_tasks(self) -> int:
        return len(self.tasks)

    @property
    def ranks(self) -> tuple[int, ...]:
        """Arithmetic schedule from ``rank_min`` by ``rank_step``, clipped at ``rank_max``."""
        return tuple(min(self.rank_min + i * self.rank_step, self.rank_max) for i in range(self.num_experts))

    def validate(self) -> None:
        if not self.tasks:
            raise ConfigError("at least one task is required")
        if len(set(self.tasks)) != len(self.tasks):
            raise ConfigError(f"duplicate task names in {self.tasks}")
        if self.num_experts < 1:
            raise ConfigError("num_experts must be >= 1")
        if not 1 <= self.top_k <= self.num_experts:
            raise ConfigError(f"top_k must satisfy 1 <= k <= N={self.num_experts}, got {self.top_k}")
        if self.channels < 4 or self.channels % 4:
            raise ConfigError(f"channels must be a positive multiple of 4 (router uses C/4), got {self.channels}")
        if self.rank_min < 1 or self.rank_step < 0 or self.rank_max < self.rank_min:
            raise ConfigError("rank schedule needs 1 <= rank_min <= rank_max and rank_step >= 0")
        if self.specific_rank < 1:
            raise ConfigError("specific_rank must be >= 1")
        if self.scales < 1 or self.stack_per_scale < 1:
            raise ConfigError("scales and stack_per_scale must be >= 1")
        if self.lb_weight < 0:
            raise ConfigError("lb_weight must be >= 0")

    # -- text form -------------------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "tasks": list(self.tasks),
            "num_experts": self.num_experts,
            "top_k": self.top_k,
            "channels": self.channels,
            "rank_min": self.rank_min,
            "rank_max": self.rank_max,
            "rank_step": self.rank_step,
            "specific_rank": self.specific_rank,
            "expert_out_channels": self.expert_out_channels,
            "scales": self.scales,
            "stack_per_scale": self.stack_per_scale,
            "lb_weight": self.lb_weight,
            "noise": self.noise,
            "seed": self.seed,
        }

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown config keys: {sorted(extra)}")
        return cls(**d)

    @classmethod
    def loads(cls, text: str) -> "ModelConfig":
        return cls.from_dict(json.loads(text))

    @classmethod
    def load(cls, path: str | Path) -> "ModelConfig":
        return cls.loads(Path(path).read_text())

    def with_(self, **changes) -> "ModelConfig":
        return replace(self, **changes)


def paper_config() -> ModelConfig:
    """Decoder width 384, 15 experts ranked 16..128, specific rank 64, 640-wide reference conv."""
    return ModelConfig(
        tasks=("semseg", "parsing", "saliency", "normals", "boundary"),
        channels=384,
        expert_out_channels=640,
    )


def toy_config(**overrides) -> ModelConfig:
    return ModelConfig(**overrides)


def smoke_config(**overrides) -> ModelConfig:
    """Narrow preset sized for a 1,000-step single-core CPU run."""
    base = dict(channels=24, rank_min=2, rank_max=16, rank_step=1, specific_rank=8)
    base.update(overrides)
    return ModelConfig(**base)


def stream(seed: int, name: str) -> np.random.Generator:
    """Independent named sub-stream (``data``, ``init``, ``routing-noise``, ...) of one run seed."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), zlib.crc32(name.encode())])))
