"""Declarative experiment plans (JSON key-value files)."""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

from ..world.datasets import config_hash
from .pipeline import HELD_OUT_BASE

PLAN_KINDS = ("env_scaling", "mixture_ablation", "model_compare", "hl_ablation", "language_following")

DEFAULT_GRIDS = {
    "env_scaling": (1, 2, 4, 8, 16),
    "mixture_ablation": ("full", "no_WD", "no_ME", "no_CE", "no_ME_CE"),
    "hl_ablation": ("model", "no_WD", "no_VI", "implicit", "no_HL", "external", "oracle"),
    "language_following": ("full", "no_WD"),
    "model_compare": ("full",),
}


def default_cache() -> str:
    return os.environ.get("COTRAIN_CACHE", str(Path.home() / ".cache" / "cotrain_vla"))


@dataclass(frozen=True)
class ExperimentPlan:
    kind: str
    grid: tuple = ()
    trials: int = 10  # per task per cell
    seeds: tuple[int, ...] = (0,)
    held_out: tuple[int, ...] = tuple(range(HELD_OUT_BASE, HELD_OUT_BASE + 10))
    train_envs: int = 16
    episodes_total: int = 256  # robot episodes per task, split evenly over the envs of a cell
    pretrain_steps: int = 3000
    posttrain_steps: int = 1000
    merges: int = 512
    lf_trials: int = 40  # language-following scenes per split
    random_trials: int = 400
    eval_seed: int = 1234
    cache: str = field(default_factory=default_cache)

    def __post_init__(self):
        if self.kind not in PLAN_KINDS:
            raise ValueError(f"unknown plan kind {self.kind!r}")
        if not self.grid:
            object.__setattr__(self, "grid", DEFAULT_GRIDS[self.kind])
        object.__setattr__(self, "grid", tuple(self.grid))
        object.__setattr__(self, "seeds", tuple(self.seeds))
        object.__setattr__(self, "held_out", tuple(self.held_out))
        if self.trials > len(self.held_out):
            raise ValueError("more trials than held-out environments")
        if set(self.held_out) & set(range(self.train_envs)):
            raise ValueError("held-out environments overlap the training environments")

    def to_dict(self) -> dict:
        return asdict(self)

    @property
    def config_hash(self) -> str:
        d = self.to_dict()
        d.pop("cache")
        return config_hash(d)

    def with_(self, **kw) -> "ExperimentPlan":
        return replace(self, **kw)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentPlan":
        return cls(**d)

    @classmethod
    def load(cls, path) -> "ExperimentPlan":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True))
