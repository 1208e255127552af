"""Stage configuration and category-weighted batch sampling."""

from __future__ import annotations

import json
import warnings
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from ..world.datasets import CATEGORIES, Record, filter_records, length_threshold

PRETRAIN_WEIGHTS = {"MM": 0.024, "ME": 0.244, "CE": 0.244, "HL": 0.244, "WD": 0.244, "VI": 0.0}
POSTTRAIN_WEIGHTS = {"MM": 0.4, "ME": 0.2, "CE": 0.0, "HL": 0.2, "WD": 0.1, "VI": 0.1}


@dataclass(frozen=True)
class MixtureConfig:
    stage: str = "pretrain"
    weights: dict = field(default_factory=lambda: dict(PRETRAIN_WEIGHTS))
    alpha: float = 0.0
    steps: int = 3000
    batch_size: int = 32
    lr: float = 1e-3
    min_lr_frac: float = 0.05
    warmup: int = 100
    weight_decay: float = 1e-4
    grad_clip: float = 1.0
    length_percentile: float | None = None  # posttrain episode-length filter
    subtask_prob: float = 0.5  # low-level examples conditioned on the subtask instead of the task
    augment: bool = True
    seed: int = 0
    checkpoint_every: int = 0

    def validate(self) -> "MixtureConfig":
        w = self.weights
        if set(w) - set(CATEGORIES):
            raise ValueError(f"unknown categories {set(w) - set(CATEGORIES)}")
        if any(v < 0 for v in w.values()) or sum(w.values()) <= 0:
            raise ValueError("weights must be >= 0 with a positive sum")
        if self.stage == "pretrain":
            if self.alpha != 0.0:
                raise ValueError("pretraining uses alpha = 0")
            if w.get("VI", 0) > 0:
                raise ValueError("pretraining excludes VI")
        elif self.stage == "posttrain":
            if w.get("CE", 0) > 0:
                raise ValueError("post-training omits CE")
            if self.alpha <= 0:
                raise ValueError("post-training needs alpha > 0")
            if w.get("VI", 0) == 0:
                warnings.warn("post-training without VI data", stacklevel=2)
        else:
            raise ValueError(f"unknown stage {self.stage!r}")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "MixtureConfig":
        return cls(**d)

    def with_(self, **kw) -> "MixtureConfig":
        return replace(self, **kw)

    def zeroed(self, *cats: str) -> "MixtureConfig":
        w = dict(self.weights)
        for c in cats:
            w[c] = 0.0
        return replace(self, weights=w)


def pretrain_config(**kw) -> MixtureConfig:
    return MixtureConfig(stage="pretrain", weights=dict(PRETRAIN_WEIGHTS), alpha=0.0, steps=3000, **kw)


def posttrain_config(**kw) -> MixtureConfig:
    base = dict(stage="posttrain", weights=dict(POSTTRAIN_WEIGHTS), alpha=10.0, steps=1000,
                length_percentile=95.0, lr=5e-4, warmup=50)
    base.update(kw)
    return MixtureConfig(**base)


def load_mixture(path) -> MixtureConfig:
    with open(path) as f:
        return MixtureConfig.from_dict(json.load(f))


def prepare_pools(datasets: dict[str, list[Record]], cfg: MixtureConfig) -> dict[str, list[Record]]:
    """Per-category example pools after the post-training success/length filter."""
    pools = {}
    for cat, w in cfg.weights.items():
        if w <= 0:
            continue
        recs = datasets.get(cat, [])
        if cfg.length_percentile is not None and cat not in ("WD",):
            recs = filter_records(recs, length_threshold(recs, cfg.length_percentile))
        if not recs:
            raise ValueError(f"category {cat} has weight {w} but no examples")
        pools[cat] = recs
    return pools


def mixture_sampler(datasets: dict[str, list[Record]], cfg: MixtureConfig, rng: np.random.Generator):
    """Endless stream of record batches; category ~ weights, then uniform within category."""
    pools = prepare_pools(datasets, cfg)
    cats = sorted(pools)
    p = np.array([cfg.weights[c] for c in cats], dtype=np.float64)
    p /= p.sum()
    while True:
        picks = rng.choice(len(cats), size=cfg.batch_size, p=p)
        batch = []
        for k in picks:
            pool = pools[cats[k]]
            batch.append(pool[int(rng.integers(0, len(pool)))])
        yield batch
