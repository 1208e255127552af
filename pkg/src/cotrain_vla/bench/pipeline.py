"""Cached building blocks shared by the experiment runners: data, tokenizer, stages, evaluation.

Everything on disk is keyed by a config hash, so re-running a plan reuses finished
work and a changed config can never pick up a stale artifact.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from ..model.checkpoint import load_checkpoint
from ..model.config import ModelConfig
from ..policy import ExternalLabels, RolloutConfig, act_loop, high_level_strategy
from ..train.examples import fit_tokenizer
from ..train.mixture import MixtureConfig
from ..train.stage import StageResult, load_tokenizer, run_stage, stage_hash
from ..world.datasets import DataConfig, build_datasets, config_hash, read_datasets, write_datasets
from ..world.expert import Episode
from ..world.scene import TASKS, SceneConfig, generate_scene

log = logging.getLogger(__name__)

HELD_OUT_BASE = 200


@dataclass(frozen=True)
class EvalConfig:
    tasks: tuple[str, ...] = TASKS
    trials: int = 10
    held_out: tuple[int, ...] = tuple(range(HELD_OUT_BASE, HELD_OUT_BASE + 10))
    seed: int = 1234
    embodiment: str = "mobile"
    width: int = 8
    denoise_steps: int = 10
    refresh_period: int = 1

    def __post_init__(self):
        if self.trials > len(self.held_out):
            raise ValueError("more trials than held-out environments")

    @property
    def env_ids(self) -> tuple[int, ...]:
        return tuple(self.held_out[: self.trials])

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "EvalConfig":
        d = dict(d)
        for k in ("tasks", "held_out"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


def eval_scenes(ecfg: EvalConfig, task: str):
    """One held-out scene per trial; trial j always lands in env ``held_out[j]``."""
    world = SceneConfig(width=ecfg.width)
    out = []
    for j, env in enumerate(ecfg.env_ids):
        seed = int(np.random.SeedSequence([ecfg.seed, TASKS.index(task) if task in TASKS else 9, j])
                   .generate_state(1)[0])
        out.append(generate_scene(seed, env, ecfg.embodiment, task, world, eval_mode=True))
    return out


def evaluate(model, tok, strategy, ecfg: EvalConfig) -> list[Episode]:
    eps = []
    for k, task in enumerate(ecfg.tasks):
        if ecfg.trials == 0:
            continue
        scenes = eval_scenes(ecfg, task)
        rcfg = RolloutConfig(refresh_period=ecfg.refresh_period, denoise_steps=ecfg.denoise_steps,
                             seed=ecfg.seed + k)
        eps += act_loop(model, tok, scenes, [task] * len(scenes), strategy, rcfg)
    return eps


@dataclass
class Workspace:
    """A cache directory holding datasets, the tokenizer and stage checkpoints."""

    root: Path
    merges: int = 512
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        self.root = Path(self.root)
        self._data: dict[str, dict] = {}

    # -- data ---------------------------------------------------------------
    def datasets(self, dcfg: DataConfig) -> dict:
        h = dcfg.hash()
        if h not in self._data:
            d = self.root / "data" / h
            if not (d / "manifest.json").exists():
                log.info("building datasets %s", h)
                write_datasets(d, dcfg, build_datasets(dcfg))
            # always train on what is on disk, so cached and fresh runs see identical arrays
            self._data[h] = read_datasets(d)[1]
        return self._data[h]

    def tokenizer(self, dcfg: DataConfig):
        path = self.root / "tokenizer" / f"{dcfg.hash()}-{self.merges}.json"
        if path.exists():
            return load_tokenizer(path)
        tok = fit_tokenizer(self.datasets(dcfg), merges=self.merges)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(tok.to_dict(), sort_keys=True))
        return tok

    def model_config(self, tok) -> ModelConfig:
        return replace(self.model, vocab_size=tok.text.size)

    # -- training -----------------------------------------------------------
    def stage(self, mix: MixtureConfig, data: dict, data_key: str, tok, init: Path | None = None,
              from_scratch: bool = False) -> StageResult:
        """Run (or reuse) one stage; ``data_key`` must identify ``data`` and the tokenizer."""
        from ..model.checkpoint import load_meta
        from ..model.network import build_model

        mcfg = self.model_config(tok)
        init_hash = load_meta(init)["stage_hash"] if init is not None else ("scratch" if from_scratch else None)
        h = stage_hash(mix, mcfg, data_key, init_hash)
        out = self.root / "stages" / h
        model = None
        if from_scratch and not (out / "model.bin.json").exists():
            model = build_model(mcfg, seed=mix.seed, with_action=True)
        res = run_stage(mix, data, tok, mcfg, out=out, init=init, data_hash=data_key, model=model,
                        init_key=init_hash)
        return res

    def load(self, ckpt: Path):
        model, _ = load_checkpoint(ckpt)
        return model


def data_key(dcfg: DataConfig, merges: int, tok_dcfg: DataConfig | None = None) -> str:
    return config_hash({"data": dcfg.hash(), "tok": (tok_dcfg or dcfg).hash(), "merges": merges})


def strategy_for(kind: str, model, tok, hl_records=None):
    external = ExternalLabels.fit(hl_records or []) if kind == "external" else None
    return high_level_strategy(kind, model, tok, external)
