"""One training stage: pre-training (text + FAST tokens) or post-training (adds the flow expert)."""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from ..model.checkpoint import load_checkpoint, load_meta, load_optimizer_state, save_checkpoint
from ..model.config import ModelConfig
from ..model.network import VLANet, build_model
from ..model.sequence import SequenceTokenizer, collate
from ..world.datasets import Record, config_hash
from .examples import record_to_sequence
from .loss import combined_loss
from .mixture import MixtureConfig, mixture_sampler

log = logging.getLogger(__name__)


class ConfigMismatch(RuntimeError):
    pass


@dataclass
class StageResult:
    model: VLANet
    checkpoint: Path | None
    metrics: list[dict]


def lr_at(step: int, cfg: MixtureConfig) -> float:
    if step < cfg.warmup:
        return cfg.lr * (step + 1) / cfg.warmup
    span = max(cfg.steps - cfg.warmup, 1)
    frac = min((step - cfg.warmup) / span, 1.0)
    lo = cfg.lr * cfg.min_lr_frac
    return lo + 0.5 * (cfg.lr - lo) * (1.0 + math.cos(math.pi * frac))


def stage_hash(mix: MixtureConfig, model_cfg: ModelConfig, data_hash: str, init_hash: str | None) -> str:
    return config_hash({"mixture": mix.to_dict(), "model": model_cfg.to_dict(), "data": data_hash,
                        "init": init_hash})


def make_batch(records: list[Record], tok: SequenceTokenizer, model_cfg: ModelConfig, mix: MixtureConfig,
               rng: np.random.Generator):
    seqs = [record_to_sequence(r, tok, model_cfg, rng, with_flow=mix.alpha > 0,
                               subtask_prob=mix.subtask_prob, augment=mix.augment) for r in records]
    return collate(seqs, model_cfg.horizon)


def run_stage(mix: MixtureConfig, datasets: dict[str, list[Record]], tok: SequenceTokenizer,
              model_cfg: ModelConfig, out: str | Path | None = None, init: str | Path | None = None,
              data_hash: str = "", resume: bool = True, model: VLANet | None = None,
              init_key: str | None = None) -> StageResult:
    """Train for ``mix.steps`` steps and write ``out/model.bin`` (+ sidecar, optimizer, metrics.csv).

    Pre-training starts from random weights without an action expert; post-training loads
    ``init`` and attaches freshly initialised action-expert weights. A caller passing its own
    ``model`` names it with ``init_key`` so the stage hash still identifies the run.
    """
    mix.validate()
    torch.set_num_threads(1)
    out = Path(out) if out is not None else None
    init_hash = load_meta(init)["stage_hash"] if init is not None else init_key
    h = stage_hash(mix, model_cfg, data_hash, init_hash)
    ckpt = out / "model.bin" if out else None

    start = 0
    if ckpt is not None and Path(str(ckpt) + ".json").exists():
        meta = load_meta(ckpt)
        if meta.get("stage_hash") != h:
            raise ConfigMismatch(f"{ckpt} was written by a different configuration")
        if not resume or meta["step"] >= mix.steps:
            model, _ = load_checkpoint(ckpt)
            return StageResult(model, ckpt, _read_metrics(out))
        start = meta["step"]

    if model is None:
        if mix.stage == "pretrain":
            model = build_model(model_cfg, seed=mix.seed, with_action=False)
        else:
            if init is None:
                raise ValueError("post-training needs an initial checkpoint or a model")
            model, _ = load_checkpoint(init)
    if mix.stage == "posttrain" and not model.has_action_expert:
        model.add_action_expert(seed=mix.seed + 1)
    opt = torch.optim.AdamW(model.parameters(), lr=mix.lr, weight_decay=mix.weight_decay)
    if start:
        model, _ = load_checkpoint(ckpt)
        opt = torch.optim.AdamW(model.parameters(), lr=mix.lr, weight_decay=mix.weight_decay)
        load_optimizer_state(ckpt, model, opt)

    rng = np.random.default_rng([mix.seed, 11])
    torch.manual_seed(mix.seed)
    stream = mixture_sampler(datasets, mix, rng)
    # replay the sampler so resumed runs see the same batches as uninterrupted ones
    for _ in range(start):
        make_batch(next(stream), tok, model_cfg, mix, rng)

    metrics = _read_metrics(out)[:start] if (out and start) else []
    t0 = time.perf_counter()
    model.train()
    for step in range(start, mix.steps):
        lr = lr_at(step, mix)
        for g in opt.param_groups:
            g["lr"] = lr
        batch = make_batch(next(stream), tok, model_cfg, mix, rng)
        terms = combined_loss(model, batch, mix.alpha)
        opt.zero_grad(set_to_none=True)
        terms.total.backward()
        if mix.grad_clip:
            torch.nn.utils.clip_grad_norm_(model.parameters(), mix.grad_clip)
        opt.step()
        metrics.append({"step": step, "ce_loss": terms.ce.item(), "flow_loss": terms.flow.item(), "lr": lr})
        if step % 100 == 0:
            log.info("%s step %d ce %.4f flow %.4f", mix.stage, step, terms.ce.item(), terms.flow.item())
        if out and mix.checkpoint_every and (step + 1) % mix.checkpoint_every == 0 and step + 1 < mix.steps:
            _save(out, model, opt, mix, h, step + 1, tok, metrics)
    model.eval()
    if out:
        _save(out, model, opt, mix, h, mix.steps, tok, metrics)
        # wall time lives outside the checkpoint so checkpoints stay bit-reproducible
        timing = out / "timing.json"
        prev = json.loads(timing.read_text())["seconds"] if start and timing.exists() else 0.0
        timing.write_text(json.dumps({"seconds": prev + time.perf_counter() - t0}))
    return StageResult(model, ckpt, metrics)


def _save(out: Path, model, opt, mix, h, step, tok, metrics):
    out.mkdir(parents=True, exist_ok=True)
    meta = {"stage": mix.stage, "stage_hash": h, "step": step, "mixture": mix.to_dict()}
    save_checkpoint(out / "model.bin", model, meta, opt)
    (out / "tokenizer.json").write_text(json.dumps(tok.to_dict(), sort_keys=True))
    with open(out / "metrics.csv", "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=["step", "ce_loss", "flow_loss", "lr"])
        w.writeheader()
        for m in metrics:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in m.items()})


def _read_metrics(out) -> list[dict]:
    if out is None or not (Path(out) / "metrics.csv").exists():
        return []
    with open(Path(out) / "metrics.csv") as f:
        return [{"step": int(r["step"]), "ce_loss": float(r["ce_loss"]), "flow_loss": float(r["flow_loss"]),
                 "lr": float(r["lr"])} for r in csv.DictReader(f)]


def load_tokenizer(path) -> SequenceTokenizer:
    return SequenceTokenizer.from_dict(json.loads(Path(path).read_text()))
