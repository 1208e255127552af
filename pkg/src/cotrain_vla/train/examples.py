"""Turning dataset records into mixed sequences, and fitting the tokenizer."""

from __future__ import annotations

import numpy as np

from ..codec import ActionChunk, fit_normalizer, pad_actions, normalize, train_fast_vocab
from ..model.config import ModelConfig
from ..model.sequence import MixedSequence, Role, SequenceTokenizer, build_sequence
from ..text import EOA, EOS, TextVocab
from ..world.datasets import Record
from ..world.embodiment import D_MAX, EMBODIMENTS
from .augment import augment_cameras
from .flow import make_flow_sample

# which dataset's quantiles normalize which robot
NORM_SOURCE = {"mobile": "MM", "fixed_a": "ME", "fixed_b": "CE"}


def fit_tokenizer(datasets: dict[str, list[Record]], merges: int = 512, levels: int = 129,
                  corpus_categories=("MM", "ME", "CE")) -> SequenceTokenizer:
    """Per-robot quantile stats from each robot's own dataset, FAST merges over the action corpus."""
    norm = {}
    for emb, cat in NORM_SOURCE.items():
        recs = [r for r in datasets.get(cat, []) if r.actions is not None]
        if recs:
            norm[emb] = fit_normalizer(ActionChunk(r.actions) for r in recs)
    corpus = []
    for cat in corpus_categories:
        for r in datasets.get(cat, []):
            if r.actions is not None and r.embodiment in norm:
                c = normalize(ActionChunk(r.actions), norm[r.embodiment])
                corpus.append(pad_actions(c, D_MAX))
    fast = train_fast_vocab(corpus, levels=levels, merges=merges) if corpus else None
    text = TextVocab(fast_size=0 if fast is None else fast.size)
    return SequenceTokenizer(text=text, fast=fast, norm=norm, d_max=D_MAX)


def _mode(r: Record):
    return EMBODIMENTS[r.embodiment].control_mode if r.embodiment else None


def _loc_targets(tok: SequenceTokenizer, boxes) -> list[tuple[int, Role]]:
    out = []
    for y0, x0, y1, x1 in boxes or []:
        out += [(tok.text.loc_token(v), Role.TEXT) for v in (y0, x0, y1, x1)]
    return out


def _fast_targets(tok: SequenceTokenizer, r: Record) -> list[tuple[int, Role]]:
    ids = tok.fast_ids(r.actions, r.embodiment)
    return [(t, Role.FAST) for t in ids] + [(EOA, Role.FAST)]


def record_targets(tok: SequenceTokenizer, r: Record, conditioning: str | None = None):
    """(prompt text, target tokens) for a record."""
    if r.kind == "act":
        return conditioning or r.prompt, _fast_targets(tok, r)
    if r.kind == "joint":
        return r.prompt, tok.text_targets(r.subtask) + [(EOS, Role.TEXT)] + _fast_targets(tok, r)
    if r.kind == "boxes":
        return r.prompt, _loc_targets(tok, r.boxes) + tok.text_targets(r.subtask) + [(EOS, Role.TEXT)]
    if r.kind == "subtask":
        return r.prompt, tok.text_targets(r.subtask) + [(EOS, Role.TEXT)]
    if r.kind == "web":
        if r.answer is not None:
            return r.prompt, tok.text_targets(r.answer) + [(EOS, Role.TEXT)]
        return r.prompt, _loc_targets(tok, r.boxes) + [(EOS, Role.TEXT)]
    raise ValueError(f"unknown record kind {r.kind!r}")


def record_to_sequence(r: Record, tok: SequenceTokenizer, cfg: ModelConfig, rng: np.random.Generator,
                       with_flow: bool = False, subtask_prob: float = 0.5,
                       augment: bool = False) -> MixedSequence:
    cond = None
    if r.kind == "act":
        cond = r.subtask if (r.subtask and rng.random() < subtask_prob) else r.prompt
    text, targets = record_targets(tok, r, cond)
    prompt = tok.prompt_ids(text, _mode(r))
    proprio = tok.proprio_ids(r.proprio) if r.proprio is not None else []
    images = augment_cameras(r.images, rng) if augment else r.images
    noisy = tau = target = None
    if with_flow and r.kind == "act":
        fs = make_flow_sample(tok.normalized(r.actions, r.embodiment), rng, cfg.s)
        noisy, tau, target = fs.x, fs.tau, fs.u.astype(np.float32)
    return build_sequence(cfg, images, prompt, proprio, targets, noisy=noisy, tau=tau, flow_target=target)


def inference_prefix(tok: SequenceTokenizer, cfg: ModelConfig, images, proprio, text: str,
                     embodiment: str, targets=(), noisy=None, tau=None) -> MixedSequence:
    """Prefix (plus optional decoded targets or a noisy block) at rollout time.

    Decoded subtasks can run past the prompt block; the tail is dropped.
    """
    prompt = tok.prompt_ids(text, EMBODIMENTS[embodiment].control_mode)[: cfg.max_prompt]
    return build_sequence(cfg, images, prompt, tok.proprio_ids(proprio), targets, noisy=noisy, tau=tau)
