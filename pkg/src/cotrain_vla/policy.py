"""Hierarchical inference: decode a subtask, then integrate the action flow conditioned on it.

Integration runs tau from 0 (noise) to 1 (data). The interpolant is
x(tau) = tau * a + (1 - tau) * omega, so dx/dtau = a - omega = -(omega - a);
the network regresses omega - a, hence each Euler step is x <- x - delta * v.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch

from .codec import denormalize_values
from .model.network import VLANet
from .model.sequence import Role, SequenceTokenizer, collate
from .text import EOS
from .train.examples import inference_prefix
from .world.embodiment import EMBODIMENTS
from .world.expert import TASK_PROMPTS, Episode, StepRecord, max_chunks_for, next_subtask, task_prompt
from .world.rubric import score_rubric
from .world.scene import Scene, SimState, observe
from .world.sim import InvalidAction, step as sim_step

HL_KINDS = ("model", "implicit", "none", "oracle", "external")


class FlowDiverged(FloatingPointError):
    pass


@dataclass
class PolicyState:
    prompt: str
    subtask: str | None = None
    steps_since_refresh: int = 0
    refresh_period: int = 1  # in chunks
    max_subtask_tokens: int = 16
    denoise_steps: int = 10
    seed: int = 0
    truncated: bool = False

    def __post_init__(self):
        if self.refresh_period < 1:
            raise ValueError("refresh period must be >= 1")

    def due(self) -> bool:
        return self.subtask is None or self.steps_since_refresh >= self.refresh_period


# ---------------------------------------------------------------------------
# decoding


def greedy_decode(next_logits: Callable[[list[int], list[list[int]]], np.ndarray], batch: int, max_len: int,
                  eos: int, allowed: np.ndarray | None = None) -> tuple[list[list[int]], list[bool]]:
    """Batched temperature-0 decoding.

    ``next_logits(rows, prefixes)`` gets the indices of unfinished rows and their
    decoded prefixes and returns one row of scores per entry.

    Returns the token lists (without the end token) and a per-row flag that is
    True when the limit was hit before ``eos``.
    """
    out: list[list[int]] = [[] for _ in range(batch)]
    done = [False] * batch
    for _ in range(max_len):
        live = [b for b in range(batch) if not done[b]]
        if not live:
            break
        scores = np.asarray(next_logits(live, [out[b] for b in live]), dtype=np.float64)
        if allowed is not None:
            scores = np.where(allowed[None], scores, -np.inf)
        picks = scores.argmax(axis=1)
        for b, t in zip(live, picks):
            if int(t) == eos:
                done[b] = True
            else:
                out[b].append(int(t))
    return out, [not d for d in done]


def decode_allowed(tok: SequenceTokenizer) -> np.ndarray:
    """Words, location tokens and the end token; never action or proprio ids."""
    allowed = np.zeros(tok.text.size, dtype=bool)
    allowed[EOS] = True
    allowed[6 : tok.text.proprio_offset] = True
    return allowed


@torch.no_grad()
def infer_subtask(model: VLANet, tok: SequenceTokenizer, observations: Sequence, prompts: Sequence[str],
                  embodiment: str, max_tokens: int = 16) -> tuple[list[str], list[bool]]:
    """Greedy subtask text for each (observation, prompt); any leading boxes are dropped."""
    cfg = model.cfg

    def next_logits(live, prefixes):
        seqs, idx = [], []
        for b, done in zip(live, prefixes):
            s = inference_prefix(tok, cfg, observations[b].images, observations[b].proprio, prompts[b],
                                 embodiment, [(t, Role.TEXT) for t in done])
            seqs.append(s)
            idx.append(len(s) - 1)
        batch = collate(seqs).to(model.lm_head.weight.dtype)
        return model.logits_at(batch, torch.tensor(idx)).double().numpy()

    out, truncated = greedy_decode(next_logits, len(prompts), max_tokens, EOS, decode_allowed(tok))
    return [tok.text.decode(o) for o in out], truncated


# ---------------------------------------------------------------------------
# flow integration


def integrate(field_fn: Callable[[np.ndarray, float], np.ndarray], omega: np.ndarray, steps: int,
              s: float = 0.999) -> np.ndarray:
    """Euler integration from tau = 0 to 1 with x <- x - delta * v(x, tau)."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    delta = 1.0 / steps
    if not delta > 1.0 - s:
        raise ValueError(f"step {delta} must exceed 1 - s = {1 - s}")
    x = np.array(omega, dtype=np.float64)
    tau = 0.0
    for k in range(steps):
        v = np.asarray(field_fn(x, tau), dtype=np.float64)
        x = x - delta * v
        if not np.all(np.isfinite(x)):
            raise FlowDiverged(f"non-finite flow state at step {k}")
        tau += delta
    return x


@torch.no_grad()
def integrate_flow(model: VLANet, tok: SequenceTokenizer, observations: Sequence, texts: Sequence[str],
                   embodiment: str, rng: np.random.Generator, steps: int | None = None) -> np.ndarray:
    """Normalized (B, H, d_max) chunks. The conditioning text is the only language input."""
    cfg = model.cfg
    steps = steps or cfg.denoise_steps
    B = len(observations)
    omega = rng.standard_normal((B, cfg.horizon, cfg.d_max))
    prefixes = [inference_prefix(tok, cfg, o.images, o.proprio, t, embodiment,
                                 noisy=np.zeros((cfg.horizon, cfg.d_max)), tau=0.0)
                for o, t in zip(observations, texts)]
    base = collate(prefixes).to(model.lm_head.weight.dtype)
    dtype = model.lm_head.weight.dtype

    def field_fn(x, tau):
        base.noisy = torch.as_tensor(x, dtype=dtype)
        base.tau = torch.full((B,), tau, dtype=dtype)
        return model(base)[1].double().numpy()

    return integrate(field_fn, omega, steps, cfg.s)


def to_native(chunk: np.ndarray, tok: SequenceTokenizer, embodiment: str) -> np.ndarray:
    d = EMBODIMENTS[embodiment].dim
    return denormalize_values(np.clip(chunk[:, :d], -1.0, 1.0), tok.stats(embodiment))


# ---------------------------------------------------------------------------
# high-level strategies


@dataclass
class ExternalLabels:
    """Most frequent training subtasks per task prompt, cycled without looking at the scene."""

    table: dict[str, list[str]] = field(default_factory=dict)

    @classmethod
    def fit(cls, records, top: int = 3) -> "ExternalLabels":
        counts: dict[str, Counter] = {}
        for r in records:
            if r.subtask:
                counts.setdefault(r.prompt, Counter())[r.subtask] += 1
        return cls({p: [s for s, _ in sorted(c.items(), key=lambda kv: (-kv[1], kv[0]))[:top]]
                    for p, c in counts.items()})

    def label(self, prompt: str, k: int) -> str:
        labels = self.table.get(prompt)
        return labels[k % len(labels)] if labels else prompt


def high_level_strategy(kind: str, model=None, tok=None, external: ExternalLabels | None = None,
                        max_tokens: int = 16):
    """Returns provider(states, observations, prompts, tasks, chunk_index) -> (texts, truncated flags)."""
    if kind not in HL_KINDS:
        raise ValueError(f"unknown high-level strategy {kind!r}")

    def provider(states, observations, prompts, tasks, k, embodiment="mobile"):
        n = len(prompts)
        if kind == "model":
            return infer_subtask(model, tok, observations, prompts, embodiment, max_tokens)
        if kind in ("implicit", "none"):
            return list(prompts), [False] * n
        if kind == "oracle":
            return [next_subtask(s, t) or p for s, t, p in zip(states, tasks, prompts)], [False] * n
        return [external.label(p, k) for p in prompts], [False] * n

    provider.kind = kind
    return provider


# ---------------------------------------------------------------------------
# control loop


@dataclass
class RolloutConfig:
    refresh_period: int = 1
    denoise_steps: int = 10
    max_subtask_tokens: int = 16
    max_chunks: int | None = None
    seed: int = 0
    stop_on_success: bool = True


def act_loop(model: VLANet, tok: SequenceTokenizer, scenes: Sequence[Scene], tasks: Sequence[str],
             provider, rcfg: RolloutConfig = RolloutConfig(), categories: Sequence[str] | None = None) -> list[Episode]:
    """Run one episode per scene in lockstep; chunks are executed open-loop."""
    rng = np.random.default_rng([rcfg.seed, 5])
    n = len(scenes)
    states = [SimState.from_scene(s) for s in scenes]
    prompts = [task_prompt(t) for t in tasks]
    eps = [Episode(task=t, prompt=p, env_id=s.env_id, embodiment=s.embodiment,
                   category=(categories[i] if categories else "eval"), initial=st)
           for i, (t, p, s, st) in enumerate(zip(tasks, prompts, scenes, states))]
    pstates = [PolicyState(prompt=p, refresh_period=rcfg.refresh_period, denoise_steps=rcfg.denoise_steps,
                           max_subtask_tokens=rcfg.max_subtask_tokens, seed=rcfg.seed) for p in prompts]
    limits = [rcfg.max_chunks if rcfg.max_chunks is not None else max_chunks_for(t, len(s.task_objects))
              for t, s in zip(tasks, scenes)]
    active = [limits[i] > 0 for i in range(n)]
    k = 0
    while any(active):
        live = [i for i in range(n) if active[i]]
        obs = {i: observe(states[i], prompts[i]) for i in live}
        due = [i for i in live if pstates[i].due()]
        for emb in sorted({scenes[i].embodiment for i in due}):
            group = [i for i in due if scenes[i].embodiment == emb]
            texts, trunc = provider([states[i] for i in group], [obs[i] for i in group],
                                    [prompts[i] for i in group], [tasks[i] for i in group], k, emb)
            for i, t, tr in zip(group, texts, trunc):
                pstates[i].subtask, pstates[i].steps_since_refresh = t, 0
                pstates[i].truncated |= tr
        for emb in sorted({scenes[i].embodiment for i in live}):
            group = [i for i in live if scenes[i].embodiment == emb]
            chunks = integrate_flow(model, tok, [obs[i] for i in group], [pstates[i].subtask for i in group],
                                    emb, rng, rcfg.denoise_steps)
            for i, c in zip(group, chunks):
                native = to_native(c, tok, emb)
                eps[i].steps.append(StepRecord(obs[i], pstates[i].subtask, native, native, states[i]))
                eps[i].subtask_log.append(pstates[i].subtask)
                try:
                    for a in native:
                        states[i] = sim_step(states[i], a)
                        eps[i].note(states[i])
                except InvalidAction:
                    active[i] = False
                    eps[i].steps[-1].executed = native[:0]
        k += 1
        for i in live:
            pstates[i].steps_since_refresh += 1
            if not active[i]:
                continue
            if len(eps[i].steps) >= limits[i] or (rcfg.stop_on_success and next_subtask(states[i], tasks[i]) is None):
                active[i] = False
    for i, ep in enumerate(eps):
        ep.final = states[i]
        ep.success = next_subtask(states[i], tasks[i]) is None
        ep.score = score_rubric(states[i], tasks[i]) if tasks[i] in TASK_PROMPTS else float(ep.success)
    return eps
