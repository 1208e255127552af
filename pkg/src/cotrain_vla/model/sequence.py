"""Role-tagged mixed sequences, the attention mask, and batch collation."""

from __future__ import annotations

from dataclasses import dataclass
from enum import IntEnum

import numpy as np
import torch

from ..codec import CodecError, ControlMode, FastVocab, NormStats, encode_fast, normalize_values
from ..text import TextVocab
from .config import ModelConfig


class Role(IntEnum):
    IMAGE = 0
    PROMPT = 1
    PROPRIO = 2
    FAST = 3
    TEXT = 4
    NOISY = 5
    PAD = 6


PREFIX_ROLES = (Role.IMAGE, Role.PROMPT, Role.PROPRIO)
TARGET_ROLES = (Role.FAST, Role.TEXT)


def discretize_proprio(q, bins: int = 64, low=-1.0, high=1.0) -> list[int]:
    """Uniform bins over [low, high] per dimension; returns bin indices (not vocab ids)."""
    q = np.asarray(q, dtype=np.float64)
    if not np.all(np.isfinite(q)):
        raise ValueError("non-finite proprio")
    v = 2.0 * (q - low) / (np.asarray(high) - np.asarray(low)) - 1.0
    b = np.floor(bins * (v + 1.0) / 2.0).astype(np.int64)
    return np.clip(b, 0, bins - 1).tolist()


def patchify(images: np.ndarray, patch: int) -> np.ndarray:
    """(n_cam, S, S, 3) -> (n_cam * (S/p)^2, p*p*3), cameras then row-major patches."""
    n, S, _, C = images.shape
    g = S // patch
    x = images.reshape(n, g, patch, g, patch, C).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(n * g * g, patch * patch * C)


@dataclass
class MixedSequence:
    roles: np.ndarray  # (N,) int
    tokens: np.ndarray  # (N,) int, 0 where the payload is not a token
    positions: np.ndarray  # (N,) int
    loss_mask: np.ndarray  # (N,) bool
    patches: np.ndarray  # (n_image_tokens, patch_dim)
    noisy: np.ndarray | None = None  # (H, d_max)
    tau: float | None = None
    flow_target: np.ndarray | None = None  # u = omega - a

    def __len__(self) -> int:
        return len(self.roles)

    @property
    def n_text_loss(self) -> int:
        return int(np.sum(self.loss_mask & np.isin(self.roles, TARGET_ROLES)))


def build_sequence(cfg: ModelConfig, images: np.ndarray, prompt_ids, proprio_ids, targets=(),
                   noisy: np.ndarray | None = None, tau: float | None = None,
                   flow_target: np.ndarray | None = None) -> MixedSequence:
    """Assemble [images | prompt | proprio | targets | noisy].

    ``targets`` is a list of (token_id, Role.FAST or Role.TEXT).
    """
    patches = patchify(np.asarray(images, dtype=np.float32), cfg.patch)
    if len(patches) != cfg.n_image_tokens:
        raise ValueError(f"expected {cfg.n_image_tokens} image patches, got {len(patches)}")
    if len(prompt_ids) > cfg.max_prompt:
        raise ValueError(f"prompt of {len(prompt_ids)} tokens exceeds {cfg.max_prompt}")
    if len(proprio_ids) > cfg.proprio_dim:
        raise ValueError("too many proprio tokens")
    if len(targets) > cfg.max_target:
        raise ValueError(f"{len(targets)} target tokens exceed {cfg.max_target}")
    off = cfg.block_offsets()
    roles, tokens, pos = [], [], []
    roles += [Role.IMAGE] * cfg.n_image_tokens
    tokens += [0] * cfg.n_image_tokens
    pos += list(range(cfg.n_image_tokens))
    roles += [Role.PROMPT] * len(prompt_ids)
    tokens += list(prompt_ids)
    pos += [off["prompt"] + i for i in range(len(prompt_ids))]
    roles += [Role.PROPRIO] * len(proprio_ids)
    tokens += list(proprio_ids)
    pos += [off["proprio"] + i for i in range(len(proprio_ids))]
    for i, (t, r) in enumerate(targets):
        if r not in TARGET_ROLES:
            raise ValueError(f"bad target role {r}")
        roles.append(r)
        tokens.append(int(t))
        pos.append(off["target"] + i)
    loss = [r in TARGET_ROLES for r in roles]
    if noisy is not None:
        noisy = np.asarray(noisy, dtype=np.float32)
        if noisy.shape != (cfg.horizon, cfg.d_max):
            raise ValueError(f"noisy chunk must be {(cfg.horizon, cfg.d_max)}, got {noisy.shape}")
        if tau is None:
            raise ValueError("noisy actions need a flow timestep")
        roles += [Role.NOISY] * cfg.horizon
        tokens += [0] * cfg.horizon
        pos += list(range(cfg.horizon))
        loss += [flow_target is not None] * cfg.horizon
    return MixedSequence(
        roles=np.array(roles, dtype=np.int64), tokens=np.array(tokens, dtype=np.int64),
        positions=np.array(pos, dtype=np.int64), loss_mask=np.array(loss, dtype=bool),
        patches=patches, noisy=noisy, tau=tau, flow_target=flow_target,
    )


def build_attention_mask(roles) -> np.ndarray:
    """mask[i, j] is True when token i may attend to token j."""
    r = np.asarray(roles)
    pre = np.isin(r, PREFIX_ROLES)
    tgt = np.isin(r, TARGET_ROLES)
    noi = r == Role.NOISY
    pad = r == Role.PAD
    n = len(r)
    idx = np.arange(n)
    causal = idx[None, :] <= idx[:, None]
    m = pre[:, None] & pre[None, :]
    m |= tgt[:, None] & (pre[None, :] | (tgt[None, :] & causal))
    m |= noi[:, None] & (pre[None, :] | noi[None, :])
    m |= pad[:, None] & np.eye(n, dtype=bool)
    return m


def batch_attention_mask(roles: torch.Tensor) -> torch.Tensor:
    """Vectorized build_attention_mask over a (B, N) role tensor."""
    pre = roles <= Role.PROPRIO
    tgt = (roles == Role.FAST) | (roles == Role.TEXT)
    noi = roles == Role.NOISY
    pad = roles == Role.PAD
    n = roles.shape[1]
    idx = torch.arange(n, device=roles.device)
    causal = (idx[None, :] <= idx[:, None])[None]
    eye = torch.eye(n, dtype=torch.bool, device=roles.device)[None]
    m = pre[:, :, None] & pre[:, None, :]
    m |= tgt[:, :, None] & (pre[:, None, :] | (tgt[:, None, :] & causal))
    m |= noi[:, :, None] & (pre[:, None, :] | noi[:, None, :])
    m |= pad[:, :, None] & eye
    return m


# ---------------------------------------------------------------------------
# tokenization context


@dataclass
class SequenceTokenizer:
    """Text vocabulary, FAST vocabulary and per-dataset action normalization."""

    text: TextVocab
    fast: FastVocab | None
    norm: dict[str, NormStats]
    d_max: int = 7
    proprio_bins: int = 64

    def prompt_ids(self, text: str, control_mode: ControlMode | str | None = None) -> list[int]:
        ids = self.text.encode(text, strict=False)
        if control_mode is not None:
            ids = [self.text.mode_token(control_mode)] + ids
        return ids

    def proprio_ids(self, q) -> list[int]:
        return [self.text.proprio_offset + b for b in discretize_proprio(q, self.proprio_bins)]

    def stats(self, key: str) -> NormStats:
        if key not in self.norm:
            raise CodecError(f"no normalization stats for {key!r}")
        return self.norm[key]

    def normalized(self, actions: np.ndarray, key: str) -> np.ndarray:
        """Normalize then zero-pad to (H, d_max)."""
        v = normalize_values(np.asarray(actions, dtype=np.float64), self.stats(key))
        out = np.zeros((v.shape[0], self.d_max))
        out[:, : v.shape[1]] = v
        return out

    def fast_ids(self, actions: np.ndarray, key: str) -> list[int]:
        if self.fast is None:
            raise CodecError("no FAST vocabulary")
        return [self.text.fast_token(t) for t in encode_fast(self.normalized(actions, key), self.fast)]

    def text_targets(self, text: str) -> list[tuple[int, Role]]:
        return [(t, Role.TEXT) for t in self.text.encode(text)]

    def to_dict(self) -> dict:
        return {
            "text": {"loc_bins": self.text.loc_bins, "proprio_bins": self.text.proprio_bins,
                     "fast_size": self.text.fast_size, "words": list(self.text.words)},
            "fast": None if self.fast is None else self.fast.to_dict(),
            "norm": {k: v.to_dict() for k, v in sorted(self.norm.items())},
            "d_max": self.d_max,
            "proprio_bins": self.proprio_bins,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SequenceTokenizer":
        t = d["text"]
        text = TextVocab(loc_bins=t["loc_bins"], proprio_bins=t["proprio_bins"], fast_size=t["fast_size"],
                         words=tuple(t["words"]))
        fast = None if d["fast"] is None else FastVocab.from_dict(d["fast"])
        norm = {k: NormStats.from_dict(v) for k, v in d["norm"].items()}
        return cls(text=text, fast=fast, norm=norm, d_max=d["d_max"], proprio_bins=d["proprio_bins"])


# ---------------------------------------------------------------------------
# batching


@dataclass
class Batch:
    roles: torch.Tensor  # (B, N)
    tokens: torch.Tensor  # (B, N)
    positions: torch.Tensor  # (B, N)
    patches: torch.Tensor  # (B, n_img, patch_dim)
    mask: torch.Tensor  # (B, N, N)
    pred_b: torch.Tensor  # (M,) batch index of each text-loss target
    pred_i: torch.Tensor  # (M,) position whose output predicts it
    labels: torch.Tensor  # (M,)
    noisy: torch.Tensor | None = None  # (B, H, d_max)
    tau: torch.Tensor | None = None  # (B,)
    flow_target: torch.Tensor | None = None  # (B, H, d_max)
    flow_mask: torch.Tensor | None = None  # (B,) bool

    @property
    def size(self) -> int:
        return self.roles.shape[0]

    @property
    def has_noisy(self) -> bool:
        return self.noisy is not None

    def to(self, dtype: torch.dtype) -> "Batch":
        f = lambda t: None if t is None else (t.to(dtype) if t.is_floating_point() else t)  # noqa: E731
        return Batch(**{k: f(v) for k, v in self.__dict__.items()})


def collate(seqs: list[MixedSequence], horizon: int | None = None) -> Batch:
    """Right-pad the non-noisy part, then append one shared noisy block if any sequence has one."""
    B = len(seqs)
    body = [int(np.sum(s.roles != Role.NOISY)) for s in seqs]
    L = max(body)
    any_noisy = any(s.noisy is not None for s in seqs)
    H = horizon or next((s.noisy.shape[0] for s in seqs if s.noisy is not None), 0)
    N = L + (H if any_noisy else 0)
    roles = np.full((B, N), Role.PAD, dtype=np.int64)
    tokens = np.zeros((B, N), dtype=np.int64)
    positions = np.zeros((B, N), dtype=np.int64)
    pred_b, pred_i, labels = [], [], []
    for b, s in enumerate(seqs):
        n = body[b]
        roles[b, :n] = s.roles[:n]
        tokens[b, :n] = s.tokens[:n]
        positions[b, :n] = s.positions[:n]
        for i in np.nonzero(s.loss_mask[:n] & np.isin(s.roles[:n], TARGET_ROLES))[0]:
            pred_b.append(b)
            pred_i.append(i - 1)
            labels.append(s.tokens[i])
        if s.noisy is not None:
            roles[b, L:] = Role.NOISY
            positions[b, L:] = np.arange(H)
    batch = Batch(
        roles=torch.from_numpy(roles), tokens=torch.from_numpy(tokens),
        positions=torch.from_numpy(positions),
        patches=torch.from_numpy(np.stack([s.patches for s in seqs]).astype(np.float32)),
        mask=batch_attention_mask(torch.from_numpy(roles)),
        pred_b=torch.tensor(pred_b, dtype=torch.long), pred_i=torch.tensor(pred_i, dtype=torch.long),
        labels=torch.tensor(labels, dtype=torch.long),
    )
    if any_noisy:
        d = next(s.noisy.shape[1] for s in seqs if s.noisy is not None)
        noisy = np.zeros((B, H, d), dtype=np.float32)
        target = np.zeros((B, H, d), dtype=np.float32)
        tau = np.zeros(B, dtype=np.float32)
        fmask = np.zeros(B, dtype=bool)
        for b, s in enumerate(seqs):
            if s.noisy is not None:
                noisy[b] = s.noisy
                tau[b] = s.tau
                if s.flow_target is not None:
                    target[b] = s.flow_target
                    fmask[b] = True
        batch.noisy = torch.from_numpy(noisy)
        batch.tau = torch.from_numpy(tau)
        batch.flow_target = torch.from_numpy(target)
        batch.flow_mask = torch.from_numpy(fmask)
    return batch
