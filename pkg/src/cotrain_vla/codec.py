"""Action chunk codecs.

Two representations of an action chunk are needed by the model:

* a normalized continuous one (quantile-scaled to [-1, 1], zero-padded to a
  shared dimensionality) consumed by flow matching, and
* a discrete one (frequency transform + scalar quantization + greedy pair
  merging) consumed by next-token prediction.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Iterable, Sequence

import numpy as np
import scipy.fft

NORM_STATS_VERSION = 1
FAST_VOCAB_VERSION = 1


class CodecError(ValueError):
    pass


class ControlMode(str, Enum):
    JOINT = "joint"
    END_EFFECTOR = "end_effector"


@dataclass(frozen=True)
class ActionChunk:
    values: np.ndarray  # (horizon, dim)
    is_normalized: bool = False
    control_mode: ControlMode = ControlMode.JOINT
    # number of original columns before zero padding, None when unpadded
    orig_dim: int | None = None

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2 or v.shape[0] < 1 or v.shape[1] < 1:
            raise CodecError(f"action chunk must be a non-empty (H, d) matrix, got {v.shape}")
        object.__setattr__(self, "values", v)

    @property
    def horizon(self) -> int:
        return self.values.shape[0]

    @property
    def dim(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class NormStats:
    q_low: np.ndarray
    q_high: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.q_low, dtype=np.float64).reshape(-1)
        hi = np.asarray(self.q_high, dtype=np.float64).reshape(-1)
        if lo.shape != hi.shape or lo.size == 0:
            raise CodecError("q_low and q_high must be non-empty and equally sized")
        if np.any(lo > hi):
            raise CodecError("q_low must not exceed q_high")
        object.__setattr__(self, "q_low", lo)
        object.__setattr__(self, "q_high", hi)

    @property
    def dim_count(self) -> int:
        return self.q_low.size

    def to_dict(self) -> dict:
        return {
            "version": NORM_STATS_VERSION,
            "dim_count": self.dim_count,
            "q_low": [float(x) for x in self.q_low],
            "q_high": [float(x) for x in self.q_high],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NormStats":
        if d.get("version") != NORM_STATS_VERSION:
            raise CodecError(f"unsupported NormStats version {d.get('version')}")
        stats = cls(np.array(d["q_low"]), np.array(d["q_high"]))
        if stats.dim_count != d["dim_count"]:
            raise CodecError("dim_count does not match quantile arrays")
        return stats


def fit_normalizer(chunks: Iterable[ActionChunk], low: float = 0.01, high: float = 0.99) -> NormStats:
    """Per-dimension empirical quantiles of all entries pooled over time and chunks.

    Uses the linear-interpolation quantile (rank ``p * (n - 1)``).
    """
    chunks = list(chunks)
    if not chunks:
        raise CodecError("cannot fit a normalizer on an empty collection")
    dims = {c.dim for c in chunks}
    if len(dims) != 1:
        raise CodecError(f"chunks disagree on action dimension: {sorted(dims)}")
    pooled = np.concatenate([c.values for c in chunks], axis=0)
    if not np.all(np.isfinite(pooled)):
        raise CodecError("non-finite values in normalizer input")
    q_low = np.quantile(pooled, low, axis=0, method="linear")
    q_high = np.quantile(pooled, high, axis=0, method="linear")
    return NormStats(q_low, q_high)


def _check_dims(chunk: ActionChunk, stats: NormStats):
    if chunk.dim != stats.dim_count:
        raise CodecError(f"chunk has {chunk.dim} dims but stats cover {stats.dim_count}")


def normalize_values(values: np.ndarray, stats: NormStats) -> np.ndarray:
    span = stats.q_high - stats.q_low
    degenerate = span == 0
    safe = np.where(degenerate, 1.0, span)
    out = 2.0 * (values - stats.q_low) / safe - 1.0
    out = np.clip(out, -1.0, 1.0)
    return np.where(degenerate, 0.0, out)


def denormalize_values(values: np.ndarray, stats: NormStats) -> np.ndarray:
    span = stats.q_high - stats.q_low
    return (np.asarray(values, dtype=np.float64) + 1.0) * 0.5 * span + stats.q_low


def normalize(chunk: ActionChunk, stats: NormStats) -> ActionChunk:
    if chunk.is_normalized:
        raise CodecError("chunk is already normalized")
    _check_dims(chunk, stats)
    return replace(chunk, values=normalize_values(chunk.values, stats), is_normalized=True)


def denormalize(chunk: ActionChunk, stats: NormStats) -> ActionChunk:
    if not chunk.is_normalized:
        raise CodecError("chunk is not normalized")
    _check_dims(chunk, stats)
    return replace(chunk, values=denormalize_values(chunk.values, stats), is_normalized=False)


def pad_actions(chunk: ActionChunk, target_dim: int) -> ActionChunk:
    if target_dim < chunk.dim:
        raise CodecError(f"cannot pad {chunk.dim} dims down to {target_dim}")
    if target_dim == chunk.dim:
        return chunk
    out = np.zeros((chunk.horizon, target_dim))
    out[:, : chunk.dim] = chunk.values
    orig = chunk.orig_dim if chunk.orig_dim is not None else chunk.dim
    return replace(chunk, values=out, orig_dim=orig)


def unpad_actions(chunk: ActionChunk) -> ActionChunk:
    if chunk.orig_dim is None:
        return chunk
    return replace(chunk, values=chunk.values[:, : chunk.orig_dim].copy(), orig_dim=None)


# ---------------------------------------------------------------------------
# discrete tokenizer


@dataclass(frozen=True)
class FastVocab:
    """Frequency-transform + quantize + pair-merge action tokenizer.

    Base symbols are ``0 .. levels-1``; merge ``i`` creates symbol ``levels + i``.
    """

    horizon: int
    dim: int
    levels: int
    n_coeffs: int
    merges: tuple[tuple[int, int], ...] = ()
    coef_range: tuple[float, float] = (-4.0, 4.0)
    _expansion: dict = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if self.levels < 2:
            raise CodecError("levels must be >= 2")
        if not 1 <= self.n_coeffs <= self.horizon:
            raise CodecError("n_coeffs must lie in [1, horizon]")
        merges = tuple((int(a), int(b)) for a, b in self.merges)
        object.__setattr__(self, "merges", merges)
        expansion: dict[int, tuple[int, ...]] = {s: (s,) for s in range(self.levels)}
        for i, (a, b) in enumerate(merges):
            if a not in expansion or b not in expansion:
                raise CodecError(f"merge {i} references unknown symbols {(a, b)}")
            expansion[self.levels + i] = expansion[a] + expansion[b]
        object.__setattr__(self, "_expansion", expansion)

    @property
    def size(self) -> int:
        return self.levels + len(self.merges)

    @property
    def step(self) -> float:
        lo, hi = self.coef_range
        return (hi - lo) / (self.levels - 1)

    @property
    def stream_length(self) -> int:
        return self.n_coeffs * self.dim

    def expand(self, token: int) -> tuple[int, ...]:
        try:
            return self._expansion[int(token)]
        except KeyError:
            raise CodecError(f"token {token} outside vocab range [0, {self.size})") from None

    def half_step_bound(self) -> float:
        """Worst-case per-entry reconstruction error from quantization alone."""
        basis = dct_matrix(self.horizon)[: self.n_coeffs]
        return 0.5 * self.step * float(np.abs(basis).sum(axis=0).max())

    def to_dict(self) -> dict:
        return {
            "version": FAST_VOCAB_VERSION,
            "horizon": self.horizon,
            "dim": self.dim,
            "levels": self.levels,
            "k": self.n_coeffs,
            "coef_range": list(self.coef_range),
            "merges": [list(m) for m in self.merges],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FastVocab":
        if d.get("version") != FAST_VOCAB_VERSION:
            raise CodecError(f"unsupported FastVocab version {d.get('version')}")
        return cls(
            horizon=d["horizon"],
            dim=d["dim"],
            levels=d["levels"],
            n_coeffs=d["k"],
            merges=tuple(tuple(m) for m in d["merges"]),
            coef_range=tuple(d["coef_range"]),
        )


def dct_matrix(n: int) -> np.ndarray:
    """Orthonormal type-II DCT as an (n, n) matrix; rows are frequencies."""
    return scipy.fft.dct(np.eye(n), type=2, norm="ortho", axis=0)


def quantize_chunk(values: np.ndarray, horizon: int, levels: int, n_coeffs: int,
                   coef_range: tuple[float, float] = (-4.0, 4.0)) -> list[int]:
    """Raw (merge-free) symbol stream of a normalized chunk, low frequencies first."""
    values = np.asarray(values, dtype=np.float64)
    if values.shape[0] != horizon:
        raise CodecError(f"expected horizon {horizon}, got {values.shape[0]}")
    coeffs = scipy.fft.dct(values, type=2, norm="ortho", axis=0)[:n_coeffs]
    lo, hi = coef_range
    step = (hi - lo) / (levels - 1)
    sym = np.rint((np.clip(coeffs, lo, hi) - lo) / step).astype(np.int64)
    sym = np.clip(sym, 0, levels - 1)
    # row-major over (coefficient, dimension) interleaves dims per frequency
    return sym.reshape(-1).tolist()


def _merge_seq(seq: tuple[int, ...], pair: tuple[int, int], new: int) -> tuple[int, ...]:
    out = []
    i = 0
    a, b = pair
    n = len(seq)
    while i < n:
        if i + 1 < n and seq[i] == a and seq[i + 1] == b:
            out.append(new)
            i += 2
        else:
            out.append(seq[i])
            i += 1
    return tuple(out)


def _pair_counts(corpus: Counter) -> Counter:
    counts: Counter = Counter()
    for seq, mult in corpus.items():
        for pair in zip(seq, seq[1:]):
            counts[pair] += mult
    return counts


def train_fast_vocab(chunks: Iterable[ActionChunk], levels: int = 129, merges: int = 256,
                     n_coeffs: int | None = None,
                     coef_range: tuple[float, float] = (-4.0, 4.0)) -> FastVocab:
    """Learn greedy pair merges over the quantized symbol streams of ``chunks``.

    Pair counts are aggregated over the whole corpus before each merge, so the
    result does not depend on chunk order. Ties go to the lowest ``(a, b)``.
    """
    chunks = list(chunks)
    if not chunks:
        raise CodecError("empty tokenizer corpus")
    if levels < 2 or merges < 0:
        raise CodecError("need levels >= 2 and merges >= 0")
    horizon, dim = chunks[0].horizon, chunks[0].dim
    if any(c.horizon != horizon or c.dim != dim for c in chunks):
        raise CodecError("all corpus chunks must share horizon and dim")
    if any(not c.is_normalized for c in chunks):
        raise CodecError("tokenizer corpus must be normalized")
    k = horizon if n_coeffs is None else n_coeffs
    corpus = Counter(tuple(quantize_chunk(c.values, horizon, levels, k, coef_range)) for c in chunks)
    rules: list[tuple[int, int]] = []
    for i in range(merges):
        counts = _pair_counts(corpus)
        if not counts:
            break
        best = max(counts.values())
        pair = min(p for p, c in counts.items() if c == best)
        new = levels + i
        merged: Counter = Counter()
        for seq, mult in corpus.items():
            merged[_merge_seq(seq, pair, new)] += mult
        corpus = merged
        rules.append(pair)
    return FastVocab(horizon, dim, levels, k, tuple(rules), tuple(coef_range))


def encode_fast(chunk: ActionChunk | np.ndarray, vocab: FastVocab) -> list[int]:
    values = chunk.values if isinstance(chunk, ActionChunk) else np.asarray(chunk, dtype=np.float64)
    if values.ndim != 2 or values.shape[1] != vocab.dim:
        raise CodecError(f"expected ({vocab.horizon}, {vocab.dim}) chunk, got {values.shape}")
    seq = tuple(quantize_chunk(values, vocab.horizon, vocab.levels, vocab.n_coeffs, vocab.coef_range))
    for i, pair in enumerate(vocab.merges):
        if len(seq) < 2:
            break
        seq = _merge_seq(seq, pair, vocab.levels + i)
    return list(seq)


def decode_fast(tokens: Sequence[int], vocab: FastVocab,
                control_mode: ControlMode = ControlMode.JOINT) -> ActionChunk:
    symbols: list[int] = []
    for t in tokens:
        symbols.extend(vocab.expand(t))
    if len(symbols) != vocab.stream_length:
        raise CodecError(f"token stream expands to {len(symbols)} symbols, expected {vocab.stream_length}")
    lo, _ = vocab.coef_range
    coeffs = np.zeros((vocab.horizon, vocab.dim))
    coeffs[: vocab.n_coeffs] = lo + np.array(symbols, dtype=np.float64).reshape(vocab.n_coeffs, vocab.dim) * vocab.step
    values = scipy.fft.idct(coeffs, type=2, norm="ortho", axis=0)
    return ActionChunk(values, is_normalized=True, control_mode=control_mode)


# ---------------------------------------------------------------------------
# persistence


def save_codec(path, stats: dict[str, NormStats], vocab: FastVocab | None = None):
    doc = {"version": 1, "norm_stats": {k: v.to_dict() for k, v in sorted(stats.items())}}
    if vocab is not None:
        doc["fast_vocab"] = vocab.to_dict()
    with open(path, "w") as f:
        json.dump(doc, f, indent=1, sort_keys=True)


def load_codec(path) -> tuple[dict[str, NormStats], FastVocab | None]:
    with open(path) as f:
        doc = json.load(f)
    stats = {k: NormStats.from_dict(v) for k, v in doc["norm_stats"].items()}
    vocab = FastVocab.from_dict(doc["fast_vocab"]) if "fast_vocab" in doc else None
    return stats, vocab
