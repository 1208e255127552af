"""Closed word-level vocabulary shared by prompts, subtasks, web answers and action tokens.

Id layout: specials | words | location tokens | proprio bins | FAST tokens.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .world import palette as P

SPECIALS = ("<pad>", "<eos>", "<eoa>", "<joint>", "<end_effector>", "<unk>")
PAD, EOS, EOA = 0, 1, 2

_TEMPLATE_WORDS = (
    "put the in a of on near pick up down open close straighten make "
    "dishes items laundry sink drawer basket bed pillow blanket left right "
    "describe what color is where ?"
).split()


def base_words() -> tuple[str, ...]:
    words = list(dict.fromkeys(_TEMPLATE_WORDS))
    for w in P.CATEGORIES + P.COLORS:
        if w not in words:
            words.append(w)
    return tuple(words)


@dataclass
class TextVocab:
    loc_bins: int = 16
    proprio_bins: int = 64
    fast_size: int = 0
    words: tuple[str, ...] = field(default_factory=base_words)

    def __post_init__(self):
        self._itos = list(SPECIALS) + list(self.words)
        self._itos += [f"<loc{i}>" for i in range(self.loc_bins)]
        self._stoi = {s: i for i, s in enumerate(self._itos)}
        self.loc_offset = len(SPECIALS) + len(self.words)
        self.proprio_offset = self.loc_offset + self.loc_bins
        self.fast_offset = self.proprio_offset + self.proprio_bins

    @property
    def size(self) -> int:
        return self.fast_offset + self.fast_size

    def mode_token(self, control_mode) -> int:
        return self._stoi[f"<{getattr(control_mode, 'value', control_mode)}>"]

    def encode(self, text: str, strict: bool = True) -> list[int]:
        out = []
        for w in text.split():
            if w not in self._stoi:
                if strict:
                    raise KeyError(f"word {w!r} not in vocabulary")
                w = "<unk>"
            out.append(self._stoi[w])
        return out

    def token_str(self, i: int) -> str:
        if i < self.proprio_offset:
            return self._itos[i]
        if i < self.fast_offset:
            return f"<q{i - self.proprio_offset}>"
        if i < self.size:
            return f"<fast{i - self.fast_offset}>"
        raise IndexError(i)

    def decode(self, ids) -> str:
        """Words only; stops at <eos> and skips everything that is not a word."""
        words = []
        lo, hi = len(SPECIALS), self.loc_offset
        for i in ids:
            if i == EOS:
                break
            if lo <= i < hi:
                words.append(self._itos[i])
        return " ".join(words)

    def loc_token(self, pixel: int) -> int:
        if not 0 <= pixel < self.loc_bins:
            raise ValueError(f"pixel {pixel} outside [0, {self.loc_bins})")
        return self.loc_offset + pixel

    def is_loc(self, i: int) -> bool:
        return self.loc_offset <= i < self.proprio_offset

    def fast_token(self, j: int) -> int:
        return self.fast_offset + j

    def is_fast(self, i: int) -> bool:
        return self.fast_offset <= i < self.size
