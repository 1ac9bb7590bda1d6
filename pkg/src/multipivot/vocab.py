"""Token <-> id maps with reserved special symbols."""
from __future__ import annotations

from collections import Counter
from typing import Iterable, Sequence

PAD, BOS, EOS, UNK = 0, 1, 2, 3
SPECIALS = ("<pad>", "<s>", "</s>", "<unk>")


class Vocab:
    """Bijection between token strings and ids; ids 0-3 are reserved."""

    def __init__(self, tokens: Sequence[str]):
        tokens = list(tokens)
        if tuple(tokens[:4]) != SPECIALS:
            raise ValueError("vocabulary must start with the reserved tokens " + " ".join(SPECIALS))
        if len(set(tokens)) != len(tokens):
            raise ValueError("duplicate token in vocabulary")
        self.tokens = tokens
        self._index = {t: i for i, t in enumerate(tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocab) and self.tokens == other.tokens

    def __contains__(self, token: str) -> bool:
        return token in self._index

    def __repr__(self) -> str:
        return f"Vocab({len(self)} tokens)"

    def id(self, token: str) -> int:
        return self._index.get(token, UNK)

    def token(self, idx: int) -> str:
        return self.tokens[idx]

    def encode(self, tokens: Iterable[str]) -> list[int]:
        return [self._index.get(t, UNK) for t in tokens]

    def decode(self, ids: Iterable[int], strip_special: bool = True) -> list[str]:
        out = []
        for i in ids:
            if strip_special and i == EOS:
                break
            if strip_special and i in (PAD, BOS):
                continue
            out.append(self.tokens[i])
        return out


def build_vocab(*sides: Iterable[Sequence[str]]) -> Vocab:
    """Frequency-ordered vocabulary over one or more corpus sides.

    Several sides passed together yield one shared vocabulary.  Ties are broken
    by token string so the result is deterministic.
    """
    counts: Counter[str] = Counter()
    for side in sides:
        for sent in side:
            counts.update(sent)
    for special in SPECIALS:
        counts.pop(special, None)
    ordered = sorted(counts, key=lambda t: (-counts[t], t))
    return Vocab(list(SPECIALS) + ordered)
