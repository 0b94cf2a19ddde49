"""Token vocabulary with reserved PAD/UNK/MASKED ids."""
from __future__ import annotations

from typing import Iterable

PAD, UNK, MASKED = 0, 1, 2
RESERVED = ("<pad>", "<unk>", "<masked>")


class Vocab:
    """token -> id map. Reserved ids are never produced by :meth:`encode`.

    The reserved names appear only in the id -> token list (for display); a raw
    token spelled ``"<unk>"`` gets an ordinary id of its own.
    """

    def __init__(self, tokens: Iterable[str] = ()):
        self.itos: list[str] = list(RESERVED)
        self.stoi: dict[str, int] = {}
        for tok in tokens:
            self.add(tok)

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, tok: str) -> bool:
        return tok in self.stoi

    def add(self, tok: str) -> int:
        idx = self.stoi.get(tok)
        if idx is None:
            idx = self.stoi[tok] = len(self.itos)
            self.itos.append(tok)
        return idx

    def encode(self, tokens: Iterable[str], grow: bool = True) -> list[int]:
        if grow:
            return [self.add(t) for t in tokens]
        return [self.stoi.get(t, UNK) for t in tokens]

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.itos[i] for i in ids]

    def to_list(self) -> list[str]:
        return self.itos[len(RESERVED):]

    @classmethod
    def from_list(cls, tokens: list[str]) -> "Vocab":
        return cls(tokens)
