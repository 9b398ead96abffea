"""Token vocabulary and caption encoding.

Tokenization is lowercase whitespace splitting with ``.,:;`` separated into
standalone tokens. Ids 0..3 are reserved for <pad>, <start>, <end>, <unk>;
remaining ids are assigned by descending frequency, ties broken
lexicographically, so construction is deterministic.
"""

from __future__ import annotations

import re
from collections import Counter
from pathlib import Path
from typing import Iterable, Sequence

from .errors import DataError

PAD, START, END, UNK = 0, 1, 2, 3
SPECIALS = ("<pad>", "<start>", "<end>", "<unk>")

_PUNCT = re.compile(r"([.,:;])")


def tokenize(text: str) -> list[str]:
    return _PUNCT.sub(r" \1 ", text.lower()).split()


class Vocabulary:
    def __init__(self, tokens: Sequence[str]):
        self._id_to_token = list(SPECIALS) + list(tokens)
        self._token_to_id = {t: i for i, t in enumerate(self._id_to_token)}
        if len(self._token_to_id) != len(self._id_to_token):
            raise DataError("duplicate tokens in vocabulary")

    def __len__(self) -> int:
        return len(self._id_to_token)

    def __contains__(self, token: str) -> bool:
        return token in self._token_to_id

    def id_of(self, token: str) -> int:
        return self._token_to_id.get(token, UNK)

    def token_of(self, idx: int) -> str:
        if not 0 <= idx < len(self._id_to_token):
            raise DataError(f"token id {idx} outside vocabulary of size {len(self)}")
        return self._id_to_token[idx]

    @property
    def tokens(self) -> list[str]:
        """Non-special tokens in id order."""
        return self._id_to_token[len(SPECIALS):]

    def save(self, path: str | Path) -> None:
        Path(path).write_text("\n".join(self.tokens) + ("\n" if self.tokens else ""),
                              encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        text = Path(path).read_text(encoding="utf-8")
        return cls([line for line in text.split("\n") if line])


def build_vocabulary(corpus: Iterable[str], min_count: int = 1) -> Vocabulary:
    """Frequency-sorted vocabulary over a caption corpus; rare tokens fall to <unk>."""
    counts: Counter[str] = Counter()
    n = 0
    for caption in corpus:
        n += 1
        counts.update(tokenize(caption))
    if n == 0:
        raise DataError("cannot build a vocabulary from an empty corpus")
    kept = [t for t, c in counts.items() if c >= min_count]
    kept.sort(key=lambda t: (-counts[t], t))
    return Vocabulary(kept)


def encode(text: str, vocab: Vocabulary) -> list[int]:
    """Token ids framed by <start>/<end>; OOV tokens map to <unk>."""
    return [START] + [vocab.id_of(t) for t in tokenize(text)] + [END]


def decode(ids: Sequence[int], vocab: Vocabulary) -> str:
    """Text for ``ids`` with <pad>/<start>/<end> stripped; <unk> stays literal."""
    words = []
    for i in ids:
        if i in (PAD, START):
            continue
        if i == END:
            break
        words.append(vocab.token_of(int(i)))
    return " ".join(words)
