"""Word-level toy tokenizer: reserved ids for task words, crc32 hashing for the rest."""

from __future__ import annotations

import re
import zlib

from ..distort import DISTORTION_TYPES
from ..prompt import IMG, LEVEL_WORDS, P_END, P_START, PTS

PAD, BOS, P_START_ID, P_END_ID = 0, 1, 2, 3
OCTANT_WORDS = tuple(f"octant{i}" for i in range(8))
TYPE_WORDS = DISTORTION_TYPES

_RESERVED = ("<pad>", "<bos>", P_START, P_END) + LEVEL_WORDS + OCTANT_WORDS + TYPE_WORDS
_WORD = re.compile(r"[a-z0-9]+(?:-[a-z0-9]+)*|[^\sa-z0-9]")


class Tokenizer:
    def __init__(self, vocab_size: int = 64):
        if vocab_size <= len(_RESERVED):
            raise ValueError(f"vocab_size must exceed {len(_RESERVED)} reserved ids")
        self.vocab_size = vocab_size
        self.reserved = {w: i for i, w in enumerate(_RESERVED)}
        self.n_reserved = len(_RESERVED)

    def word_id(self, word: str) -> int:
        i = self.reserved.get(word)
        if i is not None:
            return i
        free = self.vocab_size - self.n_reserved
        return self.n_reserved + zlib.crc32(word.encode("utf-8")) % free

    @property
    def level_ids(self) -> list:
        return [self.reserved[w] for w in LEVEL_WORDS]

    @property
    def octant_ids(self) -> list:
        return [self.reserved[w] for w in OCTANT_WORDS]

    @property
    def type_ids(self) -> list:
        return [self.reserved[w] for w in TYPE_WORDS]

    def words(self, text: str) -> list:
        return _WORD.findall(text.lower())

    def encode(self, text: str) -> list:
        return [self.word_id(w) for w in self.words(text)]

    def split_prompt(self, prompt: str):
        """Token ids of the text before the image slots and after the point span.

        Returns ``(prefix_ids, n_images, suffix_ids)``; ``n_images`` is 0 or 6.
        """
        head, sep, tail = prompt.partition(P_START + PTS + P_END)
        if not sep:
            raise ValueError("prompt lacks the point span")
        n_img = head.count(IMG)
        if n_img not in (0, 6) or (n_img and not head.endswith(IMG * 6)):
            raise ValueError("prompt must carry 6 image slots directly before the point span")
        prefix = head[: len(head) - len(IMG) * n_img]
        return self.encode(prefix), n_img, self.encode(tail)
