"""Word-level tokenizer with a deterministic hash band for unknown words."""

from __future__ import annotations

import re
import zlib
from importlib import resources

_WORD_RE = re.compile(r"[a-z0-9]+")

PAD_ID = 0
START_ID = 1
END_ID = 2
_FIRST_WORD_ID = 3


def _asset_words(name: str) -> list[str]:
    text = resources.files("lasp.assets").joinpath(name).read_text("utf-8")
    return [w for w in text.split() if w]


def default_word_list() -> list[str]:
    """Every word the shipped assets can produce, deduplicated, in order."""
    words: list[str] = []
    seen: set[str] = set()
    for name in ("templates_100.txt", "filler_words.txt", "class_words.txt"):
        for token in _asset_words(name):
            for w in _WORD_RE.findall(token.lower()):
                if w not in seen:
                    seen.add(w)
                    words.append(w)
    return words


class Tokenizer:
    """Total, deterministic word tokenizer.

    Known words get fixed ids; unknown words hash into a reserved band at
    the top of the vocabulary so they are stable across runs.
    """

    def __init__(self, words: list[str] | None = None,
                 vocab_size: int = 4096, hash_band: int = 256,
                 max_len: int = 32):
        words = default_word_list() if words is None else words
        if _FIRST_WORD_ID + len(words) > vocab_size - hash_band:
            raise ValueError("word list does not fit below the hash band")
        self.vocab_size = vocab_size
        self.hash_band = hash_band
        self.max_len = max_len
        self.vocab = {w: _FIRST_WORD_ID + i for i, w in enumerate(words)}
        self._inverse = {i: w for w, i in self.vocab.items()}

    def words_of(self, text: str) -> list[str]:
        return _WORD_RE.findall(text.lower())

    def word_id(self, word: str) -> int:
        wid = self.vocab.get(word)
        if wid is None:
            band_start = self.vocab_size - self.hash_band
            wid = band_start + zlib.crc32(word.encode("utf-8")) % self.hash_band
        return wid

    def tokenize(self, text: str) -> list[int]:
        ids = [self.word_id(w) for w in self.words_of(text)]
        ids = ids[: self.max_len - 2]
        return [START_ID] + ids + [END_ID]

    def detokenize(self, ids: list[int]) -> str:
        words = []
        for i in ids:
            if i in (PAD_ID, START_ID, END_ID):
                continue
            words.append(self._inverse.get(i, "<unk>"))
        return " ".join(words)
