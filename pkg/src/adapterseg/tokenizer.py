"""Whitespace toy tokenizer with a fixed wordlist vocabulary.

Good enough for the synthetic prompt grammar; anything outside the
wordlist maps to <unk>.  Sequences are BOS + words + EOS, and the final
position is what the text encoder pools for conditioning.
"""

from __future__ import annotations

from .errors import ConfigError

PAD, BOS, EOS, UNK = 0, 1, 2, 3

WORDS = [
    "the", "a", "segment", "find", "pick", "that", "is", "region", "area",
    "shape", "one", "thing", "colored",
    "red", "green", "blue", "yellow",
    "circle", "square", "triangle",
    "round", "boxy", "triangular",
]


class Tokenizer:
    def __init__(self, vocab_size):
        if vocab_size < 4 + len(WORDS):
            raise ConfigError(
                f"vocab_size: need at least {4 + len(WORDS)} for the toy wordlist, got {vocab_size}"
            )
        self.vocab_size = vocab_size
        self._ids = {w: i + 4 for i, w in enumerate(WORDS)}

    def encode(self, text):
        ids = [BOS]
        for word in text.lower().split():
            ids.append(self._ids.get(word.strip(".,!?"), UNK))
        ids.append(EOS)
        return ids

    def encode_batch(self, texts):
        return [self.encode(t) for t in texts]
