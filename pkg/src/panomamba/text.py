"""Word-level tokenizer over a fixed vocabulary file.

One token per line, UTF-8; line order defines token ids. The first two
entries must be the pad and unknown tokens. Unknown words map to UNK, and
every encoding is padded (or truncated) to the context length of 77.
"""

from __future__ import annotations

import numpy as np

from .tensor import ContractError

PAD_TOKEN = "<pad>"
UNK_TOKEN = "<unk>"
MAX_LEN = 77

# covers the synthetic caption templates plus a little slack
DEFAULT_VOCAB = [
    PAD_TOKEN,
    UNK_TOKEN,
    "a", "an", "the", "scene", "with", "boxes", "box", "and",
    "warm", "cool", "gray", "vivid", "dark", "bright",
    "sky", "ground", "horizon", "sun", "empty",
    "0", "1", "2", "3", "4", "5", "6", "7", "8", "9",
]


class Tokenizer:
    def __init__(self, vocab):
        vocab = list(vocab)
        if len(vocab) != len(set(vocab)):
            raise ContractError("vocabulary has duplicate tokens")
        if vocab[:2] != [PAD_TOKEN, UNK_TOKEN]:
            raise ContractError(f"vocabulary must start with {PAD_TOKEN!r}, {UNK_TOKEN!r}")
        self.vocab = vocab
        self.index = {tok: i for i, tok in enumerate(vocab)}

    @classmethod
    def default(cls):
        return cls(DEFAULT_VOCAB)

    @classmethod
    def from_file(cls, path):
        with open(path, encoding="utf-8") as f:
            vocab = [line.rstrip("\n") for line in f if line.rstrip("\n")]
        return cls(vocab)

    def save(self, path):
        with open(path, "w", encoding="utf-8") as f:
            for tok in self.vocab:
                f.write(tok + "\n")

    def __len__(self):
        return len(self.vocab)

    def encode(self, text, max_len=MAX_LEN):
        """Whitespace-split word ids, padded with PAD to max_len."""
        words = text.lower().split()[:max_len]
        ids = [self.index.get(w, 1) for w in words]
        ids += [0] * (max_len - len(ids))
        return np.asarray(ids, dtype=np.int64)


def text_dropout(text, rng, prob=0.5):
    """Replace the prompt with the empty string at the given probability."""
    return "" if rng.random() < prob else text
