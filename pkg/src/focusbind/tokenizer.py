"""A small word-piece tokenizer for the toy text encoders.

Whole words from a fixed vocabulary map to a single id. Anything else is
split greedily into the longest known pieces, so multi-piece words such as
``golden`` (``gold`` + ``##en``) exercise the subword code paths.
"""

from __future__ import annotations

import re
import string
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

PAD = "[PAD]"
EOS = "[EOS]"

COLORS = ("red", "green", "blue", "yellow", "white")
SHAPES = ("circle", "square", "triangle", "cross", "bar")

_WORDS = (
    ".", ",", "a", "an", "the", "and", "with", "on", "of", "in", "is",
    "left", "right", "above", "below",
    *COLORS, *SHAPES,
    "silver", "black", "brown", "pink", "orange", "purple", "gray",
    "car", "bird", "watch", "grass", "fence", "dog", "cat", "door", "table",
    "gold", "big", "small",
)
_PIECES = ("##en",)

_WORD_RE = re.compile(r"[A-Za-z]+|[^\sA-Za-z]")


class TokenizationError(ValueError):
    pass


def split_words(text: str) -> List[str]:
    return _WORD_RE.findall(text.lower())


@dataclass(frozen=True)
class TokenizedPrompt:
    """Words, token ids and the word -> token-range alignment of one prompt.

    ``tokens`` ends with the end-of-sentence id, so ``n`` counts it. Ranges in
    ``word_to_tokens`` are half-open ``(start, end)``.
    """

    words: Tuple[str, ...]
    tokens: Tuple[int, ...]
    word_to_tokens: Tuple[Tuple[int, int], ...]

    def __post_init__(self):
        if len(self.tokens) < 1:
            raise ValueError("a tokenized prompt needs at least the end token")
        if len(self.words) != len(self.word_to_tokens):
            raise ValueError(
                f"{len(self.words)} words but {len(self.word_to_tokens)} token ranges")
        pos = 0
        for i, (s, e) in enumerate(self.word_to_tokens):
            if s != pos or e <= s:
                raise ValueError(
                    f"token range {i} = ({s}, {e}) is empty, unordered or leaves a gap")
            pos = e
        # everything after the last word is special (the end token)
        if pos != len(self.tokens) - 1:
            raise ValueError(
                f"word ranges cover {pos} tokens, expected {len(self.tokens) - 1}")

    @property
    def n(self) -> int:
        return len(self.tokens)

    @property
    def eos_index(self) -> int:
        return len(self.tokens) - 1

    def token_range(self, word_span: Tuple[int, int]) -> Tuple[int, int]:
        """Token range covered by the half-open word span."""
        s, e = word_span
        return self.word_to_tokens[s][0], self.word_to_tokens[e - 1][1]

    def token_owner(self) -> List[Optional[int]]:
        """Word index of every token (None for the end token)."""
        owner: List[Optional[int]] = [None] * self.n
        for w, (s, e) in enumerate(self.word_to_tokens):
            for k in range(s, e):
                owner[k] = w
        return owner


class ToyTokenizer:
    def __init__(self, words: Sequence[str] = _WORDS, pieces: Sequence[str] = _PIECES):
        letters = list(string.ascii_lowercase)
        vocab = [PAD, EOS, *words, *pieces, *letters, *("##" + c for c in letters)]
        seen = set()
        self.vocab: List[str] = [v for v in vocab if not (v in seen or seen.add(v))]
        self.ids: Dict[str, int] = {v: i for i, v in enumerate(self.vocab)}
        self.pad_id = self.ids[PAD]
        self.eos_id = self.ids[EOS]

    def __len__(self) -> int:
        return len(self.vocab)

    def encode_word(self, word: str) -> List[int]:
        word = word.lower()
        if word in self.ids:
            return [self.ids[word]]
        out = []
        start = 0
        while start < len(word):
            for end in range(len(word), start, -1):
                piece = word[start:end] if start == 0 else "##" + word[start:end]
                if piece in self.ids:
                    out.append(self.ids[piece])
                    start = end
                    break
            else:
                raise TokenizationError(f"cannot tokenize {word!r} at offset {start}")
        return out

    def tokenize_words(self, words: Sequence[str]) -> TokenizedPrompt:
        tokens: List[int] = []
        ranges = []
        for w in words:
            ids = self.encode_word(w)
            ranges.append((len(tokens), len(tokens) + len(ids)))
            tokens.extend(ids)
        tokens.append(self.eos_id)
        return TokenizedPrompt(tuple(words), tuple(tokens), tuple(ranges))

    def tokenize(self, text: str) -> TokenizedPrompt:
        return self.tokenize_words(split_words(text))

    def decode(self, ids: Sequence[int]) -> List[str]:
        return [self.vocab[i] for i in ids]


DEFAULT_TOKENIZER = ToyTokenizer()
