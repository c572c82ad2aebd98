"""Disentangled prompt encodings built from an abstracted constituency tree."""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Sequence, Tuple, Union

import numpy as np
import torch

from .encoder import EncoderAdapter, encode_prompt
from .syntax import AbstractedTree, Constituent, extract_constituents
from .tokenizer import TokenizedPrompt


@dataclass
class Segment:
    source: Union[str, int]  # "prompt" or constituent index
    rows: Tuple[int, int]


@dataclass
class DisCLIPEncoding:
    embeddings: torch.Tensor  # (n', d)
    segments: List[Segment]
    token_strings: List[str]

    @property
    def n(self) -> int:
        return self.embeddings.shape[0]


def encode_disclip(
    prompt: TokenizedPrompt,
    atree: AbstractedTree,
    encoder: EncoderAdapter,
    token_names: Sequence[str] = None,
) -> DisCLIPEncoding:
    """Whole prompt first, then every kept constituent encoded on its own.

    Constituent encodings lose their end-of-text and padding rows so only
    content tokens are appended.
    """
    if atree.base.tokens.tokens != prompt.tokens:
        raise ValueError("abstracted tree was built from a different prompt")
    names = list(token_names) if token_names is not None else [str(t) for t in prompt.tokens]
    whole = encode_prompt(encoder, prompt.tokens)
    if whole.shape[0] != prompt.n:
        raise ValueError(f"encoder returned {whole.shape[0]} rows for {prompt.n} tokens")
    parts = [whole]
    segments = [Segment("prompt", (0, prompt.n))]
    strings = list(names)
    row = prompt.n
    for ci, c in enumerate(extract_constituents(atree)):
        s, e = c.span
        if e <= s:
            raise ValueError(f"constituent {ci} has an empty token range {c.span}")
        ids = list(prompt.tokens[s:e]) + [prompt.tokens[-1]]
        emb = encode_prompt(encoder, ids)
        if emb.shape[0] != len(ids):
            raise ValueError(f"encoder returned {emb.shape[0]} rows for constituent {ci}")
        parts.append(emb[: e - s])
        segments.append(Segment(ci, (row, row + e - s)))
        strings.extend(names[s:e])
        row += e - s
    return DisCLIPEncoding(torch.cat(parts, dim=0), segments, strings)


def extend_dependency_matrix(
    D: np.ndarray,
    encoding: DisCLIPEncoding,
    constituents: Sequence[Constituent],
) -> np.ndarray:
    """Grow ``D`` to n' x n'; constituent rows depend on the constituent's nouns."""
    n = D.shape[0]
    whole = encoding.segments[0]
    if whole.rows != (0, n):
        raise ValueError(f"prompt segment {whole.rows} does not match D of size {n}")
    Dx = np.zeros((encoding.n, encoding.n), dtype=D.dtype)
    Dx[:n, :n] = D
    by_index = {seg.source: seg for seg in encoding.segments[1:]}
    for ci, c in enumerate(constituents):
        seg = by_index[ci]
        for k in c.noun_token_positions:
            if not 0 <= k < n:
                raise IndexError(f"noun token {k} of constituent {ci} is outside the prompt segment")
            Dx[seg.rows[0]:seg.rows[1], k] = 1
    return Dx
