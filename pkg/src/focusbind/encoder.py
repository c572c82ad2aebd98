"""Tiny transformer text encoder and the encoder adapter contract.

Any encoder can drive DisCLIP and the diffusion harness as long as it offers
``encode_ids(token_ids) -> (embeddings, eos_index)``: one row per input token
(padding rows allowed after the end token), plus the row index of the
end-of-text embedding. Rows after ``eos_index`` are treated as padding.
"""

from __future__ import annotations

from typing import Protocol, Sequence, Tuple

import torch
from torch import nn

from .tokenizer import DEFAULT_TOKENIZER, TokenizationError, ToyTokenizer


class EncoderAdapter(Protocol):
    dim: int

    def encode_ids(self, token_ids: Sequence[int]) -> Tuple[torch.Tensor, int]:
        ...


class TextEncoder(nn.Module):
    """CLIP-style causal transformer over toy-vocabulary token ids."""

    def __init__(self, vocab_size: int = len(DEFAULT_TOKENIZER), dim: int = 64,
                 depth: int = 1, heads: int = 4, max_len: int = 32, causal: bool = True):
        super().__init__()
        self.dim = dim
        self.max_len = max_len
        self.causal = causal
        self.tok = nn.Embedding(vocab_size, dim)
        self.pos = nn.Parameter(torch.randn(max_len, dim) * 0.02)
        layer = nn.TransformerEncoderLayer(dim, heads, dim * 4, dropout=0.0,
                                           batch_first=True, norm_first=True)
        self.layers = nn.TransformerEncoder(layer, depth, enable_nested_tensor=False)
        self.norm = nn.LayerNorm(dim)

    def forward(self, ids: torch.Tensor) -> torch.Tensor:
        L = ids.shape[-1]
        if L > self.max_len:
            raise ValueError(f"sequence of {L} tokens exceeds max_len {self.max_len}")
        x = self.tok(ids) + self.pos[:L]
        mask = nn.Transformer.generate_square_subsequent_mask(L) if self.causal else None
        return self.norm(self.layers(x, mask=mask, is_causal=self.causal))

    def encode_ids(self, token_ids: Sequence[int]) -> Tuple[torch.Tensor, int]:
        ids = torch.as_tensor(list(token_ids), dtype=torch.long)[None]
        return self(ids)[0], len(token_ids) - 1

    def pooled(self, text: str, tokenizer: ToyTokenizer = DEFAULT_TOKENIZER) -> torch.Tensor:
        """End-of-text embedding of ``text``; raises TokenizationError on unknown characters."""
        tp = tokenizer.tokenize(text)
        emb, eos = self.encode_ids(tp.tokens)
        return emb[eos]


def encode_prompt(encoder: EncoderAdapter, token_ids: Sequence[int]) -> torch.Tensor:
    """Encode and drop padding rows, keeping the end-of-text row."""
    emb, eos = encoder.encode_ids(token_ids)
    if emb.shape[0] < eos + 1:
        raise ValueError(f"encoder returned {emb.shape[0]} rows for end index {eos}")
    return emb[: eos + 1]


__all__ = ["EncoderAdapter", "TextEncoder", "TokenizationError", "encode_prompt"]
