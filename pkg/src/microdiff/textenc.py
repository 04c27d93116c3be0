"""Toy dual text encoder.

Stands in for a pair of pretrained text encoders: two independent byte-level
encoders whose penultimate outputs are concatenated along the channel axis,
plus a pooled summary vector taken from the second encoder only. Captions are
tokenized as raw UTF-8 bytes, so there is no external tokenizer dependency.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

PAD_ID = 0
VOCAB_SIZE = 257  # 256 byte values shifted by one, plus padding


@dataclass(frozen=True)
class TextContext:
    """Cross-attention context plus pooled summary for one prompt."""

    sequence: torch.Tensor  # (tokens, d_a + d_b)
    pooled: torch.Tensor  # (d_b,)


def tokenize(caption: str, max_len: int) -> list[int]:
    """Byte-level token ids, padded/truncated to max_len."""
    ids = [b + 1 for b in caption.encode("utf-8")][:max_len]
    return ids + [PAD_ID] * (max_len - len(ids))


class _ByteEncoder(nn.Module):
    """Embedding + learned positions + one self-attention block + final linear."""

    def __init__(self, width: int, max_len: int, heads: int):
        super().__init__()
        self.token_emb = nn.Embedding(VOCAB_SIZE, width)
        self.pos_emb = nn.Parameter(torch.zeros(max_len, width))
        nn.init.normal_(self.pos_emb, std=0.02)
        self.norm1 = nn.LayerNorm(width)
        self.attn = nn.MultiheadAttention(width, heads, batch_first=True)
        self.norm2 = nn.LayerNorm(width)
        self.mlp = nn.Sequential(nn.Linear(width, 4 * width), nn.GELU(), nn.Linear(4 * width, width))
        self.final = nn.Linear(width, width)

    def forward(self, ids: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Returns (penultimate, final) activations, each (batch, tokens, width)."""
        h = self.token_emb(ids) + self.pos_emb[: ids.shape[-1]]
        a = self.norm1(h)
        h = h + self.attn(a, a, a, need_weights=False)[0]
        h = h + self.mlp(self.norm2(h))
        return h, self.final(h)


class DualTextEncoder(nn.Module):
    """Two byte encoders; contexts are channel-concatenated penultimate outputs."""

    def __init__(self, d_a: int = 64, d_b: int = 128, max_len: int = 32, heads: int = 4):
        super().__init__()
        self.d_a = d_a
        self.d_b = d_b
        self.max_len = max_len
        self.heads = heads
        self.encoder_a = _ByteEncoder(d_a, max_len, heads)
        self.encoder_b = _ByteEncoder(d_b, max_len, heads)

    @property
    def context_dim(self) -> int:
        return self.d_a + self.d_b

    @property
    def pooled_dim(self) -> int:
        return self.d_b

    def encode_batch(self, ids: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Encode (batch, tokens) id tensor into (sequence, pooled) tensors.

        The sequence is the channel-axis concatenation of both encoders'
        penultimate outputs; the pooled vector is the position-mean of encoder
        B's final-layer output.
        """
        if ids.dim() != 2:
            raise ValueError("expected (batch, tokens) ids")
        if ids.shape[1] > self.max_len:
            raise ValueError(f"sequence length {ids.shape[1]} exceeds max_len {self.max_len}")
        if bool((ids < 0).any()) or bool((ids >= VOCAB_SIZE).any()):
            raise ValueError("token id out of vocabulary")
        pen_a, _ = self.encoder_a(ids)
        pen_b, fin_b = self.encoder_b(ids)
        sequence = torch.cat([pen_a, pen_b], dim=-1)
        pooled = fin_b.mean(dim=1)
        return sequence, pooled

    def encode(self, tokens, max_len: int | None = None) -> TextContext:
        """Encode one token-id sequence (padded/truncated to max_len)."""
        max_len = self.max_len if max_len is None else max_len
        ids = list(tokens)[:max_len]
        ids = ids + [PAD_ID] * (max_len - len(ids))
        ids_t = torch.tensor([ids], dtype=torch.long)
        sequence, pooled = self.encode_batch(ids_t)
        return TextContext(sequence=sequence[0], pooled=pooled[0])

    def encode_prompt(self, caption: str) -> TextContext:
        return self.encode(tokenize(caption, self.max_len))

    def null_context(self) -> TextContext:
        """Context of the empty prompt (all padding); the CFG null signal."""
        return self.encode_prompt("")
