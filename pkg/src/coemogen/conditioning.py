"""Trainable conditioning chain: one-hot -> descriptor -> visual fusion -> condition."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .encoders import TextEncoding, ToyTextEncoder, VisualEmbedding
from .errors import ConfigurationError
from .taxonomy import EMOTION_NAMES, NUM_EMOTIONS

INPUT_TYPES = ("one_hot", "learnable", "text")


class NeuroSymbolicMapper(nn.Module):
    """Fully connected stack mapping a one-hot emotion to a ``dim``-vector."""

    def __init__(self, dim: int, hidden: int = 512, input_dim: int = NUM_EMOTIONS):
        super().__init__()
        self.input_dim = input_dim
        self.dim = dim
        self.fc1 = nn.Linear(input_dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, one_hot: torch.Tensor) -> torch.Tensor:
        if one_hot.shape[-1] != self.input_dim:
            raise ConfigurationError(f"mapper expects {self.input_dim}-dim input, got {one_hot.shape[-1]}")
        x = one_hot.to(self.fc1.weight.dtype)
        return self.fc2(F.silu(self.fc1(x)))


class LearnableEmotionVectors(nn.Module):
    """Ablation input: one free descriptor per class replaces the mapper."""

    def __init__(self, dim: int):
        super().__init__()
        self.dim = dim
        self.vectors = nn.Parameter(torch.randn(NUM_EMOTIONS, dim) / math.sqrt(dim))

    def forward(self, one_hot: torch.Tensor) -> torch.Tensor:
        return one_hot.to(self.vectors.dtype) @ self.vectors


class TextNameDescriptor(nn.Module):
    """Ablation input: frozen text-encoder embedding of the emotion name."""

    def __init__(self, text_encoder: ToyTextEncoder):
        super().__init__()
        self.dim = text_encoder.dim
        with torch.no_grad():
            table = text_encoder.encode_text(list(EMOTION_NAMES)).pooled.clone()
        self.register_buffer("table", table)

    def forward(self, one_hot: torch.Tensor) -> torch.Tensor:
        return one_hot.to(self.table.dtype) @ self.table


def build_descriptor(input_type: str, dim: int, hidden: int, text_encoder: ToyTextEncoder | None = None) -> nn.Module:
    if input_type == "one_hot":
        return NeuroSymbolicMapper(dim, hidden)
    if input_type == "learnable":
        return LearnableEmotionVectors(dim)
    if input_type == "text":
        if text_encoder is None:
            raise ConfigurationError("input_type 'text' needs a text encoder")
        return TextNameDescriptor(text_encoder)
    raise ConfigurationError(f"unknown input type {input_type!r}; expected one of {INPUT_TYPES}")


class VisualPerceptionEncoder(nn.Module):
    """Cross-attention of the emotion descriptor (query) over visual tokens.

    ``softmax(e Wq (v Wk)^T / sqrt(d)) v Wv`` with a single query per sample.
    Weights act on row vectors (``x @ W``).
    """

    def __init__(self, dim: int, heads: int = 1):
        super().__init__()
        if dim % heads:
            raise ConfigurationError("dim must be divisible by heads")
        self.dim = dim
        self.heads = heads
        bound = 1.0 / math.sqrt(dim)
        self.w_q = nn.Parameter(torch.empty(dim, dim).uniform_(-bound, bound))
        self.w_k = nn.Parameter(torch.empty(dim, dim).uniform_(-bound, bound))
        self.w_v = nn.Parameter(torch.empty(dim, dim).uniform_(-bound, bound))

    def logits(self, e: torch.Tensor, tokens: torch.Tensor) -> torch.Tensor:
        """Attention logits ``(B, heads, m)``."""
        e, tokens = self._check(e, tokens)
        hd = self.dim // self.heads
        q = (e @ self.w_q).reshape(e.shape[0], self.heads, 1, hd)
        k = (tokens @ self.w_k).reshape(tokens.shape[0], tokens.shape[1], self.heads, hd).transpose(1, 2)
        return (q @ k.transpose(-1, -2)).squeeze(2) / math.sqrt(hd)

    def attention(self, e: torch.Tensor, tokens: torch.Tensor, logit_shift: float = 0.0) -> torch.Tensor:
        return (self.logits(e, tokens) + logit_shift).softmax(dim=-1)

    def forward(self, e: torch.Tensor, tokens: torch.Tensor, logit_shift: float = 0.0) -> torch.Tensor:
        squeeze = e.dim() == 1
        e, tokens = self._check(e, tokens)
        hd = self.dim // self.heads
        att = self.attention(e, tokens, logit_shift)
        v = (tokens @ self.w_v).reshape(tokens.shape[0], tokens.shape[1], self.heads, hd).transpose(1, 2)
        out = (att.unsqueeze(2) @ v).squeeze(2).reshape(e.shape[0], self.dim)
        return out[0] if squeeze else out

    def _check(self, e: torch.Tensor, tokens: torch.Tensor):
        if e.dim() == 1:
            e = e.unsqueeze(0)
        if tokens.dim() == 2:
            tokens = tokens.unsqueeze(0)
        if e.shape[-1] != self.dim or tokens.shape[-1] != self.dim:
            raise ConfigurationError(
                f"dimension mismatch: descriptor {e.shape[-1]}, tokens {tokens.shape[-1]}, encoder {self.dim}"
            )
        if tokens.shape[1] < 1:
            raise ConfigurationError("visual embedding has no tokens")
        if tokens.shape[0] != e.shape[0]:
            if tokens.shape[0] == 1:
                tokens = tokens.expand(e.shape[0], -1, -1)
            else:
                raise ConfigurationError("batch size mismatch between descriptor and visual tokens")
        return e, tokens.to(e.dtype)


@dataclass
class EmotionCondition:
    descriptor: torch.Tensor
    fused: torch.Tensor
    condition: TextEncoding

    @property
    def context(self) -> torch.Tensor:
        return self.condition.sequence

    @property
    def pooled(self) -> torch.Tensor:
        return self.condition.pooled


def map_emotion(one_hot: torch.Tensor, mapper: nn.Module) -> torch.Tensor:
    return mapper(one_hot)


def fuse_visual(e: torch.Tensor, v: VisualEmbedding | torch.Tensor, vpe: VisualPerceptionEncoder) -> torch.Tensor:
    tokens = v.tokens if isinstance(v, VisualEmbedding) else v
    return vpe(e, tokens)


def condition_from_fused(fused: torch.Tensor, text_encoder: ToyTextEncoder) -> TextEncoding:
    """Run the fused descriptor(s) through the text encoder as one pseudo-token."""
    return text_encoder.encode_text_sequence(fused.unsqueeze(-2))


def build_condition(
    one_hot: torch.Tensor,
    v: VisualEmbedding | torch.Tensor,
    mapper: nn.Module,
    vpe: VisualPerceptionEncoder,
    text_encoder: ToyTextEncoder,
) -> EmotionCondition:
    """Full chain. Accepts a single sample or a batch (``(B, 8)`` with ``(B, m, d0)`` tokens)."""
    e = map_emotion(one_hot, mapper)
    ev = fuse_visual(e, v, vpe)
    return EmotionCondition(descriptor=e, fused=ev, condition=condition_from_fused(ev, text_encoder))
