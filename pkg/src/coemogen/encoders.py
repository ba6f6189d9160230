"""Frozen image/text encoders filling the CLIP role.

The toy pair is built from a fixed seed, so it needs no weight files and is
bit-reproducible across processes. Both encoders are frozen: parameters never
require grad, but ``encode_text_sequence`` stays differentiable with respect
to its input vectors.
"""

from __future__ import annotations

import hashlib
import io
import math
import re
import zlib
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import EncoderError

PAD_ID, BOS_ID, EOS_ID = 0, 1, 2
_WORD_RE = re.compile(r"[a-z0-9']+")


@dataclass
class VisualEmbedding:
    """Patch tokens ``(m, d0)`` plus the pooled global vector ``(d0,)``."""

    tokens: torch.Tensor
    global_: torch.Tensor

    def __post_init__(self):
        if self.tokens.dim() != 2 or self.tokens.shape[0] < 1:
            raise EncoderError(f"visual tokens must be (m>=1, d0), got {tuple(self.tokens.shape)}")
        if self.global_.shape != self.tokens.shape[1:]:
            raise EncoderError("global embedding dimension does not match tokens")

    @property
    def dim(self) -> int:
        return self.tokens.shape[1]

    @classmethod
    def from_global(cls, vector: torch.Tensor) -> "VisualEmbedding":
        return cls(tokens=vector.unsqueeze(0), global_=vector)


@dataclass
class TextEncoding:
    """Encoder output: token sequence ``(B, L, d0)`` and pooled EOS vector ``(B, d0)``."""

    sequence: torch.Tensor
    pooled: torch.Tensor


def module_hash(*modules: nn.Module) -> str:
    """Content hash over parameters and buffers, used to pin frozen components."""
    h = hashlib.sha256()
    for module in modules:
        for name, tensor in sorted(module.state_dict().items()):
            h.update(name.encode())
            h.update(str(tensor.dtype).encode())
            h.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def freeze(module: nn.Module) -> nn.Module:
    for p in module.parameters():
        p.requires_grad_(False)
    module.eval()
    return module


def load_image_tensor(data: bytes, size: int | None = None) -> torch.Tensor:
    """Decode image bytes to a ``(3, H, W)`` float tensor in [-1, 1]."""
    from PIL import Image, UnidentifiedImageError

    try:
        with Image.open(io.BytesIO(data)) as img:
            img = img.convert("RGB")
            if size is not None and img.size != (size, size):
                img = img.resize((size, size), Image.BILINEAR)
            arr = np.asarray(img, dtype=np.float32)
    except (UnidentifiedImageError, OSError, ValueError) as exc:
        raise EncoderError(f"undecodable image: {exc}") from exc
    return torch.from_numpy(arr).permute(2, 0, 1) / 127.5 - 1.0


class ToyImageEncoder(nn.Module):
    """Seeded linear patch projection.

    Images are resized to ``image_size`` and split into ``patch`` x ``patch``
    tiles; each tile is projected to ``dim``. The global vector is the mean of
    the patch tokens, so an all-zero image maps to the bias embedding.
    """

    def __init__(self, dim: int = 64, image_size: int = 32, patch: int = 8, seed: int = 0):
        super().__init__()
        if image_size % patch:
            raise EncoderError("image_size must be divisible by patch")
        self.dim = dim
        self.image_size = image_size
        self.patch = patch
        g = torch.Generator().manual_seed(seed)
        patch_dim = 3 * patch * patch
        self.proj = nn.Parameter(torch.randn(patch_dim, dim, generator=g) / math.sqrt(patch_dim))
        self.bias = nn.Parameter(torch.randn(dim, generator=g) * 0.1)
        freeze(self)

    @property
    def num_tokens(self) -> int:
        return (self.image_size // self.patch) ** 2

    def tokens(self, images: torch.Tensor) -> torch.Tensor:
        """``(B, 3, H, W)`` -> patch tokens ``(B, m, dim)``."""
        if images.dim() == 3:
            images = images.unsqueeze(0)
        if images.dim() != 4 or images.shape[1] != 3:
            raise EncoderError(f"expected (B, 3, H, W) images, got {tuple(images.shape)}")
        images = images.to(self.proj.dtype)
        if images.shape[-2:] != (self.image_size, self.image_size):
            images = F.interpolate(images, size=(self.image_size, self.image_size), mode="area")
        p = self.patch
        patches = F.unfold(images, kernel_size=p, stride=p).transpose(1, 2)
        return patches @ self.proj + self.bias

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        """Global embeddings ``(B, dim)``."""
        return self.tokens(images).mean(dim=1)

    def encode_image(self, image: torch.Tensor) -> VisualEmbedding:
        if image.dim() != 3:
            raise EncoderError(f"encode_image takes one (3, H, W) image, got {tuple(image.shape)}")
        if not torch.isfinite(image).all():
            raise EncoderError("image contains non-finite values")
        with torch.no_grad():
            tokens = self.tokens(image)[0]
        return VisualEmbedding(tokens=tokens, global_=tokens.mean(dim=0))

    def encode_batch(self, images: torch.Tensor) -> list[VisualEmbedding]:
        with torch.no_grad():
            tokens = self.tokens(images)
        return [VisualEmbedding(tokens=t, global_=t.mean(dim=0)) for t in tokens]


class _Block(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.ln1 = nn.LayerNorm(dim)
        self.qkv = nn.Linear(dim, 3 * dim)
        self.out = nn.Linear(dim, dim)
        self.ln2 = nn.LayerNorm(dim)
        self.fc1 = nn.Linear(dim, 4 * dim)
        self.fc2 = nn.Linear(4 * dim, dim)

    def forward(self, x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        b, n, d = x.shape
        h = self.heads
        q, k, v = self.qkv(self.ln1(x)).chunk(3, dim=-1)
        q, k, v = (t.reshape(b, n, h, d // h).transpose(1, 2) for t in (q, k, v))
        att = (q @ k.transpose(-1, -2)) / math.sqrt(d // h)
        att = att.masked_fill(mask, float("-inf")).softmax(dim=-1)
        y = (att @ v).transpose(1, 2).reshape(b, n, d)
        x = x + self.out(y)
        return x + self.fc2(F.gelu(self.fc1(self.ln2(x))))


class ToyTextEncoder(nn.Module):
    """Small causal transformer with a hashed word vocabulary.

    Every input is laid out as ``[BOS, tokens..., EOS, PAD...]`` at a fixed
    ``max_length``; the pooled output is the final-layer state at EOS.
    """

    def __init__(
        self,
        dim: int = 64,
        layers: int = 2,
        heads: int = 4,
        max_length: int = 32,
        vocab_size: int = 4096,
        seed: int = 0,
        block_gain: float = 4.0,
    ):
        super().__init__()
        if dim % heads:
            raise EncoderError("dim must be divisible by heads")
        self.dim = dim
        self.max_length = max_length
        self.vocab_size = vocab_size
        g = torch.Generator().manual_seed(seed + 1)
        self.token_embedding = nn.Parameter(torch.randn(vocab_size, dim, generator=g))
        self.position_embedding = nn.Parameter(torch.randn(max_length, dim, generator=g) * 0.1)
        with torch.random.fork_rng():
            torch.manual_seed(seed + 2)
            self.blocks = nn.ModuleList(_Block(dim, heads) for _ in range(layers))
        # at default init the residual updates are tiny next to the unit-variance token
        # embeddings, so every EOS state collapses onto the EOS embedding; a larger gain
        # makes the pooled output depend on the content words
        with torch.no_grad():
            for block in self.blocks:
                for lin in (block.qkv, block.out, block.fc2):
                    lin.weight.mul_(block_gain)
        self.ln_final = nn.LayerNorm(dim)
        self.register_buffer(
            "causal_mask",
            torch.triu(torch.ones(max_length, max_length, dtype=torch.bool), diagonal=1),
            persistent=False,
        )
        freeze(self)

    # -- tokenization -----------------------------------------------------
    def tokenize(self, text: str) -> list[int]:
        words = _WORD_RE.findall(text.lower())
        return [3 + zlib.crc32(w.encode()) % (self.vocab_size - 3) for w in words]

    @property
    def max_content(self) -> int:
        return self.max_length - 2

    def _layout(self, content: torch.Tensor, n: int) -> torch.Tensor:
        """Place ``n`` content embeddings between BOS and EOS, PAD the remainder."""
        emb = self.token_embedding
        seq = [emb[BOS_ID].to(content.dtype).unsqueeze(0), content[:n], emb[EOS_ID].to(content.dtype).unsqueeze(0)]
        pad = self.max_length - n - 2
        if pad:
            seq.append(emb[PAD_ID].to(content.dtype).expand(pad, -1))
        return torch.cat(seq, dim=0)

    def _run(self, x: torch.Tensor, eos_index: torch.Tensor) -> TextEncoding:
        x = x + self.position_embedding.to(x.dtype)
        for block in self.blocks:
            x = block(x, self.causal_mask)
        x = self.ln_final(x)
        pooled = x[torch.arange(x.shape[0]), eos_index]
        return TextEncoding(sequence=x, pooled=pooled)

    # -- public surface ---------------------------------------------------
    def encode_text(self, texts: str | Sequence[str]) -> TextEncoding:
        if isinstance(texts, str):
            texts = [texts]
        rows, eos = [], []
        for text in texts:
            ids = self.tokenize(text)[: self.max_content]
            content = self.token_embedding[torch.tensor(ids, dtype=torch.long)] if ids else self.token_embedding[:0]
            rows.append(self._layout(content, len(ids)))
            eos.append(len(ids) + 1)
        return self._run(torch.stack(rows), torch.tensor(eos))

    def encode_text_sequence(self, pseudo_tokens: torch.Tensor) -> TextEncoding:
        """Encode free embedding vectors as pseudo-words.

        ``pseudo_tokens`` is ``(n, d0)`` or ``(B, n, d0)``; each row set is
        wrapped as ``[BOS, x_1..x_n, EOS]``. ``n = 0`` gives the null condition.
        """
        x = pseudo_tokens
        squeeze = x.dim() == 2
        if squeeze:
            x = x.unsqueeze(0)
        if x.dim() != 3 or x.shape[-1] != self.dim:
            raise EncoderError(f"pseudo tokens must be (B, n, {self.dim}), got {tuple(pseudo_tokens.shape)}")
        n = x.shape[1]
        if n > self.max_content:
            raise EncoderError(f"sequence of {n} pseudo tokens exceeds limit {self.max_content}")
        rows = torch.stack([self._layout(row, n) for row in x])
        out = self._run(rows, torch.full((x.shape[0],), n + 1))
        if squeeze:
            return TextEncoding(sequence=out.sequence[0], pooled=out.pooled[0])
        return out

    def null_condition(self, batch: int = 1, dtype: torch.dtype | None = None) -> TextEncoding:
        dtype = dtype or self.token_embedding.dtype
        return self.encode_text_sequence(torch.zeros(batch, 0, self.dim, dtype=dtype))


class ImageEncoderClient:
    """Adapts an image encoder to the bytes -> unit vector client contract."""

    def __init__(self, encoder: ToyImageEncoder):
        self.encoder = encoder

    def encode(self, image_bytes: bytes) -> np.ndarray:
        image = load_image_tensor(image_bytes)
        with torch.no_grad():
            vec = self.encoder(image.unsqueeze(0))[0].double()
        return _unit(vec.numpy())


class TextEncoderClient:
    def __init__(self, encoder: ToyTextEncoder):
        self.encoder = encoder

    def encode(self, text: str) -> np.ndarray:
        with torch.no_grad():
            vec = self.encoder.encode_text(text).pooled[0].double()
        return _unit(vec.numpy())


def _unit(vec: np.ndarray) -> np.ndarray:
    norm = np.linalg.norm(vec)
    if not np.isfinite(norm) or norm == 0:
        raise EncoderError("embedding has zero or non-finite norm")
    return vec / norm


@dataclass(frozen=True)
class EncoderProfile:
    dim: int = 64
    image_size: int = 32
    patch: int = 8
    text_layers: int = 2
    text_heads: int = 4
    max_length: int = 32
    seed: int = 0


def build_toy_encoders(profile: EncoderProfile = EncoderProfile()) -> tuple[ToyImageEncoder, ToyTextEncoder]:
    image = ToyImageEncoder(profile.dim, profile.image_size, profile.patch, seed=profile.seed)
    text = ToyTextEncoder(
        profile.dim, profile.text_layers, profile.text_heads, profile.max_length, seed=profile.seed
    )
    return image, text
