"""Assembly of frozen and trainable components into one model bundle."""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, field

import torch
from torch import nn

from .conditioning import EmotionCondition, VisualPerceptionEncoder, build_descriptor, condition_from_fused
from .diffusion import DenoiserConfig, IdentityLatentEncoder, NoiseSchedule, ToyUNet
from .encoders import EncoderProfile, TextEncoding, VisualEmbedding, build_toy_encoders, module_hash
from .errors import CompatibilityError, ConfigurationError
from .hilora import HiLoRAModel, attach_to_denoiser
from .taxonomy import EmotionLike, encode_one_hot, parse_emotion

CONTEXT_MODES = ("sequence", "pooled")


@dataclass(frozen=True)
class ModelConfig:
    dim: int = 64
    image_size: int = 32
    patch: int = 8
    text_layers: int = 2
    text_heads: int = 4
    max_length: int = 32
    encoder_seed: int = 0
    channels: tuple[int, ...] = (16, 32, 64)
    unet_heads: int = 4
    T: int = 50
    mapper_hidden: int = 512
    vpe_heads: int = 1
    input_type: str = "one_hot"
    rank: int = 4
    lora_scaling: float = 1.0
    placement: str = "attention"
    use_emotion_adapters: bool = True
    use_polarity_adapters: bool = True
    context_mode: str = "sequence"
    init_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(self.channels))
        if self.context_mode not in CONTEXT_MODES:
            raise ConfigurationError(f"context_mode must be one of {CONTEXT_MODES}")

    @property
    def encoder_profile(self) -> EncoderProfile:
        return EncoderProfile(self.dim, self.image_size, self.patch, self.text_layers, self.text_heads,
                              self.max_length, self.encoder_seed)

    @property
    def denoiser_config(self) -> DenoiserConfig:
        return DenoiserConfig(channels=self.channels, context_dim=self.dim, heads=self.unet_heads, T=self.T)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["channels"] = list(self.channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


class CoEmoGenModel(nn.Module):
    """Frozen encoders and denoiser plus the trainable mapper, VPE and HiLoRA banks."""

    def __init__(self, config: ModelConfig = ModelConfig(), base_denoiser_state: dict | None = None):
        super().__init__()
        self.config = config
        self.image_encoder, self.text_encoder = build_toy_encoders(config.encoder_profile)
        self.latent_encoder = IdentityLatentEncoder()
        self.schedule = NoiseSchedule(config.T)
        with torch.random.fork_rng():
            torch.manual_seed(config.init_seed)
            base = ToyUNet(config.denoiser_config)
            if base_denoiser_state is not None:
                base.load_state_dict(base_denoiser_state)
            self.descriptor = build_descriptor(config.input_type, config.dim, config.mapper_hidden, self.text_encoder)
            self.vpe = VisualPerceptionEncoder(config.dim, config.vpe_heads)
        self.denoiser: HiLoRAModel = attach_to_denoiser(
            base, config.placement, rank=config.rank, scaling=config.lora_scaling,
            use_emotion=config.use_emotion_adapters, use_polarity=config.use_polarity_adapters,
            seed=config.init_seed + 17,
        )
        self.clusters: dict = {}

    # -- parameter groups --------------------------------------------------
    def conditioning_parameters(self) -> list[nn.Parameter]:
        return [p for p in list(self.descriptor.parameters()) + list(self.vpe.parameters()) if p.requires_grad]

    def all_trainable_parameters(self) -> list[nn.Parameter]:
        return self.conditioning_parameters() + self.denoiser.adapter_parameters()

    def step_parameters(self) -> list[nn.Parameter]:
        """Parameters a routed step may update."""
        return self.conditioning_parameters() + self.denoiser.trainable_parameters()

    def frozen_hashes(self) -> dict[str, str]:
        base = hashlib.sha256()
        for k, v in sorted(self.denoiser.base_state_dict().items()):
            base.update(k.encode())
            base.update(v.detach().cpu().contiguous().numpy().tobytes())
        return {
            "image_encoder": module_hash(self.image_encoder),
            "text_encoder": module_hash(self.text_encoder),
            "denoiser": base.hexdigest(),
            "latent_encoder": "identity",
        }

    def check_frozen(self, hashes: dict[str, str]) -> None:
        mine = self.frozen_hashes()
        bad = [k for k in mine if hashes.get(k) != mine[k]]
        if bad:
            raise CompatibilityError(f"frozen components differ from the checkpoint: {', '.join(bad)}")

    def trainable_state(self) -> dict[str, dict]:
        return {
            "descriptor": {k: v.clone() for k, v in self.descriptor.state_dict().items()},
            "vpe": {k: v.clone() for k, v in self.vpe.state_dict().items()},
            "hilora": self.denoiser.adapter_state_dict(),
        }

    def load_trainable_state(self, state: dict[str, dict]) -> None:
        self.descriptor.load_state_dict(state["descriptor"])
        self.vpe.load_state_dict(state["vpe"])
        self.denoiser.load_adapter_state_dict(state["hilora"])

    def parameter_hash(self) -> str:
        h = hashlib.sha256()
        for group, tensors in sorted(self.trainable_state().items()):
            for k, v in sorted(tensors.items()):
                h.update(f"{group}/{k}".encode())
                h.update(v.detach().cpu().contiguous().numpy().tobytes())
        return h.hexdigest()

    # -- conditioning ------------------------------------------------------
    def describe(self, labels) -> torch.Tensor:
        """Emotion descriptors ``(B, d0)`` for a list of labels."""
        one_hot = torch.stack([encode_one_hot(l) for l in labels]).to(self.vpe.w_q.dtype)
        return self.descriptor(one_hot)

    def fuse(self, labels, tokens: torch.Tensor) -> torch.Tensor:
        return self.vpe(self.describe(labels), tokens)

    def encode_fused(self, fused: torch.Tensor) -> TextEncoding:
        return condition_from_fused(fused, self.text_encoder)

    def condition(self, labels, tokens: torch.Tensor) -> EmotionCondition:
        e = self.describe(labels)
        ev = self.vpe(e, tokens)
        return EmotionCondition(e, ev, condition_from_fused(ev, self.text_encoder))

    def context_of(self, encoding: TextEncoding) -> torch.Tensor:
        """Cross-attention context ``(B, L, d0)`` from an encoding."""
        if self.config.context_mode == "pooled":
            return encoding.pooled.unsqueeze(-2)
        return encoding.sequence

    def null_context(self, batch: int = 1) -> torch.Tensor:
        return self.context_of(self.text_encoder.null_condition(batch, self.vpe.w_q.dtype))

    def text_context(self, texts) -> torch.Tensor:
        return self.context_of(self.text_encoder.encode_text(texts))
