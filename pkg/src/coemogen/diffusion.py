"""Desk-scale latent diffusion: schedule, forward noising, toy U-Net, ancestral sampler."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import torch
import torch.nn.functional as F
from torch import nn

from .errors import AdapterError, ScheduleError
from .taxonomy import parse_emotion


class NoiseSchedule:
    """Linear-beta DDPM schedule with precomputed cumulative products (float64)."""

    def __init__(self, T: int = 50, beta_start: float | None = None, beta_end: float | None = None):
        if T < 2:
            raise ScheduleError("need at least two diffusion steps")
        # scale the standard 1000-step endpoints so short schedules still reach noise;
        # the cap keeps very short (T < 21) schedules valid
        beta_start = min(1e-4 * 1000 / T, 0.5) if beta_start is None else beta_start
        beta_end = min(0.02 * 1000 / T, 0.999) if beta_end is None else beta_end
        if not 0 < beta_start <= beta_end < 1:
            raise ScheduleError(f"betas must satisfy 0 < start <= end < 1, got {beta_start}, {beta_end}")
        self.T = T
        self.betas = torch.linspace(beta_start, beta_end, T, dtype=torch.float64)
        self.alphas = 1.0 - self.betas
        self.alphas_cumprod = torch.cumprod(self.alphas, dim=0)

    def check_t(self, t: torch.Tensor | int) -> torch.Tensor:
        t = torch.as_tensor(t, dtype=torch.long)
        if t.numel() and (int(t.min()) < 0 or int(t.max()) >= self.T):
            raise ScheduleError(f"timestep out of range [0, {self.T}): {t.tolist()}")
        return t

    def coefficients(self, t: torch.Tensor | int, dtype: torch.dtype = torch.float32):
        t = self.check_t(t)
        acp = self.alphas_cumprod[t]
        return acp.sqrt().to(dtype), (1 - acp).sqrt().to(dtype)

    def respaced(self, steps: int) -> tuple[list[int], torch.Tensor]:
        """Evenly spaced timesteps and the matching betas for a shorter chain."""
        if not 1 <= steps <= self.T:
            raise ScheduleError(f"steps must be in [1, {self.T}], got {steps}")
        ts = sorted({int(round(x)) for x in torch.linspace(0, self.T - 1, steps).tolist()})
        acp = self.alphas_cumprod[ts]
        prev = torch.cat([torch.ones(1, dtype=torch.float64), acp[:-1]])
        return ts, 1 - acp / prev

    def to_dict(self) -> dict:
        return {"T": self.T, "beta_start": float(self.betas[0]), "beta_end": float(self.betas[-1])}


def add_noise(z0: torch.Tensor, t: torch.Tensor | int, noise: torch.Tensor, schedule: NoiseSchedule) -> torch.Tensor:
    if z0.shape != noise.shape:
        raise ScheduleError(f"latent shape {tuple(z0.shape)} != noise shape {tuple(noise.shape)}")
    a, s = schedule.coefficients(t, z0.dtype)
    if a.dim():
        a = a.reshape(-1, *([1] * (z0.dim() - 1)))
        s = s.reshape(-1, *([1] * (z0.dim() - 1)))
    return a * z0 + s * noise


class IdentityLatentEncoder(nn.Module):
    """Test-profile latent space: images in [-1, 1] are their own latents."""

    def encode(self, images: torch.Tensor) -> torch.Tensor:
        return images

    def decode(self, latents: torch.Tensor) -> torch.Tensor:
        return latents


# -- toy U-Net -----------------------------------------------------------------

def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half)
    args = t.to(torch.float64)[:, None] * freqs[None]
    return torch.cat([args.cos(), args.sin()], dim=-1)


class ResBlock(nn.Module):
    def __init__(self, c_in: int, c_out: int, temb: int, groups: int = 8):
        super().__init__()
        self.norm1 = nn.GroupNorm(groups, c_in)
        self.conv1 = nn.Conv2d(c_in, c_out, 3, padding=1)
        self.temb = nn.Linear(temb, c_out)
        self.norm2 = nn.GroupNorm(groups, c_out)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1)
        self.skip = nn.Conv2d(c_in, c_out, 1) if c_in != c_out else nn.Identity()

    def forward(self, x, temb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.temb(temb)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class Attention(nn.Module):
    def __init__(self, dim: int, context_dim: int | None = None, heads: int = 4):
        super().__init__()
        self.heads = heads
        context_dim = dim if context_dim is None else context_dim
        self.to_q = nn.Linear(dim, dim, bias=False)
        self.to_k = nn.Linear(context_dim, dim, bias=False)
        self.to_v = nn.Linear(context_dim, dim, bias=False)
        self.to_out = nn.Linear(dim, dim)

    def forward(self, x, context=None, bias=None):
        context = x if context is None else context
        b, n, d = x.shape
        h = self.heads
        q = self.to_q(x).reshape(b, n, h, d // h).transpose(1, 2)
        k = self.to_k(context).reshape(b, -1, h, d // h).transpose(1, 2)
        v = self.to_v(context).reshape(b, -1, h, d // h).transpose(1, 2)
        att = (q @ k.transpose(-1, -2)) / math.sqrt(d // h)
        if bias is not None:
            att = att + bias[:, None, None, :].to(att.dtype)
        y = (att.softmax(dim=-1) @ v).transpose(1, 2).reshape(b, n, d)
        return self.to_out(y)


class FeedForward(nn.Module):
    def __init__(self, dim: int, mult: int = 2):
        super().__init__()
        self.fc1 = nn.Linear(dim, dim * mult)
        self.fc2 = nn.Linear(dim * mult, dim)

    def forward(self, x):
        return self.fc2(F.gelu(self.fc1(x)))


class SpatialTransformer(nn.Module):
    """Self-attention, cross-attention on the context, feed-forward."""

    def __init__(self, channels: int, context_dim: int, heads: int = 4, groups: int = 8):
        super().__init__()
        self.norm = nn.GroupNorm(groups, channels)
        self.ln1 = nn.LayerNorm(channels)
        self.attn1 = Attention(channels, heads=heads)
        self.ln2 = nn.LayerNorm(channels)
        self.attn2 = Attention(channels, context_dim, heads=heads)
        self.ln3 = nn.LayerNorm(channels)
        self.ff = FeedForward(channels)

    def forward(self, x, context, bias=None):
        b, c, hh, ww = x.shape
        h = self.norm(x).reshape(b, c, hh * ww).transpose(1, 2)
        h = h + self.attn1(self.ln1(h))
        h = h + self.attn2(self.ln2(h), context, bias)
        h = h + self.ff(self.ln3(h))
        return x + h.transpose(1, 2).reshape(b, c, hh, ww)


@dataclass(frozen=True)
class DenoiserConfig:
    in_channels: int = 3
    channels: tuple[int, ...] = (32, 64, 64)
    context_dim: int = 64
    heads: int = 4
    temb_dim: int = 128
    T: int = 50
    prediction: str = "v"


class ToyUNet(nn.Module):
    """Two downsampling and two upsampling stages, one transformer block per downsampled level.

    ``forward`` always returns the noise estimate. With ``prediction="v"`` the
    network body predicts ``v = sqrt(a)*eps - sqrt(1-a)*z0`` and the estimate is
    ``sqrt(a)*v + sqrt(1-a)*z_t``; at low signal-to-noise the body then outputs
    (minus) the clean image at unit scale instead of a tiny correction to ``z_t``.
    """

    def __init__(self, config: DenoiserConfig = DenoiserConfig()):
        super().__init__()
        if config.prediction not in ("eps", "v"):
            raise ScheduleError(f"prediction must be 'eps' or 'v', got {config.prediction!r}")
        self.config = config
        acp = NoiseSchedule(config.T).alphas_cumprod.float()
        self.register_buffer("sqrt_acp", acp.sqrt(), persistent=False)
        self.register_buffer("sqrt_1m_acp", (1 - acp).sqrt(), persistent=False)
        c0, c1, c2 = config.channels
        t = config.temb_dim
        self.time_mlp = nn.Sequential(nn.Linear(c0, t), nn.SiLU(), nn.Linear(t, t))
        self.conv_in = nn.Conv2d(config.in_channels, c0, 3, padding=1)
        self.down0 = ResBlock(c0, c0, t)
        self.pool0 = nn.Conv2d(c0, c0, 3, stride=2, padding=1)
        self.down1 = ResBlock(c0, c1, t)
        self.attn_down1 = SpatialTransformer(c1, config.context_dim, config.heads)
        self.pool1 = nn.Conv2d(c1, c1, 3, stride=2, padding=1)
        self.mid1 = ResBlock(c1, c2, t)
        self.attn_mid = SpatialTransformer(c2, config.context_dim, config.heads)
        self.mid2 = ResBlock(c2, c2, t)
        self.up1 = ResBlock(c2 + c1, c1, t)
        self.attn_up1 = SpatialTransformer(c1, config.context_dim, config.heads)
        self.up0 = ResBlock(c1 + c0, c0, t)
        self.norm_out = nn.GroupNorm(8, c0)
        self.conv_out = nn.Conv2d(c0, config.in_channels, 3, padding=1)

    def forward(self, x: torch.Tensor, t: torch.Tensor, context: torch.Tensor,
                context_bias: torch.Tensor | None = None) -> torch.Tensor:
        out = self.body(x, t, context, context_bias)
        if self.config.prediction == "eps":
            return out
        t = torch.as_tensor(t, device=x.device).reshape(-1).expand(x.shape[0])
        a = self.sqrt_acp[t].to(x.dtype).reshape(-1, 1, 1, 1)
        s = self.sqrt_1m_acp[t].to(x.dtype).reshape(-1, 1, 1, 1)
        return a * out + s * x

    def body(self, x: torch.Tensor, t: torch.Tensor, context: torch.Tensor,
             context_bias: torch.Tensor | None = None) -> torch.Tensor:
        """Raw network output (``v`` or noise depending on ``config.prediction``)."""
        t = torch.as_tensor(t, device=x.device).reshape(-1).expand(x.shape[0])
        # spread 0..T-1 over the usual 0..1000 range so every sinusoid frequency is used
        temb = self.time_mlp(timestep_embedding(t * (1000.0 / self.config.T), self.config.channels[0]).to(x.dtype))
        if context.dim() == 2:
            context = context.unsqueeze(0)
        if context.shape[0] != x.shape[0]:
            context = context.expand(x.shape[0], -1, -1)
        if context_bias is not None and context_bias.shape[0] != x.shape[0]:
            context_bias = context_bias.expand(x.shape[0], -1)
        context = context.to(x.dtype)
        h0 = self.down0(self.conv_in(x), temb)
        h1 = self.attn_down1(self.down1(self.pool0(h0), temb), context, context_bias)
        h = self.mid1(self.pool1(h1), temb)
        h = self.mid2(self.attn_mid(h, context, context_bias), temb)
        h = F.interpolate(h, scale_factor=2, mode="nearest")
        h = self.attn_up1(self.up1(torch.cat([h, h1], dim=1), temb), context, context_bias)
        h = F.interpolate(h, scale_factor=2, mode="nearest")
        h = self.up0(torch.cat([h, h0], dim=1), temb)
        return self.conv_out(F.silu(self.norm_out(h)))


# -- losses and sampling ---------------------------------------------------------

def _context_of(condition) -> torch.Tensor:
    for attr in ("context", "sequence"):
        if hasattr(condition, attr):
            return getattr(condition, attr)
    return condition


def ldm_loss(z0: torch.Tensor, condition, t: torch.Tensor | int, noise: torch.Tensor, denoiser: nn.Module,
             schedule: NoiseSchedule, emotion=None) -> torch.Tensor:
    """Mean squared error between the injected and the predicted noise."""
    from .hilora import HiLoRAModel  # local: diffusion must not import hilora at module load

    if isinstance(denoiser, HiLoRAModel):
        state = denoiser.state
        if state.is_base:
            raise AdapterError("ldm_loss requires routed adapters")
        if emotion is not None and state.active_emotion is not None and state.active_emotion != parse_emotion(emotion):
            raise AdapterError(f"adapters routed to {state.active_emotion.label}, sample is {parse_emotion(emotion).label}")
    t = schedule.check_t(t)
    if t.dim() == 0:
        t = t.expand(z0.shape[0])
    zt = add_noise(z0, t, noise, schedule)
    pred = denoiser(zt, t, _context_of(condition))
    return ((noise - pred) ** 2).mean()


def guided_eps(denoiser, x, t, context, guidance: float = 1.0, null_context=None, context_bias=None):
    eps = denoiser(x, t, context, context_bias=context_bias)
    if guidance == 1.0:
        return eps
    if null_context is None:
        raise ValueError("guidance != 1 needs a null context")
    eps_u = denoiser(x, t, null_context)
    return eps_u + guidance * (eps - eps_u)


def _generators(seed: int | Sequence[int], batch: int) -> list[torch.Generator]:
    seeds = [seed] * batch if isinstance(seed, int) else list(seed)
    if len(seeds) != batch:
        raise ValueError(f"got {len(seeds)} seeds for a batch of {batch}")
    return [torch.Generator().manual_seed(int(s)) for s in seeds]


def _randn(gens: list[torch.Generator], shape: tuple[int, ...], dtype) -> torch.Tensor:
    return torch.stack([torch.randn(shape, generator=g, dtype=dtype) for g in gens])


@torch.no_grad()
def sample(denoiser: nn.Module, context: torch.Tensor, schedule: NoiseSchedule, steps: int | None = None,
           seed: int | Sequence[int] = 0, *, shape: tuple[int, int, int] = (3, 32, 32), guidance: float = 1.0,
           null_context: torch.Tensor | None = None, context_bias: torch.Tensor | None = None,
           latent_encoder: nn.Module | None = None, clip: bool = True) -> torch.Tensor:
    """Ancestral DDPM sampling; one generator per image keeps batches order-independent."""
    context = _context_of(context)
    if context.dim() == 2:
        context = context.unsqueeze(0)
    batch = context.shape[0] if isinstance(seed, int) else len(seed)
    gens = _generators(seed, batch)
    dtype = context.dtype
    ts, betas = schedule.respaced(steps or schedule.T)
    alphas = 1 - betas
    acp = torch.cumprod(alphas, dim=0)
    x = _randn(gens, shape, dtype)
    for i in reversed(range(len(ts))):
        t = torch.full((batch,), ts[i], dtype=torch.long)
        eps = guided_eps(denoiser, x, t, context, guidance, null_context, context_bias)
        a_bar = acp[i].item()
        a_prev = acp[i - 1].item() if i > 0 else 1.0
        beta = betas[i].item()
        x0 = (x - math.sqrt(1 - a_bar) * eps) / math.sqrt(a_bar)
        if clip:
            x0 = x0.clamp(-1, 1)
        mean = (math.sqrt(a_prev) * beta / (1 - a_bar)) * x0 + (math.sqrt(1 - beta) * (1 - a_prev) / (1 - a_bar)) * x
        if i > 0:
            var = beta * (1 - a_prev) / (1 - a_bar)
            x = mean + math.sqrt(var) * _randn(gens, shape, dtype)
        else:
            x = mean
    decoder = latent_encoder or IdentityLatentEncoder()
    return decoder.decode(x)
