"""Cluster-sampled generation, emotion transfer and emotion fusion."""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .corpus.records import CorpusManifest, FileImageLoader
from .diffusion import sample
from .encoders import VisualEmbedding, load_image_tensor
from .errors import ClusterError, InputError
from .model import CoEmoGenModel
from .seeding import derive_seed
from .taxonomy import EMOTIONS, Emotion, EmotionLike, parse_emotion


@dataclass
class EmotionCluster:
    """Diagonal Gaussian over global visual embeddings (float64)."""

    label: Emotion
    mean: torch.Tensor
    covariance: torch.Tensor
    sample_count: int

    def __post_init__(self):
        if self.sample_count < 2:
            raise ClusterError(f"cluster for {self.label.label} needs at least 2 samples, got {self.sample_count}")
        if (self.covariance < 0).any():
            raise ClusterError("covariance entries must be non-negative")


def fit_clusters(manifest: CorpusManifest, image_encoder, *, root=None, loader=None,
                 embeddings: dict[str, torch.Tensor] | None = None) -> dict[Emotion, EmotionCluster]:
    """Per-emotion mean and diagonal population variance (divide by n) of global image embeddings.

    Records are sorted by ``image_ref`` first, so the fit ignores manifest order.
    """
    loader = loader or FileImageLoader(root)
    clusters = {}
    for emotion, records in manifest.by_emotion().items():
        refs = sorted(r.image_ref for r in records)
        if len(refs) < 2:
            raise ClusterError(f"emotion {emotion.label} has {len(refs)} record(s); a cluster needs at least 2")
        if embeddings is not None:
            vecs = torch.stack([embeddings[ref] for ref in refs])
        else:
            size = getattr(image_encoder, "image_size", None)
            images = torch.stack([load_image_tensor(loader(ref), size) for ref in refs])
            with torch.no_grad():
                vecs = image_encoder(images)
        vecs = vecs.double()
        clusters[emotion] = EmotionCluster(emotion, vecs.mean(dim=0), vecs.var(dim=0, unbiased=False), len(refs))
    return clusters


def sample_cluster(cluster: EmotionCluster | None, seed: int) -> VisualEmbedding:
    if cluster is None:
        raise ClusterError("cluster is not fitted")
    g = torch.Generator().manual_seed(int(seed))
    z = torch.randn(cluster.mean.shape, generator=g, dtype=torch.float64)
    return VisualEmbedding.from_global(cluster.mean + cluster.covariance.sqrt() * z)


def clusters_to_state(clusters: dict[Emotion, EmotionCluster]) -> dict:
    return {e.label: {"mean": c.mean, "covariance": c.covariance, "sample_count": c.sample_count}
            for e, c in clusters.items()}


def clusters_from_state(state: dict) -> dict[Emotion, EmotionCluster]:
    return {parse_emotion(k): EmotionCluster(parse_emotion(k), v["mean"], v["covariance"], int(v["sample_count"]))
            for k, v in state.items()}


# -- generation -------------------------------------------------------------------

@dataclass(frozen=True)
class SamplerSettings:
    steps: int | None = None
    guidance: float = 1.0
    batch_size: int = 50


def image_seed(seed: int, index: int) -> int:
    return derive_seed(seed, "image", index)


def _cluster_for(clusters, label: Emotion) -> EmotionCluster:
    cluster = clusters.get(label) if clusters else None
    if cluster is None:
        raise ClusterError(f"no fitted cluster for {label.label}")
    return cluster


@torch.no_grad()
def fused_descriptors(model: CoEmoGenModel, label: EmotionLike, seeds: Sequence[int], clusters) -> torch.Tensor:
    """Visually-enhanced descriptors ``(n, d0)`` using one cluster draw per image seed."""
    label = parse_emotion(label)
    cluster = _cluster_for(clusters, label)
    dtype = model.vpe.w_q.dtype
    tokens = torch.stack([sample_cluster(cluster, derive_seed(s, "cluster")).tokens for s in seeds]).to(dtype)
    return model.fuse([label] * len(seeds), tokens)


@torch.no_grad()
def render_contexts(model: CoEmoGenModel, contexts: torch.Tensor, route: Emotion | None, seeds: Sequence[int],
                    settings: SamplerSettings = SamplerSettings(), context_bias: torch.Tensor | None = None
                    ) -> torch.Tensor:
    """Sample one image per context row with adapters routed to ``route`` (``None`` = base)."""
    out = []
    size = model.config.image_size
    with model.denoiser.routed(route):
        for i in range(0, len(seeds), settings.batch_size):
            ctx = contexts[i:i + settings.batch_size]
            bias = None if context_bias is None else context_bias[i:i + settings.batch_size]
            null = model.null_context(ctx.shape[0]) if settings.guidance != 1.0 else None
            out.append(sample(model.denoiser, ctx, model.schedule, settings.steps,
                              [derive_seed(s, "noise") for s in seeds[i:i + settings.batch_size]],
                              shape=(3, size, size), guidance=settings.guidance, null_context=null,
                              context_bias=bias, latent_encoder=model.latent_encoder))
    return torch.cat(out)


def generate(label: EmotionLike, n: int, seed: int, model: CoEmoGenModel, clusters=None,
             settings: SamplerSettings = SamplerSettings(), out_dir: str | os.PathLike | None = None) -> torch.Tensor:
    """``n`` images ``(n, 3, H, W)`` in [-1, 1] for one emotion."""
    label = parse_emotion(label)
    clusters = model.clusters if clusters is None else clusters
    seeds = [image_seed(seed, i) for i in range(n)]
    fused = fused_descriptors(model, label, seeds, clusters)
    with torch.no_grad():
        contexts = model.context_of(model.encode_fused(fused))
    images = render_contexts(model, contexts, label, seeds, settings)
    if out_dir is not None:
        meta = {"emotion": label.label, "emotions": [label.label], "weights": [1.0]}
        write_images(Path(out_dir) / label.label, label.label, images, seeds, meta, settings, model)
    return images


def generate_from_text(text: str, seed: int, model: CoEmoGenModel, settings: SamplerSettings = SamplerSettings(),
                       route: EmotionLike | None = None, index: int = 0) -> torch.Tensor:
    """Single image conditioned on plain text, base adapters unless ``route`` is given."""
    seeds = [image_seed(seed, index)]
    with torch.no_grad():
        ctx = model.text_context([text])
    route = None if route is None else parse_emotion(route)
    return render_contexts(model, ctx, route, seeds, settings)[0]


def emotion_transfer(label: EmotionLike, neutral_concept: str, blend: float, model: CoEmoGenModel, clusters=None,
                     seed: int = 0, settings: SamplerSettings = SamplerSettings(), index: int = 0) -> torch.Tensor:
    """Condition on the concept's token sequence followed by the emotion condition's tokens.

    Cross-attention mass is reweighted by ``1 - blend`` on concept tokens and
    ``blend`` on emotion tokens (a log-weight logit bias). Zero-weight tokens
    are removed, so ``blend=0`` is plain concept generation on the base model and
    ``blend=1`` is single-emotion generation.
    """
    label = parse_emotion(label)
    if not neutral_concept or not neutral_concept.strip():
        raise InputError("neutral concept text is empty")
    if not 0.0 <= blend <= 1.0:
        raise InputError(f"blend must be in [0, 1], got {blend}")
    clusters = model.clusters if clusters is None else clusters
    seeds = [image_seed(seed, index)]
    if blend == 0.0:
        return generate_from_text(neutral_concept, seed, model, settings, index=index)
    fused = fused_descriptors(model, label, seeds, clusters)
    with torch.no_grad():
        emotion_ctx = model.context_of(model.encode_fused(fused))
        if blend == 1.0:
            return render_contexts(model, emotion_ctx, label, seeds, settings)[0]
        concept_ctx = model.text_context([neutral_concept])
        context = torch.cat([concept_ctx, emotion_ctx], dim=1)
        bias = torch.cat([
            torch.full(concept_ctx.shape[:2], math.log(1 - blend)),
            torch.full(emotion_ctx.shape[:2], math.log(blend)),
        ], dim=1).to(context.dtype)
    return render_contexts(model, context, label, seeds, settings, context_bias=bias)[0]


def emotion_fusion(label_a: EmotionLike, label_b: EmotionLike, weight: float, model: CoEmoGenModel, clusters=None,
                   seed: int = 0, n: int = 1, settings: SamplerSettings = SamplerSettings(),
                   out_dir: str | os.PathLike | None = None) -> torch.Tensor:
    """Interpolate visually-enhanced descriptors before the text encoder; route to the heavier emotion."""
    a, b = parse_emotion(label_a), parse_emotion(label_b)
    if not 0.0 <= weight <= 1.0:
        raise InputError(f"weight must be in [0, 1], got {weight}")
    clusters = model.clusters if clusters is None else clusters
    seeds = [image_seed(seed, i) for i in range(n)]
    if weight == 1.0:
        fused = fused_descriptors(model, a, seeds, clusters)
    elif weight == 0.0:
        fused = fused_descriptors(model, b, seeds, clusters)
    else:
        fused = weight * fused_descriptors(model, a, seeds, clusters) + (1 - weight) * fused_descriptors(
            model, b, seeds, clusters)
    route = a if weight >= 0.5 else b
    with torch.no_grad():
        contexts = model.context_of(model.encode_fused(fused))
    images = render_contexts(model, contexts, route, seeds, settings)
    if out_dir is not None:
        name = f"{a.label}+{b.label}"
        meta = {"emotion": route.label, "emotions": [a.label, b.label], "weights": [weight, 1 - weight]}
        write_images(Path(out_dir) / name, name, images, seeds, meta, settings, model)
    return images


# -- output ---------------------------------------------------------------------------

def to_uint8(images: torch.Tensor) -> np.ndarray:
    """``(N, 3, H, W)`` in [-1, 1] -> ``(N, H, W, 3)`` uint8."""
    arr = ((images.detach().float().clamp(-1, 1) + 1) * 127.5).round().to(torch.uint8)
    return arr.permute(0, 2, 3, 1).cpu().numpy()


def write_images(folder: Path, stem: str, images: torch.Tensor, seeds: Sequence[int], meta: dict,
                 settings: SamplerSettings, model: CoEmoGenModel, checkpoint_hash: str | None = None) -> list[Path]:
    from PIL import Image

    folder.mkdir(parents=True, exist_ok=True)
    ckpt = checkpoint_hash or model.parameter_hash()
    paths = []
    for i, (arr, s) in enumerate(zip(to_uint8(images), seeds)):
        path = folder / f"{stem}_{i:04d}.png"
        Image.fromarray(arr).save(path, format="PNG")
        sidecar = dict(meta, index=i, seed=int(s), steps=settings.steps or model.schedule.T,
                       guidance=settings.guidance, checkpoint_hash=ckpt)
        path.with_suffix(".json").write_text(json.dumps(sidecar, sort_keys=True) + "\n", encoding="utf-8")
        paths.append(path)
    return paths
