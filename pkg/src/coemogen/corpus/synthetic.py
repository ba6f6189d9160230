"""Bundled synthetic corpus: one visual signature per emotion class.

Positive classes are bright and saturated, negative ones dark or muted,
so the polarity split shows up in low-level statistics while each class
keeps its own motif (dots, mountain, sun, stripes, cross, blotches, eye, rain).
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from ..taxonomy import EMOTIONS, Emotion
from .records import CorpusManifest, CorpusRecord, write_manifest

SIZE = 32


def _grid(size):
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    return yy, xx


def _jitter(rgb, rng, amount=0.06):
    return np.clip(np.asarray(rgb) + rng.uniform(-amount, amount, 3), 0, 1)


def _disk(yy, xx, cy, cx, r):
    return (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r


def render(emotion: Emotion, rng: np.random.Generator, size: int = SIZE) -> np.ndarray:
    """One ``(size, size, 3)`` uint8 image of the class signature."""
    yy, xx = _grid(size)
    s = size / 32.0
    img = np.empty((size, size, 3))

    def fill(rgb, mask=None):
        if mask is None:
            img[:] = rgb
        else:
            img[mask] = rgb

    if emotion is Emotion.AMUSEMENT:
        fill(_jitter((1.0, 0.85, 0.2), rng))
        dot = _jitter((0.9, 0.15, 0.7), rng)
        for _ in range(rng.integers(3, 6)):
            fill(dot, _disk(yy, xx, rng.uniform(4, 28) * s, rng.uniform(4, 28) * s, rng.uniform(2.5, 4.5) * s))
    elif emotion is Emotion.AWE:
        top, bottom = _jitter((0.05, 0.1, 0.4), rng), _jitter((0.5, 0.7, 1.0), rng)
        w = (yy / (size - 1))[..., None]
        img[:] = top * (1 - w) + bottom * w
        px, py = rng.uniform(8, 24) * s, rng.uniform(6, 14) * s
        slope = rng.uniform(0.8, 1.4)
        fill(_jitter((0.95, 0.95, 0.97), rng, 0.03), (yy - py) >= slope * np.abs(xx - px))
    elif emotion is Emotion.CONTENTMENT:
        fill(_jitter((0.55, 0.8, 0.5), rng))
        fill(_jitter((1.0, 0.9, 0.55), rng, 0.04),
             _disk(yy, xx, rng.uniform(6, 16) * s, rng.uniform(8, 24) * s, rng.uniform(5, 8) * s))
    elif emotion is Emotion.EXCITEMENT:
        fill(_jitter((1.0, 0.55, 0.1), rng))
        period = rng.uniform(6, 9) * s
        phase = rng.uniform(0, period)
        fill(_jitter((0.85, 0.05, 0.1), rng), ((xx + yy + phase) % period) < period / 2.5)
    elif emotion is Emotion.ANGER:
        fill(_jitter((0.55, 0.05, 0.05), rng, 0.05))
        cy, cx = rng.uniform(10, 22) * s, rng.uniform(10, 22) * s
        width = rng.uniform(1.5, 2.5) * s
        band = (np.abs((yy - cy) - (xx - cx)) < width) | (np.abs((yy - cy) + (xx - cx)) < width)
        fill(_jitter((0.05, 0.02, 0.02), rng, 0.03), band)
    elif emotion is Emotion.DISGUST:
        base, blotch = _jitter((0.45, 0.45, 0.15), rng), _jitter((0.3, 0.22, 0.08), rng)
        coarse = rng.uniform(0, 1, (5, 5))
        idx = np.clip((np.arange(size) * 5) // size, 0, 4)
        field_ = coarse[idx][:, idx]
        img[:] = base
        fill(blotch, field_ > 0.55)
    elif emotion is Emotion.FEAR:
        fill(_jitter((0.05, 0.05, 0.08), rng, 0.03))
        cy, cx, r = rng.uniform(8, 24) * s, rng.uniform(8, 24) * s, rng.uniform(3.5, 5.5) * s
        ring = _disk(yy, xx, cy, cx, r) & ~_disk(yy, xx, cy, cx, r - 1.5 * s)
        fill(_jitter((0.85, 0.85, 0.8), rng, 0.05), ring)
    elif emotion is Emotion.SADNESS:
        fill(_jitter((0.4, 0.45, 0.55), rng, 0.05))
        streak = _jitter((0.22, 0.26, 0.35), rng, 0.03)
        for _ in range(rng.integers(4, 8)):
            x0 = rng.uniform(0, size)
            fill(streak, (np.abs(xx - x0) < 0.8 * s) & (yy >= rng.uniform(0, 12) * s))
    else:  # pragma: no cover
        raise ValueError(emotion)

    img = img * rng.uniform(0.92, 1.08) + rng.normal(0, 0.02, img.shape)
    return (np.clip(img, 0, 1) * 255).round().astype(np.uint8)


def render_batch(per_class: int, seed: int, emotions=EMOTIONS, size: int = SIZE):
    """In-memory images ``(N, size, size, 3)`` and labels, class-major order."""
    rng = np.random.default_rng(seed)
    images, labels = [], []
    for e in emotions:
        for _ in range(per_class):
            images.append(render(e, rng, size))
            labels.append(e)
    return np.stack(images), labels


def to_tensor(images: np.ndarray):
    import torch

    return torch.from_numpy(images.astype(np.float32)).permute(0, 3, 1, 2) / 127.5 - 1.0


def write_synthetic_corpus(out_dir: str | Path, per_class: int = 100, seed: int = 0,
                           counts: dict[Emotion, int] | None = None) -> CorpusManifest:
    """Write PNGs under ``out_dir/images/<emotion>/`` and an uncaptioned ``manifest.jsonl``."""
    from PIL import Image

    out = Path(out_dir)
    rng = np.random.default_rng(seed)
    records = []
    for e in EMOTIONS:
        n = per_class if counts is None else counts.get(e, 0)
        folder = out / "images" / e.label
        folder.mkdir(parents=True, exist_ok=True)
        for i in range(n):
            ref = f"images/{e.label}/{e.label}_{i:04d}.png"
            Image.fromarray(render(e, rng)).save(out / ref, format="PNG", optimize=False)
            records.append(CorpusRecord(image_ref=ref, label=e))
    manifest = CorpusManifest(records)
    write_manifest(out / "manifest.jsonl", manifest)
    return manifest
