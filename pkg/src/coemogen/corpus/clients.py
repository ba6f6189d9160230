"""External client contracts and the offline stand-ins used by the test profile."""

from __future__ import annotations

import hashlib
import io
import re
from typing import Protocol, runtime_checkable

import numpy as np

from ..errors import EncoderError
from ..taxonomy import EMOTION_NAMES, NUM_EMOTIONS


@runtime_checkable
class CaptionerClient(Protocol):
    def caption(self, image_bytes: bytes, prompt: str) -> str: ...


@runtime_checkable
class EncoderClient(Protocol):
    def encode(self, item) -> np.ndarray: ...


@runtime_checkable
class ClassifierClient(Protocol):
    def predict_proba(self, image_bytes: bytes) -> np.ndarray: ...


def decode_rgb(image_bytes: bytes) -> np.ndarray:
    """Bytes -> float ``(H, W, 3)`` array in [0, 1]."""
    from PIL import Image, UnidentifiedImageError

    try:
        with Image.open(io.BytesIO(image_bytes)) as img:
            return np.asarray(img.convert("RGB"), dtype=np.float64) / 255.0
    except (UnidentifiedImageError, OSError, ValueError) as exc:
        raise EncoderError(f"undecodable image: {exc}") from exc


# -- captioner ------------------------------------------------------------------

_COLORS = {
    "yellow": (1.0, 0.85, 0.2), "magenta": (0.9, 0.15, 0.7), "navy": (0.05, 0.1, 0.4),
    "sky blue": (0.5, 0.7, 1.0), "white": (0.95, 0.95, 0.95), "green": (0.55, 0.8, 0.5),
    "cream": (1.0, 0.9, 0.55), "orange": (1.0, 0.55, 0.1), "red": (0.85, 0.05, 0.1),
    "crimson": (0.55, 0.05, 0.05), "black": (0.05, 0.03, 0.04), "olive": (0.45, 0.45, 0.15),
    "brown": (0.3, 0.22, 0.08), "gray": (0.4, 0.45, 0.55), "slate": (0.22, 0.26, 0.35),
    "purple": (0.45, 0.2, 0.6), "teal": (0.1, 0.5, 0.5),
}
_NAMES = list(_COLORS)
_PALETTE = np.array([_COLORS[n] for n in _NAMES])

_MOODS = {
    "amusement": "a playful sense of amusement", "awe": "a breathtaking feeling of awe",
    "contentment": "a calm warm contentment", "excitement": "an energetic rush of excitement",
    "anger": "a harsh burning anger", "disgust": "an unsettling murky disgust",
    "fear": "a tense creeping fear", "sadness": "a quiet heavy sadness",
}
_OPENERS = ("a", "a close-up of a", "a photo of a", "an image of a")


def color_name(rgb) -> str:
    return _NAMES[int(np.argmin(((_PALETTE - np.asarray(rgb)) ** 2).sum(axis=1)))]


def _structure(gray: np.ndarray) -> str:
    gy, gx = np.gradient(gray)
    energy = float(np.mean(gx ** 2 + gy ** 2))
    if energy < 2e-3:
        return "smooth"
    ex, ey = float(np.mean(gx ** 2)), float(np.mean(gy ** 2))
    diag = float(np.mean((gx + gy) ** 2)), float(np.mean((gx - gy) ** 2))
    if ex > 3 * ey:
        return "vertical streaks"
    if ey > 3 * ex:
        return "horizontal bands"
    if max(diag) > 4 * min(diag):
        return "diagonal stripes"
    return "scattered shapes"


def _where(mask: np.ndarray) -> str:
    h, w = mask.shape
    ys, xs = np.nonzero(mask)
    vert = "upper" if ys.mean() < h / 3 else "lower" if ys.mean() > 2 * h / 3 else "middle"
    horiz = "left" if xs.mean() < w / 3 else "right" if xs.mean() > 2 * w / 3 else "center"
    return "in the center" if (vert, horiz) == ("middle", "center") else f"in the {vert} {horiz}"


def _article(word: str) -> str:
    return "an" if word[0] in "aeiou" else "a"


class TemplateCaptioner:
    """Deterministic captioner describing brightness, color, structure and layout.

    It honours the prompt the way an instruction-following captioner would:
    the emotion named after "emotion of" is woven in, and a one-sentence
    request yields one sentence, otherwise extra (less reliable) detail is added.
    """

    def caption(self, image_bytes: bytes, prompt: str) -> str:
        img = decode_rgb(image_bytes)
        digest = int(hashlib.sha256(image_bytes).hexdigest()[:8], 16)
        lum = img.mean(axis=2)
        brightness = float(lum.mean())
        bright_word = "bright" if brightness > 0.6 else "softly lit" if brightness > 0.4 else "dim" if brightness > 0.2 else "dark"
        rg = img[..., 0] - img[..., 1]
        yb = 0.5 * (img[..., 0] + img[..., 1]) - img[..., 2]
        colorfulness = float(np.hypot(rg.std(), yb.std()) + 0.3 * np.hypot(rg.mean(), yb.mean()))
        color_word = "vivid" if colorfulness > 0.35 else "colorful" if colorfulness > 0.2 else "muted"
        border = np.concatenate([img[0], img[-1], img[:, 0], img[:, -1]])
        bg = np.median(border, axis=0)
        dist = np.sqrt(((img - bg) ** 2).sum(axis=2))
        accent_mask = dist > 0.3
        bg_name = color_name(bg)
        parts = [f"{_OPENERS[digest % len(_OPENERS)]} {bright_word} {color_word} scene with {_article(bg_name)} {bg_name} background"]
        if accent_mask.sum() >= 4:
            accent = color_name(np.median(img[accent_mask], axis=0))
            structure = _structure(lum)
            if structure == "smooth":
                structure = "round shapes"
            parts.append(f"and {accent} {structure} {_where(accent_mask)}")
        else:
            parts.append(f"and {_structure(lum)} texture")
        sentence = " ".join(parts)
        match = re.search(r"emotion of (\w+)", prompt)
        if match and match.group(1).lower() in _MOODS:
            sentence += f", evoking {_MOODS[match.group(1).lower()]}"
        sentence = sentence[0].upper() + sentence[1:] + "."
        if "one-sentence" in prompt:
            return sentence
        extra = _NAMES[(digest >> 8) % len(_NAMES)]
        return sentence + f" There also seem to be faint {extra} marks near the edges, and the edges look slightly blurred."


# -- classifiers ----------------------------------------------------------------

def image_features(images: np.ndarray) -> np.ndarray:
    """``(N, H, W, 3)`` float images in [0, 1] -> pooled color/edge features."""
    images = np.asarray(images, dtype=np.float64)
    n, h, w, _ = images.shape
    k = 4
    pooled = images.reshape(n, k, h // k, k, w // k, 3).mean(axis=(2, 4)).reshape(n, -1)
    lum = images.mean(axis=3)
    gx = np.abs(np.diff(lum, axis=2)).mean(axis=(1, 2))
    gy = np.abs(np.diff(lum, axis=1)).mean(axis=(1, 2))
    d1 = np.abs(lum[:, 1:, 1:] - lum[:, :-1, :-1]).mean(axis=(1, 2))
    d2 = np.abs(lum[:, 1:, :-1] - lum[:, :-1, 1:]).mean(axis=(1, 2))
    stats = np.stack([images.mean(axis=(1, 2)), images.std(axis=(1, 2))], axis=1).reshape(n, -1)
    return np.concatenate([pooled, stats, np.stack([gx, gy, d1, d2], axis=1) * 4], axis=1)


class FixedWeightClassifier:
    """Seeded linear-softmax classifier over mean color; a stub for interface tests."""

    def __init__(self, seed: int = 0, temperature: float = 1.0):
        rng = np.random.default_rng(seed)
        self.weights = rng.normal(0, 3, (3, NUM_EMOTIONS))
        self.bias = rng.normal(0, 1, NUM_EMOTIONS)
        self.temperature = temperature

    def predict_proba(self, image_bytes: bytes) -> np.ndarray:
        logits = (decode_rgb(image_bytes).mean(axis=(0, 1)) @ self.weights + self.bias) / self.temperature
        p = np.exp(logits - logits.max())
        return p / p.sum()


class PixelEmotionClassifier:
    """Multinomial logistic regression on pooled color and edge features."""

    def __init__(self, C: float = 1.0):
        from sklearn.linear_model import LogisticRegression
        from sklearn.pipeline import make_pipeline
        from sklearn.preprocessing import StandardScaler

        self.model = make_pipeline(StandardScaler(), LogisticRegression(C=C, max_iter=2000))

    def fit(self, images: np.ndarray, labels) -> "PixelEmotionClassifier":
        """``images``: uint8 ``(N, H, W, 3)``; labels: emotions or indices."""
        y = np.array([int(l) for l in labels])
        self.model.fit(image_features(np.asarray(images) / 255.0), y)
        return self

    def predict_proba_array(self, images: np.ndarray) -> np.ndarray:
        """Probabilities ``(N, 8)`` for uint8 images or float images in [0, 1]."""
        images = np.asarray(images)
        if images.dtype == np.uint8:
            images = images / 255.0
        raw = self.model.predict_proba(image_features(images))
        out = np.zeros((len(raw), NUM_EMOTIONS))
        out[:, self.model.classes_] = raw
        return out

    def predict_proba(self, image_bytes: bytes) -> np.ndarray:
        return self.predict_proba_array(decode_rgb(image_bytes)[None])[0]

    def predict_tensor(self, images) -> np.ndarray:
        """Argmax labels for ``(N, 3, H, W)`` tensors in [-1, 1]."""
        arr = ((images.detach().cpu().double().clamp(-1, 1) + 1) / 2).permute(0, 2, 3, 1).numpy()
        return self.predict_proba_array(arr).argmax(axis=1)


__all__ = [
    "CaptionerClient", "EncoderClient", "ClassifierClient", "TemplateCaptioner",
    "FixedWeightClassifier", "PixelEmotionClassifier", "color_name", "image_features", "EMOTION_NAMES",
]
