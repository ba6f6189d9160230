"""Five-metric evaluation: fidelity (FID role), diversity (LPIPS role), Emo-A, Sem-C, Sem-D.

Sem-C is the mean over images of the best cosine match against a concept
vocabulary; Sem-D is the mean pairwise distance between k-means centroids
of an emotion's image embeddings. Every global value is the mean of the
per-emotion values.
"""

from __future__ import annotations

import hashlib
import itertools
import json
import warnings
from dataclasses import asdict, dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np
import torch

from .errors import EvalError
from .taxonomy import EMOTIONS, Emotion, EmotionLike, parse_emotion

FID_EPS = 1e-6
METRICS = ("fidelity", "diversity", "emo_a", "sem_c", "sem_d")


def _as_tensor(images) -> torch.Tensor:
    if isinstance(images, torch.Tensor):
        return images if images.dim() == 4 else images.unsqueeze(0)
    return torch.stack(list(images))


def _embed(images, image_encoder) -> np.ndarray:
    with torch.no_grad():
        return image_encoder(_as_tensor(images)).double().cpu().numpy()


def _unit_rows(x: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    if (norms == 0).any():
        raise EvalError("zero-norm embedding")
    return x / norms


def predict_labels(images, classifier) -> np.ndarray:
    if hasattr(classifier, "predict_tensor"):
        return np.asarray(classifier.predict_tensor(_as_tensor(images)))
    if callable(classifier):
        return np.asarray(classifier(images))
    raise EvalError("classifier must expose predict_tensor or be callable")


def emo_accuracy(images, intended: Sequence[EmotionLike], classifier) -> float:
    """Fraction of images whose predicted emotion is the intended one."""
    intended = [int(parse_emotion(e)) for e in intended]
    n = len(images)
    if n != len(intended):
        raise EvalError(f"{n} images but {len(intended)} intended labels")
    if n == 0:
        raise EvalError("no images to score")
    predicted = predict_labels(images, classifier)
    return float(np.mean(predicted == np.asarray(intended)))


def semantic_clarity(images, concept_vocabulary: Sequence[str], image_encoder, text_encoder, *,
                     image_embeddings: np.ndarray | None = None) -> float:
    if not concept_vocabulary:
        raise EvalError("concept vocabulary is empty")
    img = _unit_rows(_embed(images, image_encoder) if image_embeddings is None else np.asarray(image_embeddings, float))
    with torch.no_grad():
        txt = text_encoder.encode_text(list(concept_vocabulary)).pooled.double().cpu().numpy()
    sims = img @ _unit_rows(txt).T
    return float(sims.max(axis=1).mean())


def kmeans_centroids(x: np.ndarray, k: int, seed: int = 0) -> np.ndarray:
    """Seeded k-means on rows sorted lexicographically (order-independent)."""
    from sklearn.cluster import KMeans

    x = np.asarray(x, dtype=np.float64)
    x = x[np.lexsort(x.T[::-1])]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        km = KMeans(n_clusters=k, n_init=1, random_state=seed).fit(x)
    return km.cluster_centers_


def centroid_spread(x: np.ndarray, k: int, seed: int = 0) -> float:
    if len(x) < k:
        raise EvalError(f"need at least k={k} images, got {len(x)}")
    if k < 2:
        raise EvalError("k must be at least 2")
    c = kmeans_centroids(x, k, seed)
    d = [np.linalg.norm(c[i] - c[j]) for i, j in itertools.combinations(range(k), 2)]
    return float(np.mean(d))


def semantic_diversity(images_per_emotion: Mapping, image_encoder=None, k: int = 5, seed: int = 0, *,
                       embeddings: bool = False) -> float:
    """Centroid spread per emotion, averaged. With ``embeddings=True`` the values are embedding rows."""
    if not images_per_emotion:
        raise EvalError("no emotions to score")
    spreads = []
    for key, items in images_per_emotion.items():
        x = np.asarray(items, dtype=np.float64) if embeddings else _embed(items, image_encoder)
        spreads.append(centroid_spread(x, k, seed))
    return float(np.mean(spreads))


def pixel_distance(a: torch.Tensor, b: torch.Tensor) -> float:
    """Mean absolute pixel difference of [-1, 1] images, halved into [0, 1]; black vs white is 1."""
    return float((a.double() - b.double()).abs().mean() / 2)


def pairwise_diversity(images, distance_fn: Callable = pixel_distance) -> float:
    images = list(_as_tensor(images)) if isinstance(images, torch.Tensor) else list(images)
    if len(images) < 2:
        raise EvalError("pairwise diversity needs at least 2 images")
    total, count = 0.0, 0
    for i, j in itertools.combinations(range(len(images)), 2):
        total += distance_fn(images[i], images[j])
        count += 1
    return total / count


def frechet_distance(x: np.ndarray, y: np.ndarray, eps: float = FID_EPS) -> float:
    """Fréchet distance between Gaussians fitted to two embedding sets.

    ``eps`` is added to both covariance diagonals. The trace of the matrix
    square root is taken through the symmetric product ``S1^1/2 S2 S1^1/2``.
    """
    x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
    if len(x) < 2 or len(y) < 2:
        raise EvalError("each set needs at least 2 samples")
    if x.shape[1] != y.shape[1]:
        raise EvalError("embedding dimensions differ")
    mu1, mu2 = x.mean(axis=0), y.mean(axis=0)
    eye = np.eye(x.shape[1])
    s1 = np.cov(x, rowvar=False) + eps * eye
    s2 = np.cov(y, rowvar=False) + eps * eye
    w, v = np.linalg.eigh(s1)
    root1 = (v * np.sqrt(np.clip(w, 0, None))) @ v.T
    cross = np.sqrt(np.clip(np.linalg.eigvalsh(root1 @ s2 @ root1), 0, None)).sum()
    diff = mu1 - mu2
    return float(max(diff @ diff + np.trace(s1) + np.trace(s2) - 2 * cross, 0.0))


def fidelity_distance(generated, reference, image_encoder) -> float:
    return frechet_distance(_embed(generated, image_encoder), _embed(reference, image_encoder))


# -- report -----------------------------------------------------------------------

@dataclass
class EvalReport:
    fidelity: float
    diversity: float
    emo_a: float
    sem_c: float
    sem_d: float
    per_emotion: dict[str, dict[str, float]] = field(default_factory=dict)
    metadata_hash: str = ""

    def to_text(self) -> str:
        lines = [f"{m} = {getattr(self, m):.6f}" for m in METRICS]
        lines.append(f"metadata_hash = {self.metadata_hash}")
        lines.append("")
        lines.append("emotion\t" + "\t".join(METRICS))
        for name, row in self.per_emotion.items():
            lines.append(name + "\t" + "\t".join(f"{row[m]:.6f}" for m in METRICS))
        return "\n".join(lines) + "\n"

    def table_row(self, name: str = "CoEmoGen") -> str:
        return (f"{name} | FID {self.fidelity:.4f} | LPIPS {self.diversity:.4f} | Emo-A {self.emo_a * 100:.2f}% | "
                f"Sem-C {self.sem_c:.4f} | Sem-D {self.sem_d:.4f}")

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=2) + "\n"


def evaluate(generated: Mapping[EmotionLike, torch.Tensor], reference: Mapping[EmotionLike, torch.Tensor], *,
             classifier, image_encoder, text_encoder, vocabulary: Sequence[str], k: int = 5, seed: int = 0,
             distance_fn: Callable = pixel_distance, metadata: object = None) -> EvalReport:
    """Score generated images per emotion against same-emotion references."""
    per: dict[str, dict[str, float]] = {}
    for key in sorted(generated, key=lambda e: int(parse_emotion(e))):
        emotion = parse_emotion(key)
        imgs = _as_tensor(generated[key])
        ref = reference.get(emotion, reference.get(emotion.label)) if hasattr(reference, "get") else None
        if ref is None:
            raise EvalError(f"no reference images for {emotion.label}")
        emb = _embed(imgs, image_encoder)
        per[emotion.label] = {
            "fidelity": frechet_distance(emb, _embed(_as_tensor(ref), image_encoder)),
            "diversity": pairwise_diversity(imgs, distance_fn),
            "emo_a": emo_accuracy(imgs, [emotion] * len(imgs), classifier),
            "sem_c": semantic_clarity(imgs, vocabulary, image_encoder, text_encoder, image_embeddings=emb),
            "sem_d": centroid_spread(emb, k, seed),
        }
    if not per:
        raise EvalError("nothing to evaluate")
    means = {m: float(np.mean([row[m] for row in per.values()])) for m in METRICS}
    meta = json.dumps(metadata, sort_keys=True, default=str) if metadata is not None else ""
    return EvalReport(**means, per_emotion=per, metadata_hash=hashlib.sha256(meta.encode()).hexdigest())
