"""Corpus curation: captioning, image-caption scoring, filtering, confidence curation, oversampling."""

from __future__ import annotations

import logging
import math
import re
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Iterable, Sequence

import numpy as np

from ..errors import CurationError
from ..taxonomy import EMOTIONS, Emotion, EmotionLike, parse_emotion
from .clients import CaptionerClient, ClassifierClient, EncoderClient
from .prompts import CaptionPrompt, render_prompt
from .records import CorpusManifest, CorpusRecord, FileImageLoader

logger = logging.getLogger(__name__)

CAPTION_FAILED = "caption_failed"
SCORE_FAILED = "score_failed"
CLASSIFY_FAILED = "classify_failed"

DEFAULT_STOP_WORDS = frozenset(
    "a an the and or of in on at to with by for from is are was were be been it its this that these "
    "those as into over under near there also seem seems look looks slightly".split()
)

ImageLoader = Callable[[str], bytes]


def _map(fn, items: Sequence, jobs: int) -> list:
    """Order-preserving map; workers share nothing but the result list."""
    if jobs <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


def _as_records(records) -> list[CorpusRecord]:
    return list(records.records if isinstance(records, CorpusManifest) else records)


def caption_corpus(records: Iterable[CorpusRecord], captioner: CaptionerClient, prompt: CaptionPrompt = CaptionPrompt(),
                   *, loader: ImageLoader | None = None, max_retries: int = 2, overwrite: bool = False,
                   jobs: int = 1) -> list[CorpusRecord]:
    """Caption every record lacking a caption.

    Failures are isolated per record: the record comes back with
    ``status="caption_failed"`` and the number of attempts made.
    """
    records = _as_records(records)
    loader = loader or FileImageLoader()

    def one(record: CorpusRecord) -> CorpusRecord:
        if record.caption and not overwrite:
            return record
        text = render_prompt(prompt, record.label)
        error = ""
        attempts = 0
        try:
            image = loader(record.image_ref)
        except OSError as exc:
            return record.evolve(caption="", status=CAPTION_FAILED, error=f"image unreadable: {exc}", attempts=0)
        for attempts in range(1, max_retries + 2):
            try:
                caption = (captioner.caption(image, text) or "").strip()
            except Exception as exc:  # client errors are data, not control flow
                error = f"{type(exc).__name__}: {exc}"
                continue
            if caption:
                return record.evolve(caption=caption, status="ok", error="", attempts=attempts)
            error = "empty caption"
        return record.evolve(caption="", status=CAPTION_FAILED, error=error, attempts=attempts)

    out = _map(one, records, jobs)
    failed = sum(not r.ok for r in out)
    if out and failed == len(out):
        raise CurationError(f"captioning failed for all {failed} records; first error: {out[0].error}")
    if failed:
        logger.warning("captioning failed for %d of %d records", failed, len(out))
    return out


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))


def score_pairs(records: Iterable[CorpusRecord], image_encoder: EncoderClient, text_encoder: EncoderClient,
                *, loader: ImageLoader | None = None, jobs: int = 1) -> list[CorpusRecord]:
    """Set ``clip_score`` to the cosine of the image and caption embeddings."""
    records = _as_records(records)
    loader = loader or FileImageLoader()

    def one(record: CorpusRecord) -> CorpusRecord:
        if not record.ok:
            return record
        if not record.caption:
            return record.evolve(status=SCORE_FAILED, error="no caption to score")
        try:
            score = cosine(image_encoder.encode(loader(record.image_ref)), text_encoder.encode(record.caption))
        except Exception as exc:
            return record.evolve(clip_score=None, status=SCORE_FAILED, error=f"{type(exc).__name__}: {exc}")
        if not math.isfinite(score):
            return record.evolve(clip_score=None, status=SCORE_FAILED, error="non-finite similarity")
        return record.evolve(clip_score=min(1.0, max(-1.0, score)))

    return _map(one, records, jobs)


def filter_bottom_fraction(manifest: CorpusManifest, fraction: float = 0.2) -> tuple[CorpusManifest, CorpusManifest]:
    """Drop the ``floor(fraction * n_e)`` lowest-scoring records of every emotion.

    Ties are ordered by ``(clip_score, image_ref)``. Applying the filter again
    to its own output drops a further share; it is not idempotent.
    """
    if not 0 <= fraction < 1:
        raise CurationError(f"fraction must be in [0, 1), got {fraction}")
    missing = [r.image_ref for r in manifest.records if r.clip_score is None]
    if missing:
        shown = ", ".join(missing[:5]) + (" ..." if len(missing) > 5 else "")
        raise CurationError(f"{len(missing)} records have no clip_score: {shown}")
    drop_ids: set[int] = set()
    groups: dict[Emotion, list[int]] = {}
    for i, r in enumerate(manifest.records):
        groups.setdefault(r.label, []).append(i)
    for idx in groups.values():
        ranked = sorted(idx, key=lambda i: (manifest.records[i].clip_score, manifest.records[i].image_ref))
        drop_ids.update(ranked[: math.floor(fraction * len(idx))])
    kept = [r for i, r in enumerate(manifest.records) if i not in drop_ids]
    dropped = [r for i, r in enumerate(manifest.records) if i in drop_ids]
    return CorpusManifest(kept), CorpusManifest(dropped)


def curate_by_confidence(records: Iterable[CorpusRecord], classifier: ClassifierClient, threshold: float = 0.75,
                         excluded: Iterable[EmotionLike] = (), *, loader: ImageLoader | None = None,
                         jobs: int = 1) -> CorpusManifest:
    """Keep images whose top predicted emotion is allowed and at least ``threshold`` likely.

    Kept records are relabelled to the predicted emotion. Records the
    classifier could not score are returned flagged ``classify_failed``.
    """
    excluded = {parse_emotion(e) for e in excluded}
    loader = loader or FileImageLoader()

    def one(record: CorpusRecord) -> CorpusRecord | None:
        try:
            probs = np.asarray(classifier.predict_proba(loader(record.image_ref)), dtype=np.float64)
            if probs.shape != (len(EMOTIONS),) or abs(probs.sum() - 1) > 1e-6 or (probs < 0).any():
                raise CurationError(f"classifier returned an invalid distribution: {probs.tolist()}")
        except Exception as exc:
            return record.evolve(status=CLASSIFY_FAILED, error=f"{type(exc).__name__}: {exc}")
        top = Emotion(int(np.argmax(probs)))
        p = float(probs[top])
        if top in excluded or p < threshold:
            return None
        return record.evolve(label=top, emotion_confidence=p)

    return CorpusManifest([r for r in _map(one, _as_records(records), jobs) if r is not None])


def oversample(manifest: CorpusManifest, seed: int) -> list[CorpusRecord]:
    """One epoch where every present emotion appears ``max_e count_e`` times, shuffled."""
    groups = manifest.by_emotion()
    if not groups:
        raise CurationError("cannot oversample an empty manifest")
    rng = np.random.default_rng(seed)
    target = max(len(g) for g in groups.values())
    epoch: list[CorpusRecord] = []
    for emotion in EMOTIONS:
        group = groups.get(emotion)
        if group is None:
            continue
        extra = rng.integers(0, len(group), target - len(group))
        epoch.extend(group)
        epoch.extend(group[i] for i in extra)
    order = rng.permutation(len(epoch))
    return [epoch[i] for i in order]


def tokenize(text: str) -> list[str]:
    return re.findall(r"[a-z']+", text.lower())


def token_frequency_report(manifest: CorpusManifest, stop_words: Iterable[str] = DEFAULT_STOP_WORDS
                           ) -> dict[Emotion, dict[str, int]]:
    stop = set(stop_words)
    report: dict[Emotion, Counter] = {}
    for r in manifest.records:
        counts = report.setdefault(r.label, Counter())
        counts.update(t for t in tokenize(r.caption) if t not in stop)
    return {
        e: dict(sorted(report[e].items(), key=lambda kv: (-kv[1], kv[0])))
        for e in EMOTIONS if e in report
    }


def top_tokens(report: dict[Emotion, dict[str, int]], n: int = 20) -> list[str]:
    """Union of each emotion's ``n`` most frequent tokens, sorted."""
    vocab = set()
    for counts in report.values():
        vocab.update(list(counts)[:n])
    return sorted(vocab)
