"""Corpus records and the JSON-lines manifest format."""

from __future__ import annotations

import hashlib
import json
import os
from collections import Counter
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterable, Optional

from ..errors import DataError
from ..taxonomy import EMOTIONS, Emotion, parse_emotion

OK = "ok"
FIELDS = ("image_ref", "label", "caption", "clip_score", "emotion_confidence", "status", "error", "attempts")


@dataclass(frozen=True)
class CorpusRecord:
    image_ref: str
    label: Emotion
    caption: str = ""
    clip_score: Optional[float] = None
    emotion_confidence: Optional[float] = None
    status: str = OK
    error: str = ""
    attempts: int = 0

    def __post_init__(self):
        object.__setattr__(self, "label", parse_emotion(self.label))

    @property
    def ok(self) -> bool:
        return self.status == OK

    def evolve(self, **changes) -> "CorpusRecord":
        return replace(self, **changes)

    def to_json(self) -> dict:
        d = asdict(self)
        d["label"] = self.label.label
        return {k: d[k] for k in FIELDS}

    @classmethod
    def from_json(cls, d: dict) -> "CorpusRecord":
        unknown = set(d) - set(FIELDS)
        if unknown:
            raise DataError(f"unknown manifest fields: {sorted(unknown)}")
        if "image_ref" not in d or "label" not in d:
            raise DataError("manifest record needs image_ref and label")
        return cls(**d)


@dataclass
class CorpusManifest:
    records: list[CorpusRecord] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    @property
    def per_emotion_counts(self) -> dict[Emotion, int]:
        counts = Counter(r.label for r in self.records)
        return {e: counts[e] for e in EMOTIONS if counts[e]}

    def by_emotion(self) -> dict[Emotion, list[CorpusRecord]]:
        groups: dict[Emotion, list[CorpusRecord]] = {}
        for r in self.records:
            groups.setdefault(r.label, []).append(r)
        return {e: groups[e] for e in EMOTIONS if e in groups}

    def split_failed(self) -> tuple["CorpusManifest", "CorpusManifest"]:
        return (CorpusManifest([r for r in self.records if r.ok]),
                CorpusManifest([r for r in self.records if not r.ok]))

    def digest(self) -> str:
        return hashlib.sha256(dumps_manifest(self).encode()).hexdigest()


def dumps_manifest(manifest: CorpusManifest | Iterable[CorpusRecord]) -> str:
    records = manifest.records if isinstance(manifest, CorpusManifest) else list(manifest)
    return "".join(json.dumps(r.to_json(), ensure_ascii=False, sort_keys=False) + "\n" for r in records)


def write_manifest(path: str | os.PathLike, manifest: CorpusManifest | Iterable[CorpusRecord]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dumps_manifest(manifest), encoding="utf-8")
    return path


def read_manifest(path: str | os.PathLike) -> CorpusManifest:
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                records.append(CorpusRecord.from_json(json.loads(line)))
            except (json.JSONDecodeError, TypeError, ValueError) as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from exc
    return CorpusManifest(records)


def resolve_image(image_ref: str, root: str | os.PathLike | None) -> Path:
    p = Path(image_ref)
    return p if p.is_absolute() or root is None else Path(root) / p


class FileImageLoader:
    """Reads ``image_ref`` relative to a root directory."""

    def __init__(self, root: str | os.PathLike | None = None):
        self.root = root

    def __call__(self, image_ref: str) -> bytes:
        return resolve_image(image_ref, self.root).read_bytes()
