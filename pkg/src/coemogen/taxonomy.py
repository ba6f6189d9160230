"""Mikels emotion taxonomy: eight categories split into two polarities.

Index order is fixed as the positive block followed by the negative block,
so ``polarity == (index >= 4)``.
"""

from __future__ import annotations

import enum
from typing import Iterable, Union

import torch

from .errors import TaxonomyError


class Emotion(enum.IntEnum):
    AMUSEMENT = 0
    AWE = 1
    CONTENTMENT = 2
    EXCITEMENT = 3
    ANGER = 4
    DISGUST = 5
    FEAR = 6
    SADNESS = 7

    @property
    def label(self) -> str:
        return self.name.lower()

    @property
    def polarity(self) -> "Polarity":
        return polarity_of(self)

    def __str__(self) -> str:
        return self.label


class Polarity(enum.IntEnum):
    POSITIVE = 0
    NEGATIVE = 1

    @property
    def label(self) -> str:
        return self.name.lower()

    def __str__(self) -> str:
        return self.label


NUM_EMOTIONS = len(Emotion)
EMOTIONS: tuple[Emotion, ...] = tuple(Emotion)
EMOTION_NAMES: tuple[str, ...] = tuple(e.label for e in Emotion)

EmotionLike = Union[Emotion, str, int]


def parse_emotion(value: EmotionLike) -> Emotion:
    """Coerce a name, index or ``Emotion`` into an ``Emotion``."""
    if isinstance(value, Emotion):
        return value
    if isinstance(value, bool):
        raise TaxonomyError(f"not an emotion: {value!r}")
    if isinstance(value, int):
        try:
            return Emotion(value)
        except ValueError:
            raise TaxonomyError(f"emotion index out of range [0, 7]: {value}") from None
    if isinstance(value, str):
        key = value.strip().lower()
        for emotion in Emotion:
            if emotion.label == key:
                return emotion
        raise TaxonomyError(f"unknown emotion {value!r}; expected one of {', '.join(EMOTION_NAMES)}")
    raise TaxonomyError(f"not an emotion: {value!r}")


def parse_emotions(values: Iterable[EmotionLike]) -> list[Emotion]:
    return [parse_emotion(v) for v in values]


def polarity_of(label: EmotionLike) -> Polarity:
    emotion = parse_emotion(label)
    return Polarity.POSITIVE if emotion < 4 else Polarity.NEGATIVE


def emotions_of(polarity: Polarity) -> tuple[Emotion, ...]:
    return tuple(e for e in Emotion if polarity_of(e) is polarity)


def encode_one_hot(label: EmotionLike, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """Length-8 vector with a single 1 at the emotion's index."""
    emotion = parse_emotion(label)
    vec = torch.zeros(NUM_EMOTIONS, dtype=dtype)
    vec[int(emotion)] = 1
    return vec


def decode_one_hot(vector: torch.Tensor) -> Emotion:
    vec = torch.as_tensor(vector)
    if vec.shape != (NUM_EMOTIONS,):
        raise TaxonomyError(f"one-hot vector must have shape (8,), got {tuple(vec.shape)}")
    ones = (vec == 1).nonzero().flatten()
    if len(ones) != 1 or int((vec != 0).sum()) != 1:
        raise TaxonomyError(f"not a one-hot vector: {vec.tolist()}")
    return Emotion(int(ones[0]))
