"""Caption prompt rendering."""

from __future__ import annotations

import string
from dataclasses import dataclass

from ..errors import TemplateError
from ..taxonomy import EmotionLike, parse_emotion

DEFAULT_TEMPLATE = "<Image> {prior}{instruction}, focusing on elements like {attributes} {purpose}."

ATTRIBUTES = "brightness, colorfulness, scene type, object classes, facial expressions, and human actions"
ONE_SENTENCE = "one-sentence caption"


@dataclass(frozen=True)
class CaptionPrompt:
    template: str = DEFAULT_TEMPLATE
    emotional_prior: bool = True
    detail_unconstrained: bool = False


def _slots(prompt: CaptionPrompt, emotion: str) -> dict[str, str]:
    if prompt.emotional_prior:
        prior = f"This image evokes a strong emotion of {emotion}. "
        purpose = "that effectively convey and express this emotion"
    else:
        prior = ""
        purpose = "that stand out in the image"
    if prompt.detail_unconstrained:
        instruction = "Provide a detailed caption that describes as many visual details as possible"
    else:
        instruction = f"Provide a {ONE_SENTENCE} that vividly describes the visual details"
    slots = {"prior": prior, "instruction": instruction, "attributes": ATTRIBUTES, "purpose": purpose}
    if prompt.emotional_prior:
        slots["emotion"] = emotion
    return slots


def render_prompt(prompt: CaptionPrompt, label: EmotionLike) -> str:
    emotion = parse_emotion(label).label
    slots = _slots(prompt, emotion)
    try:
        fields = {name for _, name, _, _ in string.Formatter().parse(prompt.template) if name is not None}
    except ValueError as exc:
        raise TemplateError(f"malformed template: {exc}") from exc
    missing = fields - set(slots)
    if missing:
        hint = " (emotion is unavailable without the emotional prior)" if "emotion" in missing else ""
        raise TemplateError(f"unresolvable template slots {sorted(missing)}{hint}")
    return prompt.template.format(**slots)
