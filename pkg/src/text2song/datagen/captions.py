"""Style taxonomy and templated pseudo-captions."""
from __future__ import annotations

from ..errors import ValidationError

TAXONOMY = {
    "genre": ("pop", "rock", "jazz", "electronic"),
    "instrument": ("guitar", "piano", "synth", "drums"),
    "mood": ("mellow", "energetic", "sentimental", "dreamy"),
}
AXIS_OF = {tag: axis for axis, tags in TAXONOMY.items() for tag in tags}
ALL_TAGS = tuple(AXIS_OF)

TEMPLATES = (
    "This is {a_mood} {mood} {genre} piece led by {instrument}.",
    "{A_mood} {mood} {genre} song featuring {instrument}.",
    "This {genre} track has {a_mood} {mood} feel, carried by {instrument}.",
    "Listen to {instrument} driving {a_mood} {mood} {genre} tune.",
    "The song blends {genre} style with {instrument} in {a_mood} {mood} mood.",
    "Here the {instrument} part shapes {a_mood} {mood} {genre} arrangement.",
)


def _article(word: str) -> str:
    return "an" if word[0] in "aeiou" else "a"


def validate_tags(tags) -> tuple[str, ...]:
    tags = tuple(tags)
    if not tags:
        raise ValidationError("at least one style tag is required")
    unknown = [t for t in tags if t not in AXIS_OF]
    if unknown:
        raise ValidationError(f"unknown tag(s) {unknown}; known tags: {list(ALL_TAGS)}")
    return tags


def _slot(tags: list[str]) -> str:
    return " and ".join(tags)


def generate_caption(tags, seed: int = 0) -> str:
    """Fill a caption template with ``tags``; the template is ``seed % len(TEMPLATES)``.

    Tags appear verbatim. When an axis is missing or holds several tags, the
    caption falls back to listing them.
    """
    tags = validate_tags(tags)
    by_axis = {axis: [t for t in TAXONOMY[axis] if t in tags] for axis in TAXONOMY}
    if all(len(v) == 1 for v in by_axis.values()):
        mood = by_axis["mood"][0]
        fields = {axis: v[0] for axis, v in by_axis.items()}
        fields["a_mood"] = _article(mood)
        fields["A_mood"] = _article(mood).capitalize()
        return TEMPLATES[seed % len(TEMPLATES)].format(**fields)
    parts = [_slot(by_axis[a]) for a in ("mood", "genre") if by_axis[a]]
    head = " ".join(parts) if parts else "music"
    tail = f" with {_slot(by_axis['instrument'])}" if by_axis["instrument"] else ""
    return f"A piece of {head}{tail}."
