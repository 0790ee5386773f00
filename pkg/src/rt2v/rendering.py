"""Deterministic natural-language rendering of twin components.

Objects render as semicolon-joined segments over track-mean spatial
properties; relations render as subject/predicate/object phrases. These
texts are the embedding surface for both indexing and training, so the
templates are fixed and bucket boundaries are pinned: a value exactly on
a threshold belongs to the upper bucket.
"""
from __future__ import annotations

from .relations import RelationTuple
from .twin import DigitalTwin

__all__ = ["render_object_text", "render_relation_text", "PREDICATE_PHRASES"]

PREDICATE_PHRASES = {
    "left_of": "to the left of",
    "right_of": "to the right of",
    "above": "above",
    "below": "below",
    "in_front_of": "in front of",
    "behind": "behind",
    "larger_than": "larger than",
    "near": "near",
    "approaching": "approaching",
    "receding": "receding",
}

_THIRD = 1.0 / 3.0
_H_WORDS = ("left", "center", "right")
_V_WORDS = ("top", "middle", "bottom")
_DEPTH_WORDS = ("near", "mid", "far")


def _bucket3(value: float, t1: float, t2: float, words: tuple[str, str, str]) -> str:
    if value < t1:
        return words[0]
    if value < t2:
        return words[1]
    return words[2]


def _size_word(size: float) -> str:
    return _bucket3(size, 0.05, 0.25, ("small", "medium", "large"))


def render_object_text(twin: DigitalTwin, track_id: int) -> str:
    """Render one track: category; attributes; position; depth; size.

    Spatial words come from the mean over the frames where the track
    appears; attributes are the ordered first-seen union across frames.
    An empty attribute set drops that segment entirely.
    """
    observations = twin.observations(track_id)
    if not observations:
        raise KeyError(f"track {track_id} not present in video {twin.video_id!r}")

    attributes: list[str] = []
    seen: set[str] = set()
    n = len(observations)
    mean_x = mean_y = mean_depth = mean_size = 0.0
    for _, inst in observations:
        for attr in inst.attributes:
            if attr not in seen:
                seen.add(attr)
                attributes.append(attr)
        mean_x += inst.spatial.x / n
        mean_y += inst.spatial.y / n
        mean_depth += inst.spatial.depth / n
        mean_size += inst.spatial.size / n

    category = observations[0][1].category
    segments = [category]
    if attributes:
        segments.append("; ".join(attributes))
    h_word = _bucket3(mean_x, _THIRD, 2 * _THIRD, _H_WORDS)
    v_word = _bucket3(mean_y, _THIRD, 2 * _THIRD, _V_WORDS)
    segments.append(f"{h_word} {v_word}")
    segments.append(f"depth {_bucket3(mean_depth, _THIRD, 2 * _THIRD, _DEPTH_WORDS)}")
    segments.append(f"size {_size_word(mean_size)}")
    return "; ".join(segments)


def render_relation_text(twin: DigitalTwin, relation: RelationTuple) -> str:
    """Render a relation tuple as '<subject category> <phrase> <object category>'."""
    phrase = PREDICATE_PHRASES.get(relation.predicate)
    if phrase is None:
        raise ValueError(f"unknown predicate {relation.predicate!r}")
    subject = twin.track_category(relation.subject_id)
    obj = twin.track_category(relation.object_id)
    return f"{subject} {phrase} {obj}"
