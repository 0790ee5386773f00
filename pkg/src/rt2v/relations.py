"""Pairwise spatial relation extraction over twin documents.

Relations come from a closed ten-predicate vocabulary. Static predicates
are evaluated per frame with explicit margins and lifted to video level
by fractional support over co-occurring frames; the two motion
predicates compare centroid distance at the first and last co-occurrence.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

from .twin import DigitalTwin, SpatialProps

__all__ = ["PREDICATES", "RelationConfig", "RelationTuple", "extract_relations"]

PREDICATES = (
    "left_of", "right_of", "above", "below", "in_front_of", "behind",
    "larger_than", "near", "approaching", "receding",
)

_STATIC_PREDICATES = PREDICATES[:8]
_MOTION_PREDICATES = PREDICATES[8:]


@dataclass(frozen=True)
class RelationConfig:
    """Margins and thresholds for the per-frame rules.

    axis_margin separates centroids along x/y, depth_margin along depth,
    near_radius bounds centroid distance, size_ratio is the multiplicative
    gap for larger_than, support_threshold is the minimum fraction of
    co-occurring frames, and motion_delta is the required distance change
    between first and last co-occurrence.
    """

    axis_margin: float = 0.05
    depth_margin: float = 0.05
    near_radius: float = 0.2
    size_ratio: float = 1.5
    support_threshold: float = 0.5
    motion_delta: float = 0.1

    def __post_init__(self):
        if not (0 < self.support_threshold <= 1):
            raise ValueError(f"support_threshold={self.support_threshold} outside (0, 1]")
        for name in ("axis_margin", "depth_margin", "near_radius", "motion_delta"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.size_ratio <= 1:
            raise ValueError(f"size_ratio={self.size_ratio} must exceed 1")


@dataclass(frozen=True)
class RelationTuple:
    """A lifted (subject, predicate, object) fact with its support in (0, 1]."""

    subject_id: int
    object_id: int
    predicate: str
    support: float


def _distance(a: SpatialProps, b: SpatialProps) -> float:
    return math.hypot(a.x - b.x, a.y - b.y)


def _holds(predicate: str, a: SpatialProps, b: SpatialProps, cfg: RelationConfig) -> bool:
    if predicate == "left_of":
        return a.x + cfg.axis_margin < b.x
    if predicate == "right_of":
        return b.x + cfg.axis_margin < a.x
    if predicate == "above":
        return a.y + cfg.axis_margin < b.y
    if predicate == "below":
        return b.y + cfg.axis_margin < a.y
    if predicate == "in_front_of":
        return a.depth + cfg.depth_margin < b.depth
    if predicate == "behind":
        return b.depth + cfg.depth_margin < a.depth
    if predicate == "larger_than":
        return a.size > cfg.size_ratio * b.size
    if predicate == "near":
        return _distance(a, b) < cfg.near_radius
    raise ValueError(f"unknown predicate {predicate!r}")


def extract_relations(twin: DigitalTwin,
                      config: RelationConfig | None = None) -> list[RelationTuple]:
    """Extract lifted relation tuples for every ordered track pair.

    Output is sorted by (subject_id, object_id, predicate) and is a pure
    function of the document and config.
    """
    cfg = config or RelationConfig()
    per_track: dict[int, dict[int, SpatialProps]] = {}
    for frame in twin.frames:
        for inst in frame.instances:
            per_track.setdefault(inst.instance_id, {})[frame.frame_index] = inst.spatial

    tuples: list[RelationTuple] = []
    track_ids = sorted(per_track)
    for subject in track_ids:
        for obj in track_ids:
            if subject == obj:
                continue
            frames_a = per_track[subject]
            frames_b = per_track[obj]
            co_frames = sorted(set(frames_a) & set(frames_b))
            if not co_frames:
                continue
            for predicate in _STATIC_PREDICATES:
                hits = sum(
                    1 for f in co_frames if _holds(predicate, frames_a[f], frames_b[f], cfg))
                support = hits / len(co_frames)
                if support >= cfg.support_threshold:
                    tuples.append(RelationTuple(subject, obj, predicate, support))
            first, last = co_frames[0], co_frames[-1]
            d_first = _distance(frames_a[first], frames_b[first])
            d_last = _distance(frames_a[last], frames_b[last])
            # Whole-track rules: an emitted motion tuple carries full support.
            if d_last < d_first - cfg.motion_delta:
                tuples.append(RelationTuple(subject, obj, "approaching", 1.0))
            elif d_last > d_first + cfg.motion_delta:
                tuples.append(RelationTuple(subject, obj, "receding", 1.0))
    tuples.sort(key=lambda t: (t.subject_id, t.object_id, t.predicate))
    return tuples
