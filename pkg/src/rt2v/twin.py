"""Digital twin scene documents: data model, validation, canonical JSON codec.

A twin is the structured stand-in for a video: per-frame object instance
records carrying category, open-vocabulary attributes, a mask reference,
and normalized spatial properties. Documents are immutable after
construction; refinement produces new documents.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace
from typing import Any, Iterable

from .canon import canonical_json
from .errors import TwinInvariantError, TwinParseError, TwinSchemaError

__all__ = [
    "SpatialProps",
    "InstanceRecord",
    "FrameRecord",
    "DigitalTwin",
    "validate_twin",
    "serialize_twin",
    "parse_twin",
]


@dataclass(frozen=True)
class SpatialProps:
    """Normalized centroid (x, y), scene depth, and relative size.

    All four values live in [0, 1]. x grows rightward, y grows downward,
    depth 0 is nearest to the camera, and size is the instance's share of
    the frame area.
    """

    x: float
    y: float
    depth: float
    size: float


@dataclass(frozen=True)
class InstanceRecord:
    """One object instance observed in one frame."""

    instance_id: int
    category: str
    attributes: tuple[str, ...]
    mask_ref: str
    spatial: SpatialProps

    def with_attributes(self, extra: Iterable[str]) -> "InstanceRecord":
        return replace(self, attributes=self.attributes + tuple(extra))


@dataclass(frozen=True)
class FrameRecord:
    frame_index: int
    timestamp_s: float
    instances: tuple[InstanceRecord, ...]


@dataclass(frozen=True)
class DigitalTwin:
    video_id: str
    fps: float
    width: int
    height: int
    frames: tuple[FrameRecord, ...]

    def track_ids(self) -> tuple[int, ...]:
        """Distinct instance ids across all frames, ascending."""
        seen: set[int] = set()
        for frame in self.frames:
            for inst in frame.instances:
                seen.add(inst.instance_id)
        return tuple(sorted(seen))

    def track_category(self, instance_id: int) -> str:
        """Category of a track (stable across frames by invariant)."""
        for frame in self.frames:
            for inst in frame.instances:
                if inst.instance_id == instance_id:
                    return inst.category
        raise KeyError(f"track {instance_id} not present in video {self.video_id!r}")

    def observations(self, instance_id: int) -> tuple[tuple[FrameRecord, InstanceRecord], ...]:
        """(frame, record) pairs where the track appears, in frame order."""
        out = []
        for frame in self.frames:
            for inst in frame.instances:
                if inst.instance_id == instance_id:
                    out.append((frame, inst))
        return tuple(out)


def _is_unit_interval(value: float) -> bool:
    return isinstance(value, float) and math.isfinite(value) and 0.0 <= value <= 1.0


def validate_twin(twin: DigitalTwin) -> list[str]:
    """Check semantic invariants, returning one message per violation.

    Total over structurally well-typed documents: never raises, and an
    empty result means the document is valid. Messages name the offending
    frame and instance so violations are actionable.
    """
    violations: list[str] = []

    if not twin.video_id:
        violations.append("video_id is empty")
    if not (isinstance(twin.fps, float) and math.isfinite(twin.fps) and twin.fps > 0):
        violations.append(f"fps={twin.fps!r} is not a positive finite real")
    if twin.width < 1 or twin.height < 1:
        violations.append(f"pixel dimensions {twin.width}x{twin.height} are not positive")
    if not twin.frames:
        violations.append("document has no frames")

    categories: dict[int, str] = {}
    prev_index: int | None = None
    prev_ts: float | None = None
    for frame in twin.frames:
        where = f"frame {frame.frame_index}"
        if frame.frame_index < 0:
            violations.append(f"{where}: negative frame_index")
        if prev_index is not None and frame.frame_index <= prev_index:
            violations.append(
                f"{where}: frame_index not strictly increasing (follows {prev_index})")
        prev_index = frame.frame_index

        ts = frame.timestamp_s
        if not (isinstance(ts, float) and math.isfinite(ts) and ts >= 0):
            violations.append(f"{where}: timestamp_s={ts!r} is not a non-negative real")
        elif prev_ts is not None and ts < prev_ts:
            violations.append(f"{where}: timestamp_s decreases ({ts} after {prev_ts})")
        if isinstance(ts, float) and math.isfinite(ts):
            prev_ts = ts

        seen_ids: set[int] = set()
        for inst in frame.instances:
            who = f"{where} instance {inst.instance_id}"
            if inst.instance_id < 0:
                violations.append(f"{who}: negative instance_id")
            if inst.instance_id in seen_ids:
                violations.append(f"{who}: duplicate instance_id within frame")
            seen_ids.add(inst.instance_id)
            if not inst.category:
                violations.append(f"{who}: empty category")
            if not inst.mask_ref:
                violations.append(f"{who}: empty mask_ref")
            known = categories.setdefault(inst.instance_id, inst.category)
            if known != inst.category:
                violations.append(
                    f"{who}: category changed from {known!r} to {inst.category!r}")
            for field_name in ("x", "y", "depth", "size"):
                value = getattr(inst.spatial, field_name)
                if not _is_unit_interval(value):
                    violations.append(
                        f"{who}: spatial.{field_name}={value!r} outside [0, 1]")
    return violations


def _twin_to_obj(twin: DigitalTwin) -> dict[str, Any]:
    return {
        "video_id": twin.video_id,
        "fps": float(twin.fps),
        "width": int(twin.width),
        "height": int(twin.height),
        "frames": [
            {
                "frame_index": int(frame.frame_index),
                "timestamp_s": float(frame.timestamp_s),
                "instances": [
                    {
                        "instance_id": int(inst.instance_id),
                        "category": inst.category,
                        "attributes": list(inst.attributes),
                        "mask_ref": inst.mask_ref,
                        "spatial": {
                            "x": float(inst.spatial.x),
                            "y": float(inst.spatial.y),
                            "depth": float(inst.spatial.depth),
                            "size": float(inst.spatial.size),
                        },
                    }
                    for inst in frame.instances
                ],
            }
            for frame in twin.frames
        ],
    }


def serialize_twin(twin: DigitalTwin) -> str:
    """Render a valid twin as canonical JSON text.

    Raises TwinInvariantError when the document fails validation; callers
    never persist invalid documents.
    """
    violations = validate_twin(twin)
    if violations:
        raise TwinInvariantError(violations)
    return canonical_json(_twin_to_obj(twin))


_TWIN_KEYS = {"video_id", "fps", "width", "height", "frames"}
_FRAME_KEYS = {"frame_index", "timestamp_s", "instances"}
_INSTANCE_KEYS = {"instance_id", "category", "attributes", "mask_ref", "spatial"}
_SPATIAL_KEYS = {"x", "y", "depth", "size"}


def _need(obj: dict, key: str, where: str) -> Any:
    if key not in obj:
        raise TwinSchemaError(f"{where}: missing required field {key!r}")
    return obj[key]


def _as_int(value: Any, where: str) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise TwinSchemaError(f"{where}: expected an integer, got {value!r}")
    return value


def _as_real(value: Any, where: str) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise TwinSchemaError(f"{where}: expected a number, got {value!r}")
    return float(value)


def _as_str(value: Any, where: str) -> str:
    if not isinstance(value, str):
        raise TwinSchemaError(f"{where}: expected a string, got {value!r}")
    return value


def _check_keys(obj: dict, allowed: set[str], where: str) -> None:
    if not isinstance(obj, dict):
        raise TwinSchemaError(f"{where}: expected an object, got {type(obj).__name__}")
    extra = set(obj) - allowed
    if extra:
        raise TwinSchemaError(f"{where}: unexpected fields {sorted(extra)}")


def parse_twin(text: str) -> DigitalTwin:
    """Parse twin JSON text, distinguishing three failure kinds.

    TwinParseError for malformed JSON, TwinSchemaError for missing or
    mistyped fields, TwinInvariantError for semantic violations.
    parse(serialize(t)) == t, and serialize(parse(d)) byte-equals d for
    canonical d.
    """
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise TwinParseError(f"malformed twin JSON: {exc}") from exc

    _check_keys(raw, _TWIN_KEYS, "twin")
    video_id = _as_str(_need(raw, "video_id", "twin"), "twin.video_id")
    fps = _as_real(_need(raw, "fps", "twin"), "twin.fps")
    width = _as_int(_need(raw, "width", "twin"), "twin.width")
    height = _as_int(_need(raw, "height", "twin"), "twin.height")
    raw_frames = _need(raw, "frames", "twin")
    if not isinstance(raw_frames, list):
        raise TwinSchemaError("twin.frames: expected an array")

    frames = []
    for i, raw_frame in enumerate(raw_frames):
        where = f"frames[{i}]"
        _check_keys(raw_frame, _FRAME_KEYS, where)
        raw_instances = _need(raw_frame, "instances", where)
        if not isinstance(raw_instances, list):
            raise TwinSchemaError(f"{where}.instances: expected an array")
        instances = []
        for j, raw_inst in enumerate(raw_instances):
            iwhere = f"{where}.instances[{j}]"
            _check_keys(raw_inst, _INSTANCE_KEYS, iwhere)
            raw_attrs = _need(raw_inst, "attributes", iwhere)
            if not isinstance(raw_attrs, list):
                raise TwinSchemaError(f"{iwhere}.attributes: expected an array")
            attributes = tuple(
                _as_str(a, f"{iwhere}.attributes[{k}]") for k, a in enumerate(raw_attrs))
            raw_spatial = _need(raw_inst, "spatial", iwhere)
            _check_keys(raw_spatial, _SPATIAL_KEYS, f"{iwhere}.spatial")
            spatial = SpatialProps(
                x=_as_real(_need(raw_spatial, "x", f"{iwhere}.spatial"), f"{iwhere}.spatial.x"),
                y=_as_real(_need(raw_spatial, "y", f"{iwhere}.spatial"), f"{iwhere}.spatial.y"),
                depth=_as_real(_need(raw_spatial, "depth", f"{iwhere}.spatial"),
                               f"{iwhere}.spatial.depth"),
                size=_as_real(_need(raw_spatial, "size", f"{iwhere}.spatial"),
                              f"{iwhere}.spatial.size"),
            )
            instances.append(InstanceRecord(
                instance_id=_as_int(_need(raw_inst, "instance_id", iwhere),
                                    f"{iwhere}.instance_id"),
                category=_as_str(_need(raw_inst, "category", iwhere), f"{iwhere}.category"),
                attributes=attributes,
                mask_ref=_as_str(_need(raw_inst, "mask_ref", iwhere), f"{iwhere}.mask_ref"),
                spatial=spatial,
            ))
        frames.append(FrameRecord(
            frame_index=_as_int(_need(raw_frame, "frame_index", where),
                                f"{where}.frame_index"),
            timestamp_s=_as_real(_need(raw_frame, "timestamp_s", where),
                                 f"{where}.timestamp_s"),
            instances=tuple(instances),
        ))

    twin = DigitalTwin(video_id=video_id, fps=fps, width=width, height=height,
                       frames=tuple(frames))
    violations = validate_twin(twin)
    if violations:
        raise TwinInvariantError(violations)
    return twin
