"""Benchmark layout: loading, validation, and synthetic generation.

On-disk layout under one root:
  manifest.json                     queries and declared counts
  twins/<video_id>.json             canonical twin documents
  masks/<video_id>/<i>_<f>.rle      one mask file per instance per frame
  fixtures/decompositions/<key>.json  recorded decomposition responses
  fixtures/reasoner/<key>.json        scripted reasoning responses

The generator builds a seeded corpus where each annotated video owns a
globally unique (category pair, attribute, predicate) combination, each
query is authored from one combination, and distractors reuse the
vocabulary without ever satisfying a full combination. Generation is
deterministic: the same spec yields byte-identical trees.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from .canon import write_canonical
from .errors import (BenchmarkError, DanglingReferenceError, DuplicateQueryError,
                     GenerationError, MissingTwinError, Rt2vError)
from .masks import MaskBitmap, read_mask, write_mask
from .decompose import query_fixture_key
from .relations import RelationConfig, extract_relations
from .rendering import PREDICATE_PHRASES
from .twin import (DigitalTwin, FrameRecord, InstanceRecord, SpatialProps,
                   parse_twin, serialize_twin)

__all__ = [
    "QueryEntry",
    "Benchmark",
    "load_benchmark",
    "SyntheticSpec",
    "generate_synthetic",
    "load_mask_table",
    "gt_mask_table",
]

_MANIFEST_FORMAT = "benchmark/1"

DEFAULT_CATEGORIES = (
    "cat", "dog", "horse", "rabbit", "monkey", "bear", "eagle", "turtle",
    "table", "chair", "sofa", "lamp", "ball", "box", "bottle", "bicycle",
    "car", "drone", "robot", "person",
)
DEFAULT_ATTRIBUTES = (
    "red", "blue", "green", "yellow", "orange", "purple", "white", "black",
    "striped", "spotted", "fluffy", "shiny",
)
# Reserved for filler tracks so fillers can never satisfy a query.
FILLER_ATTRIBUTES = ("dusty", "plain", "faded", "matte")


@dataclass(frozen=True)
class QueryEntry:
    query_id: str
    text: str
    gt_video_id: str
    gt_object_ids: tuple[int, ...]


@dataclass(frozen=True)
class Benchmark:
    root: Path
    name: str
    queries: tuple[QueryEntry, ...]
    twins: dict[str, DigitalTwin]

    @property
    def fixtures_dir(self) -> Path:
        return self.root / "fixtures"

    def query_by_id(self, query_id: str) -> QueryEntry:
        for query in self.queries:
            if query.query_id == query_id:
                return query
        raise KeyError(f"unknown query id {query_id!r}")


def load_benchmark(root: Path | str) -> Benchmark:
    """Load and validate one benchmark directory (read-only).

    Raises MissingTwinError / DanglingReferenceError / DuplicateQueryError
    for the three reference failures, BenchmarkError for everything else
    (bad manifest, bad twin file, count mismatch, unresolvable mask).
    """
    root = Path(root)
    manifest_path = root / "manifest.json"
    if not manifest_path.is_file():
        raise BenchmarkError(f"no manifest.json under {root}")
    try:
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise BenchmarkError(f"manifest.json is not valid JSON: {exc}") from exc
    if manifest.get("format") != _MANIFEST_FORMAT:
        raise BenchmarkError(f"manifest format {manifest.get('format')!r}, "
                             f"expected {_MANIFEST_FORMAT!r}")

    twins: dict[str, DigitalTwin] = {}
    twin_dir = root / "twins"
    if not twin_dir.is_dir():
        raise BenchmarkError(f"no twins/ directory under {root}")
    for path in sorted(twin_dir.glob("*.json")):
        try:
            twin = parse_twin(path.read_text(encoding="utf-8"))
        except Rt2vError as exc:
            raise BenchmarkError(f"twin file {path.name}: {exc}") from exc
        if twin.video_id != path.stem:
            raise BenchmarkError(
                f"twin file {path.name} contains video_id {twin.video_id!r}")
        twins[twin.video_id] = twin

    queries: list[QueryEntry] = []
    seen_ids: set[str] = set()
    for i, raw in enumerate(manifest.get("queries", [])):
        try:
            entry = QueryEntry(
                query_id=raw["query_id"], text=raw["text"],
                gt_video_id=raw["gt_video_id"],
                gt_object_ids=tuple(raw["gt_object_ids"]))
        except (KeyError, TypeError) as exc:
            raise BenchmarkError(f"manifest query {i}: {exc!r}") from exc
        if entry.query_id in seen_ids:
            raise DuplicateQueryError(f"duplicate query id {entry.query_id!r}")
        seen_ids.add(entry.query_id)
        if entry.gt_video_id not in twins:
            raise MissingTwinError(
                f"query {entry.query_id!r} references video {entry.gt_video_id!r} "
                f"with no twin document")
        track_ids = set(twins[entry.gt_video_id].track_ids())
        dangling = [o for o in entry.gt_object_ids if o not in track_ids]
        if dangling:
            raise DanglingReferenceError(
                f"query {entry.query_id!r} references objects {dangling} absent "
                f"from video {entry.gt_video_id!r}")
        queries.append(entry)

    declared = manifest.get("declared")
    if declared is not None:
        if declared.get("videos") != len(twins):
            raise BenchmarkError(
                f"manifest declares {declared.get('videos')} videos, found {len(twins)}")
        if declared.get("queries") != len(queries):
            raise BenchmarkError(
                f"manifest declares {declared.get('queries')} queries, found {len(queries)}")

    for twin in twins.values():
        for frame in twin.frames:
            for inst in frame.instances:
                mask_path = root / inst.mask_ref
                if not mask_path.is_file():
                    raise BenchmarkError(
                        f"video {twin.video_id!r}: mask_ref {inst.mask_ref!r} "
                        f"does not resolve to a file")
                read_mask(mask_path)  # raises RleError on a corrupt file

    return Benchmark(root=root, name=manifest.get("name", root.name),
                     queries=tuple(queries), twins=twins)


def load_mask_table(root: Path | str,
                    refs: Mapping[int, tuple[tuple[int, str], ...]],
                    ) -> dict[tuple[int, int], MaskBitmap]:
    """Resolve {object: [(frame, mask_ref)]} into loaded bitmaps."""
    root = Path(root)
    table: dict[tuple[int, int], MaskBitmap] = {}
    for object_id, pairs in refs.items():
        for frame_index, ref in pairs:
            table[(object_id, frame_index)] = read_mask(root / ref)
    return table


def gt_mask_table(benchmark: Benchmark,
                  query: QueryEntry) -> dict[tuple[int, int], MaskBitmap]:
    """Ground-truth masks for a query: every frame of every gt object."""
    twin = benchmark.twins[query.gt_video_id]
    refs = {
        object_id: tuple((frame.frame_index, inst.mask_ref)
                         for frame, inst in twin.observations(object_id))
        for object_id in query.gt_object_ids
    }
    return load_mask_table(benchmark.root, refs)


@dataclass(frozen=True)
class SyntheticSpec:
    """Knobs for the seeded corpus builder; counts include distractors."""

    seed: int = 0
    video_count: int = 20
    distractor_count: int = 10
    query_count: int = 10
    max_filler_tracks: int = 2
    frame_count: int = 6
    width: int = 64
    height: int = 64
    fps: float = 8.0
    categories: tuple[str, ...] = DEFAULT_CATEGORIES
    attributes: tuple[str, ...] = DEFAULT_ATTRIBUTES
    filler_attributes: tuple[str, ...] = FILLER_ATTRIBUTES

    def __post_init__(self):
        if self.video_count < 1 or self.query_count < 1:
            raise ValueError("video_count and query_count must be positive")
        if not 0 <= self.distractor_count < self.video_count:
            raise ValueError("distractor_count must be in [0, video_count)")
        if self.frame_count < 2 or self.width < 8 or self.height < 8:
            raise ValueError("need at least 2 frames and an 8x8 canvas")
        if set(self.attributes) & set(self.filler_attributes):
            raise ValueError("attribute pools must be disjoint")


_QUERY_TEMPLATES = (
    "find the video where a {attr} {cat_a} is {phrase} a {cat_b}",
    "which video shows a {attr} {cat_a} {phrase} a {cat_b}",
    "retrieve the clip with a {attr} {cat_a} {phrase} a {cat_b}",
    "I want the video of a {attr} {cat_a} {phrase} a {cat_b}",
)

# kind of the relation sub-query per predicate
_PREDICATE_KIND = {
    "left_of": "spatial", "right_of": "spatial", "above": "spatial",
    "below": "spatial", "in_front_of": "spatial", "behind": "spatial",
    "near": "spatial", "larger_than": "attribute",
    "approaching": "temporal", "receding": "temporal",
}

_PREDICATES = tuple(_PREDICATE_KIND)


@dataclass(frozen=True)
class _Combo:
    video_id: str
    cat_a: str
    cat_b: str
    attribute: str
    predicate: str


@dataclass
class _TrackPlan:
    instance_id: int
    category: str
    attributes: tuple[str, ...]
    # per-frame (x, y, depth, size)
    positions: list[tuple[float, float, float, float]] = field(default_factory=list)


def _linspace(a: float, b: float, n: int) -> list[float]:
    if n == 1:
        return [a]
    return [a + (b - a) * i / (n - 1) for i in range(n)]


def _principal_geometry(predicate: str, satisfy: bool,
                        n_frames: int) -> tuple[list, list]:
    """Per-frame (x, y, depth, size) for subject and object tracks."""
    base = (0.5, 0.5, 0.5, 0.1)

    def static(x, y, depth=0.5, size=0.1):
        return [(x, y, depth, size)] * n_frames

    if predicate in ("left_of", "right_of"):
        left, right = static(0.2, 0.5), static(0.8, 0.5)
        wants_left = (predicate == "left_of") == satisfy
        return (left, right) if wants_left else (right, left)
    if predicate in ("above", "below"):
        top, bottom = static(0.5, 0.2), static(0.5, 0.8)
        wants_top = (predicate == "above") == satisfy
        return (top, bottom) if wants_top else (bottom, top)
    if predicate in ("in_front_of", "behind"):
        front = static(0.4, 0.5, depth=0.2)
        back = static(0.6, 0.5, depth=0.8)
        wants_front = (predicate == "in_front_of") == satisfy
        return (front, back) if wants_front else (back, front)
    if predicate == "near":
        if satisfy:
            return static(0.45, 0.5), static(0.55, 0.5)
        return static(0.1, 0.5), static(0.9, 0.5)
    if predicate == "larger_than":
        if satisfy:
            return static(0.3, 0.5, size=0.3), static(0.7, 0.5, size=0.1)
        return static(0.3, 0.5, size=0.1), static(0.7, 0.5, size=0.1)
    if predicate in ("approaching", "receding"):
        toward = (predicate == "approaching") == satisfy
        xs = _linspace(0.15, 0.55, n_frames) if toward else _linspace(0.55, 0.15, n_frames)
        subject = [(x, 0.5, 0.5, 0.1) for x in xs]
        return subject, static(0.8, 0.5)
    raise ValueError(f"unknown predicate {predicate!r}")


def _filler_slots(count: int) -> list[tuple[float, float]]:
    # Corners far from the principal band so fillers stay out of 'near'.
    slots = [(0.06, 0.06), (0.94, 0.06), (0.06, 0.94), (0.94, 0.94)]
    return slots[:count]


def _mask_for(spatial: SpatialProps, width: int, height: int) -> MaskBitmap:
    side = max(2, round(math.sqrt(spatial.size) * min(width, height) * 0.5))
    cx = round(spatial.x * (width - 1))
    cy = round(spatial.y * (height - 1))
    x0 = min(max(cx - side // 2, 0), width - side)
    y0 = min(max(cy - side // 2, 0), height - side)
    bits = np.zeros((height, width), dtype=bool)
    bits[y0:y0 + side, x0:x0 + side] = True
    return MaskBitmap(bits)


def _build_twin(video_id: str, tracks: list[_TrackPlan],
                spec: SyntheticSpec) -> tuple[DigitalTwin, dict[str, MaskBitmap]]:
    masks: dict[str, MaskBitmap] = {}
    frames = []
    for f in range(spec.frame_count):
        instances = []
        for track in tracks:
            x, y, depth, size = track.positions[f]
            spatial = SpatialProps(x=x, y=y, depth=depth, size=size)
            ref = f"masks/{video_id}/{track.instance_id}_{f}.rle"
            masks[ref] = _mask_for(spatial, spec.width, spec.height)
            instances.append(InstanceRecord(
                instance_id=track.instance_id, category=track.category,
                attributes=track.attributes, mask_ref=ref, spatial=spatial))
        frames.append(FrameRecord(frame_index=f, timestamp_s=f / spec.fps,
                                  instances=tuple(instances)))
    twin = DigitalTwin(video_id=video_id, fps=spec.fps, width=spec.width,
                       height=spec.height, frames=tuple(frames))
    return twin, masks


def _combo_satisfied(twin: DigitalTwin, combo: _Combo,
                     config: RelationConfig) -> bool:
    """Symbolic check: does this video satisfy the full combination?"""
    attrs_by_track: dict[int, set[str]] = {}
    category_by_track: dict[int, str] = {}
    for frame in twin.frames:
        for inst in frame.instances:
            category_by_track[inst.instance_id] = inst.category
            attrs_by_track.setdefault(inst.instance_id, set()).update(inst.attributes)
    relations = extract_relations(twin, config)
    for rel in relations:
        if (rel.predicate == combo.predicate
                and category_by_track.get(rel.subject_id) == combo.cat_a
                and combo.attribute in attrs_by_track.get(rel.subject_id, set())
                and category_by_track.get(rel.object_id) == combo.cat_b):
            return True
    return False


def generate_synthetic(spec: SyntheticSpec, out_root: Path | str) -> Benchmark:
    """Write a seeded benchmark tree and load it back.

    Raises GenerationError when the vocabulary cannot support the
    requested counts or when the symbolic uniqueness check fails.
    """
    out_root = Path(out_root)
    annotated_count = spec.video_count - spec.distractor_count
    if annotated_count > len(spec.categories) - 1:
        raise GenerationError(
            f"vocabulary too small: {annotated_count} annotated videos need "
            f"{annotated_count} distinct subject categories, have {len(spec.categories)}")
    max_queries = annotated_count * len(_QUERY_TEMPLATES)
    if spec.query_count > max_queries:
        raise GenerationError(
            f"query_count={spec.query_count} exceeds {max_queries} "
            f"({annotated_count} videos x {len(_QUERY_TEMPLATES)} templates)")

    rng = np.random.default_rng(spec.seed)
    config = RelationConfig()

    # Unique subject category per annotated video makes combinations
    # collision-proof across videos by construction.
    subject_order = rng.permutation(len(spec.categories))
    combos: list[_Combo] = []
    for i in range(annotated_count):
        video_id = f"v{i:04d}"
        cat_a = spec.categories[int(subject_order[i])]
        others = [c for c in spec.categories if c != cat_a]
        cat_b = others[int(rng.integers(len(others)))]
        attribute = spec.attributes[int(rng.integers(len(spec.attributes)))]
        predicate = _PREDICATES[int(rng.integers(len(_PREDICATES)))]
        combos.append(_Combo(video_id, cat_a, cat_b, attribute, predicate))

    twins: dict[str, DigitalTwin] = {}
    all_masks: dict[str, dict[str, MaskBitmap]] = {}

    def make_video(video_id: str, combo: _Combo, satisfy: bool) -> None:
        subject_pos, object_pos = _principal_geometry(
            combo.predicate, satisfy, spec.frame_count)
        # Object tracks draw from the reserved filler pool: only track 0 may
        # carry an annotated attribute, so no video can satisfy a foreign
        # combo whose subject category it happens to contain.
        pool = spec.filler_attributes
        object_attr = pool[int(rng.integers(len(pool)))]
        tracks = [
            _TrackPlan(0, combo.cat_a, (combo.attribute,), subject_pos),
            _TrackPlan(1, combo.cat_b, (object_attr,), object_pos),
        ]
        filler_count = int(rng.integers(spec.max_filler_tracks + 1))
        filler_pool = [c for c in spec.categories
                       if c not in (combo.cat_a, combo.cat_b)]
        for j, (fx, fy) in enumerate(_filler_slots(filler_count)):
            category = filler_pool[int(rng.integers(len(filler_pool)))]
            attr = spec.filler_attributes[int(rng.integers(len(spec.filler_attributes)))]
            positions = [(fx, fy, 0.9, 0.02)] * spec.frame_count
            tracks.append(_TrackPlan(2 + j, category, (attr,), positions))
        twin, masks = _build_twin(video_id, tracks, spec)
        twins[video_id] = twin
        all_masks[video_id] = masks

    for combo in combos:
        make_video(combo.video_id, combo, satisfy=True)
    # Distractors mirror an annotated video's subject (category + attribute)
    # but invert the relation, so they share vocabulary without satisfying.
    for d in range(spec.distractor_count):
        mirrored = combos[d % len(combos)]
        make_video(f"x{d:04d}", mirrored, satisfy=False)

    for combo in combos:
        satisfied = [vid for vid in sorted(twins)
                     if _combo_satisfied(twins[vid], combo, config)]
        if satisfied != [combo.video_id]:
            raise GenerationError(
                f"combination for {combo.video_id} satisfied by {satisfied}")

    queries: list[QueryEntry] = []
    decomposition_fixtures: dict[str, list[dict]] = {}
    reasoner_fixtures: dict[str, dict[str, list[dict]]] = {}
    for q in range(spec.query_count):
        combo = combos[q % annotated_count]
        template = _QUERY_TEMPLATES[q // annotated_count]
        phrase = PREDICATE_PHRASES[combo.predicate]
        text = template.format(attr=combo.attribute, cat_a=combo.cat_a,
                               phrase=phrase, cat_b=combo.cat_b)
        query_id = f"q{q:03d}"
        queries.append(QueryEntry(query_id, text, combo.video_id, (0, 1)))
        key = query_fixture_key(text)
        decomposition_fixtures[key] = [
            {"text": f"a {combo.attribute} {combo.cat_a}", "kind": "attribute"},
            {"text": f"{combo.cat_a} {phrase} {combo.cat_b}",
             "kind": _PREDICATE_KIND[combo.predicate]},
        ]
        turns: dict[str, list[dict]] = {}
        for vid in sorted(twins):
            if vid == combo.video_id:
                verdict = {"relevance": 1.0, "object_ids": [0, 1],
                           "trace": f"{combo.cat_a} with {combo.attribute} is "
                                    f"{phrase} the {combo.cat_b}"}
            else:
                verdict = {"relevance": 0.0, "object_ids": [],
                           "trace": "no satisfying configuration"}
            turns[vid] = [{"action": "verdict", "verdict": verdict}]
        reasoner_fixtures[key] = turns

    (out_root / "twins").mkdir(parents=True, exist_ok=True)
    (out_root / "fixtures" / "decompositions").mkdir(parents=True, exist_ok=True)
    (out_root / "fixtures" / "reasoner").mkdir(parents=True, exist_ok=True)
    for vid in sorted(twins):
        text = serialize_twin(twins[vid])
        (out_root / "twins" / f"{vid}.json").write_text(text + "\n", encoding="utf-8")
        mask_dir = out_root / "masks" / vid
        mask_dir.mkdir(parents=True, exist_ok=True)
        for ref in sorted(all_masks[vid]):
            write_mask(out_root / ref, all_masks[vid][ref])
    for key in sorted(decomposition_fixtures):
        write_canonical(out_root / "fixtures" / "decompositions" / f"{key}.json",
                        decomposition_fixtures[key])
    for key in sorted(reasoner_fixtures):
        write_canonical(out_root / "fixtures" / "reasoner" / f"{key}.json",
                        reasoner_fixtures[key])
    write_canonical(out_root / "manifest.json", {
        "format": _MANIFEST_FORMAT,
        "name": f"synthetic-{spec.seed}",
        "declared": {"videos": spec.video_count, "queries": spec.query_count},
        "queries": [
            {"query_id": q.query_id, "text": q.text, "gt_video_id": q.gt_video_id,
             "gt_object_ids": list(q.gt_object_ids)}
            for q in queries
        ],
    })
    return load_benchmark(out_root)
