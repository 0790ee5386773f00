"""Shared builders: compact twin construction and seeded random instances."""
from __future__ import annotations

import numpy as np
import pytest

from rt2v.masks import MaskBitmap
from rt2v.twin import (DigitalTwin, FrameRecord, InstanceRecord, SpatialProps)

CATEGORIES = ("cat", "dog", "table", "chair", "ball", "lamp", "bird", "car")
ATTRIBUTES = ("orange", "striped", "small", "wooden", "red", "fluffy", "")


def make_instance(instance_id: int, category: str = "cat",
                  attributes: tuple[str, ...] = (),
                  x: float = 0.5, y: float = 0.5,
                  depth: float = 0.5, size: float = 0.1,
                  mask_ref: str | None = None) -> InstanceRecord:
    ref = mask_ref if mask_ref is not None else f"masks/v/{instance_id}_0.rle"
    return InstanceRecord(instance_id, category, attributes, ref,
                          SpatialProps(x, y, depth, size))


def make_twin(video_id: str = "v0",
              frames: list[list[InstanceRecord]] | None = None,
              fps: float = 10.0, width: int = 64, height: int = 48) -> DigitalTwin:
    if frames is None:
        frames = [[make_instance(0)]]
    records = tuple(
        FrameRecord(i, i / fps, tuple(insts)) for i, insts in enumerate(frames))
    return DigitalTwin(video_id, fps, width, height, records)


def tracks_twin(video_id: str,
                tracks: dict[int, dict],
                n_frames: int, fps: float = 10.0) -> DigitalTwin:
    """Build a twin from per-track specs.

    Each spec is {"category": str, "attributes": tuple, "positions":
    [(x, y, depth, size), ...]} with one position per frame (None skips
    the track in that frame).
    """
    frames = []
    for f in range(n_frames):
        insts = []
        for tid in sorted(tracks):
            spec = tracks[tid]
            pos = spec["positions"][f]
            if pos is None:
                continue
            x, y, depth, size = pos
            insts.append(InstanceRecord(
                tid, spec["category"], tuple(spec.get("attributes", ())),
                f"masks/{video_id}/{tid}_{f}.rle",
                SpatialProps(x, y, depth, size)))
        frames.append(FrameRecord(f, f / fps, tuple(insts)))
    return DigitalTwin(video_id, fps, 64, 48, tuple(frames))


def random_twin(rng: np.random.Generator, video_id: str = "v0") -> DigitalTwin:
    n_frames = int(rng.integers(1, 6))
    n_tracks = int(rng.integers(1, 5))
    fps = float(rng.choice([5.0, 10.0, 24.0, 30.0]))
    categories = rng.choice(CATEGORIES, size=n_tracks, replace=True)
    frames = []
    t = 0.0
    for f in range(n_frames):
        insts = []
        for tid in range(n_tracks):
            if rng.random() < 0.2 and n_tracks > 1:
                continue  # track absent this frame
            attr_count = int(rng.integers(0, 3))
            attrs = tuple(
                str(rng.choice([a for a in ATTRIBUTES if a]))
                for _ in range(attr_count))
            insts.append(InstanceRecord(
                tid, str(categories[tid]), attrs,
                f"masks/{video_id}/{tid}_{f}.rle",
                SpatialProps(*(float(np.round(rng.random(), 6)) for _ in range(4)))))
        if not insts:
            insts.append(InstanceRecord(
                0, str(categories[0]), (), f"masks/{video_id}/0_{f}.rle",
                SpatialProps(0.5, 0.5, 0.5, 0.1)))
        frames.append(FrameRecord(f, t, tuple(insts)))
        t += float(np.round(rng.random() * 0.5, 6))
    return DigitalTwin(video_id, fps, int(rng.integers(1, 640)),
                       int(rng.integers(1, 480)), tuple(frames))


def random_mask(rng: np.random.Generator, max_side: int = 64) -> MaskBitmap:
    w = int(rng.integers(1, max_side + 1))
    h = int(rng.integers(1, max_side + 1))
    style = rng.random()
    if style < 0.15:
        bits = np.zeros((h, w), dtype=bool)
    elif style < 0.3:
        bits = np.ones((h, w), dtype=bool)
    else:
        bits = rng.random((h, w)) < rng.uniform(0.05, 0.95)
    return MaskBitmap(bits)


def grid_of(mask: MaskBitmap) -> tuple[tuple[int, ...], ...]:
    """Oracle-side view of a mask: tuple-of-tuples of 0/1 rows."""
    return tuple(tuple(int(v) for v in row) for row in mask.bits)


def mask_of(grid) -> MaskBitmap:
    return MaskBitmap(np.array(grid, dtype=bool))


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)
