"""Binary instance masks and their run-length text codec.

Mask text grammar: ``R1 <width> <height> <run>+`` where runs alternate
background/foreground starting with background, scan row-major, and sum
to width*height. Canonical text uses single spaces and no trailing
newline; mask files append exactly one newline.
"""
from __future__ import annotations

import numpy as np

from .errors import RleError

__all__ = ["MaskBitmap", "rle_encode", "rle_decode", "read_mask", "write_mask"]

_MAGIC = "R1"


class MaskBitmap:
    """A width x height binary mask, row-major, treated as immutable."""

    __slots__ = ("width", "height", "bits")

    def __init__(self, bits: np.ndarray):
        arr = np.asarray(bits, dtype=bool)
        if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ValueError(f"mask needs a 2-D positive shape, got {arr.shape}")
        arr = np.ascontiguousarray(arr)
        arr.setflags(write=False)
        self.bits = arr
        self.height, self.width = arr.shape

    @classmethod
    def zeros(cls, width: int, height: int) -> "MaskBitmap":
        return cls(np.zeros((height, width), dtype=bool))

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, MaskBitmap):
            return NotImplemented
        return self.bits.shape == other.bits.shape and bool(
            np.array_equal(self.bits, other.bits))

    def __hash__(self) -> int:  # immutable by convention
        return hash((self.width, self.height, self.bits.tobytes()))

    def __repr__(self) -> str:
        return f"MaskBitmap({self.width}x{self.height}, {int(self.bits.sum())} fg)"


def rle_encode(mask: MaskBitmap) -> str:
    """Encode a mask as canonical run-length text."""
    flat = mask.bits.reshape(-1)
    runs: list[int] = []
    if flat.size:
        changes = np.flatnonzero(flat[1:] != flat[:-1]) + 1
        bounds = np.concatenate(([0], changes, [flat.size]))
        lengths = np.diff(bounds)
        if flat[0]:  # grammar starts with a background run
            runs.append(0)
        runs.extend(int(n) for n in lengths)
    tokens = [_MAGIC, str(mask.width), str(mask.height)]
    tokens.extend(str(r) for r in runs)
    return " ".join(tokens)


def rle_decode(text: str) -> MaskBitmap:
    """Decode run-length text; raises RleError on any grammar violation."""
    tokens = text.split()
    if not tokens or tokens[0] != _MAGIC:
        raise RleError(f"bad magic: expected {_MAGIC!r} leading token")
    if len(tokens) < 4:
        raise RleError("truncated mask text: need width, height, and runs")
    try:
        numbers = [int(tok) for tok in tokens[1:]]
    except ValueError as exc:
        raise RleError(f"non-numeric token in mask text: {exc}") from exc
    width, height = numbers[0], numbers[1]
    if width < 1 or height < 1:
        raise RleError(f"non-positive mask dimensions {width}x{height}")
    runs = numbers[2:]
    if any(r < 0 for r in runs):
        raise RleError("negative run length")
    total = sum(runs)
    if total != width * height:
        raise RleError(f"runs sum to {total}, expected {width * height}")
    flat = np.zeros(width * height, dtype=bool)
    pos = 0
    value = False
    for run in runs:
        if value:
            flat[pos:pos + run] = True
        pos += run
        value = not value
    return MaskBitmap(flat.reshape(height, width))


def write_mask(path, mask: MaskBitmap) -> None:
    """Write canonical mask text plus one trailing newline (ASCII)."""
    with open(path, "w", encoding="ascii") as fh:
        fh.write(rle_encode(mask))
        fh.write("\n")


def read_mask(path) -> MaskBitmap:
    with open(path, "r", encoding="ascii") as fh:
        return rle_decode(fh.read())
