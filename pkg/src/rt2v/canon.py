"""Canonical JSON text shared by every persisted artifact.

Canonical form: object keys sorted, separators without whitespace,
UTF-8 (non-ASCII left unescaped), integers rendered bare, reals via the
shortest round-trip decimal (Python float repr). NaN and infinities are
rejected so every document re-parses.
"""
from __future__ import annotations

import json
from typing import Any


def canonical_json(obj: Any) -> str:
    """Render ``obj`` as canonical JSON text (no trailing newline)."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"),
                      ensure_ascii=False, allow_nan=False)


def canonical_json_bytes(obj: Any) -> bytes:
    return canonical_json(obj).encode("utf-8")


def write_canonical(path, obj: Any) -> None:
    """Write ``obj`` to ``path`` as canonical JSON plus one trailing newline."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(canonical_json(obj))
        fh.write("\n")


def read_json(path) -> Any:
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)
