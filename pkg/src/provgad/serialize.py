"""Canonical JSON helpers.

Every artifact (vocabulary, graph store, checkpoint, detector snapshot,
report) is written through ``canonical_json`` so that identical in-memory
state always produces byte-identical files. Floats rely on Python's
shortest-roundtrip repr, which makes the write -> read -> write cycle
lossless for 64-bit values.
"""

from __future__ import annotations

import hashlib
import json
from typing import Any

import numpy as np


def canonical_json(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False) + "\n"


def write_json(path: str, obj: Any) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(canonical_json(obj))


def read_json(path: str) -> Any:
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def array_to_lists(arr: np.ndarray) -> list:
    return np.asarray(arr, dtype=np.float64).tolist()


def lists_to_array(data: list) -> np.ndarray:
    return np.asarray(data, dtype=np.float64)


def sha256_text(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def sha256_file(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
