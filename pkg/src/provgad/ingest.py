"""Audit-log parsing: turn raw log lines into a uniform event stream.

Two input formats are supported:

* tab-separated event records, 6 fields per line:
  ``src-id <TAB> src-type <TAB> dst-id <TAB> dst-type <TAB> edge-type <TAB> graph-id``
* generic JSONL, one object per line:
  ``{"src": {"uid": ..., "attrs": [...]}, "dst": {...}, "edge": {"attrs": [...]}, "batch": ...}``

Categorical attributes are collapsed into stable 64-bit labels with a pinned
FNV-1a hash so that label vocabularies are identical across runs and machines.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Iterable, Iterator

from .errors import MalformedLineError, SchemaError, ValidationError

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_MASK64 = 0xFFFFFFFFFFFFFFFF


def fnv1a64(data: bytes) -> int:
    """64-bit FNV-1a over ``data``.

    Pinned test vectors: ``b""`` -> 0xcbf29ce484222325, ``b"a"`` ->
    0xaf63dc4c8601ec8c, ``b"foobar"`` -> 0x85944171f73967e8.
    """
    h = _FNV_OFFSET
    for b in data:
        h ^= b
        h = (h * _FNV_PRIME) & _MASK64
    return h


def hash_label(attrs: list[str]) -> int:
    """Stable 64-bit label for a set of attribute strings.

    Attributes are sorted and NUL-joined before hashing, so the label is
    insensitive to attribute order but sensitive to content.
    """
    if not attrs:
        raise ValidationError("hash_label: attribute list must be non-empty")
    payload = b"\x00".join(a.encode("utf-8") for a in sorted(attrs))
    return fnv1a64(payload)


@dataclass(frozen=True)
class RawEvent:
    """One parsed audit record: typed source, typed destination, typed edge."""

    src_uid: str
    src_label: int
    dst_uid: str
    dst_label: int
    edge_label: int
    batch_id: str


def parse_streamspot_line(line: str, line_no: int = 0) -> RawEvent:
    fields = line.rstrip("\n").split("\t")
    if len(fields) != 6:
        raise MalformedLineError(line_no, len(fields))
    src_uid, src_type, dst_uid, dst_type, edge_type, batch_id = fields
    if not src_uid or not dst_uid:
        raise MalformedLineError(line_no, len(fields), "empty entity id")
    return RawEvent(
        src_uid=src_uid,
        src_label=hash_label([src_type]),
        dst_uid=dst_uid,
        dst_label=hash_label([dst_type]),
        edge_label=hash_label([edge_type]),
        batch_id=batch_id,
    )


def _endpoint(obj: dict, key: str) -> tuple[str, int]:
    try:
        entry = obj[key]
    except (KeyError, TypeError):
        raise SchemaError(key) from None
    if not isinstance(entry, dict):
        raise SchemaError(key, "expected an object")
    uid = entry.get("uid")
    attrs = entry.get("attrs")
    if not isinstance(uid, str) or not uid:
        raise SchemaError(f"{key}.uid")
    if not isinstance(attrs, list) or not attrs or not all(isinstance(a, str) for a in attrs):
        raise SchemaError(f"{key}.attrs")
    return uid, hash_label(attrs)


def parse_jsonl_record(text: str, line_no: int = 0) -> RawEvent:
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SchemaError("<document>", f"line {line_no}: {exc.msg}") from None
    if not isinstance(obj, dict):
        raise SchemaError("<document>", "expected a JSON object")
    src_uid, src_label = _endpoint(obj, "src")
    dst_uid, dst_label = _endpoint(obj, "dst")
    edge = obj.get("edge")
    if not isinstance(edge, dict):
        raise SchemaError("edge")
    attrs = edge.get("attrs")
    if not isinstance(attrs, list) or not attrs or not all(isinstance(a, str) for a in attrs):
        raise SchemaError("edge.attrs")
    batch = obj.get("batch")
    if not isinstance(batch, str):
        raise SchemaError("batch")
    return RawEvent(
        src_uid=src_uid,
        src_label=src_label,
        dst_uid=dst_uid,
        dst_label=dst_label,
        edge_label=hash_label(attrs),
        batch_id=batch,
    )


FORMATS = ("streamspot", "jsonl")


def parse_lines(lines: Iterable[str], fmt: str) -> Iterator[RawEvent]:
    """Parse an iterable of lines; blank lines are skipped."""
    if fmt not in FORMATS:
        raise ValidationError(f"unknown log format {fmt!r}; expected one of {FORMATS}")
    parse = parse_streamspot_line if fmt == "streamspot" else parse_jsonl_record
    for line_no, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        yield parse(line, line_no)


def read_events(path: str, fmt: str) -> list[RawEvent]:
    with open(path, encoding="utf-8") as fh:
        return list(parse_lines(fh, fmt))


def group_by_batch(events: Iterable[RawEvent]) -> dict[str, list[RawEvent]]:
    """Split an event stream per batch id, preserving input order within a batch."""
    batches: dict[str, list[RawEvent]] = {}
    for ev in events:
        batches.setdefault(ev.batch_id, []).append(ev)
    return batches
