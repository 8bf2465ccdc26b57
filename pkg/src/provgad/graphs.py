"""Provenance-graph construction: multigraph, noise reduction, lookup embedding.

A batch of events first becomes a directed multigraph (one edge per event).
Noise reduction then collapses it to a simple graph: duplicate same-label
edges between an ordered node pair are dropped, and the surviving distinct
labels are merged into a single edge whose feature vector is the mean of the
merged labels' lookup vectors. Node features come straight from the lookup
table.

Lookup vectors are drawn once per label from a seeded generator and never
change afterwards; each row depends only on (seed, label), so vocabularies
built in any order agree entry by entry.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import ValidationError
from .ingest import RawEvent
from .serialize import read_json, write_json

_NODE_TAG = 0
_EDGE_TAG = 1


@dataclass
class MultiGraph:
    """Directed multigraph for one batch: parallel edges preserved."""

    batch_id: str
    node_labels: dict[str, int]  # uid -> label
    edges: list[tuple[str, str, int]]  # (src uid, dst uid, label), input order

    @property
    def num_nodes(self) -> int:
        return len(self.node_labels)

    @property
    def num_edges(self) -> int:
        return len(self.edges)


class Vocabulary:
    """One-to-one mapping from 64-bit labels to fixed lookup vectors.

    Rows are uniform in [-1/sqrt(dim), +1/sqrt(dim)], derived from
    (seed, label) alone, and therefore stable across allocation orders.
    Unseen labels may be allocated lazily even on a frozen vocabulary;
    existing rows are immutable by construction.
    """

    def __init__(self, dim: int, seed: int, frozen: bool = False):
        if dim < 1:
            raise ValidationError("vocabulary dim must be >= 1")
        self.dim = dim
        self.seed = int(seed)
        self.frozen = frozen
        self.node_table: dict[int, int] = {}
        self.edge_table: dict[int, int] = {}
        self._node_rows: list[np.ndarray] = []
        self._edge_rows: list[np.ndarray] = []

    def _derive_row(self, label: int, tag: int) -> np.ndarray:
        ss = np.random.SeedSequence(entropy=[self.seed, tag, int(label)])
        rng = np.random.default_rng(ss)
        bound = 1.0 / np.sqrt(self.dim)
        return rng.uniform(-bound, bound, size=self.dim)

    def node_vector(self, label: int) -> np.ndarray:
        idx = self.node_table.get(label)
        if idx is None:
            idx = len(self._node_rows)
            self.node_table[label] = idx
            self._node_rows.append(self._derive_row(label, _NODE_TAG))
        return self._node_rows[idx]

    def edge_vector(self, label: int) -> np.ndarray:
        idx = self.edge_table.get(label)
        if idx is None:
            idx = len(self._edge_rows)
            self.edge_table[label] = idx
            self._edge_rows.append(self._derive_row(label, _EDGE_TAG))
        return self._edge_rows[idx]

    @property
    def node_vectors(self) -> np.ndarray:
        return np.vstack(self._node_rows) if self._node_rows else np.zeros((0, self.dim))

    @property
    def edge_vectors(self) -> np.ndarray:
        return np.vstack(self._edge_rows) if self._edge_rows else np.zeros((0, self.dim))

    def save(self, path: str) -> None:
        write_json(path, {
            "format_version": 1,
            "dim": self.dim,
            "seed": self.seed,
            "frozen": self.frozen,
            "node_labels": {str(lbl): idx for lbl, idx in self.node_table.items()},
            "edge_labels": {str(lbl): idx for lbl, idx in self.edge_table.items()},
        })

    @classmethod
    def load(cls, path: str) -> "Vocabulary":
        doc = read_json(path)
        vocab = cls(dim=doc["dim"], seed=doc["seed"], frozen=doc.get("frozen", False))
        for lbl, _ in sorted(doc["node_labels"].items(), key=lambda kv: kv[1]):
            vocab.node_vector(int(lbl))
        for lbl, _ in sorted(doc["edge_labels"].items(), key=lambda kv: kv[1]):
            vocab.edge_vector(int(lbl))
        return vocab


@dataclass
class ProvenanceGraph:
    """Reduced, feature-initialized simple directed graph for one batch.

    Nodes are sorted by uid and edges by (src, dst) index pair, so two event
    streams that differ only in ordering reduce to identical graphs.
    """

    batch_id: str
    node_uids: list[str]
    node_labels: list[int]
    node_features: np.ndarray  # (N, dim)
    edge_src: np.ndarray  # (E,) int
    edge_dst: np.ndarray  # (E,) int
    edge_label_sets: list[tuple[int, ...]]  # sorted distinct labels per edge
    edge_features: np.ndarray  # (E, dim)

    @property
    def num_nodes(self) -> int:
        return len(self.node_uids)

    @property
    def num_edges(self) -> int:
        return len(self.edge_label_sets)

    def out_neighbors(self) -> list[list[int]]:
        adj: list[list[int]] = [[] for _ in range(self.num_nodes)]
        for s, d in zip(self.edge_src, self.edge_dst):
            adj[int(s)].append(int(d))
        return adj


def build_multigraph(events: Sequence[RawEvent]) -> MultiGraph:
    """One node per distinct uid, one edge per event, in input order."""
    batch_ids = {ev.batch_id for ev in events}
    if len(batch_ids) > 1:
        raise ValidationError(f"events span multiple batches: {sorted(batch_ids)}")
    batch_id = events[0].batch_id if events else ""
    node_labels: dict[str, int] = {}
    edges: list[tuple[str, str, int]] = []
    for ev in events:
        node_labels.setdefault(ev.src_uid, ev.src_label)
        node_labels.setdefault(ev.dst_uid, ev.dst_label)
        edges.append((ev.src_uid, ev.dst_uid, ev.edge_label))
    return MultiGraph(batch_id=batch_id, node_labels=node_labels, edges=edges)


def reduce_noise(mg: MultiGraph, vocab: Vocabulary) -> ProvenanceGraph:
    """Collapse parallel edges per ordered pair and attach lookup features."""
    node_uids = sorted(mg.node_labels)
    index = {uid: i for i, uid in enumerate(node_uids)}
    node_labels = [mg.node_labels[uid] for uid in node_uids]

    merged: dict[tuple[int, int], set[int]] = {}
    for src, dst, label in mg.edges:
        merged.setdefault((index[src], index[dst]), set()).add(label)

    pairs = sorted(merged)
    label_sets = [tuple(sorted(merged[p])) for p in pairs]

    if node_uids:
        node_features = np.vstack([vocab.node_vector(lbl) for lbl in node_labels])
    else:
        node_features = np.zeros((0, vocab.dim))
    if pairs:
        edge_features = np.vstack([
            np.mean([vocab.edge_vector(lbl) for lbl in labels], axis=0)
            for labels in label_sets
        ])
        edge_src = np.array([p[0] for p in pairs], dtype=np.int64)
        edge_dst = np.array([p[1] for p in pairs], dtype=np.int64)
    else:
        edge_features = np.zeros((0, vocab.dim))
        edge_src = np.zeros(0, dtype=np.int64)
        edge_dst = np.zeros(0, dtype=np.int64)

    return ProvenanceGraph(
        batch_id=mg.batch_id,
        node_uids=node_uids,
        node_labels=node_labels,
        node_features=node_features,
        edge_src=edge_src,
        edge_dst=edge_dst,
        edge_label_sets=label_sets,
        edge_features=edge_features,
    )


def edge_reduction_ratio(before: MultiGraph, after: ProvenanceGraph) -> float:
    """Fraction of edges removed by reduction; 0.0 for an empty multigraph."""
    if before.num_edges == 0:
        return 0.0
    return 1.0 - after.num_edges / before.num_edges


def graph_to_doc(g: ProvenanceGraph) -> dict:
    """Graph-store document; features are re-derived from the vocabulary."""
    return {
        "format_version": 1,
        "batch": g.batch_id,
        "nodes": [{"id": uid, "label": str(lbl)} for uid, lbl in zip(g.node_uids, g.node_labels)],
        "edges": [
            {"src": g.node_uids[int(s)], "dst": g.node_uids[int(d)], "labels": [str(l) for l in labels]}
            for s, d, labels in zip(g.edge_src, g.edge_dst, g.edge_label_sets)
        ],
    }


def save_graph(g: ProvenanceGraph, path: str) -> None:
    write_json(path, graph_to_doc(g))


def load_graph(path: str, vocab: Vocabulary) -> ProvenanceGraph:
    doc = read_json(path)
    mg = MultiGraph(
        batch_id=doc["batch"],
        node_labels={n["id"]: int(n["label"]) for n in doc["nodes"]},
        edges=[
            (e["src"], e["dst"], int(lbl))
            for e in doc["edges"]
            for lbl in e["labels"]
        ],
    )
    return reduce_noise(mg, vocab)


def graphs_from_events(events: Iterable[RawEvent], vocab: Vocabulary) -> list[ProvenanceGraph]:
    """Build one reduced graph per batch, ordered by first appearance."""
    from .ingest import group_by_batch

    batches = group_by_batch(events)
    return [reduce_noise(build_multigraph(evs), vocab) for evs in batches.values()]
