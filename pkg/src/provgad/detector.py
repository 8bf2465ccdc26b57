"""KNN outlier detection against memorized benign embeddings.

Benign embeddings are stored in a median-split K-D tree (axis cycles with
depth, leaf buckets hold a few dozen points). A target's anomaly score is its
mean Euclidean distance to the k nearest memorized points, normalized by the
baseline distance observed on the memorized set itself (each point queried
with its self-match dropped). Scores at or above the threshold are malicious.

Exactness matters more than speed here: queries must agree with an exhaustive
scan down to tie-breaking, which favors the point inserted earliest.
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import (DegenerateBaselineError, DimensionMismatchError,
                     TooFewPointsError, ValidationError)
from .serialize import read_json, write_json

LEAF_SIZE = 32


def squared_distances(points: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Row-wise squared Euclidean distances; the single kernel used everywhere.

    Row results are independent of how the point set is partitioned, so a
    tree search and an exhaustive scan produce bit-identical distances.
    """
    diff = points - q
    return np.einsum("ij,ij->i", diff, diff)


class KDTree:
    """Static K-D tree over row vectors; rebuilt rather than rebalanced."""

    __slots__ = ("points", "counters", "dim", "root", "_counter_list")

    def __init__(self, points: np.ndarray, counters: np.ndarray, leaf_size: int = LEAF_SIZE):
        self.points = points
        self.counters = counters
        self._counter_list = counters.tolist()
        self.dim = points.shape[1]
        self.root = self._build(np.arange(len(points)), 0, leaf_size)

    def _build(self, indices: np.ndarray, depth: int, leaf_size: int):
        if len(indices) <= leaf_size:
            # leaves carry their own contiguous point block
            return (indices.tolist(), np.ascontiguousarray(self.points[indices]))
        axis = depth % self.dim
        order = np.argsort(self.points[indices, axis], kind="stable")
        half = len(indices) // 2
        left = indices[order[:half]]
        right = indices[order[half:]]
        threshold = float(self.points[right[0], axis])
        return (axis, threshold,
                self._build(left, depth + 1, leaf_size),
                self._build(right, depth + 1, leaf_size))

    def query(self, q: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
        """Indices and distances of the k nearest points, ascending.

        Equal distances are resolved toward the lower insertion counter,
        matching a brute-force scan with the same rule.
        """
        # heap of (-dist2, -counter, idx); heap[0] is the current worst keeper
        heap: list[tuple[float, int, int]] = []
        counters = self._counter_list
        push, replace = heapq.heappush, heapq.heapreplace

        def visit(indices: list[int], block: np.ndarray) -> None:
            d2s = squared_distances(block, q)
            if len(heap) == k:
                worst = -heap[0][0]
                sel = np.nonzero(d2s <= worst)[0]
                if not len(sel):
                    return
                for j in sel.tolist():
                    idx = indices[j]
                    key = (-float(d2s[j]), -counters[idx], idx)
                    if key > heap[0]:
                        replace(heap, key)
            else:
                for j, d2 in enumerate(d2s.tolist()):
                    idx = indices[j]
                    key = (-d2, -counters[idx], idx)
                    if len(heap) < k:
                        push(heap, key)
                    elif key > heap[0]:
                        replace(heap, key)

        def recurse(node) -> None:
            if len(node) == 2:
                visit(node[0], node[1])
                return
            axis, threshold, left, right = node
            delta = q[axis] - threshold
            near, far = (left, right) if delta < 0.0 else (right, left)
            recurse(near)
            # equality must still visit: an equally distant point on the far
            # side can win on a lower insertion counter
            if len(heap) < k or delta * delta <= -heap[0][0]:
                recurse(far)

        recurse(self.root)
        ordered = sorted(heap, reverse=True)
        idx = np.array([t[2] for t in ordered], dtype=np.int64)
        dist = np.sqrt(np.array([-t[0] for t in ordered]))
        return idx, dist


@dataclass
class Verdict:
    score: float
    malicious: bool
    theta: float


@dataclass
class DetectorState:
    """Immutable after fit/absorb; safe for concurrent scoring."""

    points: np.ndarray  # (N, D)
    counters: np.ndarray  # (N,) insertion ids, strictly increasing
    k: int
    baseline: float  # mean kNN distance over the memorized set
    capacity: int | None
    theta: float | None
    training_scores: np.ndarray  # self-excluded scores of memorized points
    next_counter: int
    tree: KDTree

    @property
    def dim(self) -> int:
        return self.points.shape[1]


def _self_distances(tree: KDTree, points: np.ndarray, k: int) -> np.ndarray:
    """Mean distance of each stored point to its k nearest others."""
    out = np.empty(len(points))
    for i, p in enumerate(points):
        idx, dist = tree.query(p, k + 1)
        keep = idx != i
        out[i] = dist[keep][:k].mean()
    return out


def _validate_capacity(capacity: int | None, k: int) -> None:
    if capacity is not None and capacity < k + 1:
        raise ValidationError(f"capacity {capacity} must be at least k+1 = {k + 1}")


def fit(points: np.ndarray, k: int, capacity: int | None = None) -> DetectorState:
    """Memorize benign points and compute the baseline distance."""
    pts = np.ascontiguousarray(np.asarray(points, dtype=np.float64))
    if pts.ndim != 2:
        raise ValidationError("points must be a 2-D array")
    if k < 1:
        raise ValidationError("k must be >= 1")
    _validate_capacity(capacity, k)
    if len(pts) < k + 1:
        raise TooFewPointsError(f"need at least k+1 = {k + 1} points, got {len(pts)}")
    if capacity is not None and len(pts) > capacity:
        pts = pts[len(pts) - capacity:]
    counters = np.arange(len(pts), dtype=np.int64)
    tree = KDTree(pts, counters)
    dists = _self_distances(tree, pts, k)
    baseline = float(dists.mean())
    if baseline == 0.0:
        raise DegenerateBaselineError("all memorized points coincide; baseline distance is 0")
    return DetectorState(
        points=pts, counters=counters, k=k, baseline=baseline,
        capacity=capacity, theta=None, training_scores=dists / baseline,
        next_counter=len(pts), tree=tree,
    )


def knn(state: DetectorState, query: np.ndarray, k: int | None = None) -> list[tuple[int, float]]:
    """k nearest memorized points as (index, distance), ascending."""
    q = np.asarray(query, dtype=np.float64).ravel()
    if q.shape[0] != state.dim:
        raise DimensionMismatchError(
            f"query dimension {q.shape[0]} != memorized dimension {state.dim}")
    kk = state.k if k is None else k
    if not 1 <= kk <= len(state.points):
        raise ValidationError(f"k={kk} out of range for {len(state.points)} points")
    idx, dist = state.tree.query(q, kk)
    return [(int(i), float(d)) for i, d in zip(idx, dist)]


def score(state: DetectorState, query: np.ndarray) -> float:
    """Mean distance to the k nearest memorized points over the baseline."""
    q = np.asarray(query, dtype=np.float64).ravel()
    if q.shape[0] != state.dim:
        raise DimensionMismatchError(
            f"query dimension {q.shape[0]} != memorized dimension {state.dim}")
    _, dist = state.tree.query(q, state.k)
    return float(dist.mean() / state.baseline)


def score_many(state: DetectorState, queries: np.ndarray) -> np.ndarray:
    return np.array([score(state, q) for q in np.asarray(queries, dtype=np.float64)])


def verdict(anomaly_score: float, theta: float) -> Verdict:
    if not (math.isfinite(theta) and theta > 0.0):
        raise ValidationError(f"theta must be finite and > 0, got {theta}")
    return Verdict(score=float(anomaly_score), malicious=anomaly_score >= theta, theta=theta)


def detect(state: DetectorState, query: np.ndarray, theta: float) -> Verdict:
    """Score one target; a score equal to theta counts as malicious."""
    if not (math.isfinite(theta) and theta > 0.0):
        raise ValidationError(f"theta must be finite and > 0, got {theta}")
    return verdict(score(state, query), theta)


def select_threshold(benign_scores: Sequence[float], target_fpr: float) -> float:
    """Smallest grid threshold whose empirical FPR is within the target.

    The grid is the sorted unique benign scores plus one representable step
    above the maximum, which always reaches FPR 0.
    """
    scores = np.asarray(list(benign_scores), dtype=np.float64)
    if scores.size == 0:
        raise ValidationError("benign score list must be non-empty")
    if not 0.0 < target_fpr < 1.0:
        raise ValidationError("target_fpr must be in (0, 1)")
    grid = np.unique(scores)
    grid = np.append(grid, math.nextafter(float(grid[-1]), math.inf))
    for theta in grid:
        if (scores >= theta).mean() <= target_fpr:
            return float(theta)
    return float(grid[-1])  # unreachable: the final grid point has FPR 0


def absorb(state: DetectorState, new_points: np.ndarray,
           capacity: int | None = None) -> DetectorState:
    """Append new points, evict the oldest beyond capacity, rebuild, refit."""
    pts = np.asarray(new_points, dtype=np.float64)
    if pts.ndim != 2 or (pts.size and pts.shape[1] != state.dim):
        raise DimensionMismatchError(
            f"new points of dimension {pts.shape[-1] if pts.size else '?'} "
            f"!= memorized dimension {state.dim}")
    cap = state.capacity if capacity is None else capacity
    _validate_capacity(cap, state.k)
    merged = np.vstack([state.points, pts]) if len(pts) else state.points.copy()
    counters = np.concatenate([
        state.counters,
        np.arange(state.next_counter, state.next_counter + len(pts), dtype=np.int64),
    ])
    if cap is not None and len(merged) > cap:
        # counters are appended in increasing order, so the oldest are leftmost
        merged = merged[len(merged) - cap:]
        counters = counters[len(counters) - cap:]
    merged = np.ascontiguousarray(merged)
    if len(merged) < state.k + 1:
        raise TooFewPointsError(f"surviving set smaller than k+1 = {state.k + 1}")
    tree = KDTree(merged, counters)
    dists = _self_distances(tree, merged, state.k)
    baseline = float(dists.mean())
    if baseline == 0.0:
        raise DegenerateBaselineError("all memorized points coincide; baseline distance is 0")
    return DetectorState(
        points=merged, counters=counters, k=state.k, baseline=baseline,
        capacity=cap, theta=state.theta, training_scores=dists / baseline,
        next_counter=state.next_counter + len(pts), tree=tree,
    )


def save_detector(path: str, state: DetectorState) -> None:
    write_json(path, {
        "format_version": 1,
        "neighbors": state.k,
        "baseline_distance": state.baseline,
        "theta": state.theta,
        "capacity": state.capacity,
        "points": state.points.tolist(),
        "insertion_ids": state.counters.tolist(),
        "training_scores": state.training_scores.tolist(),
        "next_counter": state.next_counter,
    })


def load_detector(path: str) -> DetectorState:
    doc = read_json(path)
    pts = np.ascontiguousarray(np.asarray(doc["points"], dtype=np.float64))
    counters = np.asarray(doc["insertion_ids"], dtype=np.int64)
    return DetectorState(
        points=pts, counters=counters, k=doc["neighbors"],
        baseline=doc["baseline_distance"], capacity=doc["capacity"],
        theta=doc["theta"],
        training_scores=np.asarray(doc["training_scores"], dtype=np.float64),
        next_counter=doc["next_counter"], tree=KDTree(pts, counters),
    )
