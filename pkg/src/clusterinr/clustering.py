"""Spatial k-means partition plus binary split trees for re-clustering.

Leaves are addressed by tuples: ``(i,)`` is top-level cluster ``i`` and
``(i, 0, 1)`` is the right child of its left child. Tuple order is the
tie-break order. Centroids are rounded to float32 when stored so that a
partition read back from disk routes points exactly as the in-memory one.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)

LeafId = tuple


class ClusteringError(ValueError):
    pass


class SplitRefused(Exception):
    """The leaf cannot be split further and stays terminal."""


def leaf_name(leaf: LeafId) -> str:
    return ".".join(map(str, leaf))


def parse_leaf_name(name: str) -> LeafId:
    return tuple(int(p) for p in name.split("."))


def _as_f32_grid(centroids) -> np.ndarray:
    return np.asarray(centroids, dtype=np.float32).astype(np.float64)


def nearest(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    """Index of the nearest centroid for every point; ties go to the lowest index."""
    d2 = np.sum((points[:, None, :] - centroids[None, :, :]) ** 2, axis=-1)
    return np.argmin(d2, axis=1)


def objective(points, centroids, labels) -> float:
    """Sum of squared distances of points to their assigned centroid."""
    return float(np.sum((points - centroids[labels]) ** 2))


@dataclass
class ClusterStats:
    leaf_id: LeafId
    point_count: int
    per_variable_mse: np.ndarray
    aggregate_mse: float


@dataclass
class KMeansResult:
    centroids: np.ndarray
    labels: np.ndarray
    objective_trace: list[float]
    iterations: int


def _kmeanspp(points, k, rng):
    centroids = [points[rng.integers(len(points))]]
    d2 = np.sum((points - centroids[0]) ** 2, axis=1)
    for _ in range(1, k):
        total = d2.sum()
        idx = rng.choice(len(points), p=d2 / total) if total > 0 else rng.integers(len(points))
        centroids.append(points[idx])
        d2 = np.minimum(d2, np.sum((points - points[idx]) ** 2, axis=1))
    return np.array(centroids)


def kmeans(points: np.ndarray, k: int, max_iters: int = 100, seed=0, n_init: int = 4) -> KMeansResult:
    """Lloyd's algorithm from a k-means++ start, best of ``n_init`` starts.

    ``objective_trace[0]`` is the objective of the first assignment and one
    entry follows every centroid update (for the start that is kept). Empty
    clusters are reseeded with the point farthest from its own centroid.
    """
    points = np.asarray(points, dtype=np.float64)
    if k < 1:
        raise ClusteringError(f"K must be >= 1, got {k}")
    distinct = len(np.unique(points, axis=0))
    if k > distinct:
        raise ClusteringError(f"K={k} exceeds the number of distinct points ({distinct})")
    root = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    # derived explicitly rather than via spawn(), which mutates a caller's SeedSequence
    seeds = [np.random.SeedSequence(root.entropy, spawn_key=tuple(root.spawn_key) + (i,)) for i in range(max(n_init, 1))]
    best = None
    for ss in seeds:
        res = _lloyd(points, k, max_iters, np.random.default_rng(ss))
        if best is None or res.objective_trace[-1] < best.objective_trace[-1]:
            best = res
    return best


def _lloyd(points, k, max_iters, rng) -> KMeansResult:
    centroids = _kmeanspp(points, k, rng)
    labels = nearest(points, centroids)
    trace = [objective(points, centroids, labels)]
    it = 0
    for it in range(1, max_iters + 1):
        for c in range(k):
            members = labels == c
            if members.any():
                centroids[c] = points[members].mean(axis=0)
        labels, centroids = _repair_empty(points, labels, centroids)
        trace.append(objective(points, centroids, labels))
        new_labels = nearest(points, centroids)
        if np.array_equal(new_labels, labels):
            break
        labels = new_labels
    return KMeansResult(centroids, labels, trace, it)


def _repair_empty(points, labels, centroids):
    k = len(centroids)
    for c in range(k):
        if (labels == c).any():
            continue
        resid = np.sum((points - centroids[labels]) ** 2, axis=1)
        sizes = np.bincount(labels, minlength=k)
        resid[sizes[labels] < 2] = -1.0  # never empty another cluster
        far = int(np.argmax(resid))
        labels = labels.copy()
        labels[far] = c
        centroids[c] = points[far]
    return labels, centroids


@dataclass
class Node:
    """A cluster in the split forest; leaves have no children."""

    leaf_id: LeafId
    centroid: np.ndarray
    children: list["Node"] = field(default_factory=list)

    @property
    def is_leaf(self) -> bool:
        return not self.children

    @property
    def depth(self) -> int:
        return len(self.leaf_id) - 1

    def leaves(self):
        if self.is_leaf:
            yield self
        else:
            for ch in self.children:
                yield from ch.leaves()

    def preorder(self):
        yield self
        for ch in self.children:
            yield from ch.preorder()

    def find(self, leaf_id: LeafId) -> "Node":
        if leaf_id[:len(self.leaf_id)] != self.leaf_id:
            raise KeyError(leaf_name(leaf_id))
        node = self
        for step in leaf_id[len(self.leaf_id):]:
            if node.is_leaf:
                raise KeyError(leaf_name(leaf_id))
            node = node.children[step]
        return node

    def route(self, points: np.ndarray, out: np.ndarray, rows: np.ndarray, leaf_index: dict) -> None:
        if self.is_leaf:
            out[rows] = leaf_index[self.leaf_id]
            return
        cents = np.stack([ch.centroid for ch in self.children])
        side = nearest(points[rows], cents)
        for i, ch in enumerate(self.children):
            sel = rows[side == i]
            if sel.size:
                ch.route(points, out, sel, leaf_index)


@dataclass
class ClusterPartition:
    roots: list[Node]

    @classmethod
    def from_centroids(cls, centroids) -> "ClusterPartition":
        c = _as_f32_grid(centroids)
        return cls([Node((i,), c[i]) for i in range(len(c))])

    @property
    def top_centroids(self) -> np.ndarray:
        return np.stack([r.centroid for r in self.roots])

    def leaves(self) -> list[Node]:
        return [leaf for r in self.roots for leaf in r.leaves()]

    def leaf_ids(self) -> list[LeafId]:
        return [leaf.leaf_id for leaf in self.leaves()]

    def node(self, leaf_id: LeafId) -> Node:
        return self.roots[leaf_id[0]].find(leaf_id)

    def max_depth(self) -> int:
        return max(n.depth for r in self.roots for n in r.preorder())

    def assign_many(self, points: np.ndarray) -> list[LeafId]:
        """Route every point: nearest top centroid, then the nearer child at each split."""
        idx = self.assign_indices(points)
        ids = self.leaf_ids()
        return [ids[i] for i in idx]

    def assign_indices(self, points: np.ndarray) -> np.ndarray:
        """Like :meth:`assign_many` but returns positions in :meth:`leaf_ids` order."""
        points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        ids = self.leaf_ids()
        leaf_index = {lid: i for i, lid in enumerate(ids)}
        out = np.empty(len(points), dtype=np.int64)
        if len(points) == 0:
            return out
        top = nearest(points, self.top_centroids)
        for i, root in enumerate(self.roots):
            rows = np.flatnonzero(top == i)
            if rows.size:
                root.route(points, out, rows, leaf_index)
        return out

    def assign(self, point) -> LeafId:
        return self.assign_many(np.asarray(point, dtype=np.float64).reshape(1, 3))[0]

    def members(self, points: np.ndarray) -> dict[LeafId, np.ndarray]:
        """Point indices per leaf, as produced by routing."""
        idx = self.assign_indices(points)
        return {lid: np.flatnonzero(idx == i) for i, lid in enumerate(self.leaf_ids())}

    def replace_root(self, root: Node) -> None:
        self.roots[root.leaf_id[0]] = root

    def copy(self) -> "ClusterPartition":
        def dup(n):
            return Node(n.leaf_id, n.centroid.copy(), [dup(c) for c in n.children])
        return ClusterPartition([dup(r) for r in self.roots])

    def equal(self, other: "ClusterPartition") -> bool:
        a = [(n.leaf_id, n.centroid.tobytes(), len(n.children)) for r in self.roots for n in r.preorder()]
        b = [(n.leaf_id, n.centroid.tobytes(), len(n.children)) for r in other.roots for n in r.preorder()]
        return a == b


def build_partition(points: np.ndarray, k: int, max_iters: int = 100, seed=0) -> ClusterPartition:
    """Top-level partition. Membership is defined by routing, so it is exactly
    what decode-time routing will reproduce."""
    res = kmeans(points, k, max_iters, seed)
    part = ClusterPartition.from_centroids(res.centroids)
    sizes = np.bincount(part.assign_indices(points), minlength=k)
    if (sizes == 0).any():
        raise ClusteringError(f"top-level clusters {np.flatnonzero(sizes == 0).tolist()} are empty after rounding")
    return part


def split_cluster(root: Node, leaf_id: LeafId, points: np.ndarray, max_split_depth: int, seed=0,
                  max_iters: int = 100) -> tuple[np.ndarray, np.ndarray]:
    """Split a leaf in two with 2-means on ``points`` (the leaf's own points).

    Mutates the tree under ``root`` and returns the row indices (into
    ``points``) that route to the left and right child. Raises
    :class:`SplitRefused` at the depth cap or when the geometry is degenerate.
    """
    node = root.find(leaf_id)
    if not node.is_leaf:
        raise ClusteringError(f"{leaf_name(leaf_id)} is already split")
    if node.depth >= max_split_depth:
        raise SplitRefused(f"terminal leaf {leaf_name(leaf_id)}: depth cap {max_split_depth} reached")
    points = np.asarray(points, dtype=np.float64)
    if len(points) < 2 or len(np.unique(points, axis=0)) < 2:
        raise SplitRefused(f"terminal leaf {leaf_name(leaf_id)}: fewer than 2 distinct points")
    res = kmeans(points, 2, max_iters, seed)
    cents = _as_f32_grid(res.centroids)
    side = nearest(points, cents)
    left, right = np.flatnonzero(side == 0), np.flatnonzero(side == 1)
    if left.size == 0 or right.size == 0:
        raise SplitRefused(f"terminal leaf {leaf_name(leaf_id)}: a sub-cluster came out empty")
    node.children = [Node(leaf_id + (0,), cents[0]), Node(leaf_id + (1,), cents[1])]
    return left, right
