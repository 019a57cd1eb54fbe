"""Similarity graph over a scene's database frames and waypoint paths on it.

Variants:

* ``SWG`` sparse weighted: edges with similarity > 0.75, weight sqrt(1 - s)
* ``SBG`` sparse binary: same edges, weight 1
* ``DWG`` dense weighted: similarity > 0.40, weight sqrt(1 - s)
* ``PG``  pose graph (evaluation only): pose distance <= 1 m, weight 1
"""

from __future__ import annotations

import json
import threading
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import dijkstra

from .embedstore import EmbeddingStore, EmptyPartition

VARIANTS = ("SWG", "SBG", "DWG", "PG")
DEFAULT_THRESHOLDS = {"SWG": 0.75, "SBG": 0.75, "DWG": 0.40, "PG": 1.0}
WEIGHTED = {"SWG": True, "SBG": False, "DWG": True, "PG": False}
MAX_DENSE_NODES = 20_000

_BLOCK = 2048
_TIGHT_RTOL = 1e-12


class GraphError(ValueError):
    pass


@dataclass(frozen=True)
class PathResult:
    found: bool
    nodes: tuple[int, ...]
    cost: float


@dataclass(eq=False)
class SimilarityGraph:
    """Immutable undirected graph; nodes are record indices of one scene.

    Each undirected edge is stored once in ``edges`` as ``i < j`` (record
    indices) with its weight; the CSR adjacency holds both directions.
    """

    variant: str
    threshold: float
    nodes: np.ndarray                 # record indices, ascending
    edge_i: np.ndarray                # local positions, edge_i < edge_j
    edge_j: np.ndarray
    edge_w: np.ndarray
    affinity: np.ndarray | None = None
    _csr: sp.csr_matrix = field(init=False, repr=False)
    _pos: dict[int, int] = field(init=False, repr=False)
    _cache: "OrderedDict[int, tuple[np.ndarray, np.ndarray]]" = field(init=False, repr=False)
    _lock: threading.Lock = field(init=False, repr=False)

    def __post_init__(self):
        self.nodes = np.asarray(self.nodes, dtype=np.int64)
        n = len(self.nodes)
        i = np.concatenate([self.edge_i, self.edge_j])
        j = np.concatenate([self.edge_j, self.edge_i])
        w = np.concatenate([self.edge_w, self.edge_w]).astype(np.float64)
        self._csr = sp.csr_matrix((w, (i, j)), shape=(n, n))
        self._csr.sort_indices()
        self._pos = {int(r): p for p, r in enumerate(self.nodes)}
        self._cache = OrderedDict()
        self._lock = threading.Lock()

    @property
    def num_edges(self) -> int:
        return len(self.edge_w)

    def position(self, node: int) -> int:
        try:
            return self._pos[int(node)]
        except KeyError:
            raise GraphError(f"node {node} is not in the graph") from None

    def edges(self) -> list[tuple[int, int, float]]:
        """Undirected edges as (record i, record j, weight) with i < j."""
        return [(int(self.nodes[a]), int(self.nodes[b]), float(w))
                for a, b, w in zip(self.edge_i, self.edge_j, self.edge_w)]

    def neighbors(self, node: int) -> list[tuple[int, float]]:
        p = self.position(node)
        lo, hi = self._csr.indptr[p], self._csr.indptr[p + 1]
        return [(int(self.nodes[q]), float(w))
                for q, w in zip(self._csr.indices[lo:hi], self._csr.data[lo:hi])]

    def distances_to(self, target: int) -> tuple[np.ndarray, np.ndarray]:
        """(cost, hops) from every local node to ``target``; cached per target.

        ``hops`` counts edges on the fewest-edge min-cost route and is only
        used to cross zero-weight plateaus without cycling.
        """
        t = self.position(target)
        with self._lock:
            hit = self._cache.get(t)
            if hit is not None:
                self._cache.move_to_end(t)
                return hit
        dist = dijkstra(self._csr, directed=False, indices=t)
        hops = _tight_hops(self._csr, dist, t)
        with self._lock:
            self._cache[t] = (dist, hops)
            while len(self._cache) > 128:
                self._cache.popitem(last=False)
        return dist, hops

    def to_json(self) -> dict:
        return {
            "variant": self.variant,
            "threshold": self.threshold,
            "nodes": [int(x) for x in self.nodes],
            "edges": [[a, b, w] for a, b, w in self.edges()],
        }

    @classmethod
    def from_json(cls, data: Mapping) -> "SimilarityGraph":
        nodes = np.asarray(data["nodes"], dtype=np.int64)
        pos = {int(r): p for p, r in enumerate(nodes)}
        edges = data["edges"]
        ei = np.array([pos[int(e[0])] for e in edges], dtype=np.int64)
        ej = np.array([pos[int(e[1])] for e in edges], dtype=np.int64)
        ew = np.array([float(e[2]) for e in edges], dtype=np.float64)
        return cls(str(data["variant"]), float(data["threshold"]), nodes, ei, ej, ew)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json(), fh)

    @classmethod
    def load(cls, path) -> "SimilarityGraph":
        with open(path, encoding="utf-8") as fh:
            return cls.from_json(json.load(fh))


def _tight_hops(csr: sp.csr_matrix, dist: np.ndarray, t: int) -> np.ndarray:
    """BFS depth from ``t`` over edges that lie on some min-cost route."""
    n = csr.shape[0]
    if not np.any(csr.data == 0.0):
        # strictly positive weights: cost alone orders the route, depth unused
        return np.where(np.isfinite(dist), 0, -1)
    rows = np.repeat(np.arange(n), np.diff(csr.indptr))
    cols = csr.indices
    with np.errstate(invalid="ignore"):
        gap = np.abs(dist[rows] + csr.data - dist[cols])
        tight = gap <= _TIGHT_RTOL * np.maximum(1.0, np.abs(dist[cols]))
    # directed u -> v where v is one tight edge further from t than u
    sub = sp.csr_matrix((np.ones(int(tight.sum())), (rows[tight], cols[tight])), shape=(n, n))
    depth = dijkstra(sub, directed=True, indices=t, unweighted=True)
    hops = np.where(np.isfinite(depth), depth, -1).astype(np.int64)
    return hops


def _tight(d_next: float, w: float, d_here: float) -> bool:
    return abs(d_next + w - d_here) <= _TIGHT_RTOL * max(1.0, abs(d_here))


# construction ----------------------------------------------------------

def build_affinity(store: EmbeddingStore, scene: str) -> tuple[np.ndarray, np.ndarray]:
    """(record indices, dense pairwise cosine matrix) for one scene."""
    indices, _, vecs = store.scene_matrix(scene)
    if len(indices) > MAX_DENSE_NODES:
        raise GraphError(f"scene has {len(indices)} frames; dense affinity is capped at {MAX_DENSE_NODES}")
    v = vecs.astype(np.float64)
    omega = v @ v.T
    omega = 0.5 * (omega + omega.T)
    np.fill_diagonal(omega, 1.0)
    return indices.copy(), omega


def _check_variant(variant: str) -> str:
    variant = variant.upper()
    if variant not in VARIANTS:
        raise GraphError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
    return variant


def _edges_from_block(block: np.ndarray, row0: int, threshold: float, weighted: bool):
    r, c = np.nonzero(block > threshold)
    rows = r + row0
    keep = c > rows
    rows, cols = rows[keep], c[keep]
    s = block[r[keep], c[keep]]
    w = np.sqrt(np.clip(1.0 - s, 0.0, None)) if weighted else np.ones(len(s))
    return rows, cols, w


def _pose_edges(nodes: np.ndarray, poses: Mapping[int, Sequence[float]] | None, cut: float):
    if poses is None:
        raise GraphError("PG variant requires poses for every node")
    try:
        xy = np.array([poses[int(n)] for n in nodes], dtype=np.float64)
    except KeyError as exc:
        raise GraphError(f"missing pose for node {exc.args[0]}") from None
    rows, cols = [], []
    for start in range(0, len(nodes), _BLOCK):
        d = np.linalg.norm(xy[start:start + _BLOCK, None, :] - xy[None, :, :], axis=2)
        r, c = np.nonzero(d <= cut)
        r = r + start
        keep = c > r
        rows.append(r[keep])
        cols.append(c[keep])
    rows = np.concatenate(rows) if rows else np.zeros(0, np.int64)
    cols = np.concatenate(cols) if cols else np.zeros(0, np.int64)
    return rows, cols, np.ones(len(rows))


def build_graph(affinity: np.ndarray, variant: str = "SWG", nodes: Sequence[int] | None = None,
                poses: Mapping[int, Sequence[float]] | None = None,
                threshold: float | None = None, keep_affinity: bool = True) -> SimilarityGraph:
    """Threshold an affinity matrix into a graph (strict ``s > threshold``)."""
    variant = _check_variant(variant)
    affinity = np.asarray(affinity, dtype=np.float64)
    n = affinity.shape[0]
    if affinity.shape != (n, n):
        raise GraphError("affinity must be square")
    nodes = np.arange(n, dtype=np.int64) if nodes is None else np.asarray(nodes, dtype=np.int64)
    th = DEFAULT_THRESHOLDS[variant] if threshold is None else float(threshold)
    if variant == "PG":
        ei, ej, ew = _pose_edges(nodes, poses, th)
    else:
        ei, ej, ew = _edges_from_block(affinity, 0, th, WEIGHTED[variant])
    return SimilarityGraph(variant, th, nodes, ei.astype(np.int64), ej.astype(np.int64),
                           ew.astype(np.float64), affinity if keep_affinity else None)


def build_scene_graph(store: EmbeddingStore, scene: str, variant: str = "SWG",
                      threshold: float | None = None, keep_affinity: bool = False) -> SimilarityGraph:
    """Build a scene's graph block by block, without holding the dense matrix."""
    variant = _check_variant(variant)
    indices, _, vecs = store.scene_matrix(scene)
    indices = indices.copy()
    n = len(indices)
    if n > MAX_DENSE_NODES:
        raise GraphError(f"scene has {n} frames; graphs are capped at {MAX_DENSE_NODES}")
    th = DEFAULT_THRESHOLDS[variant] if threshold is None else float(threshold)
    if variant == "PG":
        ei, ej, ew = _pose_edges(indices, store.evaluation_poses(scene), th)
        return SimilarityGraph(variant, th, indices, ei, ej, ew)
    v = vecs.astype(np.float64)
    parts = []
    kept = np.empty((n, n)) if keep_affinity else None
    for start in range(0, n, _BLOCK):
        block = v[start:start + _BLOCK] @ v.T
        if kept is not None:
            kept[start:start + _BLOCK] = block
        parts.append(_edges_from_block(block, start, th, WEIGHTED[variant]))
    ei = np.concatenate([p[0] for p in parts]).astype(np.int64)
    ej = np.concatenate([p[1] for p in parts]).astype(np.int64)
    ew = np.concatenate([p[2] for p in parts]).astype(np.float64)
    if kept is not None:
        kept = 0.5 * (kept + kept.T)
        np.fill_diagonal(kept, 1.0)
    return SimilarityGraph(variant, th, indices, ei, ej, ew, kept)


# paths ------------------------------------------------------------------

def shortest_path(graph: SimilarityGraph, source: int, target: int) -> PathResult:
    """Minimum-cost path; among equal-cost paths the lexicographically smallest.

    Disconnected endpoints give ``found=False`` rather than an error.
    """
    s = graph.position(source)
    t = graph.position(target)
    if s == t:
        return PathResult(True, (int(graph.nodes[s]),), 0.0)
    dist, hops = graph.distances_to(target)
    if not np.isfinite(dist[s]):
        return PathResult(False, (), float("inf"))
    csr = graph._csr
    indptr, indices, data = csr.indptr, csr.indices, csr.data
    route = [s]
    cost = 0.0
    u = s
    while u != t:
        best = -1
        best_w = 0.0
        # CSR columns are sorted, so the first admissible neighbour is the
        # lexicographically smallest continuation
        for k in range(indptr[u], indptr[u + 1]):
            v = indices[k]
            if not _tight(dist[v], data[k], dist[u]):
                continue
            if dist[v] < dist[u] or 0 <= hops[v] < hops[u]:
                best, best_w = v, data[k]
                break
        if best < 0:  # pragma: no cover - dist/hops guarantee progress
            raise GraphError("no admissible step along the distance field")
        route.append(best)
        cost += best_w
        u = best
    return PathResult(True, tuple(int(graph.nodes[p]) for p in route), cost)


def path_to_context(path: PathResult, r_obs: int, r_goal: int, C: int,
                    previous: Sequence[int], rng: np.random.Generator) -> list[int]:
    """Fill context slots from a waypoint path.

    The slot list is ``[r_obs, interior..., r_goal]``.  Longer than ``C``: keep
    both ends and a uniform random subset of the interior, in path order.
    Shorter: overwrite the leading slots, keep the rest of ``previous``.
    No path: only the first two slots change.
    """
    if C < 2:
        raise ValueError("context size must be >= 2")
    previous = list(previous)
    if len(previous) != C:
        raise ValueError(f"previous context has {len(previous)} slots, expected {C}")
    if not path.found:
        return [r_obs, r_goal] + previous[2:]
    interior = list(path.nodes[1:-1])
    full = [r_obs] + interior + [r_goal]
    if len(full) > C:
        keep = np.sort(rng.choice(len(interior), size=C - 2, replace=False))
        return [r_obs] + [interior[i] for i in keep] + [r_goal]
    return full + previous[len(full):]
