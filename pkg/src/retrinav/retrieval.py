"""Ranking on top of the store: MMR diversification, goal and category retrieval."""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .embedstore import EmbeddingStore, StoreError

DEFAULT_SHORTLIST = 100
DEFAULT_BETA = 0.5
DEFAULT_CATEGORY_K = 9


class RetrievalError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Shortlist:
    """Top-ranked candidates with their relevance and mutual similarities."""

    indices: np.ndarray      # record indices, relevance-descending
    frame_ids: np.ndarray
    relevance: np.ndarray    # float64, one per entry
    pairwise: np.ndarray     # symmetric, unit diagonal

    def __len__(self) -> int:
        return len(self.indices)


def build_shortlist(store: EmbeddingStore, scene: str, query, shortlist_size: int = DEFAULT_SHORTLIST) -> Shortlist:
    if shortlist_size < 1:
        raise RetrievalError("shortlist_size must be >= 1")
    ranked = store.topk(scene, query, shortlist_size)
    indices = np.array([i for i, _ in ranked], dtype=np.int64)
    vecs = store.vectors(indices).astype(np.float64)
    omega = vecs @ vecs.T
    omega = 0.5 * (omega + omega.T)
    np.fill_diagonal(omega, 1.0)
    return Shortlist(
        indices=indices,
        frame_ids=np.array([store.record(int(i)).frame_id for i in indices], dtype=np.uint64),
        relevance=np.array([s for _, s in ranked], dtype=np.float64),
        pairwise=omega,
    )


def mmr_scores(relevance: np.ndarray, max_sim: np.ndarray, beta: float) -> np.ndarray:
    """beta * relevance - (1 - beta) * redundancy, elementwise."""
    return beta * relevance - (1.0 - beta) * max_sim


def mmr_rerank(shortlist: Shortlist, n: int, beta: float = DEFAULT_BETA) -> list[int]:
    """Greedy maximal-marginal-relevance selection of ``n`` record indices.

    The first pick is the most relevant entry; every later pick maximizes
    ``beta * relevance - (1 - beta) * max similarity to already picked``.
    Exact ties go to the lower frame id.
    """
    m = len(shortlist)
    if m == 0:
        raise RetrievalError("empty shortlist")
    if not 0.0 <= beta <= 1.0:
        raise RetrievalError("beta must lie in [0, 1]")
    n = min(int(n), m)
    fids = shortlist.frame_ids
    remaining = np.ones(m, dtype=bool)
    max_sim = np.full(m, -np.inf)
    picked: list[int] = []
    for step in range(n):
        if step == 0:
            crit = shortlist.relevance.copy()
        else:
            crit = mmr_scores(shortlist.relevance, max_sim, beta)
        cand = np.flatnonzero(remaining)
        best = crit[cand].max()
        tied = cand[crit[cand] == best]
        choice = int(tied[np.argmin(fids[tied])])
        picked.append(choice)
        remaining[choice] = False
        max_sim = np.maximum(max_sim, shortlist.pairwise[choice])
    return [int(shortlist.indices[p]) for p in picked]


def retrieve_goal(store: EmbeddingStore, scene: str, goal_embedding) -> int:
    """Database stand-in for a goal: its nearest neighbour in the scene."""
    return store.topk(scene, goal_embedding, 1)[0][0]


@dataclass(frozen=True, eq=False)
class CategoryTable:
    """Raw per-image category scores of one scene, optionally softmax-normalized."""

    categories: tuple[str, ...]
    indices: np.ndarray          # record indices, one row each
    frame_ids: np.ndarray
    scores: np.ndarray           # (rows, |categories|)
    normalized: np.ndarray | None = None

    @classmethod
    def from_store(cls, store: EmbeddingStore, scene: str,
                   categories: Sequence[str] | None = None) -> "CategoryTable":
        idx = store.scene_indices(scene)
        recs = [store.record(int(i)) for i in idx]
        if categories is None:
            names: set[str] = set()
            for r in recs:
                names.update(r.category_scores or {})
            categories = sorted(names)
        categories = tuple(categories)
        if not categories:
            raise RetrievalError(f"scene {scene!r} has no category scores")
        scores = np.empty((len(recs), len(categories)))
        for row, rec in enumerate(recs):
            cs = rec.category_scores or {}
            missing = [c for c in categories if c not in cs]
            if missing:
                raise RetrievalError(f"frame {rec.frame_id} lacks scores for {missing}")
            scores[row] = [cs[c] for c in categories]
        return cls(categories, idx, np.array([r.frame_id for r in recs], dtype=np.uint64), scores)


def softmax_normalize(table: CategoryTable) -> CategoryTable:
    """Per-image softmax over the category set."""
    raw = np.asarray(table.scores, dtype=np.float64)
    if raw.ndim != 2 or raw.shape[1] < 1:
        raise RetrievalError("need at least one category")
    if not np.all(np.isfinite(raw)):
        raise RetrievalError("category scores must be finite")
    shifted = raw - raw.max(axis=1, keepdims=True)
    ex = np.exp(shifted)
    return replace(table, normalized=ex / ex.sum(axis=1, keepdims=True))


def retrieve_category(store: EmbeddingStore, scene: str, table: CategoryTable, category: str,
                      k: int = DEFAULT_CATEGORY_K) -> list[int]:
    """Scene images ranked by normalized score for ``category``."""
    if category not in table.categories:
        raise RetrievalError(f"unknown category {category!r}")
    if table.normalized is None:
        raise RetrievalError("table has not been normalized")
    if k < 1:
        raise RetrievalError("k must be >= 1")
    scene_idx = set(store.scene_indices(scene).tolist())
    rows = np.array([r for r, i in enumerate(table.indices) if int(i) in scene_idx], dtype=np.int64)
    if rows.size == 0:
        raise StoreError(f"no table rows for scene {scene!r}")
    col = table.categories.index(category)
    w = table.normalized[rows, col]
    order = np.lexsort((table.frame_ids[rows], -w))[:k]
    return [int(table.indices[rows[o]]) for o in order]
