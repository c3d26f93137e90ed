"""Rank-correlation and top-K ranking metrics."""

from __future__ import annotations

import math

import numpy as np

from .errors import DimensionError, UndefinedCorrelationError


def _average_ranks(x: np.ndarray) -> np.ndarray:
    """Fractional ranks (1-based); tied values share the average rank."""
    order = np.argsort(x, kind="mergesort")
    ranks = np.empty(len(x))
    sx = x[order]
    i = 0
    while i < len(sx):
        j = i
        while j + 1 < len(sx) and sx[j + 1] == sx[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def spearman(a, b) -> float:
    """Spearman correlation: Pearson correlation of average fractional ranks."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 1 or a.shape != b.shape:
        raise DimensionError(f"spearman: incompatible shapes {a.shape} and {b.shape}")
    if len(a) < 2:
        raise DimensionError("spearman: need at least 2 entries")
    ra = _average_ranks(a)
    rb = _average_ranks(b)
    ra -= ra.mean()
    rb -= rb.mean()
    va = float(ra @ ra)
    vb = float(rb @ rb)
    if va == 0.0 or vb == 0.0:
        raise UndefinedCorrelationError("spearman undefined for a constant vector")
    return float(ra @ rb) / math.sqrt(va * vb)


def spearman_oracle(a, b) -> float:
    """Naive O(n^2) Spearman: ranks by pairwise counting, then Pearson."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)

    def counted_ranks(x):
        r = np.empty(len(x))
        for i in range(len(x)):
            less = sum(1 for y in x if y < x[i])
            equal = sum(1 for y in x if y == x[i])
            r[i] = less + (equal + 1) / 2.0
        return r

    ra = counted_ranks(a)
    rb = counted_ranks(b)
    ra -= ra.mean()
    rb -= rb.mean()
    va = float(ra @ ra)
    vb = float(rb @ rb)
    if va == 0.0 or vb == 0.0:
        raise UndefinedCorrelationError("spearman undefined for a constant vector")
    return float(ra @ rb) / math.sqrt(va * vb)


def rank_items(scores: np.ndarray, item_ids: np.ndarray) -> np.ndarray:
    """Item ids ordered by descending score; ties broken by ascending id."""
    scores = np.asarray(scores, dtype=np.float64)
    item_ids = np.asarray(item_ids, dtype=np.int64)
    order = np.lexsort((item_ids, -scores))
    return item_ids[order]


def recall_at_k(ranked_ids, relevant, k: int) -> float:
    """Fraction of the relevant set appearing in the top k."""
    rel = set(relevant)
    if not rel:
        raise DimensionError("recall_at_k: empty relevant set")
    hits = sum(1 for i in list(ranked_ids)[:k] if i in rel)
    return hits / len(rel)


def ndcg_at_k(ranked_ids, relevant, k: int) -> float:
    """Binary-gain NDCG with log2 discount, normalized by the ideal DCG."""
    rel = set(relevant)
    if not rel:
        raise DimensionError("ndcg_at_k: empty relevant set")
    dcg = 0.0
    for rank, i in enumerate(list(ranked_ids)[:k], start=1):
        if i in rel:
            dcg += 1.0 / math.log2(rank + 1)
    ideal = sum(1.0 / math.log2(r + 1) for r in range(1, min(k, len(rel)) + 1))
    return dcg / ideal
