"""K-means, cluster separation, nearest neighbours and partition agreement."""

from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations

import numpy as np

from .seeding import derive_seed


class KMeansError(RuntimeError):
    pass


@dataclass
class Clustering:
    k: int
    assignments: np.ndarray
    centroids: np.ndarray
    wcss: float
    seed: int
    restarts: int
    n_iter: int
    wcss_trace: list[float]


def _sq_dists(X: np.ndarray, C: np.ndarray) -> np.ndarray:
    d = (X * X).sum(1)[:, None] - 2 * X @ C.T + (C * C).sum(1)[None, :]
    return np.maximum(d, 0.0)


def _plusplus(X: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(X)
    centers = [X[rng.integers(n)]]
    d2 = _sq_dists(X, np.array(centers))[:, 0]
    for _ in range(1, k):
        total = d2.sum()
        idx = rng.integers(n) if total == 0 else rng.choice(n, p=d2 / total)
        centers.append(X[idx])
        d2 = np.minimum(d2, _sq_dists(X, X[idx:idx + 1])[:, 0])
    return np.array(centers)


def _wcss(X, labels, C) -> float:
    return float(((X - C[labels]) ** 2).sum())


def _lloyd(X: np.ndarray, C: np.ndarray, max_iter: int):
    trace = []
    labels = None
    it = 0
    for it in range(1, max_iter + 1):
        new = np.argmin(_sq_dists(X, C), axis=1)
        C = C.copy()
        for j in range(len(C)):
            members = new == j
            if members.any():
                C[j] = X[members].mean(axis=0)
            else:
                # re-seed an empty cluster from the point farthest from its centroid
                far = int(np.argmax(((X - C[new]) ** 2).sum(1)))
                C[j] = X[far]
                new[far] = j
        w = _wcss(X, new, C)
        if trace and w > trace[-1] * (1 + 1e-12) + 1e-12:
            raise KMeansError(f"WCSS increased at iteration {it}: {trace[-1]} -> {w}")
        trace.append(w)
        if labels is not None and np.array_equal(new, labels):
            break
        labels = new
    labels = np.argmin(_sq_dists(X, C), axis=1) if labels is None else labels
    return labels, C, trace, it


def kmeans(vectors, k: int, restarts: int = 10, seed: int = 0, max_iter: int = 300,
           normalize: bool = False) -> Clustering:
    """Lloyd's algorithm with k-means++ seeding; best of ``restarts`` by WCSS (ties: first)."""
    X = np.asarray(vectors, dtype=np.float64)
    if normalize:
        norms = np.linalg.norm(X, axis=1, keepdims=True)
        X = X / np.where(norms > 0, norms, 1.0)
    if k <= 0:
        raise ValueError("k must be positive")
    if k > len(X):
        raise ValueError(f"k={k} exceeds number of vectors {len(X)}")
    best = None
    for r in range(restarts):
        rng = np.random.default_rng(derive_seed(seed, "kmeans", r))
        labels, C, trace, it = _lloyd(X, _plusplus(X, k, rng), max_iter)
        w = _wcss(X, labels, C)
        if best is None or w < best.wcss:
            best = Clustering(k, labels, C, w, seed, restarts, it, trace)
    return best


@dataclass
class SeparationReport:
    pairs: list[tuple[int, int]]
    distance: np.ndarray
    spread: np.ndarray       # sqrt of the mean of the two clusters' projected variances
    ratio: np.ndarray        # distance / spread; inf if spread == 0, nan if distance == 0

    def fraction_above(self, threshold: float = 2.0) -> float:
        ok = ~np.isnan(self.ratio)
        return float(np.mean(self.ratio[ok] > threshold)) if ok.any() else float("nan")


def cluster_separation(vectors, clustering: Clustering, max_pairs: int | None = 100,
                       seed: int = 0) -> SeparationReport:
    X = np.asarray(vectors, dtype=np.float64)
    labels = clustering.assignments
    ids = [c for c in range(clustering.k) if (labels == c).sum() >= 2]
    if len(ids) < 2:
        raise ValueError("need at least two clusters with two or more members")
    pairs = list(combinations(ids, 2))
    if max_pairs is not None and len(pairs) > max_pairs:
        rng = np.random.default_rng(derive_seed(seed, "pairs"))
        pick = np.sort(rng.choice(len(pairs), size=max_pairs, replace=False))
        pairs = [pairs[i] for i in pick]
    dist, spread, ratio = [], [], []
    for a, b in pairs:
        ca = X[labels == a].mean(axis=0)
        cb = X[labels == b].mean(axis=0)
        delta = cb - ca
        dn = float(np.linalg.norm(delta))
        if dn == 0:
            dist.append(0.0)
            spread.append(float("nan"))
            ratio.append(float("nan"))
            continue
        u = delta / dn
        va = np.var(X[labels == a] @ u)
        vb = np.var(X[labels == b] @ u)
        s = float(np.sqrt(0.5 * (va + vb)))
        dist.append(dn)
        spread.append(s)
        ratio.append(dn / s if s > 0 else float("inf"))
    return SeparationReport(pairs, np.array(dist), np.array(spread), np.array(ratio))


def nearest_neighbors(target, corpus, metric: str = "cosine", k: int = 5) -> tuple[np.ndarray, np.ndarray]:
    """Indices of the k corpus rows nearest to ``target`` and their scores.

    ``cosine`` ranks by descending similarity, ``euclidean`` by ascending
    distance; ties are broken by ascending index. Images may be passed
    directly (they are flattened) for pixel-space comparisons.
    """
    C = np.asarray(corpus, dtype=np.float64).reshape(len(corpus), -1)
    t = np.asarray(target, dtype=np.float64).reshape(-1)
    if len(C) == 0:
        raise ValueError("empty corpus")
    k = min(k, len(C))
    if metric == "cosine":
        norms = np.linalg.norm(C, axis=1) * np.linalg.norm(t)
        score = np.where(norms > 0, C @ t / np.where(norms > 0, norms, 1.0), 0.0)
        key = -score
    elif metric == "euclidean":
        score = np.sqrt(((C - t) ** 2).sum(axis=1))
        key = score
    else:
        raise ValueError(f"unknown metric {metric!r}")
    order = np.lexsort((np.arange(len(C)), key))[:k]
    return order, score[order]


def _comb2(n):
    n = np.asarray(n, dtype=np.float64)
    return n * (n - 1) / 2


def agreement(assignments, labels) -> float:
    """Adjusted Rand index between two partitions.

    When the expected index equals its maximum (e.g. one side is a single
    cluster) the index is 0/0; we return 1.0 if the partitions are identical
    and 0.0 otherwise.
    """
    a = np.asarray(assignments)
    b = np.asarray(labels)
    if a.shape != b.shape:
        raise ValueError("partitions must have equal length")
    _, ai = np.unique(a, return_inverse=True)
    _, bi = np.unique(b, return_inverse=True)
    table = np.zeros((ai.max() + 1, bi.max() + 1))
    np.add.at(table, (ai, bi), 1)
    index = _comb2(table).sum()
    sa = _comb2(table.sum(axis=1)).sum()
    sb = _comb2(table.sum(axis=0)).sum()
    total = _comb2(len(a))
    expected = sa * sb / total if total > 0 else 0.0
    maximum = 0.5 * (sa + sb)
    if maximum == expected:
        return 1.0 if (table.shape[0] == table.shape[1] and (table > 0).sum() == table.shape[0]) else 0.0
    return float((index - expected) / (maximum - expected))
