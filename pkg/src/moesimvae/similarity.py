"""Per-batch binary similarity matrices (the targets the gating network factorises)."""
from __future__ import annotations

from typing import Optional

import numpy as np

from . import kernels
from .config import SimilarityConfig
from .errors import DataError, InputError, ParameterError


def pairwise_sqdist(points) -> np.ndarray:
    """Squared euclidean distances in float64, clipped at zero."""
    x = np.asarray(points, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    sq = np.einsum("ij,ij->i", x, x)
    d = sq[:, None] + sq[None, :] - 2.0 * (x @ x.T)
    np.maximum(d, 0.0, out=d)
    np.fill_diagonal(d, 0.0)
    return d


def knn_adjacency(points, k: int) -> np.ndarray:
    """Union-symmetrised k-nearest-neighbour graph with unit diagonal."""
    x = np.asarray(points, dtype=np.float64)
    n = x.shape[0]
    if not 1 <= k < n:
        raise ParameterError(f"knn needs 1 <= k < N, got k={k} with N={n}")
    return kernels.knn_from_sqdist(pairwise_sqdist(x), int(k))


def threshold_adjacency(points, eps: float) -> np.ndarray:
    """S_ij = 1 iff the euclidean distance between points i and j is at most ``eps``."""
    if not eps > 0:
        raise ParameterError(f"distance threshold must be positive, got {eps}")
    d = pairwise_sqdist(points)
    adj = (d <= eps * eps).astype(np.uint8)
    np.fill_diagonal(adj, 1)
    return adj


def label_adjacency(labels) -> np.ndarray:
    """Weak-supervision similarity: S_ij = 1 iff the labels agree."""
    y = np.asarray(labels)
    return (y[:, None] == y[None, :]).astype(np.uint8)


def validate_similarity(S) -> np.ndarray:
    S = np.asarray(S)
    if S.ndim != 2 or S.shape[0] != S.shape[1]:
        raise InputError(f"similarity matrix must be square, got shape {S.shape}")
    if not np.isin(S, (0, 1)).all():
        raise InputError("similarity matrix must be binary")
    if not np.array_equal(S, S.T):
        raise InputError("similarity matrix must be symmetric")
    return S.astype(np.uint8, copy=False)


def batch_similarity(batch_indices, features, config: SimilarityConfig,
                     embedding: Optional[np.ndarray] = None,
                     labels: Optional[np.ndarray] = None) -> np.ndarray:
    """Similarity matrix for the dataset rows ``batch_indices``.

    ``features`` are the raw dataset features, ``embedding`` an optional
    precomputed projection with one row per dataset sample. For kNN the
    neighbour count is reduced to ``N - 1`` on batches too small for it.
    """
    idx = np.asarray(batch_indices, dtype=np.intp)
    n = len(idx)
    if config.source == "labels":
        if labels is None:
            raise DataError("similarity source 'labels' needs a labelled dataset")
        return label_adjacency(np.asarray(labels)[idx])
    if config.source == "precomputed_embedding":
        if embedding is None:
            raise DataError("similarity source 'precomputed_embedding' needs an embedding")
        missing = idx[(idx < 0) | (idx >= len(embedding))]
        if missing.size:
            raise DataError(f"embedding has no rows for dataset indices {missing.tolist()}")
        points = np.asarray(embedding)[idx]
    else:
        points = np.asarray(features)[idx]
    if n == 1:
        return np.ones((1, 1), dtype=np.uint8)
    if config.method == "knn":
        return knn_adjacency(points, min(config.k_neighbors, n - 1))
    return threshold_adjacency(points, config.distance_threshold)
