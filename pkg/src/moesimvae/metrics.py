"""Clustering quality metrics and MMD-based cluster separation."""
from __future__ import annotations

import io
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial.distance import pdist

from . import kernels
from .errors import InputError, ParameterError


@dataclass
class ContingencyTable:
    counts: np.ndarray  # C x K, rows are true labels
    true_ids: np.ndarray
    pred_ids: np.ndarray

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def row_sums(self) -> np.ndarray:
        return self.counts.sum(axis=1)

    @property
    def col_sums(self) -> np.ndarray:
        return self.counts.sum(axis=0)


def _pair(labels_true, labels_pred):
    t = np.asarray(labels_true).ravel()
    p = np.asarray(labels_pred).ravel()
    if t.shape != p.shape:
        raise InputError(f"label vectors differ in length: {t.size} vs {p.size}")
    if t.size == 0:
        raise InputError("label vectors are empty")
    return t, p


def contingency(labels_true, labels_pred) -> ContingencyTable:
    t, p = _pair(labels_true, labels_pred)
    true_ids, ti = np.unique(t, return_inverse=True)
    pred_ids, pi = np.unique(p, return_inverse=True)
    counts = np.zeros((len(true_ids), len(pred_ids)), dtype=np.int64)
    np.add.at(counts, (ti, pi), 1)
    return ContingencyTable(counts, true_ids, pred_ids)


def _entropy(counts: np.ndarray, n: int) -> float:
    p = counts[counts > 0] / n
    return float(-(p * np.log(p)).sum())


def nmi(labels_true, labels_pred) -> float:
    """Mutual information normalised by the geometric mean of the entropies."""
    table = contingency(labels_true, labels_pred)
    n = table.total
    h_t = _entropy(table.row_sums, n)
    h_p = _entropy(table.col_sums, n)
    if h_t == 0.0 or h_p == 0.0:
        return 1.0 if h_t == h_p else 0.0
    c = table.counts.astype(np.float64)
    nz = c > 0
    outer = np.outer(table.row_sums, table.col_sums).astype(np.float64)
    mi = float((c[nz] / n * np.log(c[nz] * n / outer[nz])).sum())
    return float(np.clip(mi / np.sqrt(h_t * h_p), 0.0, 1.0))


def clustering_accuracy(labels_true, labels_pred) -> float:
    """Best one-to-one matched fraction (Hungarian assignment)."""
    table = contingency(labels_true, labels_pred)
    rows, cols = linear_sum_assignment(-table.counts)
    return float(table.counts[rows, cols].sum() / table.total)


def f_measure(labels_true, labels_pred) -> float:
    """Unweighted mean over true populations of the best-matching cluster F1.

    Several populations may pick the same cluster.
    """
    table = contingency(labels_true, labels_pred)
    c = table.counts.astype(np.float64)
    precision = c / table.col_sums[None, :]
    recall = c / table.row_sums[:, None]
    denom = precision + recall
    f1 = np.divide(2.0 * precision * recall, denom, out=np.zeros_like(c), where=denom > 0)
    return float(f1.max(axis=1).mean())


# -- MMD ----------------------------------------------------------------------

def _mmd_from_sums(sxx, syy, sxy, m, n) -> float:
    return sxx / (m * (m - 1)) + syy / (n * (n - 1)) - 2.0 * sxy / (m * n)


def mmd2_unbiased(X, Y, bandwidth: float) -> float:
    """Unbiased U-statistic estimate of MMD^2 under an RBF kernel."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    Y = np.atleast_2d(np.asarray(Y, dtype=np.float64))
    m, n = len(X), len(Y)
    if m < 2 or n < 2:
        raise ParameterError(f"MMD needs at least two samples per set, got {m} and {n}")
    if X.shape[1] != Y.shape[1]:
        raise InputError(f"sample dimensions differ: {X.shape[1]} vs {Y.shape[1]}")
    if not bandwidth > 0:
        raise ParameterError(f"bandwidth must be positive, got {bandwidth}")
    pooled = np.concatenate([X, Y])
    kmat = kernels.rbf_kernel(pooled, pooled, bandwidth)
    mask = np.zeros(m + n, dtype=np.uint8)
    mask[:m] = 1
    return _mmd_from_sums(*kernels.mmd_block_sums(kmat, mask), m, n)


def median_bandwidth(z, max_points: int = 1000, seed: int = 0) -> float:
    """Median pairwise Euclidean distance (on a seeded subsample when large)."""
    z = np.asarray(z, dtype=np.float64)
    if len(z) > max_points:
        z = z[np.random.default_rng(seed).choice(len(z), max_points, replace=False)]
    d = pdist(z)
    d = d[d > 0]
    return float(np.median(d)) if d.size else 1.0


def permutation_null(X, Y, bandwidth: float, n_permutations: int = 100, seed: int = 0) -> np.ndarray:
    """MMD^2 under random relabelings of the pooled sample."""
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    m, n = len(X), len(Y)
    pooled = np.concatenate([X, Y])
    kmat = kernels.rbf_kernel(pooled, pooled, bandwidth)
    rng = np.random.default_rng(seed)
    out = np.empty(n_permutations)
    mask = np.zeros(m + n, dtype=np.uint8)
    for i in range(n_permutations):
        mask[:] = 0
        mask[rng.permutation(m + n)[:m]] = 1
        out[i] = _mmd_from_sums(*kernels.mmd_block_sums(kmat, mask), m, n)
    return out


@dataclass
class MmdReport:
    cluster_ids: list[int]
    statistics: np.ndarray  # symmetric; diagonal = split-half statistic
    bandwidth: float
    counts: list[int]
    null_sd: np.ndarray  # permutation-null SD of each diagonal entry
    warnings: list[str] = field(default_factory=list)

    def diagonal(self) -> np.ndarray:
        return np.diag(self.statistics).copy()

    def off_diagonal(self) -> np.ndarray:
        k = len(self.cluster_ids)
        return self.statistics[~np.eye(k, dtype=bool)]

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("cluster," + ",".join(str(c) for c in self.cluster_ids) + "\n")
        for c, row in zip(self.cluster_ids, self.statistics):
            buf.write(f"{c}," + ",".join(repr(float(v)) for v in row) + "\n")
        return buf.getvalue()

    def as_dict(self) -> dict:
        return {
            "cluster_ids": list(self.cluster_ids),
            "statistics": self.statistics.tolist(),
            "bandwidth": self.bandwidth,
            "counts": list(self.counts),
            "null_sd": self.null_sd.tolist(),
            "warnings": list(self.warnings),
        }


def cluster_separation_report(z, assignments, bandwidth: Optional[float] = None, seed: int = 0,
                              max_per_cluster: int = 500, n_permutations: int = 100) -> MmdReport:
    """Pairwise MMD^2 between clusters of latent codes.

    Each diagonal entry compares two disjoint random halves of one cluster,
    each off-diagonal entry compares two clusters. Clusters are subsampled to
    ``max_per_cluster`` points; clusters with fewer than 4 members are skipped
    with a warning.
    """
    z = np.asarray(z, dtype=np.float64)
    assignments = np.asarray(assignments)
    if len(z) != len(assignments):
        raise InputError(f"{len(z)} codes but {len(assignments)} assignments")
    rng = np.random.default_rng(seed)
    if bandwidth is None:
        bandwidth = median_bandwidth(z, seed=seed)
    ids, members, warnings = [], [], []
    for c in np.unique(assignments):
        idx = np.flatnonzero(assignments == c)
        if len(idx) < 4:
            warnings.append(f"cluster {int(c)} skipped: {len(idx)} members (< 4)")
            continue
        if len(idx) > max_per_cluster:
            idx = np.sort(rng.choice(idx, max_per_cluster, replace=False))
        ids.append(int(c))
        members.append(idx)
    k = len(ids)
    stats = np.zeros((k, k))
    null_sd = np.zeros(k)
    for a in range(k):
        idx = rng.permutation(members[a])
        half = len(idx) // 2
        xa, xb = z[idx[:half]], z[idx[half:2 * half]]
        stats[a, a] = mmd2_unbiased(xa, xb, bandwidth)
        null_sd[a] = permutation_null(xa, xb, bandwidth, n_permutations, seed=seed + a).std(ddof=1)
        for b in range(a + 1, k):
            stats[a, b] = stats[b, a] = mmd2_unbiased(z[members[a]], z[members[b]], bandwidth)
    counts = [int((assignments == c).sum()) for c in ids]
    return MmdReport(ids, stats, float(bandwidth), counts, null_sd, warnings)
