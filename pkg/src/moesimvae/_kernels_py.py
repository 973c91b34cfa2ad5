"""Pure-numpy implementations of the pairwise kernels.

These are the reference semantics; ``_ckernels`` must agree with them.
"""
import numpy as np
from scipy.spatial.distance import cdist


def knn_from_sqdist(sqdist, k):
    """Union-symmetrised kNN adjacency from an N x N squared-distance matrix.

    Self is excluded from neighbour lists and distance ties go to the lower
    index. Returns a uint8 matrix with unit diagonal.
    """
    d = np.array(sqdist, dtype=np.float64)
    n = d.shape[0]
    np.fill_diagonal(d, np.inf)
    # stable sort keeps the lower column index first among equal distances
    nbrs = np.argsort(d, axis=1, kind="stable")[:, :k]
    adj = np.zeros((n, n), dtype=np.uint8)
    rows = np.repeat(np.arange(n), k)
    adj[rows, nbrs.ravel()] = 1
    adj |= adj.T
    np.fill_diagonal(adj, 1)
    return adj


def similarity_bce(gram, target, include_diagonal, eps):
    """Summed BCE between binary ``target`` and clamped ``gram``, plus d/d gram."""
    g = np.asarray(gram, dtype=np.float64)
    s = np.asarray(target, dtype=np.float64)
    inside = (g > eps) & (g < 1.0 - eps)
    gc = np.clip(g, eps, 1.0 - eps)
    terms = -(s * np.log(gc) + (1.0 - s) * np.log1p(-gc))
    grad = np.where(inside, -s / gc + (1.0 - s) / (1.0 - gc), 0.0)
    if not include_diagonal:
        np.fill_diagonal(terms, 0.0)
        np.fill_diagonal(grad, 0.0)
    return float(terms.sum()), grad


def rbf_kernel(x, y, bandwidth):
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    return np.exp(-cdist(x, y, "sqeuclidean") / (2.0 * bandwidth * bandwidth))


def mmd_block_sums(kmat, in_x):
    """Sums of the XX (off-diagonal), YY (off-diagonal) and XY kernel blocks.

    ``kmat`` is the kernel over the pooled sample and ``in_x`` a boolean mask
    selecting the X part; everything else is Y.
    """
    kmat = np.asarray(kmat, dtype=np.float64)
    mx = np.asarray(in_x, dtype=bool)
    my = ~mx
    kxx = kmat[np.ix_(mx, mx)]
    kyy = kmat[np.ix_(my, my)]
    sxx = kxx.sum() - np.trace(kxx)
    syy = kyy.sum() - np.trace(kyy)
    sxy = kmat[np.ix_(mx, my)].sum()
    return float(sxx), float(syy), float(sxy)
