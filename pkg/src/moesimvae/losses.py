"""Training objectives.

All losses are averaged over the batch (divided by N) so that the weighting
coefficients do not depend on the batch size. Logs are taken of values
clamped to ``[EPS, 1 - EPS]``, evaluated in float64.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from . import kernels
from .autodiff import Tensor
from .errors import DimensionError, DomainError, TrainingError
from .similarity import validate_similarity

EPS = 1e-8
VARIANCE_FLOOR = 1e-6


@dataclass
class LossBreakdown:
    reconst: float
    kl: float
    similarity: float
    depict: float
    total: float

    def as_dict(self) -> dict:
        return asdict(self)


def _const(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x)


def reconstruction_bce(x, x_reconst) -> Tensor:
    """Binary cross-entropy summed over features, averaged over samples."""
    target = _const(x).astype(np.float64)
    if target.size and (target.min() < 0.0 or target.max() > 1.0):
        raise DomainError("reconstruction targets must lie in [0, 1]")
    pred = ad.as_tensor(x_reconst)
    if pred.shape != target.shape:
        raise DimensionError(f"reconstruction shapes differ: {target.shape} vs {pred.shape}")
    n = max(target.shape[0], 1) if target.ndim else 1
    p = pred.data.astype(np.float64)
    pc = np.clip(p, EPS, 1.0 - EPS)
    value = -(target * np.log(pc) + (1.0 - target) * np.log1p(-pc)).sum() / n

    def bw(g):
        inside = (p > EPS) & (p < 1.0 - EPS)
        grad = np.where(inside, (-target / pc + (1.0 - target) / (1.0 - pc)) / n, 0.0)
        return (grad * g,)

    return ad.apply_op(np.asarray(value, dtype=pred.dtype), (pred,), bw)


def kl_per_cluster(variances) -> float:
    """Closed-form KL(N(mu, I) || N(mu, diag(variances)))."""
    v = np.maximum(np.asarray(variances, dtype=np.float64), VARIANCE_FLOOR)
    return 0.5 * float(np.sum(1.0 / v) - v.size + np.sum(np.log(v)))


def kl_mixture(z, P, assignments, soft: bool = False) -> Tensor:
    """Covariance penalty pulling every latent cluster towards unit variance.

    For each cluster with at least two argmax members the diagonal variance
    of its latent codes (unbiased, around the empirical cluster mean) is
    compared with the identity; the result is averaged over those clusters.
    With ``soft=True`` the members are weighted by their (constant)
    responsibilities instead.
    """
    z = ad.as_tensor(z)
    probs = _const(P)
    assignments = np.asarray(assignments)
    d = z.shape[1]
    terms = []
    for k in range(probs.shape[1]):
        idx = np.flatnonzero(assignments == k)
        if len(idx) < 2:
            continue
        zk = ad.take_rows(z, idx)
        if soft:
            w = probs[idx, k].astype(z.dtype)[:, None]
            wsum = float(w.sum())
            centre = ad.sum(zk * w, axis=0, keepdims=True) / wsum
            var = ad.sum(ad.square(zk - centre) * w, axis=0) / wsum
        else:
            centre = ad.mean(zk, axis=0, keepdims=True)
            var = ad.sum(ad.square(zk - centre), axis=0) / (len(idx) - 1)
        var = ad.clamp_min(var, VARIANCE_FLOOR)
        terms.append(0.5 * (ad.sum(1.0 / var) - d + ad.sum(ad.log(var))))
    if not terms:
        return Tensor(0.0, dtype=z.dtype)
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return total / len(terms)


def similarity_bce(S, P, include_diagonal: bool = True) -> Tensor:
    """BCE between the binary similarity matrix and P P^T, averaged over rows."""
    S = validate_similarity(S)
    P = ad.as_tensor(P)
    n = P.shape[0]
    if S.shape != (n, n):
        raise DimensionError(f"similarity matrix {S.shape} does not match {n} samples")
    p64 = P.data.astype(np.float64)
    total, dgram = kernels.similarity_bce(p64 @ p64.T, S, include_diagonal, EPS)

    def bw(g):
        return ((dgram + dgram.T) @ p64 * (g / n),)

    return ad.apply_op(np.asarray(total / n, dtype=P.dtype), (P,), bw)


def depict_targets(P) -> np.ndarray:
    """Sharpened, column-balanced targets computed from clean probabilities.

    The result is a constant: no gradient flows through it.
    """
    p = _const(P).astype(np.float64)
    weighted = p / np.sqrt(np.maximum(p.sum(axis=0, keepdims=True), EPS))
    return weighted / weighted.sum(axis=1, keepdims=True)


def depict_loss(Q, P_noisy) -> Tensor:
    """Cross-entropy of the noisy probabilities against the targets ``Q``."""
    q = _const(Q).astype(np.float64)
    P_noisy = ad.as_tensor(P_noisy)
    n = P_noisy.shape[0]
    p = P_noisy.data.astype(np.float64)
    pc = np.maximum(p, EPS)
    value = -(q * np.log(pc)).sum() / n

    def bw(g):
        return (np.where(p > EPS, -q / pc, 0.0) * (g / n),)

    return ad.apply_op(np.asarray(value, dtype=P_noisy.dtype), (P_noisy,), bw)


def total_loss(reconst, kl, similarity, depict, pi1: float = 1.0, pi2: float = 1.0):
    """Weighted sum of the four components.

    Returns the differentiable total and a :class:`LossBreakdown` of floats.
    Raises :class:`TrainingError` naming the first non-finite component.
    """
    parts = {"reconst": reconst, "kl": kl, "similarity": similarity, "depict": depict}
    values = {}
    for name, t in parts.items():
        v = t.item() if isinstance(t, Tensor) else float(t)
        if not math.isfinite(v):
            raise TrainingError(f"loss component {name!r} is not finite ({v})", component=name)
        values[name] = v
    total = ad.as_tensor(reconst) + pi1 * ad.as_tensor(kl) + ad.as_tensor(similarity) \
        + pi2 * ad.as_tensor(depict)
    exact = values["reconst"] + pi1 * values["kl"] + values["similarity"] + pi2 * values["depict"]
    breakdown = LossBreakdown(total=exact, **values)
    return total, breakdown
