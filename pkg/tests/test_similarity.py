import os

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from moesimvae import kernels
from moesimvae.config import SimilarityConfig
from moesimvae.errors import DataError, InputError, ParameterError
from moesimvae.similarity import (batch_similarity, knn_adjacency, label_adjacency, pairwise_sqdist,
                                  threshold_adjacency, validate_similarity)

BACKENDS = kernels.backends()


def test_knn_line_example():
    pts = np.array([[0.0], [1.0], [2.0], [10.0]])
    S = knn_adjacency(pts, 1)
    # 0<->1, 1 picks 0 (tie with 2 goes to lower index), 2->1, 10->2
    expected = np.array([[1, 1, 0, 0],
                         [1, 1, 1, 0],
                         [0, 1, 1, 1],
                         [0, 0, 1, 1]])
    np.testing.assert_array_equal(S, expected)


def test_knn_tie_break_prefers_lower_index():
    # point 0 is equidistant from 1 and 2; neither 2 nor 3 picks 0 back
    pts = np.array([[0.0], [-1.0], [1.0], [1.1]])
    for name, mod in BACKENDS.items():
        S = mod.knn_from_sqdist(pairwise_sqdist(pts), 1)
        assert S[0, 1] == 1 and S[0, 2] == 0, name


def test_knn_bounds():
    pts = np.zeros((4, 2))
    with pytest.raises(ParameterError):
        knn_adjacency(pts, 0)
    with pytest.raises(ParameterError):
        knn_adjacency(pts, 4)


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 40), st.integers(1, 8), st.integers(0, 2**31 - 1))
def test_knn_properties_and_backend_agreement(n, k, seed):
    k = min(k, n - 1)
    rng = np.random.default_rng(seed)
    pts = rng.integers(0, 4, size=(n, 2)).astype(float)  # many exact ties
    d = pairwise_sqdist(pts)
    results = {name: mod.knn_from_sqdist(d, k) for name, mod in BACKENDS.items()}
    ref = results["python"]
    for name, S in results.items():
        np.testing.assert_array_equal(S, ref, err_msg=name)
    assert np.array_equal(ref, ref.T)
    assert np.all(np.diag(ref) == 1)
    assert np.all(ref.sum(axis=1) - 1 >= k)


def test_threshold_adjacency():
    pts = np.array([[0.0, 0.0], [0.6, 0.8], [3.0, 0.0]])
    S = threshold_adjacency(pts, 1.0)
    np.testing.assert_array_equal(S, [[1, 1, 0], [1, 1, 0], [0, 0, 1]])
    with pytest.raises(ParameterError):
        threshold_adjacency(pts, 0.0)


def test_label_adjacency():
    np.testing.assert_array_equal(label_adjacency([2, 0, 2]), [[1, 0, 1], [0, 1, 0], [1, 0, 1]])


def test_validate_similarity():
    with pytest.raises(InputError):
        validate_similarity(np.ones((2, 3)))
    with pytest.raises(InputError):
        validate_similarity(np.array([[1, 0], [1, 1]]))
    with pytest.raises(InputError):
        validate_similarity(np.array([[1, 0.5], [0.5, 1]]))
    assert validate_similarity(np.eye(2)).dtype == np.uint8


def test_pairwise_sqdist_matches_direct():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((9, 4))
    direct = ((x[:, None] - x[None]) ** 2).sum(-1)
    np.testing.assert_allclose(pairwise_sqdist(x), direct, atol=1e-12)
    assert np.all(np.diag(pairwise_sqdist(x)) == 0)


def test_batch_similarity_sources():
    rng = np.random.default_rng(1)
    feats = rng.random((20, 3))
    emb = rng.random((20, 2))
    labels = np.arange(20) % 3
    idx = np.array([3, 7, 1, 12, 5])
    cfg = SimilarityConfig(k_neighbors=2)
    np.testing.assert_array_equal(batch_similarity(idx, feats, cfg), knn_adjacency(feats[idx], 2))
    cfg_e = SimilarityConfig(source="precomputed_embedding", k_neighbors=2)
    np.testing.assert_array_equal(batch_similarity(idx, feats, cfg_e, embedding=emb), knn_adjacency(emb[idx], 2))
    cfg_l = SimilarityConfig(source="labels")
    np.testing.assert_array_equal(batch_similarity(idx, feats, cfg_l, labels=labels), label_adjacency(labels[idx]))
    with pytest.raises(DataError):
        batch_similarity(idx, feats, cfg_l)
    with pytest.raises(DataError, match="12"):
        batch_similarity(idx, feats, cfg_e, embedding=emb[:10])


def test_batch_similarity_small_batches():
    feats = np.random.default_rng(2).random((5, 2))
    cfg = SimilarityConfig(k_neighbors=10)
    assert batch_similarity([3], feats, cfg).tolist() == [[1]]
    S = batch_similarity([0, 1, 2], feats, cfg)
    assert S.min() == 1  # k clamped to N-1 connects everything


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 30), st.booleans(), st.integers(0, 2**31 - 1))
def test_similarity_bce_kernel_backends_agree(n, diag, seed):
    rng = np.random.default_rng(seed)
    P = rng.dirichlet(np.ones(3), size=n)
    gram = P @ P.T
    gram[0, 0] = 1.0  # exercise the clamp
    A = rng.random((n, n)) < 0.4
    S = (A | A.T).astype(np.uint8)
    ref_total, ref_grad = BACKENDS["python"].similarity_bce(gram, S, diag, 1e-8)
    for name, mod in BACKENDS.items():
        total, grad = mod.similarity_bce(gram, S, diag, 1e-8)
        assert total == pytest.approx(ref_total, rel=1e-12), name
        np.testing.assert_allclose(grad, ref_grad, rtol=1e-12, err_msg=name)


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 25), st.integers(2, 25), st.integers(0, 2**31 - 1))
def test_rbf_and_block_sum_backends_agree(m, n, seed):
    rng = np.random.default_rng(seed)
    x, y = rng.standard_normal((m, 3)), rng.standard_normal((n, 3))
    ref_k = BACKENDS["python"].rbf_kernel(x, y, 1.3)
    pooled = np.concatenate([x, y])
    kk = BACKENDS["python"].rbf_kernel(pooled, pooled, 1.3)
    mask = rng.random(m + n) < 0.5
    ref_s = BACKENDS["python"].mmd_block_sums(kk, mask.astype(np.uint8))
    for name, mod in BACKENDS.items():
        np.testing.assert_allclose(mod.rbf_kernel(x, y, 1.3), ref_k, rtol=1e-12, err_msg=name)
        np.testing.assert_allclose(mod.mmd_block_sums(kk, mask.astype(np.uint8)), ref_s, rtol=1e-12, err_msg=name)


def test_compiled_backend_is_selected_when_built():
    if "cython" not in BACKENDS:
        pytest.skip("compiled extension not built")
    forced = os.environ.get("MOESIMVAE_PURE_PYTHON", "") not in ("", "0")
    assert kernels.BACKEND == ("python" if forced else "cython")
