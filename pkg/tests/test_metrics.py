import itertools
import math

import numpy as np
import pytest
from sklearn.metrics import normalized_mutual_info_score

from moesimvae.errors import InputError, ParameterError
from moesimvae.metrics import (cluster_separation_report, clustering_accuracy, contingency, f_measure,
                               median_bandwidth, mmd2_unbiased, nmi)


def brute_force_accuracy(t, p):
    t_ids, p_ids = np.unique(t), np.unique(p)
    best = 0
    size = max(len(t_ids), len(p_ids))
    tt = list(t_ids) + [None] * (size - len(t_ids))
    for perm in itertools.permutations(tt):
        mapping = dict(zip(p_ids, perm))
        best = max(best, sum(mapping.get(pi) == ti for ti, pi in zip(t, p)))
    return best / len(t)


def test_nmi_examples():
    assert nmi([0, 0, 1, 1], [1, 1, 0, 0]) == pytest.approx(1.0)
    assert nmi([0, 0, 1, 1], [0, 0, 0, 0]) == 0.0
    assert nmi([0, 0, 1, 1], [0, 1, 0, 1]) == pytest.approx(0.0, abs=1e-12)


def test_nmi_matches_sklearn_geometric():
    rng = np.random.default_rng(0)
    for _ in range(50):
        n = rng.integers(2, 60)
        t, p = rng.integers(0, 4, n), rng.integers(0, 5, n)
        ref = normalized_mutual_info_score(t, p, average_method="geometric")
        assert nmi(t, p) == pytest.approx(ref, abs=1e-10)


def test_accuracy_examples():
    assert clustering_accuracy([0, 0, 1, 1, 2, 2], [1, 1, 0, 2, 2, 2]) == pytest.approx(5 / 6)
    assert clustering_accuracy([3], [7]) == 1.0
    assert clustering_accuracy([0, 1, 2, 2], [2, 0, 1, 1]) == 1.0


def test_f_measure_examples():
    assert f_measure([0, 0, 1, 1], [5, 5, 9, 9]) == 1.0
    assert f_measure([0, 0, 1, 1], [0, 0, 0, 0]) == pytest.approx(2 / 3, abs=1e-9)
    t = [0, 0, 0, 1, 1, 2]
    p = [1, 1, 0, 0, 2, 2]
    assert f_measure(t, p) == pytest.approx(f_measure(t, [7 if v == 1 else 3 if v == 2 else 5 for v in p]))


def test_f_measure_hand_value():
    # population 0: best cluster 1 (prec 1, rec 2/3) -> 0.8; population 1: cluster 0 and 2 tie at 0.5
    t = [0, 0, 0, 1, 1]
    p = [1, 1, 0, 0, 2]
    f0 = 2 * 1 * (2 / 3) / (1 + 2 / 3)
    f1 = max(2 * 0.5 * 0.5 / 1.0, 2 * 1 * 0.5 / 1.5)
    assert f_measure(t, p) == pytest.approx((f0 + f1) / 2, abs=1e-12)


def test_f_measure_moving_misassigned_point_does_not_decrease():
    t = np.array([0, 0, 0, 0, 1, 1, 1, 1])
    p = np.array([0, 0, 0, 1, 1, 1, 1, 0])
    before = f_measure(t, p)
    p2 = p.copy()
    p2[3] = 0
    assert f_measure(t, p2) >= before
    p3 = p2.copy()
    p3[7] = 1
    assert f_measure(t, p3) >= f_measure(t, p2)


def test_metric_length_mismatch():
    for fn in (nmi, clustering_accuracy, f_measure):
        with pytest.raises(InputError):
            fn([0, 1], [0])


def test_contingency_marginals():
    table = contingency([0, 1, 1, 2], [5, 5, 6, 6])
    assert table.total == 4
    np.testing.assert_array_equal(table.row_sums, [1, 2, 1])
    np.testing.assert_array_equal(table.col_sums, [2, 2])


def test_mmd_hand_value():
    value = mmd2_unbiased([[0.0], [0.0]], [[10.0], [10.0]], bandwidth=1.0)
    assert value == pytest.approx(2.0 - 2.0 * math.exp(-50.0), abs=1e-12)


def test_mmd_translation_invariance_and_errors():
    rng = np.random.default_rng(1)
    x, y = rng.standard_normal((20, 3)), rng.standard_normal((15, 3)) + 1
    assert mmd2_unbiased(x + 7, y + 7, 1.5) == pytest.approx(mmd2_unbiased(x, y, 1.5), abs=1e-12)
    with pytest.raises(ParameterError):
        mmd2_unbiased(x[:1], y, 1.0)
    with pytest.raises(ParameterError):
        mmd2_unbiased(x, y, 0.0)


def test_mmd_null_mean_is_zero():
    rng = np.random.default_rng(2)
    vals = [mmd2_unbiased(rng.standard_normal((30, 2)), rng.standard_normal((30, 2)), 1.0) for _ in range(300)]
    mean, se = np.mean(vals), np.std(vals, ddof=1) / np.sqrt(len(vals))
    assert abs(mean) < 3 * se
    assert min(vals) < 0  # unbiased estimator goes negative


def test_median_bandwidth():
    x = np.array([[0.0], [1.0], [3.0]])
    assert median_bandwidth(x) == 2.0


def test_separation_report_blobs():
    rng = np.random.default_rng(3)
    z = np.concatenate([rng.standard_normal((200, 2)), rng.standard_normal((200, 2)) + 10.0])
    assign = np.repeat([0, 1], 200)
    rep = cluster_separation_report(z, assign, seed=0)
    assert np.allclose(rep.statistics, rep.statistics.T)
    assert rep.off_diagonal().min() > 10 * np.abs(rep.diagonal()).max()
    assert np.all(np.abs(rep.diagonal()) < 3 * rep.null_sd)
    assert rep.to_csv().splitlines()[0] == "cluster,0,1"


def test_separation_report_single_blob_split():
    rng = np.random.default_rng(4)
    z = rng.standard_normal((400, 2))
    assign = rng.integers(0, 2, 400)
    rep = cluster_separation_report(z, assign, seed=1)
    assert np.all(np.abs(rep.statistics) < 3 * rep.null_sd.max())


def test_separation_report_skips_small_clusters():
    z = np.random.default_rng(5).standard_normal((23, 2))
    assign = np.array([0] * 20 + [1] * 3)
    rep = cluster_separation_report(z, assign)
    assert rep.cluster_ids == [0]
    assert "cluster 1" in rep.warnings[0]


def test_accuracy_matches_brute_force():
    rng = np.random.default_rng(6)
    for _ in range(50):
        k = rng.integers(1, 5)
        n = rng.integers(1, 25)
        t, p = rng.integers(0, k, n), rng.integers(0, k, n)
        assert clustering_accuracy(t, p) == pytest.approx(brute_force_accuracy(t, p), abs=1e-12)
