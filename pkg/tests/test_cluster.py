import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from romnet.cluster import (dissimilarity_matrix, k_medoids, label_by_medoid, maximin_select,
                            mds_smacof, mislabel_rate, rom_dissimilarity, subspace_dissimilarity)


# ---------------------------------------------------------------- dissimilarity

def test_same_span_is_zero():
    a = np.array([1.0, -2.0, 0.5])
    assert rom_dissimilarity(a, 3 * a) == pytest.approx(0.0, abs=1e-7)
    assert rom_dissimilarity(a, -a) == pytest.approx(0.0, abs=1e-7)


def test_orthogonal_is_one():
    assert rom_dissimilarity([1.0, 0, 0], [0, 2.0, 0]) == 1.0
    w = np.array([1.0, 4.0])
    # orthogonal only for the weighted inner product
    assert rom_dissimilarity([4.0, 1.0], [1.0, -1.0], w) == pytest.approx(1.0)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000))
def test_dissimilarity_symmetric_and_bounded(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(2, 7))
    w = rng.uniform(0.1, 2, 7)
    dab, dba = rom_dissimilarity(a, b, w), rom_dissimilarity(b, a, w)
    assert abs(dab - dba) <= 1e-14
    assert 0.0 <= dab <= 1.0
    D = dissimilarity_matrix(np.vstack([a, b]), w)
    assert D[0, 1] == pytest.approx(dab, abs=1e-12)


def test_zero_field_rejected():
    with pytest.raises(ValueError):
        rom_dissimilarity([0.0, 0.0], [1.0, 0.0])


def test_subspace_dissimilarity_reduces_to_pair():
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=(2, 9))
    assert subspace_dissimilarity(a, b) == pytest.approx(rom_dissimilarity(a, b), abs=1e-12)
    A = rng.normal(size=(3, 9))
    assert subspace_dissimilarity(A, A @ np.diag([1, 1, 1, 1, 1, 1, 1, 1, 1.0])) == pytest.approx(0.0, abs=1e-7)


# ---------------------------------------------------------------- k-medoids

def test_k_equals_n_has_zero_cost():
    rng = np.random.default_rng(1)
    D = dissimilarity_matrix(rng.normal(size=(6, 4)))
    dic = k_medoids(D, 6)
    assert dic.cost == 0.0
    assert sorted(dic.medoids) == list(range(6))
    assert np.array_equal(dic.labels[dic.medoids], np.arange(6))


def _blobs(rng, n_per=6):
    """Two groups of fields near two orthogonal directions."""
    e0, e1 = np.eye(8)[0], np.eye(8)[1]
    A = e0 + 0.02 * rng.normal(size=(n_per, 8))
    B = e1 + 0.02 * rng.normal(size=(n_per, 8))
    return np.vstack([A, B]), np.repeat([0, 1], n_per)


def _exhaustive_best(D, K):
    n = D.shape[0]
    best = None
    for med in itertools.combinations(range(n), K):
        cost = D[:, list(med)].min(axis=1).sum()
        if best is None or cost < best[0] - 1e-12:
            best = (cost, med)
    return best


def test_two_blobs_exact_recovery():
    rng = np.random.default_rng(2)
    F, truth = _blobs(rng)
    D = dissimilarity_matrix(F)
    within = D[np.equal.outer(truth, truth)]
    assert within.max() <= 0.2 and D[~np.equal.outer(truth, truth)].min() >= 0.8
    dic = k_medoids(D, 2, n_init=5, seed=0)
    assert mislabel_rate(dic.labels, truth) == 0.0
    cost, _ = _exhaustive_best(D, 2)
    assert dic.cost == pytest.approx(cost, abs=1e-12)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 3))
def test_pam_matches_exhaustive_on_small_sets(seed, K):
    rng = np.random.default_rng(seed)
    D = dissimilarity_matrix(rng.normal(size=(9, 5)))
    dic = k_medoids(D, K, n_init=10, seed=seed)
    best, _ = _exhaustive_best(D, K)
    # PAM reaches a swap-local optimum; with restarts it finds the global one here
    assert dic.cost >= best - 1e-12
    assert dic.cost <= best * 1.05 + 1e-12


def test_k_medoids_deterministic_and_validated():
    rng = np.random.default_rng(3)
    D = dissimilarity_matrix(rng.normal(size=(20, 6)))
    a, b = k_medoids(D, 3, seed=7), k_medoids(D, 3, seed=7)
    assert np.array_equal(a.labels, b.labels) and np.array_equal(a.medoids, b.medoids)
    with pytest.raises(ValueError):
        k_medoids(D, 0)


# ---------------------------------------------------------------- MDS

def test_mds_planar_points_exact():
    rng = np.random.default_rng(4)
    P = rng.normal(size=(10, 2))
    D = np.linalg.norm(P[:, None] - P[None], axis=2)
    Z, rel = mds_smacof(D, 2)
    assert rel <= 1e-6
    Dz = np.linalg.norm(Z[:, None] - Z[None], axis=2)
    assert np.allclose(Dz, D, atol=1e-3)


def test_mds_stress_non_increasing():
    rng = np.random.default_rng(5)
    D = dissimilarity_matrix(rng.normal(size=(25, 6)))
    _, rel, hist = mds_smacof(D, 2, return_history=True)
    assert np.all(np.diff(hist) <= 1e-10 * hist[0])
    assert 0 < rel < 1


# ---------------------------------------------------------------- selection

def test_maximin_small_m():
    rng = np.random.default_rng(6)
    D = dissimilarity_matrix(rng.normal(size=(12, 5)))
    members = np.array([1, 3, 4, 7, 9, 11])
    assert maximin_select(D, members, 1, 4).tolist() == [4]
    pair = maximin_select(D, members, 2, 4)
    assert pair[0] == 4 and pair[1] == members[np.argmax(D[members, 4])]
    with pytest.raises(ValueError):
        maximin_select(D, members, 7, 4)
    with pytest.raises(ValueError):
        maximin_select(D, members, 2, 0)


def _min_pairwise(D, idx):
    sub = D[np.ix_(idx, idx)]
    return sub[np.triu_indices(len(idx), 1)].min()


def test_maximin_beats_random_subsets():
    rng = np.random.default_rng(7)
    D = dissimilarity_matrix(rng.normal(size=(40, 6)))
    members = np.arange(40)
    sel = maximin_select(D, members, 8, 0)
    rand = [_min_pairwise(D, rng.choice(members, 8, replace=False)) for _ in range(100)]
    assert _min_pairwise(D, sel) >= np.median(rand)


def test_label_by_medoid():
    m0, m1 = np.array([1.0, 0, 0]), np.array([0, 1.0, 0])
    assert label_by_medoid(m0, [m0, m1]) == 0
    assert label_by_medoid(np.array([0, -2.0, 0]), [m0, m1]) == 1


def test_labelling_consistent_with_dissimilarity_matrix():
    rng = np.random.default_rng(8)
    F, _ = _blobs(rng, 8)
    D = dissimilarity_matrix(F)
    dic = k_medoids(D, 2)
    for i in range(F.shape[0]):
        d = D[i, dic.medoids]
        if np.sum(d == d.min()) == 1:
            assert label_by_medoid(F[i], F[dic.medoids]) == dic.labels[i]


def test_mislabel_rate_label_switch():
    assert mislabel_rate([1, 1, 0, 0], [0, 0, 1, 1]) == 0.0
    assert mislabel_rate([0, 1, 0, 0], [0, 0, 1, 1]) == 0.25
