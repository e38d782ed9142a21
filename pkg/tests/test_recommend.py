from fractions import Fraction as F

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from romnet.recommend import (ElasticNetLogisticRegression, ModelRecommender, build_recommender,
                              classification_report_table, fit_gp_1d, format_report, geostat_mrmr,
                              mutual_information, train_classifier)


# ---------------------------------------------------------------- relevance

def test_mi_independent_feature_is_small():
    rng = np.random.default_rng(0)
    y = rng.integers(0, 2, 200)
    x = rng.normal(size=200)
    assert abs(mutual_information(x, y)) <= 0.05


def test_mi_of_label_copy_is_log2():
    rng = np.random.default_rng(1)
    y = np.repeat([0, 1], 100)
    x = y + 1e-3 * rng.normal(size=200)
    assert mutual_information(x, y) == pytest.approx(np.log(2), abs=0.1)


def test_mi_matches_sklearn_estimator():
    from sklearn.feature_selection import mutual_info_classif
    rng = np.random.default_rng(2)
    y = rng.integers(0, 3, 300)
    X = np.c_[y + rng.normal(size=300), rng.normal(size=300)]
    ours = mutual_information(X, y)
    ref = mutual_info_classif(X, y, n_neighbors=3, random_state=0)
    assert np.allclose(ours, ref, atol=0.05)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_mi_non_negative(seed):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(40, 3))
    X[:, 2] = 1.0
    mi = mutual_information(X, rng.integers(0, 2, 40))
    assert np.all(mi >= 0) and mi[2] == 0


def test_mi_needs_samples():
    with pytest.raises(ValueError):
        mutual_information(np.zeros(5), np.zeros(5))


# ---------------------------------------------------------------- redundancy surrogate

def test_gp_interpolates_noise_free_decay():
    d = np.linspace(0, 4, 25)
    gp = fit_gp_1d(d, np.exp(-d))
    assert np.max(np.abs(gp.predict(d[:, None]) - np.exp(-d))) <= 1e-3


def test_gp_mean_is_continuous():
    rng = np.random.default_rng(3)
    d = rng.uniform(0, 10, 60)
    gp = fit_gp_1d(d, np.exp(-d / 3) + 0.05 * rng.normal(size=60))
    x = np.linspace(0.5, 9.5, 7)
    assert np.max(np.abs(gp.predict((x + 1e-6)[:, None]) - gp.predict(x[:, None]))) <= 1e-5


# ---------------------------------------------------------------- mRMR

def _line_coords(n):
    return np.c_[np.arange(n, dtype=float), np.zeros(n), np.zeros(n)]


def test_mrmr_k1_is_argmax():
    rel = np.array([0.1, 0.4, 0.3, 0.2])
    sel, pre = geostat_mrmr(rel, lambda d: np.zeros_like(d), _line_coords(4), 0.05, 1)
    assert sel.tolist() == [1]
    assert pre.tolist() == [0, 1, 2, 3]


def test_mrmr_zero_redundancy_is_top_k():
    rel = np.array([0.1, 0.9, 0.3, 0.02, 0.5, 0.7])
    sel, pre = geostat_mrmr(rel, lambda d: np.zeros_like(d), _line_coords(6), 0.05, 4)
    assert sel.tolist() == [1, 5, 4, 2]
    assert set(sel) <= set(pre) and 3 not in pre


def test_mrmr_skips_duplicated_node():
    coords = np.array([[0.0, 0, 0], [0.0, 0, 0], [5.0, 0, 0]])
    rel = np.array([1.0, 0.8, 0.8])
    sur = lambda d: np.where(np.asarray(d) < 1e-12, 10.0, 0.1)
    sel, _ = geostat_mrmr(rel, sur, coords, 0.05, 2)
    assert sel.tolist() == [0, 2]


def test_mrmr_errors():
    with pytest.raises(ValueError):
        geostat_mrmr(np.array([0.01, 0.02]), lambda d: d, _line_coords(2), 0.05, 1)
    with pytest.raises(ValueError):
        geostat_mrmr(np.array([0.1, 0.2]), lambda d: d, _line_coords(2), 0.05, 3)


# ---------------------------------------------------------------- classifier

def test_separable_toy_fits_exactly():
    rng = np.random.default_rng(4)
    X = rng.uniform(-3, 3, size=(20, 2))
    y = (X[:, 0] + X[:, 1] > 0).astype(int)
    X += np.where(y == 1, 0.5, -0.5)[:, None] * np.sqrt(0.5)   # margin 1 along (1, 1)/sqrt(2)
    clf = ElasticNetLogisticRegression(C=10.0, l1_ratio=0.4).fit(X, y)
    assert np.mean(clf.predict(X) == y) == 1.0


def test_vanishing_c_predicts_majority():
    rng = np.random.default_rng(5)
    X = rng.normal(size=(30, 3))
    y = np.r_[np.zeros(20, int), np.ones(10, int)]
    clf = ElasticNetLogisticRegression(C=1e-8).fit(X, y)
    assert np.all(clf.coef_ == 0)
    assert np.all(clf.predict(X) == 0)


def test_l1_sparsity_on_sparse_truth():
    rng = np.random.default_rng(6)
    X = rng.normal(size=(200, 11))
    y = (X[:, :5] @ [1.0, -1.0, 0.8, 0.6, -0.7] > 0).astype(int)
    clf = ElasticNetLogisticRegression(C=0.05, l1_ratio=1.0).fit(X, y)
    assert np.mean(np.all(clf.coef_ == 0, axis=0)) >= 0.5
    assert np.mean(clf.predict(X) == y) >= 0.85


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000))
def test_probabilities_sum_to_one(seed):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(40, 4))
    y = rng.integers(0, 3, 40)
    y[:3] = [0, 1, 2]
    P = ElasticNetLogisticRegression(C=1.0).fit(X, y).predict_proba(rng.normal(size=(10, 4)) * 10)
    assert np.all((P >= 0) & (P <= 1))
    assert np.allclose(P.sum(axis=1), 1.0, atol=1e-12)


def test_objective_monotone_and_single_class_rejected():
    rng = np.random.default_rng(7)
    X = rng.normal(size=(50, 5))
    y = (X[:, 0] > 0).astype(int)
    clf = ElasticNetLogisticRegression(C=1.0, l1_ratio=0.4).fit(X, y)
    assert np.all(np.diff(clf.objective_) <= 1e-12 * abs(clf.objective_[0]))
    with pytest.raises(ValueError):
        ElasticNetLogisticRegression().fit(X, np.zeros(50))


def test_grid_search_tie_prefers_stronger_penalty():
    rng = np.random.default_rng(8)
    X = rng.normal(size=(40, 2))
    y = (X[:, 0] > 0).astype(int)
    X[:, 0] += np.where(y == 1, 3.0, -3.0)
    tc = train_classifier(X, y, l1_ratio_grid=(0.2, 0.8), C_grid=(1.0, 10.0), folds=5)
    assert all(v == 1.0 for v in tc.cv_scores.values())
    assert (tc.C, tc.l1_ratio) == (1.0, 0.8)


# ---------------------------------------------------------------- report

def test_report_exact_on_four_samples():
    rows = classification_report_table([0, 0, 1, 1], [0, 1, 1, 1], exact=True)
    got = {r[0]: r[1:] for r in rows}
    assert got["0"] == (F(1), F(1, 2), F(2, 3), 2)
    assert got["1"] == (F(2, 3), F(1), F(4, 5), 2)
    assert got["accuracy"] == (None, None, F(3, 4), 4)
    assert got["macro avg"] == (F(5, 6), F(3, 4), F(11, 15), 4)
    assert got["weighted avg"] == (F(5, 6), F(3, 4), F(11, 15), 4)
    text = format_report(rows)
    assert "precision" in text and "0.7500" in text


def test_report_matches_sklearn():
    from sklearn.metrics import precision_recall_fscore_support
    rng = np.random.default_rng(9)
    yt, yp = rng.integers(0, 3, 50), rng.integers(0, 3, 50)
    rows = classification_report_table(yt, yp)
    p, r, f, s = precision_recall_fscore_support(yt, yp, labels=[0, 1, 2], zero_division=0)
    for c in range(3):
        assert np.allclose(rows[c][1:4], [p[c], r[c], f[c]], atol=1e-14)


# ---------------------------------------------------------------- recommender

@pytest.fixture(scope="module")
def toy_recommender():
    rng = np.random.default_rng(10)
    coords = np.c_[rng.uniform(0, 10, (30, 2)), np.zeros(30)]
    T = rng.normal(size=(80, 30))
    labels = (T[:, 3] + T[:, 17] > 0).astype(int)
    T[:, 3] += 0.5 * (2 * labels - 1)
    return coords, T, labels


def test_recommender_deterministic_and_invariant(toy_recommender):
    coords, T, labels = toy_recommender
    a, _, _ = build_recommender(T, labels, coords, threshold=0.02, k=4, n_pairs=60, seed=1)
    b, _, _ = build_recommender(T, labels, coords, threshold=0.02, k=4, n_pairs=60, seed=1)
    assert np.array_equal(a.nodes, b.nodes)
    assert np.array_equal(a.classifier.coef_, b.classifier.coef_)
    assert set(a.nodes) <= set(a.preselected) and a.nodes.size == 4
    assert 3 in a.nodes
    unused = np.setdiff1d(np.arange(30), a.nodes)
    shifted = T.copy()
    shifted[:, unused] += 123.0
    assert np.array_equal(a.classifier.predict(a.features(shifted)), a.classifier.predict(a.features(T)))
    p = a.probabilities(T[0])
    assert p.sum() == pytest.approx(1.0, abs=1e-12)
    assert a.recommend(T[0]) in (0, 1)
