"""Geostatistical mRMR feature selection and the elastic-net ROM classifier."""

from dataclasses import dataclass
from fractions import Fraction
import logging
import warnings

import numpy as np
from scipy.special import digamma, logsumexp
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.exceptions import ConvergenceWarning
from sklearn.feature_selection import mutual_info_regression
from sklearn.gaussian_process import GaussianProcessRegressor
from sklearn.gaussian_process.kernels import ConstantKernel, Matern, WhiteKernel
from sklearn.model_selection import StratifiedKFold
from sklearn.utils.validation import check_is_fitted

logger = logging.getLogger(__name__)


# --------------------------------------------------------------------------
# relevance

def mutual_information(X, labels, k=3):
    """kNN estimate of ``I(x_j; y)`` for continuous features and a discrete label (nats).

    For each sample, ``d_i`` is the distance to its k-th neighbour among the
    samples with the same label, and ``m_i`` counts all samples strictly
    closer than ``d_i`` (itself included); then
    ``I = psi(n) + psi(k) - <psi(n_y)> - <psi(m)>``, clipped at 0.
    Samples whose label occurs once are ignored.

    Parameters
    ----------
    X : ndarray, shape (n_samples,) or (n_samples, n_features)
    labels : ndarray, shape (n_samples,)
    """
    X = np.asarray(X, dtype=float)
    one = X.ndim == 1
    X = X[:, None] if one else X
    y = np.asarray(labels)
    if X.shape[0] < 20:
        raise ValueError("mutual_information needs at least 20 samples")
    classes, inv, counts = np.unique(y, return_inverse=True, return_counts=True)
    use = counts[inv] > 1
    X, inv = X[use], inv[use]
    n = X.shape[0]
    cnt = np.bincount(inv)
    kk = np.minimum(k, cnt[inv] - 1)                          # per sample
    out = np.empty(X.shape[1])
    same = inv[:, None] == inv[None, :]
    for j in range(X.shape[1]):
        x = X[:, j]
        if np.ptp(x) == 0:
            out[j] = 0.0
            continue
        d = np.abs(x[:, None] - x[None, :])
        dl = np.where(same, d, np.inf)
        np.fill_diagonal(dl, np.inf)
        dl.sort(axis=1)
        radius = dl[np.arange(n), kk - 1]
        m = np.sum(d < radius[:, None], axis=1)
        mi = digamma(n) + np.mean(digamma(kk)) - np.mean(digamma(cnt[inv])) - np.mean(digamma(m))
        out[j] = max(mi, 0.0)
    return out[0] if one else out


# --------------------------------------------------------------------------
# redundancy surrogate

@dataclass
class RedundancySurrogate:
    gp: GaussianProcessRegressor
    distances: np.ndarray
    pair_mi: np.ndarray

    def __call__(self, d):
        d = np.asarray(d, dtype=float)
        return self.gp.predict(d.reshape(-1, 1)).reshape(d.shape)


def fit_gp_1d(x, y, seed=0, alpha=1e-10, max_jitter=1e-2):
    """GP regression of ``y(x)`` with a Matern-5/2 plus white-noise kernel."""
    x = np.asarray(x, dtype=float).reshape(-1, 1)
    y = np.asarray(y, dtype=float)
    scale = float(np.ptp(x)) or 1.0
    kernel = (ConstantKernel(1.0, (1e-6, 1e3)) * Matern(length_scale=0.3 * scale,
                                                        length_scale_bounds=(1e-3 * scale, 1e2 * scale), nu=2.5)
              + WhiteKernel(1e-2, (1e-12, 1e1)))
    while True:
        gp = GaussianProcessRegressor(kernel, alpha=alpha, normalize_y=True, n_restarts_optimizer=2,
                                      random_state=seed)
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", ConvergenceWarning)
                return gp.fit(x, y)
        except (np.linalg.LinAlgError, ValueError) as exc:
            if alpha >= max_jitter:
                raise
            logger.warning("GP fit failed (%s); raising jitter to %g", exc, alpha * 100)
            alpha *= 100


def fit_redundancy_surrogate(coords, samples, n_pairs=800, seed=0, nodes=None):
    """Fit pair mutual information of nodal features against inter-node distance.

    Parameters
    ----------
    coords : ndarray, shape (n_nodes, 3)
    samples : ndarray, shape (n_samples, n_nodes)
        Feature values (nodal temperatures) of the training samples.
    nodes : ndarray, optional
        Candidate nodes for the pairs; all nodes by default.
    """
    rng = np.random.default_rng(seed)
    nodes = np.arange(coords.shape[0]) if nodes is None else np.asarray(nodes)
    pairs = np.array([rng.choice(nodes, 2, replace=False) for _ in range(n_pairs)])
    dist = np.linalg.norm(coords[pairs[:, 0]] - coords[pairs[:, 1]], axis=1)
    mi = np.empty(n_pairs)
    for p, (a, b) in enumerate(pairs):
        mi[p] = mutual_info_regression(samples[:, [a]], samples[:, b], n_neighbors=3,
                                       random_state=seed)[0]
    gp = fit_gp_1d(dist, mi, seed)
    return RedundancySurrogate(gp, dist, mi)


def geostat_mrmr(relevances, surrogate, node_coords, threshold=0.05, k=11):
    """Greedy max-relevance min-redundancy selection with distance-based redundancy.

    Each pick maximises ``relevance(f) - mean_s surrogate(|x_f - x_s|)`` over
    the preselected nodes (relevance >= ``threshold``) not yet chosen.
    """
    rel = np.asarray(relevances, dtype=float)
    pre = np.flatnonzero(rel >= threshold)
    if pre.size == 0:
        raise ValueError(f"no feature has relevance >= {threshold}")
    if k > pre.size:
        raise ValueError(f"requested {k} features but only {pre.size} pass the threshold")
    chosen = [int(pre[np.argmax(rel[pre])])]
    red_sum = np.zeros(pre.size)
    for _ in range(1, k):
        d = np.linalg.norm(node_coords[pre] - node_coords[chosen[-1]], axis=1)
        red_sum += surrogate(d)
        score = rel[pre] - red_sum / len(chosen)
        score[np.isin(pre, chosen)] = -np.inf
        chosen.append(int(pre[np.argmax(score)]))
    return np.array(chosen), pre


# --------------------------------------------------------------------------
# classifier

def _softmax_loss_grad(W, b, X, Y):
    Z = X @ W.T + b
    lse = logsumexp(Z, axis=1)
    loss = float(np.sum(lse - np.sum(Z * Y, axis=1)))
    P = np.exp(Z - lse[:, None])
    G = P - Y
    return loss, G.T @ X, G.sum(axis=0)


def _soft(v, t):
    return np.sign(v) * np.maximum(np.abs(v) - t, 0.0)


class ElasticNetLogisticRegression(ClassifierMixin, BaseEstimator):
    """Multinomial logistic regression with an elastic-net penalty.

    Minimises ``C sum_i loss_i + l1_ratio ||W||_1 + (1 - l1_ratio)/2 ||W||^2``
    (intercepts unpenalised) by accelerated proximal gradient with
    backtracking.  Features are centred internally; the penalty acts on the
    raw-scale weights.
    """

    def __init__(self, C=1e-3, l1_ratio=0.4, max_iter=10000, tol=1e-8):
        self.C = C
        self.l1_ratio = l1_ratio
        self.max_iter = max_iter
        self.tol = tol

    def _objective(self, W, b, X, Y):
        loss = _softmax_loss_grad(W, b, X, Y)[0]
        return self.C * loss + self.l1_ratio * np.abs(W).sum() + 0.5 * (1 - self.l1_ratio) * np.sum(W * W)

    def fit(self, X, y):
        X = np.asarray(X, dtype=float)
        y = np.asarray(y)
        self.classes_ = np.unique(y)
        if self.classes_.size < 2:
            raise ValueError("training data has a single class")
        self.n_features_in_ = X.shape[1]
        self.mean_ = X.mean(axis=0)
        Xc = X - self.mean_
        Y = (y[:, None] == self.classes_[None, :]).astype(float)
        K, p = self.classes_.size, X.shape[1]
        W, b = np.zeros((K, p)), np.log(Y.mean(axis=0))
        Wm, bm = W.copy(), b.copy()
        lam1, lam2 = self.l1_ratio, 1.0 - self.l1_ratio
        L = 1.0
        t = 1.0
        obj = self._objective(W, b, Xc, Y)
        self.objective_ = [obj]
        self.n_iter_ = 0
        for it in range(1, self.max_iter + 1):
            f_m, gW, gb = _softmax_loss_grad(Wm, bm, Xc, Y)
            f_m, gW, gb = self.C * f_m, self.C * gW + lam2 * Wm, self.C * gb
            f_m += 0.5 * lam2 * np.sum(Wm * Wm)
            while True:
                Wn = _soft(Wm - gW / L, lam1 / L)
                bn = bm - gb / L
                f_n = self.C * _softmax_loss_grad(Wn, bn, Xc, Y)[0] + 0.5 * lam2 * np.sum(Wn * Wn)
                dW, db = Wn - Wm, bn - bm
                if f_n <= f_m + np.sum(gW * dW) + np.sum(gb * db) + 0.5 * L * (np.sum(dW ** 2) + np.sum(db ** 2)) + 1e-12 * abs(f_m):
                    break
                L *= 2.0
            obj_n = f_n + lam1 * np.abs(Wn).sum()
            if obj_n > obj:
                # restart the momentum when the objective goes up
                t = 1.0
                Wm, bm = W.copy(), b.copy()
                self.n_iter_ = it
                continue
            t_n = 0.5 * (1 + np.sqrt(1 + 4 * t * t))
            Wm = Wn + (t - 1) / t_n * (Wn - W)
            bm = bn + (t - 1) / t_n * (bn - b)
            rel = (obj - obj_n) / max(abs(obj), 1e-300)
            W, b, obj, t = Wn, bn, obj_n, t_n
            self.objective_.append(obj)
            self.n_iter_ = it
            L *= 0.9
            if rel < self.tol and it > 1:
                break
        else:
            logger.warning("proximal gradient reached %d iterations", self.max_iter)
        self.coef_ = W
        self.intercept_ = b - W @ self.mean_
        return self

    def decision_function(self, X):
        check_is_fitted(self, "coef_")
        return np.asarray(X, dtype=float) @ self.coef_.T + self.intercept_

    def predict_proba(self, X):
        Z = self.decision_function(X)
        return np.exp(Z - logsumexp(Z, axis=1)[:, None])

    def predict(self, X):
        return self.classes_[np.argmax(self.decision_function(X), axis=1)]


@dataclass
class TrainedClassifier:
    model: ElasticNetLogisticRegression
    C: float
    l1_ratio: float
    cv_scores: dict
    folds: int
    seed: int


def train_classifier(X, y, l1_ratio_grid=(0.4,), C_grid=(1e-3,), folds=5, seed=0):
    """Grid search by stratified k-fold accuracy; ties go to the stronger penalty.

    Stronger means smaller ``C`` first, then larger ``l1_ratio``.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y)
    if np.unique(y).size < 2:
        raise ValueError("training labels contain a single class")
    n_splits = min(folds, int(np.min(np.unique(y, return_counts=True)[1])))
    skf = StratifiedKFold(n_splits=max(n_splits, 2), shuffle=True, random_state=seed)
    splits = list(skf.split(X, y))
    scores = {}
    for C in sorted(C_grid):
        for l1 in sorted(l1_ratio_grid, reverse=True):
            acc = [np.mean(ElasticNetLogisticRegression(C, l1).fit(X[tr], y[tr]).predict(X[te]) == y[te])
                   for tr, te in splits]
            scores[(C, l1)] = float(np.mean(acc))
    best = max(scores.values())
    C, l1 = next(k for k, v in scores.items() if v >= best - 1e-12)
    model = ElasticNetLogisticRegression(C, l1).fit(X, y)
    return TrainedClassifier(model, C, l1, scores, folds, seed)


# --------------------------------------------------------------------------
# report

def classification_report_table(y_true, y_pred, labels=None, exact=False):
    """Per-class precision, recall, F1 and support plus accuracy and averages.

    Returns a list of ``(row_name, precision, recall, f1, support)``; with
    ``exact=True`` the scores are :class:`fractions.Fraction`.
    """
    y_true, y_pred = np.asarray(y_true), np.asarray(y_pred)
    labels = np.unique(np.concatenate([y_true, y_pred])) if labels is None else labels
    num = Fraction if exact else float
    rows, n = [], y_true.size

    def div(a, b):
        return num(a) / num(b) if b else num(0)

    per = []
    for c in labels:
        tp = int(np.sum((y_pred == c) & (y_true == c)))
        p = div(tp, int(np.sum(y_pred == c)))
        r = div(tp, int(np.sum(y_true == c)))
        f = div(2, 1) * p * r / (p + r) if (p + r) else num(0)
        s = int(np.sum(y_true == c))
        per.append((p, r, f, s))
        rows.append((str(c), p, r, f, s))
    acc = div(int(np.sum(y_true == y_pred)), n)
    rows.append(("accuracy", None, None, acc, n))
    k = len(per)
    rows.append(("macro avg", sum(q[0] for q in per) / num(k), sum(q[1] for q in per) / num(k),
                 sum(q[2] for q in per) / num(k), n))
    rows.append(("weighted avg", sum(q[0] * q[3] for q in per) / num(n), sum(q[1] * q[3] for q in per) / num(n),
                 sum(q[2] * q[3] for q in per) / num(n), n))
    return rows


def format_report(rows, digits=4):
    out = [f"{'':>14}{'precision':>11}{'recall':>9}{'f1-score':>10}{'support':>9}"]
    for name, p, r, f, s in rows:
        fmt = lambda v: f"{float(v):.{digits}f}" if v is not None else ""
        out.append(f"{name:>14}{fmt(p):>11}{fmt(r):>9}{fmt(f):>10}{s:>9d}")
    return "\n".join(out)


# --------------------------------------------------------------------------
# recommendation

@dataclass
class ModelRecommender:
    nodes: np.ndarray                       # selected node ids
    classifier: ElasticNetLogisticRegression
    relevance: np.ndarray = None
    preselected: np.ndarray = None

    def features(self, T_max):
        T = np.atleast_2d(np.asarray(getattr(T_max, "T_max", T_max), dtype=float))
        return T[:, self.nodes]

    def recommend(self, thermal_sample):
        return int(self.classifier.predict(self.features(thermal_sample))[0])

    def probabilities(self, thermal_sample):
        return self.classifier.predict_proba(self.features(thermal_sample))[0]


def build_recommender(T_fields, labels, coords, threshold=0.05, k=11, n_pairs=800, C_grid=(1e-3,),
                      l1_ratio_grid=(0.4,), folds=5, seed=0):
    """Feature selection plus classifier training on nodal ``T_max`` samples."""
    T_fields = np.asarray(T_fields, dtype=float)
    rel = mutual_information(T_fields, labels)
    pre = np.flatnonzero(rel >= threshold)
    sur = fit_redundancy_surrogate(coords, T_fields, n_pairs, seed, nodes=pre if pre.size > 1 else None)
    sel, pre = geostat_mrmr(rel, sur, coords, threshold, min(k, pre.size))
    clf = train_classifier(T_fields[:, sel], labels, l1_ratio_grid, C_grid, folds, seed)
    return ModelRecommender(sel, clf.model, rel, pre), sur, clf
