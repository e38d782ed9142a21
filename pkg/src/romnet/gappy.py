"""Full-field reconstruction of dual variables from reduced-integration-domain values.

Two routes: the least-squares Gappy-POD, and a linear surrogate from RID
values to POD coefficients fitted by multi-task Lasso.
"""

from dataclasses import dataclass, field
import logging
import warnings

import numpy as np
from numba import njit
from scipy.linalg import qr, solve_triangular
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.metrics import r2_score
from sklearn.model_selection import KFold
from sklearn.utils.validation import check_is_fitted

logger = logging.getLogger(__name__)


class GappyRankWarning(UserWarning):
    pass


def gappy_pod(rid_values, basis_rid, rank_tol=1e-10):
    """Least-squares POD coefficients from values on the RID.

    Parameters
    ----------
    rid_values : ndarray, shape (n_rid,) or (n_samples, n_rid)
    basis_rid : ndarray, shape (n_modes, n_rid)
        POD modes restricted to the RID.

    Returns
    -------
    ndarray, shape (n_modes,) or (n_samples, n_modes)
        Solution of ``min_c || basis_rid.T c - v ||`` by Householder QR.
        A rank-deficient restriction falls back to the minimum-norm
        solution with a :class:`GappyRankWarning`.
    """
    V = np.asarray(rid_values, dtype=float)
    A = np.asarray(basis_rid, dtype=float).T          # (n_rid, n_modes)
    single = V.ndim == 1
    V = np.atleast_2d(V)
    if A.shape[1] == 0:
        c = np.zeros((V.shape[0], 0))
        return c[0] if single else c
    Q, Rf, piv = qr(A, mode="economic", pivoting=True)
    d = np.abs(np.diag(Rf))
    rank = int(np.sum(d > rank_tol * d[0])) if d.size and d[0] > 0 else 0
    if rank < A.shape[1]:
        warnings.warn(f"RID restriction of the basis has rank {rank} < {A.shape[1]}; "
                      "using the minimum-norm solution", GappyRankWarning, stacklevel=2)
        c = np.linalg.lstsq(A, V.T, rcond=rank_tol)[0].T
    else:
        c = np.empty((V.shape[0], A.shape[1]))
        c[:, piv] = solve_triangular(Rf, Q.T @ V.T).T
    return c[0] if single else c


# --------------------------------------------------------------------------
# multi-task Lasso

@njit(cache=True)
def _duality_gap(X, R, W, Y, lam):
    """Gap of ``0.5 ||R||^2 + n lam sum_j ||W_j||`` against the scaled residual dual point."""
    n, p = X.shape
    l1 = lam * n
    dual = 0.0
    pen = 0.0
    for j in range(p):
        g = 0.0
        w2 = 0.0
        for t in range(R.shape[1]):
            s = 0.0
            for i in range(n):
                s += X[i, j] * R[i, t]
            g += s * s
            w2 += W[j, t] * W[j, t]
        dual = max(dual, np.sqrt(g))
        pen += np.sqrt(w2)
    r2 = 0.0
    ry = 0.0
    for i in range(n):
        for t in range(R.shape[1]):
            r2 += R[i, t] * R[i, t]
            ry += R[i, t] * Y[i, t]
    if dual > l1:
        c = l1 / dual
        gap = 0.5 * (r2 + r2 * c * c)
    else:
        c = 1.0
        gap = r2
    return gap + l1 * pen - c * ry


@njit(cache=True)
def _bcd(X, R, W, Y, colsq, lam, max_sweeps, tol, hist):
    """Block coordinate descent on ``(1/2n)||R||^2 + lam sum_j ||W_j||``.

    ``R = Y - X W`` is updated in place (``Y`` centred).  After each full
    sweep only the active rows are cycled until they settle, then a full
    sweep confirms.  With ``lam > 0`` a full sweep ends the run when the
    duality gap is below ``tol ||Y||^2``; with ``lam = 0`` when the largest
    weight change is below ``tol`` times the largest weight.  Returns the number of sweeps; ``hist`` receives
    the objective after each.
    """
    n, p = X.shape
    T = R.shape[1]
    ynorm2 = 0.0
    for i in range(n):
        for t in range(T):
            ynorm2 += Y[i, t] * Y[i, t]
    full = True
    sweeps = 0
    z = np.empty(T)
    while sweeps < max_sweeps:
        wmax = 0.0
        dmax = 0.0
        for j in range(p):
            if colsq[j] == 0.0:
                continue
            active = False
            for t in range(T):
                if W[j, t] != 0.0:
                    active = True
                    break
            if not full and not active:
                continue
            zn = 0.0
            for t in range(T):
                s = 0.0
                for i in range(n):
                    s += X[i, j] * R[i, t]
                z[t] = s / n + colsq[j] * W[j, t]
                zn += z[t] * z[t]
            zn = np.sqrt(zn)
            scale = 0.0
            if zn > lam:
                scale = (1.0 - lam / zn) / colsq[j]
            for t in range(T):
                wn = scale * z[t]
                dw = wn - W[j, t]
                if dw != 0.0:
                    for i in range(n):
                        R[i, t] -= X[i, j] * dw
                    W[j, t] = wn
                if abs(dw) > dmax:
                    dmax = abs(dw)
                if abs(wn) > wmax:
                    wmax = abs(wn)
        obj = 0.0
        for i in range(n):
            for t in range(T):
                obj += R[i, t] * R[i, t]
        obj *= 0.5 / n
        for j in range(p):
            s = 0.0
            for t in range(T):
                s += W[j, t] * W[j, t]
            obj += lam * np.sqrt(s)
        hist[sweeps] = obj
        sweeps += 1
        if lam > 0.0:
            converged = wmax == 0.0 or (full and _duality_gap(X, R, W, Y, lam) <= tol * ynorm2)
            if not full:
                converged = dmax <= tol * wmax or wmax == 0.0
        else:
            converged = dmax <= tol * wmax or wmax == 0.0
        if full:
            if converged:
                break
            full = False
        elif converged:
            full = True
    return sweeps


def _standardize(X):
    mu = X.mean(axis=0)
    sd = X.std(axis=0)
    Xs = np.where(sd > 0, (X - mu) / np.where(sd > 0, sd, 1.0), 0.0)
    return Xs, mu, sd


def lambda_max(X, Y):
    """Smallest penalty for which every weight row vanishes (standardized inputs)."""
    Xs, _, _ = _standardize(np.asarray(X, dtype=float))
    Yc = Y - Y.mean(axis=0)
    return float(np.max(np.linalg.norm(Xs.T @ Yc, axis=1)) / X.shape[0]) if X.shape[1] else 0.0


class MultiTaskLassoBCD(RegressorMixin, BaseEstimator):
    """Multi-task Lasso with an unpenalized intercept.

    Minimizes ``(1/2n) ||Y - X W - 1 b^T||_F^2 + lam sum_j ||W_j||_2`` on
    internally standardized inputs; ``coef_`` and ``intercept_`` are
    returned in the original units.

    Parameters
    ----------
    lam : float
    tol : float
        Relative duality-gap tolerance (relative weight change for ``lam = 0``).
    max_sweeps : int
    """

    def __init__(self, lam=1.0, tol=1e-4, max_sweeps=2000):
        self.lam = lam
        self.tol = tol
        self.max_sweeps = max_sweeps

    def fit(self, X, Y, W0=None):
        X = np.asarray(X, dtype=float)
        Y = np.asarray(Y, dtype=float)
        if Y.ndim == 1:
            Y = Y[:, None]
        Xs, mu, sd = _standardize(X)
        ym = Y.mean(axis=0)
        W = np.zeros((X.shape[1], Y.shape[1])) if W0 is None else np.array(W0, dtype=float)
        Yc = np.ascontiguousarray(Y - ym)
        R = Yc - Xs @ W
        colsq = np.where(sd > 0, 1.0, 0.0)
        hist = np.empty(self.max_sweeps)
        n_sw = _bcd(np.asfortranarray(Xs), R, W, Yc, colsq, float(self.lam), self.max_sweeps, self.tol, hist)
        hist = hist[:n_sw]
        # each block step is an exact minimization, so sweeps can only lower the objective
        assert np.all(np.diff(hist) <= 1e-10 * (np.abs(hist[:-1]) + 1e-300)), "BCD objective increased"
        self.capped_ = n_sw == self.max_sweeps
        if self.capped_:
            logger.debug("multi-task Lasso hit %d sweeps at lam=%.3g", n_sw, self.lam)
        self.W_std_ = W
        self.objective_ = hist
        self.n_sweeps_ = n_sw
        self.coef_ = np.where(sd[:, None] > 0, W / np.where(sd > 0, sd, 1.0)[:, None], 0.0)
        self.intercept_ = ym - mu @ self.coef_
        return self

    def predict(self, X):
        check_is_fitted(self, "coef_")
        return np.asarray(X, dtype=float) @ self.coef_ + self.intercept_


def lambda_grid(X, Y, n=30, ratio=1e-4):
    lmax = lambda_max(X, Y)
    if lmax == 0.0:
        return np.zeros(1)
    return np.geomspace(lmax, lmax * ratio, n)


def _path(X, Y, lams, tol, max_sweeps):
    W, out = None, []
    for lam in lams:
        m = MultiTaskLassoBCD(lam, tol, max_sweeps).fit(X, Y, W0=W)
        W = m.W_std_
        out.append(m)
    return out


@dataclass
class GappySurrogate:
    """Linear map from RID values to POD coefficients."""

    coef: np.ndarray          # (n_rid, n_modes)
    intercept: np.ndarray     # (n_modes,)
    lam: float
    cv_lambdas: np.ndarray = field(default_factory=lambda: np.zeros(0))
    cv_scores: np.ndarray = field(default_factory=lambda: np.zeros(0))
    cv_score: float = np.nan
    cv_score_uniform: float = np.nan    # unweighted task average, for reporting

    @property
    def active(self):
        return np.flatnonzero(np.any(self.coef != 0.0, axis=1))

    @property
    def fraction_active(self):
        return self.active.size / max(self.coef.shape[0], 1)

    def __call__(self, rid_values):
        return np.asarray(rid_values, dtype=float) @ self.coef + self.intercept

    predict = __call__

    def to_arrays(self, prefix):
        return {f"{prefix}coef": self.coef, f"{prefix}intercept": self.intercept,
                f"{prefix}cv_lambdas": self.cv_lambdas, f"{prefix}cv_scores": self.cv_scores,
                f"{prefix}scalars": np.array([self.lam, self.cv_score, self.cv_score_uniform])}

    @classmethod
    def from_arrays(cls, a, prefix):
        lam, score, uniform = a[f"{prefix}scalars"]
        return cls(a[f"{prefix}coef"], a[f"{prefix}intercept"], float(lam), a[f"{prefix}cv_lambdas"],
                   a[f"{prefix}cv_scores"], float(score), float(uniform))


def train_gappy_surrogate(X, Y, folds=5, seed=0, n_lambdas=30, ratio=1e-4, tol=1e-4,
                          max_sweeps=2000, lambdas=None, multioutput="variance_weighted"):
    """Multi-task Lasso surrogate with the penalty chosen by K-fold CV.

    Parameters
    ----------
    X : ndarray, shape (n_samples, n_rid)
        ROM predictions on the reduced integration domain.
    Y : ndarray, shape (n_samples, n_modes)
        Target POD coefficients (projections of the HFM fields).
    folds : int
        The score of a penalty is the coefficient of determination averaged
        over the targets and then over the folds; ties go to the larger
        penalty.
    multioutput : {"variance_weighted", "uniform_average"}
        Task average used for the score. With orthonormal modes the
        variance-weighted average is the R2 of the reconstructed field, so
        near-constant tail coefficients do not dominate the choice of the
        penalty. The other average is stored as ``cv_score_uniform``.
    """
    X = np.asarray(X, dtype=float)
    Y = np.asarray(Y, dtype=float)
    if Y.ndim == 1:
        Y = Y[:, None]
    n = X.shape[0]
    if n < folds:
        raise ValueError(f"need at least {folds} samples, got {n}")
    lams = lambda_grid(X, Y, n_lambdas, ratio) if lambdas is None else np.asarray(lambdas, dtype=float)
    other = {"variance_weighted": "uniform_average", "uniform_average": "variance_weighted"}
    if multioutput not in other:
        raise ValueError(f"unknown multioutput {multioutput!r}")
    scores = np.zeros((folds, lams.size))
    alt = np.zeros((folds, lams.size))
    capped = 0
    for f, (tr, te) in enumerate(KFold(folds, shuffle=True, random_state=seed).split(X)):
        for i, m in enumerate(_path(X[tr], Y[tr], lams, tol, max_sweeps)):
            capped += m.capped_
            if te.size < 2:
                scores[f, i] = alt[f, i] = np.nan
                continue
            pred = m.predict(X[te])
            scores[f, i] = r2_score(Y[te], pred, multioutput=multioutput)
            alt[f, i] = r2_score(Y[te], pred, multioutput=other[multioutput])
    if np.isnan(scores).all():
        raise ValueError("cross-validation scores are undefined; use fewer folds or more samples")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        mean = np.nanmean(scores, axis=0)
    best = int(np.flatnonzero(mean >= mean.max() - 1e-12)[0])
    path = _path(X, Y, lams[:best + 1], tol, max_sweeps)
    final = path[-1]
    capped += sum(m.capped_ for m in path)
    if capped:
        logger.info("%d of %d Lasso fits stopped at the %d-sweep cap", capped,
                    folds * lams.size + best + 1, max_sweeps)
    uniform = np.nanmean(alt[:, best]) if multioutput == "variance_weighted" else mean[best]
    sur = GappySurrogate(final.coef_, final.intercept_, float(lams[best]), lams, mean, float(mean[best]),
                         float(uniform))
    logger.info("gappy surrogate: lam=%.3g, CV R2=%.4f, %.1f%% inputs active", sur.lam, sur.cv_score,
                100 * sur.fraction_active)
    return sur


def reconstruct_dual(rid_values, surrogate, basis):
    """Full field ``coefficients @ modes`` with coefficients from the surrogate."""
    modes = getattr(basis, "modes", basis)
    return surrogate(rid_values) @ modes
