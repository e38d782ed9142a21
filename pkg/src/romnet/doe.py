"""Designs of experiments on the unit hypercube and the map to thermal coordinates."""

from dataclasses import dataclass
import logging
import warnings

import numpy as np
from scipy.special import ndtri
from scipy.stats import qmc

logger = logging.getLogger(__name__)

SOBOL_MAX_DIM = 21
PHI_CLIP = 1e-12


@dataclass
class Design:
    points: np.ndarray      # (n, d) in [0, 1)
    kind: str               # "sobol" | "maxproj_lhs" | "random"
    seed: int | None = None

    @property
    def n(self):
        return self.points.shape[0]

    @property
    def d(self):
        return self.points.shape[1]


def sobol(n, d, skip=1):
    """Unscrambled Sobol' points (Joe-Kuo direction numbers).

    ``skip`` leading points are dropped; the default removes the origin.
    """
    if not 1 <= d <= SOBOL_MAX_DIM:
        raise ValueError(f"Sobol' dimension must be in [1, {SOBOL_MAX_DIM}], got {d}")
    if n < 0 or skip < 0:
        raise ValueError("n and skip must be non-negative")
    eng = qmc.Sobol(d, scramble=False)
    if skip:
        eng.fast_forward(skip)
    with warnings.catch_warnings():
        # balance properties hold for powers of two, but any n is valid here
        warnings.simplefilter("ignore", UserWarning)
        pts = eng.random(n) if n else np.empty((0, d))
    return Design(pts, "sobol", None)


def random_design(n, d, seed):
    return Design(np.random.default_rng(seed).random((n, d)), "random", seed)


def maxproj_criterion(X):
    """``psi(X) = sum_{i<j} prod_k (x_ik - x_jk)^-2``."""
    X = np.asarray(X, dtype=float)
    diff2 = (X[:, None, :] - X[None, :, :]) ** 2
    iu = np.triu_indices(X.shape[0], 1)
    with np.errstate(divide="ignore"):
        return float(np.sum(1.0 / np.prod(diff2[iu], axis=1)))


def _pair_terms(X, rows):
    """``prod_k (x_rk - x_jk)^-2`` for the given rows against all points (self term zeroed)."""
    d2 = (X[rows, None, :] - X[None, :, :]) ** 2
    with np.errstate(divide="ignore"):
        t = 1.0 / np.prod(d2, axis=2)
    t[np.arange(len(rows)), rows] = 0.0
    return t


def centered_lhs(n, d, rng):
    strata = (np.arange(n) + 0.5) / n
    return np.column_stack([rng.permutation(strata) for _ in range(d)])


def maxproj_lhs(n, d, seed=0, iters=20000, t0=0.05, t_end=1e-4):
    """Centered Latin hypercube optimised for the maximum-projection criterion.

    Simulated annealing over swaps of two entries within one column, on
    ``log psi``; the best design seen is returned.

    Returns
    -------
    Design
        ``Design.points`` keeps the LHS structure: each column is a
        permutation of ``(2i + 1) / (2n)``.
    """
    if n < 2:
        raise ValueError("maxproj_lhs needs n >= 2")
    rng = np.random.default_rng(seed)
    X = centered_lhs(n, d, rng)
    if n == 2 or iters <= 0:
        return Design(X, "maxproj_lhs", seed)
    P = _pair_terms(X, np.arange(n))
    psi = 0.5 * P.sum()
    best, best_psi = X.copy(), psi
    cool = (t_end / t0) ** (1.0 / max(iters - 1, 1))
    temp = t0
    for _ in range(iters):
        k = rng.integers(d)
        a, b = rng.choice(n, 2, replace=False)
        X[[a, b], k] = X[[b, a], k]
        rows = np.array([a, b])
        new_rows = _pair_terms(X, rows)
        # pairs touching a or b change; the (a, b) pair is counted once
        delta = (new_rows.sum() - new_rows[0, b]) - (P[rows].sum() - P[a, b])
        new_psi = psi + delta
        if new_psi <= psi or rng.random() < np.exp(-(np.log(new_psi) - np.log(psi)) / temp):
            P[rows] = new_rows
            P[:, rows] = new_rows.T
            psi = new_psi
            if psi < best_psi:
                best, best_psi = X.copy(), psi
        else:
            X[[a, b], k] = X[[b, a], k]
        temp *= cool
    return Design(best, "maxproj_lhs", seed)


def to_loading_coords(points):
    """Map ``chi`` in ``[0, 1)^5`` to ``(Y0, Y1..Y4)``.

    ``Y0`` is the indicator of ``chi_0 > 1/2``; the others are standard
    normal quantiles.  Entries closer than 1e-12 to 0 or 1 are clipped,
    with a warning.
    """
    X = np.atleast_2d(np.asarray(points, dtype=float))
    U = X[:, 1:]
    bad = (U < PHI_CLIP) | (U > 1.0 - PHI_CLIP)
    if bad.any():
        logger.warning("clipping %d coordinate(s) to [%g, 1 - %g] before the normal quantile",
                       int(bad.sum()), PHI_CLIP, PHI_CLIP)
        U = np.clip(U, PHI_CLIP, 1.0 - PHI_CLIP)
    out = np.column_stack([(X[:, 0] > 0.5).astype(float), ndtri(U)])
    return out[0] if np.ndim(points) == 1 else out
