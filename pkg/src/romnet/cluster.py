"""ROM-oriented dissimilarity, k-medoids, metric MDS and snapshot selection."""

from dataclasses import dataclass
import logging

import numpy as np

logger = logging.getLogger(__name__)


def _weighted_unit(F, weights):
    F = np.atleast_2d(np.asarray(F, dtype=float))
    w = np.ones(F.shape[1]) if weights is None else np.asarray(weights, dtype=float)
    norms = np.sqrt(np.sum(F ** 2 * w, axis=1))
    if np.any(norms == 0):
        raise ValueError(f"zero field(s) at rows {np.flatnonzero(norms == 0).tolist()}")
    return F / norms[:, None], w


def rom_dissimilarity(a, b, weights=None):
    """Sine of the angle between ``span(a)`` and ``span(b)`` for the weighted inner product."""
    U, w = _weighted_unit(np.vstack([a, b]), weights)
    c = float(np.sum(U[0] * U[1] * w))
    return float(np.sqrt(max(0.0, 1.0 - c * c)))


def dissimilarity_matrix(fields, weights=None):
    """Pairwise :func:`rom_dissimilarity` of the rows of ``fields``."""
    U, w = _weighted_unit(fields, weights)
    C = (U * w) @ U.T
    C = 0.5 * (C + C.T)
    D = np.sqrt(np.clip(1.0 - C ** 2, 0.0, 1.0))
    np.fill_diagonal(D, 0.0)
    return D


def subspace_dissimilarity(A, B, weights=None):
    """RMS of the sines of the principal angles between ``span(A)`` and ``span(B)``.

    Rows of ``A`` and ``B`` are fields.  With one field each this reduces
    to :func:`rom_dissimilarity`.
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.atleast_2d(np.asarray(B, dtype=float))
    w = np.ones(A.shape[1]) if weights is None else np.asarray(weights, dtype=float)
    sw = np.sqrt(w)
    Qa, _ = np.linalg.qr((A * sw).T)
    Qb, _ = np.linalg.qr((B * sw).T)
    cos = np.clip(np.linalg.svd(Qa.T @ Qb, compute_uv=False), 0.0, 1.0)
    k = min(Qa.shape[1], Qb.shape[1])
    cos = np.concatenate([cos, np.zeros(k - cos.size)])[:k]
    return float(np.sqrt(np.mean(1.0 - cos ** 2)))


# --------------------------------------------------------------------------
# k-medoids

@dataclass
class Dictionary:
    labels: np.ndarray
    medoids: np.ndarray
    cost: float
    selected: dict = None     # cluster id -> selected snapshot ids

    @property
    def n_clusters(self):
        return self.medoids.size


def _assign(D, medoids):
    d = D[:, medoids]
    labels = np.argmin(d, axis=1)
    labels[medoids] = np.arange(medoids.size)
    return labels, float(d[np.arange(D.shape[0]), labels].sum())


def _pam_build(D, K):
    n = D.shape[0]
    medoids = [int(np.argmin(D.sum(axis=1)))]
    nearest = D[:, medoids[0]].copy()
    for _ in range(1, K):
        gain = np.maximum(nearest[:, None] - D, 0.0).sum(axis=0)
        gain[medoids] = -np.inf
        j = int(np.argmax(gain))
        medoids.append(j)
        nearest = np.minimum(nearest, D[:, j])
    return np.array(medoids)


def _pam_swap(D, medoids, max_iter=1000):
    """Best-improvement swaps until no swap lowers the cost."""
    n = D.shape[0]
    medoids = medoids.copy()
    _, cost = _assign(D, medoids)
    for _ in range(max_iter):
        best = (cost, None, None)
        others = np.setdiff1d(np.arange(n), medoids)
        if others.size == 0:
            break
        for i in range(medoids.size):
            rest = np.delete(medoids, i)
            base = D[:, rest].min(axis=1) if rest.size else np.full(n, np.inf)
            # cost of each candidate h replacing medoid i, all at once
            c = np.minimum(base[:, None], D[:, others]).sum(axis=0)
            j = int(np.argmin(c))
            if c[j] < best[0] - 1e-12:
                best = (float(c[j]), i, others[j])
        if best[1] is None:
            break
        medoids[best[1]] = best[2]
        new_cost = _assign(D, medoids)[1]
        assert new_cost <= cost + 1e-12, "PAM swap increased the cost"
        cost = new_cost
    return medoids, cost


def k_medoids(D, K, n_init=10, seed=0):
    """Partitioning around medoids on a precomputed dissimilarity matrix.

    The first run starts from the greedy BUILD medoids, the remaining
    ``n_init - 1`` from uniformly drawn ones; the lowest-cost result wins.
    """
    D = np.asarray(D, dtype=float)
    n = D.shape[0]
    if not 1 <= K <= n:
        raise ValueError(f"need 1 <= K <= n, got K={K}, n={n}")
    rng = np.random.default_rng(seed)
    best = None
    for r in range(max(n_init, 1)):
        init = _pam_build(D, K) if r == 0 else rng.choice(n, K, replace=False)
        med, cost = _pam_swap(D, init)
        if best is None or cost < best[1] - 1e-12:
            best = (med, cost)
    med = best[0]
    # stable cluster ids: order medoids by index
    med = np.sort(med)
    labels, cost = _assign(D, med)
    return Dictionary(labels, med, cost)


# --------------------------------------------------------------------------
# MDS

def classical_scaling(D, dim=2):
    n = D.shape[0]
    J = np.eye(n) - 1.0 / n
    Bm = -0.5 * J @ (D ** 2) @ J
    lam, V = np.linalg.eigh(Bm)
    lam, V = lam[::-1][:dim], V[:, ::-1][:, :dim]
    return V * np.sqrt(np.maximum(lam, 0.0))


def raw_stress(D, Z):
    iu = np.triu_indices(D.shape[0], 1)
    d = np.linalg.norm(Z[:, None, :] - Z[None, :, :], axis=2)
    return float(np.sum((D[iu] - d[iu]) ** 2))


def mds_smacof(D, dim=2, seed=0, max_iter=300, eps=1e-9, return_history=False):
    """Metric MDS by SMACOF from a classical-scaling start.

    Returns ``(coords, relative_stress)`` with the relative stress
    ``stress(Z) / stress(0)``, ``stress(0) = sum_{i<j} delta_ij^2``.
    ``seed`` is accepted for interface symmetry; the start is deterministic.
    """
    D = np.asarray(D, dtype=float)
    n = D.shape[0]
    s0 = raw_stress(D, np.zeros((n, dim)))
    Z = classical_scaling(D, dim)
    s = raw_stress(D, Z)
    history = [s]
    if s0 == 0:
        return (Z, 0.0, history) if return_history else (Z, 0.0)
    for _ in range(max_iter):
        d = np.linalg.norm(Z[:, None, :] - Z[None, :, :], axis=2)
        with np.errstate(divide="ignore", invalid="ignore"):
            ratio = np.where(d > 0, D / d, 0.0)
        Bz = -ratio
        np.fill_diagonal(Bz, 0.0)
        np.fill_diagonal(Bz, -Bz.sum(axis=1))
        Z = Bz @ Z / n
        s_new = raw_stress(D, Z)
        assert s_new <= s + 1e-10 * s0, "SMACOF increased the stress"
        history.append(s_new)
        if s - s_new < eps * s0:
            s = s_new
            break
        s = s_new
    rel = s / s0
    return (Z, rel, history) if return_history else (Z, rel)


# --------------------------------------------------------------------------
# snapshot selection and labelling

def maximin_select(D, members, m, medoid):
    """Greedy maximin subset of ``members`` of size ``m`` starting at ``medoid``."""
    members = np.asarray(members)
    if m > members.size:
        raise ValueError(f"cannot select {m} of {members.size} members")
    if medoid not in members:
        raise ValueError("medoid must belong to the cluster")
    chosen = [int(medoid)]
    mind = D[members, medoid].copy()
    for _ in range(1, m):
        mind[np.isin(members, chosen)] = -np.inf
        j = int(members[np.argmax(mind)])
        chosen.append(j)
        mind = np.minimum(mind, D[members, j])
    return np.array(chosen)


def label_by_medoid(field, medoid_fields, weights=None):
    """Index of the closest medoid field; ties go to the lowest id."""
    d = np.array([rom_dissimilarity(field, m, weights) for m in medoid_fields])
    k = int(np.argmin(d))
    if np.sum(d == d[k]) > 1:
        logger.info("tie between medoids %s, choosing %d", np.flatnonzero(d == d[k]).tolist(), k)
    return k


def mislabel_rate(labels, truth):
    """Fraction of mislabelled points up to a permutation of two labels."""
    labels, truth = np.asarray(labels), np.asarray(truth)
    e = np.mean(labels != truth)
    return float(min(e, 1.0 - e)) if set(np.unique(labels)) <= {0, 1} else float(e)
