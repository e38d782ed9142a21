"""Snapshot POD, empirical cubature and the hyper-reduced Galerkin-Newton solve."""

from dataclasses import dataclass, field
import logging
import time

import numpy as np
from scipy.optimize import nnls

from .hfm import ConvergenceError
from .material import (MaterialIntegrationError, MaterialState, consistent_tangent, integrate_point,
                       numerical_tangent)
from .tensor import mandel_to_voigt_stress

logger = logging.getLogger(__name__)

DUAL_NAMES = ("p_cum", "s11", "s22", "s33", "s23", "s13", "s12")


# --------------------------------------------------------------------------
# POD

@dataclass
class ReducedBasis:
    """Modes orthonormal for the diagonal inner product ``<a, b> = sum w a b``."""

    modes: np.ndarray        # (N, n)
    eigenvalues: np.ndarray  # all eigenvalues of the correlation matrix, non-increasing
    weights: np.ndarray      # (n,) inner-product weights
    tol: float

    @property
    def n_modes(self):
        return self.modes.shape[0]

    def coefficients(self, fields):
        return np.atleast_2d(fields) * self.weights @ self.modes.T

    def project(self, fields):
        return self.coefficients(fields) @ self.modes

    def gram(self):
        return (self.modes * self.weights) @ self.modes.T

    def to_arrays(self, prefix):
        return {f"{prefix}modes": self.modes, f"{prefix}eigenvalues": self.eigenvalues,
                f"{prefix}weights": self.weights, f"{prefix}tol": np.array([self.tol])}

    @classmethod
    def from_arrays(cls, a, prefix):
        return cls(a[f"{prefix}modes"], a[f"{prefix}eigenvalues"], a[f"{prefix}weights"],
                   float(a[f"{prefix}tol"][0]))


def snapshot_pod(snapshots, tol, weights=None, normalize=False):
    """Snapshot POD with the truncation ``lambda_i / lambda_1 >= tol**2``.

    The eigenpairs of the correlation matrix ``C = S W S^T`` are obtained
    from a thin SVD ``S W^(1/2) = U diag(s) V^T``, so that
    ``lambda_i = s_i**2`` stays accurate far below ``sqrt(eps) * lambda_1``.
    Mode ``i`` is ``(1 / sqrt(lambda_i)) sum_n S_n xi_i[n]`` with
    ``xi_i = U[:, i]``, i.e. ``W^(-1/2) V[:, i]``; the latter form keeps the
    modes orthonormal to round-off even for tiny ``lambda_i``.

    Parameters
    ----------
    snapshots : ndarray, shape (n_snapshots, n)
    tol : float
    weights : ndarray, shape (n,), optional
        Diagonal of the inner-product matrix (lumped mass); ones if omitted.
    normalize : bool
        Scale every nonzero snapshot to unit norm first (zero ones are
        dropped), so that small states such as unloaded residual fields are
        captured as well as the peak ones.
    """
    S = np.atleast_2d(np.asarray(snapshots, dtype=float))
    if S.shape[0] < 1:
        raise ValueError("snapshot_pod needs at least one snapshot")
    w = np.ones(S.shape[1]) if weights is None else np.asarray(weights, dtype=float)
    sw = np.sqrt(w)
    if not np.any(S):
        logger.warning("all snapshots are zero: empty basis")
        return ReducedBasis(np.zeros((0, S.shape[1])), np.zeros(S.shape[0]), w, tol)
    if normalize:
        nrm = np.sqrt(np.sum(S ** 2 * w, axis=1))
        S = S[nrm > 0] / nrm[nrm > 0][:, None]
    _, s, Vt = np.linalg.svd(S * sw, full_matrices=False)
    lam = s ** 2
    keep = lam / lam[0] >= tol ** 2
    keep &= s > 0
    modes = Vt[keep] / sw
    return ReducedBasis(modes, lam, w, tol)


def projection_errors(basis, fields):
    """Relative weighted L2 errors ``||u - P u|| / ||u||`` per row (0 for zero rows)."""
    F = np.atleast_2d(fields)
    R = F - basis.project(F)
    num = np.sqrt(np.sum(R ** 2 * basis.weights, axis=1))
    den = np.sqrt(np.sum(F ** 2 * basis.weights, axis=1))
    return np.where(den > 0, num / np.where(den > 0, den, 1.0), 0.0)


# --------------------------------------------------------------------------
# ECM

@dataclass
class ReducedQuadrature:
    points: np.ndarray      # integration-point ids
    weights: np.ndarray     # > 0
    residual: float
    stagnated: bool = False

    def __len__(self):
        return self.points.size


def ecm_quadrature(G, volumes, tol=5e-4, max_points=None, stagnation=1e-12, patience=3):
    """Greedy nonnegative cubature for the integrands in the rows of ``G``.

    Finds points ``z`` and weights ``w > 0`` with
    ``||G[:, z] w - G @ volumes|| <= tol ||G @ volumes||``.  Candidates are
    ranked by the correlation of their normalised column with the current
    residual; weights are re-fitted by least squares after each addition,
    falling back to NNLS (and dropping zero-weight points) whenever a
    weight turns non-positive.

    Parameters
    ----------
    G : ndarray, shape (n_integrands, n_points)
        Integrand values, e.g. the output of :func:`integrand_basis`.
    volumes : ndarray, shape (n_points,)
        Full quadrature weights.
    """
    G = np.atleast_2d(np.asarray(G, dtype=float))
    vol = np.asarray(volumes, dtype=float)
    b = G @ vol
    bnorm = np.linalg.norm(b)
    if bnorm == 0:
        raise ValueError("integrals are all zero")
    norms = np.linalg.norm(G, axis=0)
    valid = norms > 1e-14 * norms.max()
    Gn = np.where(valid, G / np.where(valid, norms, 1.0), 0.0)
    max_points = G.shape[1] if max_points is None else max_points
    sel = np.zeros(0, dtype=np.int64)
    w = np.zeros(0)
    r = b.copy()
    err = 1.0
    history = [err]
    stagnated = False
    while err > tol and sel.size < max_points:
        score = Gn.T @ r
        score[sel] = -np.inf
        score[~valid] = -np.inf
        j = int(np.argmax(score))
        if not np.isfinite(score[j]) or score[j] <= 0:
            stagnated = True
            break
        trial = np.append(sel, j)
        wt = np.linalg.lstsq(G[:, trial], b, rcond=None)[0]
        if np.any(wt <= 0):
            wt, _ = nnls(G[:, trial], b, maxiter=50 * trial.size)
        keep = wt > 0
        sel, w = trial[keep], wt[keep]
        r = b - G[:, sel] @ w
        err = np.linalg.norm(r) / bnorm
        history.append(err)
        if len(history) > patience and history[-patience - 1] - err < stagnation:
            stagnated = True
            logger.warning("ECM stagnated at relative residual %.3e with %d points", err, sel.size)
            break
    order = np.argsort(sel)
    return ReducedQuadrature(sel[order], w[order], float(err), stagnated)


def integrand_basis(blocks, volumes, tol, add_constant=True):
    """L2-orthonormal basis of the span of integrand samples, as point values.

    ``blocks`` yields arrays of shape (k, n_points) of integrand values.  The
    Gram matrix of ``G diag(sqrt(volumes))`` is accumulated block by block and
    eigen-decomposed; directions with singular value below ``tol * s_max``
    are discarded.  Row ``k`` of the result is ``phi_k`` at the points, with
    ``sum_e volumes[e] phi_k(e) phi_l(e) = delta_kl``.  The constant function
    is appended (then re-orthonormalised) when ``add_constant`` is set, which
    makes the cubature exact for constants.
    """
    vol = np.asarray(volumes, dtype=float)
    sv = np.sqrt(vol)
    A = np.zeros((vol.size, vol.size))
    for blk in blocks:
        blk = np.asarray(blk, dtype=float) * sv
        A += blk.T @ blk
    lam, V = np.linalg.eigh(A)
    lam, V = lam[::-1], V[:, ::-1]
    keep = lam > (tol ** 2) * lam[0]
    V = V[:, keep]
    if add_constant:
        c = sv / np.linalg.norm(sv)
        c = c - V @ (V.T @ c)
        if np.linalg.norm(c) > 1e-10:
            V = np.column_stack([V, c / np.linalg.norm(c)])
    return V.T / sv, np.sqrt(np.maximum(lam[keep], 0.0))


# --------------------------------------------------------------------------
# local ROM

@dataclass
class LocalROM:
    cluster: int
    primal: ReducedBasis
    duals: dict                       # name -> ReducedBasis over integration points
    quadrature: ReducedQuadrature
    snapshot_ids: np.ndarray
    gappy: dict = field(default_factory=dict)   # name -> GappySurrogate

    @property
    def rid(self):
        return self.quadrature.points

    def to_arrays(self):
        a = {"cluster": np.array([self.cluster]), "snapshot_ids": np.asarray(self.snapshot_ids),
             "rid": self.quadrature.points, "rid_weights": self.quadrature.weights,
             "ecm_residual": np.array([self.quadrature.residual, float(self.quadrature.stagnated)])}
        a.update(self.primal.to_arrays("primal."))
        for k, b in self.duals.items():
            a.update(b.to_arrays(f"dual.{k}."))
        return a

    @classmethod
    def from_arrays(cls, a):
        q = ReducedQuadrature(a["rid"], a["rid_weights"], float(a["ecm_residual"][0]),
                              bool(a["ecm_residual"][1]))
        duals = {k: ReducedBasis.from_arrays(a, f"dual.{k}.") for k in DUAL_NAMES
                 if f"dual.{k}.modes" in a}
        return cls(int(a["cluster"][0]), ReducedBasis.from_arrays(a, "primal."), duals, q,
                   a["snapshot_ids"])


def dof_weights(mesh):
    """Lumped-mass weights of the displacement DOFs."""
    return np.repeat(mesh.nodal_volumes(), 3)


def reduced_gradients(hfm, modes, ips=None):
    """``B_e psi_i`` at the chosen integration points, shape (n_ip, 6, N)."""
    ips = np.arange(hfm.mesh.n_ip) if ips is None else np.asarray(ips)
    Pe = modes.T[hfm.dofs[ips]]                 # (n, 12, N)
    return np.matmul(hfm.B[ips], Pe)


def force_integrands(hfm, modes, sigma_mandel):
    """Rows ``sigma_e : B_e psi_i`` for every mode ``i``, shape (N, n_ip)."""
    BP = reduced_gradients(hfm, modes)
    return np.einsum("eai,ea->ie", BP, sigma_mandel)


def train_local_rom(hfm, trajectories, cluster, snapshot_ids, primal_tol=1e-8, dual_tol=1e-4,
                    ecm_tol=5e-4):
    """POD bases and reduced quadrature from full trajectories of one cluster."""
    from .tensor import voigt_stress_to_mandel

    mesh = hfm.mesh
    U = np.vstack([tr.u[1:] for tr in trajectories])
    primal = snapshot_pod(U, primal_tol, dof_weights(mesh), normalize=True)
    duals = {}
    vol = mesh.volumes
    duals["p_cum"] = snapshot_pod(np.vstack([tr.p_cum[1:] for tr in trajectories]), dual_tol, vol,
                                  normalize=True)
    for c, name in enumerate(DUAL_NAMES[1:]):
        duals[name] = snapshot_pod(np.vstack([tr.sigma[1:, :, c] for tr in trajectories]), dual_tol, vol,
                                   normalize=True)
    BP = reduced_gradients(hfm, primal.modes)

    def blocks():
        for tr in trajectories:
            sig = voigt_stress_to_mandel(tr.sigma[1:])
            yield np.einsum("eai,sea->sie", BP, sig).reshape(-1, mesh.n_ip)

    Phi, _ = integrand_basis(blocks(), vol, ecm_tol)
    quad = ecm_quadrature(Phi, vol, ecm_tol)
    logger.info("cluster %d: N=%d primal modes, %d ECM points (residual %.2e)", cluster,
                primal.n_modes, len(quad), quad.residual)
    return LocalROM(cluster, primal, duals, quad, np.asarray(snapshot_ids))


# --------------------------------------------------------------------------
# online stage

@dataclass
class ReducedTrajectory:
    times: np.ndarray
    q: np.ndarray            # (n_steps + 1, N)
    sigma_rid: np.ndarray    # (n_steps + 1, n_rid, 6) true Voigt components
    p_cum_rid: np.ndarray    # (n_steps + 1, n_rid)
    newton_iterations: list
    wall_time: float = 0.0

    def displacement(self, rom):
        return self.q @ rom.primal.modes


class ReducedSolver:
    """Hyper-reduced Galerkin-Newton solver for one local ROM on a given HFM."""

    def __init__(self, hfm, rom, newton_tol=1e-8, newton_atol=1e-12, max_newton=25,
                 max_bisections=3, tangent="consistent"):
        self.hfm = hfm
        self.rom = rom
        self.newton_tol = newton_tol
        self.newton_atol = newton_atol
        self.max_newton = max_newton
        self.max_bisections = max_bisections
        if tangent not in ("consistent", "numerical"):
            raise ValueError(f"unknown tangent {tangent!r}")
        self.tangent = tangent
        z = rom.rid
        self.points = z
        self.w = rom.quadrature.weights
        self.BP = reduced_gradients(hfm, rom.primal.modes, z)      # (R, 6, N)
        N = self.BP.shape[2]
        self._WBP = (self.w[:, None, None] * self.BP).reshape(-1, N)    # (6R, N)
        self.plastic = hfm.plastic[z]
        self.tets = hfm.mesh.tets[z]
        # loads are linear in the load patterns: project them once at full quadrature
        self.f_c = rom.primal.modes @ hfm.centrifugal_pattern()
        self.f_p = rom.primal.modes @ hfm.pressure_pattern()

    def external_force(self, t):
        s = self.hfm.schedule
        w = s.omega(t)
        return w ** 2 * self.f_c + w * s.p_max * self.f_p

    def temperature(self, T_max, t):
        s = self.hfm.schedule
        w = s.omega(t)
        return ((1.0 - w) * s.t_zero + w * T_max[self.tets]).mean(axis=1)

    def _increment(self, q0, state, t0, t1, T_max, depth, stats):
        mat = self.hfm.material
        T_old, T_new = self.temperature(T_max, t0), self.temperature(T_max, t1)
        dt = t1 - t0
        q = q0.copy()
        f_ext = self.external_force(t1)
        g_guess = state.dgamma
        R, N = self.BP.shape[0], self.BP.shape[2]
        # elastic part of the reduced tangent, corrected below at flowing points only
        C = self.hfm.elastic_tangent(T_new)
        K_el = self._WBP.T @ np.matmul(C, self.BP).reshape(-1, N)
        WBP3 = self._WBP.reshape(R, 6, N)
        try:
            for it in range(self.max_newton + 1):
                eps = self.BP @ q
                sigma, new_state = integrate_point(state, eps, T_new, dt, mat, plastic=self.plastic,
                                                   T_old=T_old, g_init=g_guess)
                g_guess = new_state.dgamma
                f_int = self._WBP.T @ sigma.ravel()
                r = f_int - f_ext
                ref = max(np.linalg.norm(f_int), np.linalg.norm(f_ext))
                if np.linalg.norm(r) <= max(self.newton_tol * ref, self.newton_atol):
                    stats.append(it)
                    return q, sigma, new_state
                if it == self.max_newton:
                    break
                if self.tangent == "consistent":
                    D = consistent_tangent(state, eps, T_new, dt, mat, new_state, self.plastic)
                else:
                    D = numerical_tangent(state, eps, T_new, dt, mat, self.plastic, T_old,
                                          sigma=sigma, new_state=new_state)
                dD = D - C
                act = np.flatnonzero(np.any(dD != 0.0, axis=(1, 2)))
                K = K_el
                if act.size:
                    K = K_el + WBP3[act].reshape(-1, N).T @ np.matmul(dD[act], self.BP[act]).reshape(-1, N)
                q = q - np.linalg.solve(K, r)
        except (MaterialIntegrationError, np.linalg.LinAlgError) as exc:
            logger.debug("reduced increment failed on [%g, %g]: %s", t0, t1, exc)
        if depth >= self.max_bisections:
            raise ConvergenceError(f"reduced Newton did not converge on [{t0}, {t1}]")
        tm = 0.5 * (t0 + t1)
        q_m, _, st_m = self._increment(q0, state, t0, tm, T_max, depth + 1, stats)
        return self._increment(q_m, st_m, tm, t1, T_max, depth + 1, stats)

    def solve(self, T_max):
        T_max = np.asarray(getattr(T_max, "T_max", T_max), dtype=float)
        start = time.perf_counter()
        times = self.hfm.schedule.times
        R, N = self.points.size, self.rom.primal.n_modes
        q = np.zeros(N)
        state = MaterialState.zeros(R)
        qs, sig, pc = [q.copy()], [np.zeros((R, 6))], [np.zeros(R)]
        T0 = self.temperature(T_max, times[0])
        s0, _ = integrate_point(state, np.zeros((R, 6)), T0, 1.0, self.hfm.material, plastic=self.plastic)
        sig[0] = mandel_to_voigt_stress(s0)
        iters = []
        for k in range(1, times.size):
            try:
                q, s, state = self._increment(q, state, times[k - 1], times[k], T_max, 0, iters)
            except ConvergenceError as exc:
                raise ConvergenceError(f"step {k}: {exc}", step=k) from exc
            qs.append(q.copy())
            sig.append(mandel_to_voigt_stress(s))
            pc.append(state.p_cum.copy())
        return ReducedTrajectory(times.copy(), np.array(qs), np.array(sig), np.array(pc), iters,
                                 time.perf_counter() - start)


def reduced_solve(hfm, rom, thermal_sample):
    return ReducedSolver(hfm, rom).solve(thermal_sample)
