"""Quasi-static small-strain finite-element model of the blade over one cycle.

Linear tetrahedra with one integration point each, Newton iterations on the
nodal residual with a forward-difference material tangent, and step
bisection when an increment does not converge.
"""

from dataclasses import dataclass
import logging
import time

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .loading import CycleSchedule, centrifugal_force
from .material import (MaterialIntegrationError, MaterialState, integrate_point,
                       numerical_tangent)
from .tensor import SQRT2, cubic_stiffness, mandel_to_voigt_stress

logger = logging.getLogger(__name__)


class ConvergenceError(RuntimeError):
    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


@dataclass
class Trajectory:
    """Converged HFM history; index 0 of every array is the unloaded t = 0 state."""

    times: np.ndarray      # (n_steps + 1,)
    u: np.ndarray          # (n_steps + 1, n_dof)
    sigma: np.ndarray      # (n_steps + 1, n_ip, 6) true components 11,22,33,23,13,12
    p_cum: np.ndarray      # (n_steps + 1, n_ip)
    final_state: MaterialState
    newton_iterations: list
    wall_time: float = 0.0

    @property
    def n_steps(self):
        return self.times.size - 1

    def to_arrays(self):
        s = self.final_state
        return {"times": self.times, "u": self.u, "sigma": self.sigma, "p_cum": self.p_cum,
                "state_eps": s.eps, "state_eps_p": s.eps_p, "state_x": s.x, "state_nu": s.nu,
                "newton_iterations": np.asarray(self.newton_iterations, dtype=np.int64),
                "wall_time": np.array([self.wall_time])}

    @classmethod
    def from_arrays(cls, a):
        state = MaterialState(a["state_eps"], a["state_eps_p"], a["state_x"], a["state_nu"],
                              a["p_cum"][-1].copy())
        return cls(a["times"], a["u"], a["sigma"], a["p_cum"], state,
                   list(np.asarray(a["newton_iterations"]).tolist()), float(a["wall_time"][0]))


def shape_gradients(nodes, tets):
    """Constant P1 shape-function gradients, shape (n_tets, 4, 3)."""
    p = nodes[tets]
    M = np.concatenate([np.ones((tets.shape[0], 4, 1)), p], axis=2)
    inv = np.linalg.inv(M)
    return inv[:, 1:, :].transpose(0, 2, 1)


def strain_matrices(grads):
    """Mandel strain-displacement matrices, shape (n_tets, 6, 12)."""
    n = grads.shape[0]
    B = np.zeros((n, 6, 12))
    r = 1.0 / SQRT2
    for a in range(4):
        bx, by, bz = grads[:, a, 0], grads[:, a, 1], grads[:, a, 2]
        c = 3 * a
        B[:, 0, c] = bx
        B[:, 1, c + 1] = by
        B[:, 2, c + 2] = bz
        B[:, 3, c + 1] = bz * r
        B[:, 3, c + 2] = by * r
        B[:, 4, c] = bz * r
        B[:, 4, c + 2] = bx * r
        B[:, 5, c] = by * r
        B[:, 5, c + 1] = bx * r
    return B


class HighFidelityModel:
    """Assembly and time integration of the blade problem on a fixed mesh."""

    def __init__(self, mesh, material, schedule=None, newton_tol=1e-8, newton_atol=1e-12,
                 max_newton=25, max_bisections=3):
        self.mesh = mesh
        self.material = material
        self.schedule = schedule if schedule is not None else CycleSchedule()
        self.newton_tol = newton_tol
        self.newton_atol = newton_atol
        self.max_newton = max_newton
        self.max_bisections = max_bisections
        self.n_dof = 3 * mesh.n_nodes
        self.B = strain_matrices(shape_gradients(mesh.nodes, mesh.tets))
        self._Bt = np.ascontiguousarray(self.B.transpose(0, 2, 1))
        self.dofs = (3 * mesh.tets[:, :, None] + np.arange(3)).reshape(-1, 12)
        fixed = np.zeros(self.n_dof, dtype=bool)
        for c in range(3):
            fixed[3 * mesh.dirichlet_nodes + c] = True
        self.fixed = fixed
        self.free = np.flatnonzero(~fixed)
        self.plastic = mesh.viscoplastic
        rows = np.repeat(self.dofs, 12, axis=1).ravel()
        cols = np.tile(self.dofs, (1, 12)).ravel()
        self._rows, self._cols = rows, cols
        self._f_centrifugal = None
        self._f_pressure = None

    # ------------------------------------------------------------------ loads
    def ip_values(self, nodal):
        """Interpolate a nodal scalar field at the tet centroids."""
        return np.asarray(nodal)[self.mesh.tets].mean(axis=1)

    def centrifugal_pattern(self):
        """Nodal centrifugal load at omega = 1 (one-point quadrature)."""
        if self._f_centrifugal is None:
            f_ip = centrifugal_force(self.mesh.ip_points, self._peak_time(), self.schedule,
                                     self.mesh.axis_point, self.mesh.axis_direction)
            f = np.zeros(self.n_dof)
            contrib = np.repeat((f_ip * self.mesh.volumes[:, None] / 4.0)[:, None, :], 4, axis=1)
            np.add.at(f, self.dofs.ravel(), contrib.ravel())
            self._f_centrifugal = f
        return self._f_centrifugal

    def pressure_pattern(self):
        """Nodal pressure load for a unit pressure on the loaded facets."""
        if self._f_pressure is None:
            facets = self.mesh.surface_facets[self.mesh.pressure_facets]
            nA = self.mesh.facet_normals(facets)
            f = np.zeros(self.n_dof)
            contrib = np.repeat((-nA / 3.0)[:, None, :], 3, axis=1)
            idx = (3 * facets[:, :, None] + np.arange(3)).ravel()
            np.add.at(f, idx, contrib.ravel())
            self._f_pressure = f
        return self._f_pressure

    def _peak_time(self):
        s = self.schedule
        return s.times[s.peak_step]

    def external_force(self, t):
        w = self.schedule.omega(t)
        return w ** 2 * self.centrifugal_pattern() + w * self.schedule.p_max * self.pressure_pattern()

    def temperature(self, T_max_nodes, t):
        w = self.schedule.omega(t)
        return (1.0 - w) * self.schedule.t_zero + w * np.asarray(T_max_nodes)

    # --------------------------------------------------------------- assembly
    def strains(self, u):
        return np.matmul(self.B, np.asarray(u)[self.dofs][:, :, None])[:, :, 0]

    def internal_force(self, sigma):
        fe = np.matmul(self._Bt, sigma[:, :, None])[:, :, 0] * self.mesh.volumes[:, None]
        return np.bincount(self.dofs.ravel(), weights=fe.ravel(), minlength=self.n_dof)

    def stiffness(self, D):
        Ke = np.matmul(self._Bt, np.matmul(D, self.B)) * self.mesh.volumes[:, None, None]
        return sp.csr_matrix((Ke.ravel(), (self._rows, self._cols)), shape=(self.n_dof, self.n_dof))

    def elastic_tangent(self, T_ip):
        c = self.material.at(T_ip)
        return cubic_stiffness(c["c11"], c["c12"], c["c44"])

    def assemble_residual(self, u, state, T_ip, t, dt=None, T_ip_old=None):
        """Residual ``f_int(u) - f_ext(t)`` with zero rows at clamped DOFs.

        Returns ``(residual, sigma_mandel, new_state)``; ``state`` is the
        converged material state at the start of the increment.
        """
        dt = self.schedule.t_cycle / self.schedule.n_steps if dt is None else dt
        eps = self.strains(u)
        sigma, new_state = integrate_point(state, eps, T_ip, dt, self.material,
                                           plastic=self.plastic, T_old=T_ip_old)
        r = self.internal_force(sigma) - self.external_force(t)
        r[self.fixed] = 0.0
        return r, sigma, new_state

    # ---------------------------------------------------------------- solving
    def _increment(self, u0, state, t0, t1, T_max, depth, stats):
        T_old = self.ip_values(self.temperature(T_max, t0))
        T_new = self.ip_values(self.temperature(T_max, t1))
        dt = t1 - t0
        u = u0.copy()
        f_ext = self.external_force(t1)
        # slips of the previous increment (then of the previous iterate) seed the local solves
        g_guess = state.dgamma
        try:
            for it in range(self.max_newton + 1):
                eps = self.strains(u)
                sigma, new_state = integrate_point(state, eps, T_new, dt, self.material,
                                                   plastic=self.plastic, T_old=T_old, g_init=g_guess)
                g_guess = new_state.dgamma
                f_int = self.internal_force(sigma)
                r = f_int - f_ext
                r[self.fixed] = 0.0
                ref = max(np.linalg.norm(f_int), np.linalg.norm(f_ext))
                if np.linalg.norm(r) <= max(self.newton_tol * ref, self.newton_atol):
                    stats.append(it)
                    return u, sigma, new_state
                if it == self.max_newton:
                    break
                D = numerical_tangent(state, eps, T_new, dt, self.material, self.plastic,
                                      T_old, sigma=sigma, new_state=new_state)
                K = self.stiffness(D)[self.free][:, self.free]
                du = spla.spsolve(K.tocsc(), -r[self.free])
                u[self.free] += du
        except MaterialIntegrationError as exc:
            logger.debug("material failure at %d points on [%g, %g]", exc.points.size, t0, t1)
        if depth >= self.max_bisections:
            raise ConvergenceError(f"Newton did not converge on [{t0}, {t1}] after "
                                   f"{self.max_bisections} bisections")
        tm = 0.5 * (t0 + t1)
        u_m, _, st_m = self._increment(u0, state, t0, tm, T_max, depth + 1, stats)
        return self._increment(u_m, st_m, tm, t1, T_max, depth + 1, stats)

    def solve_cycle(self, T_max):
        """Solve the full cycle for a nodal peak-temperature field ``T_max``."""
        T_max = np.asarray(getattr(T_max, "T_max", T_max), dtype=float)
        start = time.perf_counter()
        times = self.schedule.times
        n_ip = self.mesh.n_ip
        u = np.zeros(self.n_dof)
        state = MaterialState.zeros(n_ip)
        us, sigmas, pcums = [u.copy()], [np.zeros((n_ip, 6))], [np.zeros(n_ip)]
        # stress at t = 0 is not necessarily zero if T_max differs from T0 at omega = 0; it is
        T0_ip = self.ip_values(self.temperature(T_max, times[0]))
        sig0, _ = integrate_point(state, self.strains(u), T0_ip, 1.0, self.material, plastic=self.plastic)
        sigmas[0] = mandel_to_voigt_stress(sig0)
        iters = []
        for k in range(1, times.size):
            try:
                u, sigma, state = self._increment(u, state, times[k - 1], times[k], T_max, 0, iters)
            except ConvergenceError as exc:
                raise ConvergenceError(f"step {k}: {exc}", step=k) from exc
            us.append(u.copy())
            sigmas.append(mandel_to_voigt_stress(sigma))
            pcums.append(state.p_cum.copy())
        return Trajectory(times.copy(), np.array(us), np.array(sigmas), np.array(pcums), state,
                          iters, time.perf_counter() - start)

    def reactions(self, u, sigma, t):
        """Reaction forces at the clamped DOFs (zero elsewhere)."""
        r = self.internal_force(sigma) - self.external_force(t)
        r[~self.fixed] = 0.0
        return r
