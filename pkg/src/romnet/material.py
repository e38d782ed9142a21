"""Monocrystal elasto-viscoplastic constitutive model.

Cubic Hooke's law with isotropic thermal expansion, 12 octahedral and 6
cubic slip systems with a hyperbolic-sine flow rule, kinematic hardening with
static recovery and exponential isotropic hardening.  The update is a fully
implicit backward-Euler step solved by a local Newton iteration on the slip
increments; all routines are vectorised over a batch of integration points.

Stresses and strains are Mandel 6-vectors (see :mod:`romnet.tensor`).
"""

from dataclasses import dataclass, replace
import logging

import numpy as np

from . import _local
from .tensor import IDENTITY, cubic_stiffness, to_mandel

logger = logging.getLogger(__name__)

T_ZERO = 293.0
SINH_ARG_CAP = 50.0

ELASTIC_KEYS = ("c11", "c12", "c44", "alpha")
FLOW_KEYS = ("eps_h", "K_h", "n_h", "c", "d", "M", "m", "r0", "Q", "b")
FAMILIES = ("oct", "cub")


class MaterialIntegrationError(RuntimeError):
    """Local Newton failed at some integration points even after sub-stepping."""

    def __init__(self, message, points):
        super().__init__(message)
        self.points = np.asarray(points)


# --------------------------------------------------------------------------
# slip systems

@dataclass(frozen=True)
class SlipSystemSet:
    normals: np.ndarray      # (18, 3)
    directions: np.ndarray   # (18, 3)
    schmid: np.ndarray       # (18, 6) Mandel form of m_s = sym(l (x) n)
    family: tuple

    @property
    def octahedral(self):
        return np.array([f == "octahedral" for f in self.family])

    def __len__(self):
        return len(self.family)


def build_slip_systems():
    """Canonical FCC set: 12 {111}<110> then 6 {100}<110> systems."""
    normals, dirs, fam = [], [], []
    oct_planes = {
        (1, 1, 1): [(0, 1, -1), (1, 0, -1), (1, -1, 0)],
        (-1, 1, 1): [(0, 1, -1), (1, 0, 1), (1, 1, 0)],
        (1, -1, 1): [(0, 1, 1), (1, 0, -1), (1, 1, 0)],
        (1, 1, -1): [(0, 1, 1), (1, 0, 1), (1, -1, 0)],
    }
    for n, ls in oct_planes.items():
        for l in ls:
            normals.append(n)
            dirs.append(l)
            fam.append("octahedral")
    cub_planes = {
        (1, 0, 0): [(0, 1, 1), (0, 1, -1)],
        (0, 1, 0): [(1, 0, 1), (1, 0, -1)],
        (0, 0, 1): [(1, 1, 0), (1, -1, 0)],
    }
    for n, ls in cub_planes.items():
        for l in ls:
            normals.append(n)
            dirs.append(l)
            fam.append("cubic")
    normals = np.array(normals, dtype=float)
    dirs = np.array(dirs, dtype=float)
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    dyads = np.einsum("si,sj->sij", dirs, normals)
    schmid = to_mandel(0.5 * (dyads + dyads.transpose(0, 2, 1)))
    return SlipSystemSet(normals, dirs, schmid, tuple(fam))


SLIP_SYSTEMS = build_slip_systems()
N_SYSTEMS = len(SLIP_SYSTEMS)
_OCT = SLIP_SYSTEMS.octahedral
_FAMILY_INDEX = np.where(_OCT, 0, 1)
_R0, _Q, _B = (FLOW_KEYS.index(k) for k in ("r0", "Q", "b"))


def resolved_shear_stress(sigma, systems=SLIP_SYSTEMS):
    """Schmid's law ``tau_s = sigma : m_s`` for Mandel stresses ``(..., 6)``."""
    return np.asarray(sigma) @ systems.schmid.T


# --------------------------------------------------------------------------
# parameters

@dataclass
class MaterialParams:
    """Temperature-keyed coefficient tables, linearly interpolated.

    ``table`` maps a coefficient name to its values at ``temperatures``.
    Elastic names are ``c11, c12, c44, alpha``; flow names are prefixed by the
    slip family, e.g. ``oct.K_h`` or ``cub.r0``.
    """

    temperatures: np.ndarray
    table: dict
    t_zero: float = T_ZERO

    def __post_init__(self):
        self.temperatures = np.asarray(self.temperatures, dtype=float)
        if np.any(np.diff(self.temperatures) <= 0):
            raise ValueError("temperature keys must be strictly increasing")
        self.table = {k: np.broadcast_to(np.asarray(v, dtype=float), self.temperatures.shape).copy()
                      for k, v in self.table.items()}
        missing = [k for k in self.required_keys() if k not in self.table]
        if missing:
            raise ValueError(f"missing material coefficients: {missing}")
        for fam in FAMILIES:
            if np.any(self.table[f"{fam}.eps_h"] <= 0) or np.any(self.table[f"{fam}.K_h"] <= 0):
                raise ValueError(f"{fam}: eps_h and K_h must be positive")
            if np.any(self.table[f"{fam}.n_h"] < 1):
                raise ValueError(f"{fam}: n_h must be >= 1")
            if np.any(self.table[f"{fam}.r0"] < 0):
                raise ValueError(f"{fam}: r0 must be non-negative")

    @staticmethod
    def required_keys():
        return list(ELASTIC_KEYS) + [f"{f}.{k}" for f in FAMILIES for k in FLOW_KEYS]

    def _interp_weights(self, T):
        T = np.asarray(T, dtype=float)
        lo, hi = self.temperatures[0], self.temperatures[-1]
        if T.size and (T.min() < lo - 1e-9 or T.max() > hi + 1e-9):
            raise ValueError(f"temperature outside material table range [{lo}, {hi}] K: "
                             f"min {T.min():.1f}, max {T.max():.1f}")
        Tc = np.clip(T, lo, hi)
        j = np.clip(np.searchsorted(self.temperatures, Tc, side="right") - 1, 0, self.temperatures.size - 2)
        w = (Tc - self.temperatures[j]) / (self.temperatures[j + 1] - self.temperatures[j])
        return j, w

    def _stacked(self):
        if getattr(self, "_keys", None) is None:
            self._keys = list(self.table)
            self._matrix = np.column_stack([self.table[k] for k in self._keys])
            fam = np.array([[self.table[f"{f}.{k}"] for k in FLOW_KEYS] for f in FAMILIES])
            self._flow = fam.transpose(2, 1, 0).copy()      # (n_T, 10, 2)
        return self._keys, self._matrix, self._flow

    def at(self, T):
        """Interpolate every coefficient at temperatures ``T`` (any shape)."""
        T = np.asarray(T, dtype=float)
        j, w = self._interp_weights(T.ravel())
        keys, M, _ = self._stacked()
        vals = M[j] * (1.0 - w)[:, None] + M[j + 1] * w[:, None]
        return {k: vals[:, i].reshape(T.shape) for i, k in enumerate(keys)}

    def flow_table(self, T):
        """Per-system flow coefficients at ``T``, shape (n, 10, 18) in ``FLOW_KEYS`` order."""
        j, w = self._interp_weights(np.ravel(T))
        _, _, F = self._stacked()
        fam = F[j] * (1.0 - w)[:, None, None] + F[j + 1] * w[:, None, None]
        return np.ascontiguousarray(fam[:, :, _FAMILY_INDEX])

    def to_dict(self):
        return {"temperatures": self.temperatures.tolist(),
                "table": {k: v.tolist() for k, v in self.table.items()},
                "t_zero": self.t_zero}

    @classmethod
    def from_dict(cls, d):
        return cls(np.asarray(d["temperatures"]), dict(d["table"]), float(d.get("t_zero", T_ZERO)))

    def elastic_only(self):
        """Copy whose flow thresholds are so large that no slip ever activates."""
        table = dict(self.table)
        for fam in FAMILIES:
            table[f"{fam}.r0"] = np.full_like(self.temperatures, 1e12)
            table[f"{fam}.c"] = np.zeros_like(self.temperatures)
        return replace(self, table=table)


def default_material():
    """Order-of-magnitude placeholder coefficients (MPa, mm, s, K).

    These are not calibrated values of any real superalloy. They give a
    nickel-like stiffness, an Arrhenius reference rate and a viscoplastic
    threshold that collapses between 1150 K and 1250 K, so that a few tens
    of kelvin decide whether a hot airfoil region flows.
    """
    temps = np.array([200.0, 700.0, 900.0, 1000.0, 1050.0, 1100.0, 1150.0, 1200.0, 1250.0,
                      1300.0, 1350.0, 1400.0, 1800.0])
    table = {
        "c11": [252e3, 238e3, 230e3, 224e3, 221e3, 218e3, 214.5e3, 211e3, 207e3, 203e3, 199e3, 195e3, 170e3],
        "c12": [161e3, 155e3, 151e3, 148e3, 146.5e3, 145e3, 143e3, 141e3, 139e3, 137e3, 135e3, 133e3, 120e3],
        "c44": [131e3, 121e3, 116e3, 113e3, 111.5e3, 110e3, 108e3, 106e3, 104e3, 102e3, 100e3, 98e3, 85e3],
        "alpha": [1.2e-5, 1.35e-5, 1.42e-5, 1.46e-5, 1.48e-5, 1.5e-5, 1.525e-5, 1.55e-5, 1.575e-5,
                  1.6e-5, 1.625e-5, 1.65e-5, 1.8e-5],
    }
    # activation temperature 56000 K, 1.5e-5 /s at 1230 K
    eps_h = np.clip(1.5e-5 * np.exp(-56000.0 / temps + 56000.0 / 1230.0), 1e-30, 1e-2)
    oct_ = {
        "eps_h": eps_h,
        "K_h": [600.0, 457.1, 400.0, 275.0, 212.5, 150.0, 120.0, 90.0, 70.0, 50.0, 40.0, 30.0, 30.0],
        "n_h": [5.0, 4.5, 4.3, 4.2, 4.15, 4.1, 4.05, 4.0, 3.917, 3.833, 3.75, 3.667, 3.0],
        "c": [5000.0] * 13,
        "d": [100.0] * 13,
        "M": [1e5, 5e4, 2e4, 1.5e4, 1.25e4, 1e4, 9e3, 8e3, 7e3, 6e3, 5.5e3, 5e3, 3e3],
        "m": [3.0] * 13,
        "r0": [400.0, 292.9, 250.0, 200.0, 175.0, 150.0, 110.0, 60.0, 30.0, 15.0, 10.0, 5.0, 5.0],
        "Q": [60.0, 47.5, 42.5, 40.0, 38.75, 37.5, 36.25, 35.0, 33.75, 32.5, 31.25, 30.0, 20.0],
        "b": [15.0] * 13,
    }
    cub = dict(oct_)
    cub["r0"] = [1.3 * v for v in oct_["r0"]]
    cub["K_h"] = [1.2 * v for v in oct_["K_h"]]
    for k, v in oct_.items():
        table[f"oct.{k}"] = v
    for k, v in cub.items():
        table[f"cub.{k}"] = v
    return MaterialParams(temps, table)


# --------------------------------------------------------------------------
# state

@dataclass
class MaterialState:
    """Internal variables of a batch of integration points."""

    eps: np.ndarray     # (n, 6) total strain at the last converged update
    eps_p: np.ndarray   # (n, 6) inelastic strain
    x: np.ndarray       # (n, 18) back-stresses
    nu: np.ndarray      # (n, 18) cumulated slips
    p_cum: np.ndarray   # (n,) octahedral accumulated plastic strain
    dgamma: np.ndarray = None   # (n, 18) slip increments of the last update

    def __post_init__(self):
        if self.dgamma is None:
            self.dgamma = np.zeros_like(self.x)

    @classmethod
    def zeros(cls, n):
        return cls(np.zeros((n, 6)), np.zeros((n, 6)), np.zeros((n, N_SYSTEMS)),
                   np.zeros((n, N_SYSTEMS)), np.zeros(n))

    def __len__(self):
        return self.p_cum.shape[0]

    def copy(self):
        return MaterialState(self.eps.copy(), self.eps_p.copy(), self.x.copy(),
                             self.nu.copy(), self.p_cum.copy(), self.dgamma.copy())

    def take(self, idx):
        return MaterialState(self.eps[idx], self.eps_p[idx], self.x[idx], self.nu[idx],
                             self.p_cum[idx], self.dgamma[idx])

    def put(self, idx, other):
        self.eps[idx] = other.eps
        self.eps_p[idx] = other.eps_p
        self.x[idx] = other.x
        self.nu[idx] = other.nu
        self.p_cum[idx] = other.p_cum
        self.dgamma[idx] = other.dgamma


@dataclass
class IntegrationStats:
    capped: int = 0
    substeps: int = 0
    local_solves: int = 0
    max_local_iterations: int = 0


STATS = IntegrationStats()


# --------------------------------------------------------------------------
# local update

def _backstress(x_old, dgamma, dt, P):
    """Implicit back-stress update for given slip increments.

    Solves ``x (1 + d|dg|) + dt c (|x|/M)^m sign(x) = x_old + c dg``; the
    recovery term always pulls ``x`` towards zero.  Returns ``(x, dx/d(dg))``.
    """
    return _local.backstress_batch(np.ascontiguousarray(x_old, dtype=float),
                                   np.ascontiguousarray(dgamma, dtype=float), float(dt), P)


def _local_solve(C, sigma_trial, x_old, nu_old, dt, P, tol, max_iter, g_init=None):
    """Newton on slip increments for the points of one batch.

    Returns ``(dgamma, x, converged_mask, max_iterations)``.
    """
    g0 = np.zeros_like(x_old) if g_init is None else g_init
    g, x, conv, iters, capped = _local.local_solve(
        np.ascontiguousarray(C), np.ascontiguousarray(sigma_trial), np.ascontiguousarray(x_old),
        np.ascontiguousarray(nu_old), float(dt), np.ascontiguousarray(P), SLIP_SYSTEMS.schmid, float(tol),
        int(max_iter), np.ascontiguousarray(g0, dtype=float))
    n_capped = int(capped.sum())
    if n_capped:
        STATS.capped += n_capped
        logger.warning("flow-rule argument above %g at %d slip system(s)", SINH_ARG_CAP, n_capped)
    return g, x, conv, int(iters.max()) if iters.size else 0


def _update(state, eps_new, T, dt, params, plastic, tol, max_iter, g_init=None):
    n = len(state)
    coeffs = params.at(T)
    C = cubic_stiffness(coeffs["c11"], coeffs["c12"], coeffs["c44"])
    thermal = (coeffs["alpha"] * (T - params.t_zero))[:, None] * IDENTITY
    sigma_trial = np.matmul(C, (eps_new - state.eps_p - thermal)[:, :, None])[:, :, 0]
    new = state.copy()
    new.eps = eps_new.copy()
    new.dgamma = np.zeros_like(state.x)
    ok = np.ones(n, dtype=bool)
    sigma = sigma_trial
    pl = np.flatnonzero(plastic)
    if pl.size == 0:
        return sigma, new, ok
    P = params.flow_table(T[pl])
    x_old = state.x[pl]
    nu_old = state.nu[pl]
    # recovery-only back-stress, then trial check
    x0 = x_old.copy()
    moving = np.flatnonzero(np.any(x_old != 0.0, axis=1))
    if moving.size:
        x0[moving], _ = _backstress(x_old[moving], np.zeros((moving.size, N_SYSTEMS)), dt, P[moving])
    tau = sigma_trial[pl] @ SLIP_SYSTEMS.schmid.T
    r_old = P[:, _R0] + P[:, _Q] * (1.0 - np.exp(-P[:, _B] * nu_old))
    active = np.any(np.abs(tau - x0) - r_old > 0.0, axis=1)
    new.x[pl] = x0
    act = pl[active]
    if act.size:
        g0 = None if g_init is None else g_init[act]
        g, x, conv, it = _local_solve(C[act], sigma_trial[act], x_old[active], nu_old[active],
                                      dt, P[active], tol, max_iter, g0)
        STATS.local_solves += 1
        STATS.max_local_iterations = max(STATS.max_local_iterations, it)
        S = SLIP_SYSTEMS.schmid
        deps_p = g @ S
        new.eps_p[act] = state.eps_p[act] + deps_p
        new.x[act] = x
        new.nu[act] = nu_old[active] + np.abs(g)
        new.dgamma[act] = g
        deps_oct = g[:, _OCT] @ S[_OCT]
        new.p_cum[act] = state.p_cum[act] + np.sqrt(2.0 / 3.0) * np.linalg.norm(deps_oct, axis=1)
        sigma = sigma_trial.copy()
        sigma[act] = sigma_trial[act] - np.matmul(C[act], deps_p[:, :, None])[:, :, 0]
        ok[act] = conv
    return sigma, new, ok


def integrate_point(state, eps_new, T, dt, params, plastic=None, T_old=None,
                    tol=1e-11, max_iter=40, max_halvings=8, g_init=None):
    """Backward-Euler update of a batch of integration points.

    Parameters
    ----------
    state : MaterialState
        Converged state at the beginning of the increment (not modified).
    eps_new : ndarray, shape (n, 6)
        Total Mandel strain at the end of the increment.
    T : ndarray, shape (n,)
        Temperature at the end of the increment.
    dt : float
        Time increment, must be positive.
    params : MaterialParams
    plastic : ndarray of bool, optional
        Points obeying the viscoplastic law; the others are purely elastic.
    T_old : ndarray, optional
        Temperature at the start of the increment, used only to interpolate
        the loading when the increment has to be sub-stepped.
    g_init : ndarray, shape (n, 18), optional
        Starting slip increments for the local Newton iteration.

    Returns
    -------
    sigma : ndarray, shape (n, 6)
    new_state : MaterialState
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    eps_new = np.atleast_2d(np.asarray(eps_new, dtype=float))
    n = eps_new.shape[0]
    T = np.broadcast_to(np.asarray(T, dtype=float), (n,)).copy()
    plastic = np.ones(n, dtype=bool) if plastic is None else np.broadcast_to(plastic, (n,))
    sigma, new, ok = _update(state, eps_new, T, dt, params, plastic, tol, max_iter, g_init)
    if ok.all():
        return sigma, new
    bad = np.flatnonzero(~ok)
    T_old = T if T_old is None else np.broadcast_to(np.asarray(T_old, dtype=float), (n,))
    sub_state = state.take(bad)
    eps0, epsn = state.eps[bad], eps_new[bad]
    T0, Tn = T_old[bad], T[bad]
    for level in range(1, max_halvings + 1):
        nsub = 2 ** level
        cur = sub_state.copy()
        good = np.ones(bad.size, dtype=bool)
        for k in range(1, nsub + 1):
            w = k / nsub
            s_k, cur, ok_k = _update(cur, eps0 + w * (epsn - eps0), T0 + w * (Tn - T0),
                                     dt / nsub, params, plastic[bad], tol, max_iter)
            good &= ok_k
            if not good.all():
                break
        if good.all():
            STATS.substeps += bad.size
            sigma[bad] = s_k
            new.put(bad, cur)
            return sigma, new
    raise MaterialIntegrationError(
        f"local Newton failed at {bad.size} point(s) after {max_halvings} halvings of dt={dt}",
        bad)


def trial_overstress(state, eps_new, T, dt, params):
    """Largest ``|tau - x| - r`` over the slip systems for an elastic trial."""
    coeffs = params.at(T)
    C = cubic_stiffness(coeffs["c11"], coeffs["c12"], coeffs["c44"])
    thermal = (coeffs["alpha"] * (T - params.t_zero))[:, None] * IDENTITY
    sigma = np.einsum("nij,nj->ni", C, eps_new - state.eps_p - thermal)
    P = params.flow_table(T)
    x0, _ = _backstress(state.x, np.zeros_like(state.x), dt, P)
    r = P[:, _R0] + P[:, _Q] * (1.0 - np.exp(-P[:, _B] * state.nu))
    return np.max(np.abs(sigma @ SLIP_SYSTEMS.schmid.T - x0) - r, axis=1), C


def numerical_tangent(state, eps_new, T, dt, params, plastic=None, T_old=None, sigma=None,
                      rel_step=1e-7, margin=1.0, new_state=None):
    """Forward-difference tangent ``d sigma / d eps`` of the update, shape (n, 6, 6).

    Points that are elastic, or whose trial overstress stays below
    ``-margin`` (MPa), get the exact elastic stiffness; the others are
    perturbed in one batched call.  When the unperturbed result
    (``sigma``, ``new_state``) is given, the perturbed local solves start
    from its slip increments.
    """
    eps_new = np.atleast_2d(np.asarray(eps_new, dtype=float))
    n = eps_new.shape[0]
    T = np.broadcast_to(np.asarray(T, dtype=float), (n,))
    plastic = np.ones(n, dtype=bool) if plastic is None else np.broadcast_to(plastic, (n,))
    over, C = trial_overstress(state, eps_new, T, dt, params)
    D = C.copy()
    idx = np.flatnonzero(plastic & (over > -margin))
    if idx.size == 0:
        return D
    if sigma is None or new_state is None:
        sigma, new_state = integrate_point(state, eps_new, T, dt, params, plastic, T_old)
    h = rel_step * np.maximum(np.max(np.abs(eps_new[idx]), axis=1), 1e-3)
    rep = np.tile(idx, 6)
    e = eps_new[rep].copy()
    e[np.arange(rep.size), np.repeat(np.arange(6), idx.size)] += np.tile(h, 6)
    T_old_rep = None if T_old is None else np.broadcast_to(np.asarray(T_old, dtype=float), (n,))[rep]
    s, _ = integrate_point(state.take(rep), e, T[rep], dt, params, True, T_old_rep,
                           g_init=new_state.dgamma[rep])
    s = s.reshape(6, idx.size, 6)
    D[idx] = ((s - sigma[idx][None]) / h[None, :, None]).transpose(1, 2, 0)
    return D


def consistent_tangent(state, eps_new, T, dt, params, new_state, plastic=None):
    """Algorithmic tangent ``C - C S^T J^-1 diag(D) S C`` of the backward-Euler update.

    ``J`` is the local Newton matrix at the converged slips of ``new_state``
    and ``D`` the slope of the flow rule.  Points without slip get ``C``.
    Sub-stepped points receive the tangent of a single full step, which only
    affects the convergence rate of the global iteration.
    """
    eps_new = np.atleast_2d(np.asarray(eps_new, dtype=float))
    n = eps_new.shape[0]
    T = np.broadcast_to(np.asarray(T, dtype=float), (n,))
    plastic = np.ones(n, dtype=bool) if plastic is None else np.broadcast_to(plastic, (n,))
    coeffs = params.at(T)
    C = cubic_stiffness(coeffs["c11"], coeffs["c12"], coeffs["c44"])
    idx = np.flatnonzero(plastic & np.any(new_state.dgamma != 0.0, axis=1))
    if idx.size == 0:
        return C
    Ci = C[idx]
    thermal = (coeffs["alpha"][idx] * (T[idx] - params.t_zero))[:, None] * IDENTITY
    sig_tr = np.matmul(Ci, (eps_new[idx] - state.eps_p[idx] - thermal)[:, :, None])[:, :, 0]
    P = params.flow_table(T[idx])
    S = SLIP_SYSTEMS.schmid
    J, Dv = _local.consistent_terms(np.ascontiguousarray(Ci), np.ascontiguousarray(sig_tr),
                                    np.ascontiguousarray(state.x[idx]), np.ascontiguousarray(state.nu[idx]),
                                    float(dt), P, S, np.ascontiguousarray(new_state.dgamma[idx]))
    SC = S @ Ci                                            # (m, 18, 6)
    dg = np.linalg.solve(J, Dv[:, :, None] * SC)           # (m, 18, 6)
    out = C.copy()
    out[idx] = Ci - np.matmul(np.matmul(Ci, S.T), dg)
    return out
