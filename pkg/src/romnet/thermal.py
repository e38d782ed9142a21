"""Stochastic peak-temperature model.

``T_max = T_ref + Y0 * dT0 + sum_i Y_i * dT_i`` where ``dT0`` is a fixed
trailing-edge hot spot and ``dT_i`` are Karhunen-Loeve modes of an
exponential covariance along the outer surface, extended into the bulk by
solving the steady heat equation with the surface values as Dirichlet data.
"""

from dataclasses import dataclass, asdict
import logging

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.sparse.csgraph import connected_components, shortest_path

from .hfm import shape_gradients

logger = logging.getLogger(__name__)

T_ZERO = 293.0


class ThermalModelError(RuntimeError):
    pass


def laplacian(mesh):
    """P1 stiffness matrix of the steady heat equation (unit conductivity)."""
    g = shape_gradients(mesh.nodes, mesh.tets)
    Ke = np.einsum("eai,ebi->eab", g, g) * mesh.volumes[:, None, None]
    rows = np.repeat(mesh.tets, 4, axis=1).ravel()
    cols = np.tile(mesh.tets, (1, 4)).ravel()
    return sp.csr_matrix((Ke.ravel(), (rows, cols)), shape=(mesh.n_nodes, mesh.n_nodes))


class HarmonicExtension:
    """Linear map from surface values to a nodal field solving the heat equation."""

    def __init__(self, mesh):
        self.mesh = mesh
        self.L = laplacian(mesh)
        self.surface = mesh.surface_nodes
        self.interior = mesh.interior_nodes
        L = self.L
        self._L_IB = L[self.interior][:, self.surface]
        self._solve = spla.factorized(L[self.interior][:, self.interior].tocsc()) if self.interior.size else None

    def __call__(self, surface_values):
        v = np.asarray(surface_values, dtype=float)
        out = np.empty(self.mesh.n_nodes)
        out[self.surface] = v
        if self.interior.size:
            out[self.interior] = self._solve(-(self._L_IB @ v))
        return out

    def interior_residual(self, field):
        """Relative residual of the discrete heat equation at interior nodes."""
        r = (self.L @ field)[self.interior]
        scale = np.abs(self.L).dot(np.abs(field))[self.interior].max() if self.interior.size else 1.0
        return float(np.max(np.abs(r)) / max(scale, 1e-300)) if self.interior.size else 0.0


def surface_graph(mesh):
    """Sparse symmetric edge-length graph over the surface nodes (local ids)."""
    surf = mesh.surface_nodes
    local = -np.ones(mesh.n_nodes, dtype=np.int64)
    local[surf] = np.arange(surf.size)
    f = mesh.surface_facets
    edges = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
    edges = np.unique(np.sort(edges, axis=1), axis=0)
    length = np.linalg.norm(mesh.nodes[edges[:, 0]] - mesh.nodes[edges[:, 1]], axis=1)
    a, b = local[edges[:, 0]], local[edges[:, 1]]
    G = sp.coo_matrix((np.r_[length, length], (np.r_[a, b], np.r_[b, a])), shape=(surf.size, surf.size))
    return G.tocsr(), surf


def surface_geodesic_matrix(mesh):
    """Shortest-path distances along the surface edge graph.

    Returns ``(D, surface_nodes)`` with ``D[a, b]`` the distance between
    ``surface_nodes[a]`` and ``surface_nodes[b]``.
    """
    G, surf = surface_graph(mesh)
    n_comp, labels = connected_components(G, directed=False)
    if n_comp > 1:
        sizes = np.bincount(labels)
        raise ThermalModelError(f"surface graph has {n_comp} components of sizes {sizes.tolist()}")
    D = shortest_path(G, method="D", directed=False)
    D = 0.5 * (D + D.T)
    np.fill_diagonal(D, 0.0)
    return D, surf


def surface_covariance(D, sigma_t, corr_length):
    return sigma_t ** 2 * np.exp(-D / corr_length)


def build_fluctuation_modes(mesh, corr_length, sigma_t=15.0, n_modes=4, geodesic=None,
                            extension=None):
    """Karhunen-Loeve surface modes extended into the bulk.

    Each returned nodal field is ``sqrt(lambda_i) v_i`` on the surface, with
    ``(lambda_i, v_i)`` the leading eigenpairs of the surface covariance.

    Returns
    -------
    modes : ndarray, shape (n_modes, n_nodes)
    eigenvalues : ndarray, shape (n_surface,), non-increasing
    """
    if corr_length <= 0:
        raise ValueError("correlation length must be positive")
    D, surf = geodesic if geodesic is not None else surface_geodesic_matrix(mesh)
    cov = surface_covariance(D, sigma_t, corr_length)
    try:
        lam, vec = np.linalg.eigh(cov)
    except np.linalg.LinAlgError as exc:  # pragma: no cover - LAPACK failure
        raise ThermalModelError(f"covariance eigen-decomposition failed: {exc}") from exc
    order = np.argsort(lam)[::-1]
    lam, vec = lam[order], vec[:, order]
    # fix the sign of each eigenvector for reproducibility
    signs = np.sign(vec[np.argmax(np.abs(vec), axis=0), np.arange(vec.shape[1])])
    vec = vec * signs
    ext = extension if extension is not None else HarmonicExtension(mesh)
    modes = np.array([ext(np.sqrt(max(lam[i], 0.0)) * vec[:, i]) for i in range(n_modes)])
    return modes, lam


def _blade_frame(mesh, blade):
    """Span fraction and signed chord fraction (-0.5 leading .. 0.5 trailing) of every node."""
    x, y, z = mesh.nodes.T
    s = z / blade.length
    angle = blade.twist * s
    x_local = np.cos(angle) * x + np.sin(angle) * y
    chord = blade.root_chord + (blade.tip_chord - blade.root_chord) * s
    return s, x_local / chord


@dataclass
class ThermalParams:
    """Analytic reference field and perturbation settings (K, mm)."""

    span_knots: tuple = (0.0, 0.15, 0.45, 0.75, 1.0)
    span_temperatures: tuple = (450.0, 950.0, 1200.0, 1200.0, 1150.0)
    leading_edge_boost: float = 0.0
    trailing_edge_drop: float = 0.0
    hot_spot_amplitude: float = 50.0
    hot_spot_span: float = 0.55
    hot_spot_radius: float = 8.0
    sigma_t: float = 15.0
    corr_length: float | None = None   # default: 0.25 * root chord
    n_modes: int = 4
    t_melt: float = 1600.0
    t_zero: float = T_ZERO

    def __post_init__(self):
        self.span_knots = tuple(float(v) for v in self.span_knots)
        self.span_temperatures = tuple(float(v) for v in self.span_temperatures)
        if len(self.span_knots) != len(self.span_temperatures) or np.any(np.diff(self.span_knots) <= 0):
            raise ValueError("span_knots must be increasing and match span_temperatures")

    def to_dict(self):
        d = asdict(self)
        d["span_knots"] = list(self.span_knots)
        d["span_temperatures"] = list(self.span_temperatures)
        return d


@dataclass
class ThermalModel:
    T_ref: np.ndarray
    dT0: np.ndarray
    modes: np.ndarray            # (n_modes, n_nodes)
    eigenvalues: np.ndarray
    t_zero: float = T_ZERO
    t_melt: float = 1600.0
    corr_length: float = 5.0
    sigma_t: float = 15.0

    @property
    def n_modes(self):
        return self.modes.shape[0]

    def fields(self):
        """All stored nodal fields: ``[T_ref, dT0, dT_1 .. dT_n]``."""
        return np.vstack([self.T_ref, self.dT0, self.modes])

    def to_arrays(self):
        return {"T_ref": self.T_ref, "dT0": self.dT0, "modes": self.modes,
                "eigenvalues": self.eigenvalues,
                "scalars": np.array([self.t_zero, self.t_melt, self.corr_length, self.sigma_t])}

    @classmethod
    def from_arrays(cls, a):
        t0, tm, d0, st = a["scalars"]
        return cls(a["T_ref"], a["dT0"], a["modes"], a["eigenvalues"], t0, tm, d0, st)


def build_thermal_model(mesh, blade, params=None):
    """Reference field, trailing-edge hot spot and fluctuation modes on ``mesh``."""
    params = params if params is not None else ThermalParams()
    ext = HarmonicExtension(mesh)
    surf = mesh.surface_nodes
    s, c = _blade_frame(mesh, blade)

    T = np.interp(s, params.span_knots, params.span_temperatures)
    # chordwise terms fade in above the foot
    fade = np.clip((s - params.span_knots[1]) / max(params.span_knots[1], 1e-12), 0.0, 1.0)
    T += params.leading_edge_boost * np.clip(-2.0 * c, 0.0, 1.0) * fade
    T -= params.trailing_edge_drop * np.clip(2.0 * c, 0.0, 1.0) * fade
    T_ref = ext(T[surf])

    geodesic = surface_geodesic_matrix(mesh)
    D, _ = geodesic
    te = mesh.tags.get("trailing_edge")
    te_surf = np.isin(surf, te) if te is not None else c[surf] > 0.49
    cand = np.flatnonzero(te_surf)
    centre = cand[np.argmin(np.abs(s[surf][cand] - params.hot_spot_span))]
    bump = np.exp(-0.5 * (D[centre] / params.hot_spot_radius) ** 2)
    dT0 = ext(bump)
    dT0 *= params.hot_spot_amplitude / dT0.max()

    corr = params.corr_length if params.corr_length is not None else 0.25 * blade.root_chord
    modes, lam = build_fluctuation_modes(mesh, corr, params.sigma_t, params.n_modes,
                                         geodesic=geodesic, extension=ext)
    return ThermalModel(T_ref, dT0, modes, lam, params.t_zero, params.t_melt, corr, params.sigma_t)


@dataclass
class ThermalSample:
    coords: np.ndarray          # (Y0, Y1, ..., Yn)
    T_max: np.ndarray
    out_of_range: int = 0

    def recheck(self, model):
        return sample_temperature(model, self.coords).T_max


def sample_temperature(model, coords):
    """Realise ``T_max`` for reduced coordinates ``(Y0, Y1..Yn)``.

    Values outside ``[0, T_melt]`` are counted and logged, never clamped.
    """
    coords = np.asarray(coords, dtype=float)
    if coords.shape != (1 + model.n_modes,):
        raise ValueError(f"expected {1 + model.n_modes} coordinates, got {coords.shape}")
    if coords[0] not in (0.0, 1.0):
        raise ValueError("Y0 must be 0 or 1")
    T = model.T_ref + coords[0] * model.dT0 + coords[1:] @ model.modes
    bad = int(np.count_nonzero((T < 0.0) | (T > model.t_melt)))
    if bad:
        logger.warning("%d nodal temperatures outside [0, %g] K", bad, model.t_melt)
    return ThermalSample(coords, T, bad)


def thermal_at_time(sample, t, schedule):
    """Blend ``(1 - omega) T0 + omega T_max`` at time ``t``."""
    w = schedule.omega(t)
    T_max = getattr(sample, "T_max", sample)
    return (1.0 - w) * schedule.t_zero + w * np.asarray(T_max)
