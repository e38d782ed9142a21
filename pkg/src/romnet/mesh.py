"""Procedural toy turbine-blade mesh made of linear tetrahedra."""

from dataclasses import dataclass, field, asdict

import numpy as np

# Kuhn split of the unit cube (local vertex ids as in ``_HEX_CORNERS``).
# Every tet contains the main diagonal 0-6, which keeps the lattice conforming.
_HEX_CORNERS = np.array([[0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0],
                         [0, 0, 1], [1, 0, 1], [1, 1, 1], [0, 1, 1]])
_KUHN = np.array([[0, 1, 2, 6], [0, 2, 3, 6], [0, 3, 7, 6],
                  [0, 7, 4, 6], [0, 4, 5, 6], [0, 5, 1, 6]])
_TET_FACES = np.array([[1, 2, 3], [0, 3, 2], [0, 1, 3], [0, 2, 1]])  # opposite vertex 0..3


class MeshError(ValueError):
    pass


@dataclass
class BladeParams:
    """Geometry of the tapered, twisted toy blade (lengths in mm)."""

    length: float = 40.0
    root_chord: float = 20.0
    tip_chord: float = 14.0
    thickness: float = 5.0
    twist: float = 0.35
    divisions: tuple = (6, 3, 20)
    foot_fraction: float = 0.15
    axis_radius: float = 250.0

    def __post_init__(self):
        self.divisions = tuple(int(d) for d in self.divisions)
        if len(self.divisions) != 3 or min(self.divisions) < 1:
            raise MeshError(f"divisions must be three integers >= 1, got {self.divisions}")
        if self.root_chord <= 0 or self.tip_chord <= 0 or self.thickness <= 0 or self.length <= 0:
            raise MeshError("length, chords and thickness must be positive")

    @property
    def taper(self):
        return self.tip_chord / self.root_chord

    @property
    def axis_point(self):
        """A point of the rotation axis; the axis is parallel to the chord (x) direction."""
        return np.array([0.0, 0.0, -self.axis_radius])

    @property
    def axis_direction(self):
        return np.array([1.0, 0.0, 0.0])

    def to_dict(self):
        d = asdict(self)
        d["divisions"] = list(self.divisions)
        return d


@dataclass
class Mesh:
    nodes: np.ndarray              # (n_nodes, 3)
    tets: np.ndarray               # (n_tets, 4)
    surface_facets: np.ndarray     # (n_facets, 3), ordered for outward normals
    pressure_facets: np.ndarray    # indices into surface_facets
    dirichlet_nodes: np.ndarray    # clamped node ids
    region: np.ndarray             # (n_tets,) 0 = foot (elastic), 1 = airfoil
    lattice_shape: tuple = ()
    tags: dict = field(default_factory=dict)
    axis_point: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, -250.0]))
    axis_direction: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0]))

    def __post_init__(self):
        self.volumes = tet_volumes(self.nodes, self.tets)
        self.ip_points = self.nodes[self.tets].mean(axis=1)

    @property
    def n_nodes(self):
        return self.nodes.shape[0]

    @property
    def n_ip(self):
        return self.tets.shape[0]

    @property
    def ip_weights(self):
        return self.volumes

    @property
    def viscoplastic(self):
        return self.region == 1

    @property
    def surface_nodes(self):
        return np.unique(self.surface_facets)

    @property
    def interior_nodes(self):
        mask = np.ones(self.n_nodes, dtype=bool)
        mask[self.surface_nodes] = False
        return np.flatnonzero(mask)

    def facet_normals(self, facets=None):
        """Area-weighted outward normals (|n| = facet area)."""
        f = self.surface_facets if facets is None else facets
        p = self.nodes[f]
        return 0.5 * np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0])

    def nodal_volumes(self):
        """Lumped (row-sum) P1 mass: each node gets a quarter of its tets' volumes."""
        w = np.zeros(self.n_nodes)
        np.add.at(w, self.tets.ravel(), np.repeat(self.volumes / 4.0, 4))
        return w

    def total_volume(self):
        return float(self.volumes.sum())

    def to_arrays(self):
        return {"nodes": self.nodes, "tets": self.tets, "surface_facets": self.surface_facets,
                "pressure_facets": self.pressure_facets, "dirichlet_nodes": self.dirichlet_nodes,
                "region": self.region, "lattice_shape": np.array(self.lattice_shape, dtype=np.int64),
                "axis_point": self.axis_point, "axis_direction": self.axis_direction}

    @classmethod
    def from_arrays(cls, a):
        return cls(np.asarray(a["nodes"]), np.asarray(a["tets"], dtype=np.int64),
                   np.asarray(a["surface_facets"], dtype=np.int64),
                   np.asarray(a["pressure_facets"], dtype=np.int64),
                   np.asarray(a["dirichlet_nodes"], dtype=np.int64),
                   np.asarray(a["region"], dtype=np.int64),
                   tuple(int(v) for v in a["lattice_shape"]), {},
                   np.asarray(a["axis_point"], dtype=float), np.asarray(a["axis_direction"], dtype=float))


def tet_volumes(nodes, tets):
    p = nodes[tets]
    return np.einsum("ij,ij->i", np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]), p[:, 3] - p[:, 0]) / 6.0


def boundary_facets(tets):
    """Faces used by exactly one tet, oriented so their normal points outward."""
    faces = tets[:, _TET_FACES].reshape(-1, 3)
    key = np.sort(faces, axis=1)
    _, inverse, counts = np.unique(key, axis=0, return_inverse=True, return_counts=True)
    inverse = inverse.ravel()
    once = counts[inverse] == 1
    if np.any(counts > 2):
        raise MeshError("non-manifold mesh: a face is shared by more than two tets")
    return faces[once]


def _lattice_coordinates(params):
    nx, ny, nz = params.divisions
    i, j, k = np.meshgrid(np.arange(nx + 1), np.arange(ny + 1), np.arange(nz + 1), indexing="ij")
    s = (k / nz).ravel()
    chord = params.root_chord + (params.tip_chord - params.root_chord) * s
    x = ((i / nx).ravel() - 0.5) * chord
    y = ((j / ny).ravel() - 0.5) * params.thickness
    z = s * params.length
    angle = params.twist * s
    ca, sa = np.cos(angle), np.sin(angle)
    return np.column_stack([ca * x - sa * y, sa * x + ca * y, z])


def generate_toy_blade_mesh(params):
    """Structured tapered/twisted beam, every hexahedron split into 6 tets.

    Node ``(i, j, k)`` of the ``(nx+1, ny+1, nz+1)`` lattice has id
    ``(i * (ny+1) + j) * (nz+1) + k``; ``x`` runs along the chord (leading
    edge at ``i = 0``), ``y`` across the thickness and ``z`` along the span.
    The bottom ``foot_fraction`` of the span is the elastic foot, the
    ``z = 0`` face is clamped and the ``j = ny`` face of the airfoil carries
    the pressure load.
    """
    nx, ny, nz = params.divisions
    nodes = _lattice_coordinates(params)

    def nid(i, j, k):
        return (i * (ny + 1) + j) * (nz + 1) + k

    ii, jj, kk = np.meshgrid(np.arange(nx), np.arange(ny), np.arange(nz), indexing="ij")
    ii, jj, kk = ii.ravel(), jj.ravel(), kk.ravel()
    corners = np.stack([nid(ii + a, jj + b, kk + c) for a, b, c in _HEX_CORNERS], axis=1)
    tets = corners[:, _KUHN].reshape(-1, 4)
    hex_of_tet = np.repeat(np.arange(corners.shape[0]), 6)

    vol = tet_volumes(nodes, tets)
    if np.any(vol <= 0):
        bad = np.unique(hex_of_tet[vol <= 0])
        cells = [(int(ii[h]), int(jj[h]), int(kk[h])) for h in bad[:20]]
        raise MeshError(f"{bad.size} hexahedral cell(s) produce inverted tets, e.g. {cells}")

    n_foot = max(1, int(round(params.foot_fraction * nz))) if params.foot_fraction > 0 else 0
    region = np.where(kk[hex_of_tet] < n_foot, 0, 1)

    facets = boundary_facets(tets)
    ijk = np.column_stack(np.unravel_index(np.arange(nodes.shape[0]), (nx + 1, ny + 1, nz + 1)))
    fk = ijk[facets]
    on_pressure = np.all(fk[:, :, 1] == ny, axis=1) & np.all(fk[:, :, 2] >= n_foot, axis=1)
    dirichlet = np.flatnonzero(ijk[:, 2] == 0)

    tags = {"leading_edge": np.flatnonzero(ijk[:, 0] == 0),
            "trailing_edge": np.flatnonzero(ijk[:, 0] == nx),
            "foot_layers": n_foot}
    return Mesh(nodes, tets, facets, np.flatnonzero(on_pressure), dirichlet, region,
                (nx + 1, ny + 1, nz + 1), tags, params.axis_point, params.axis_direction)


def single_tet_mesh(points=None):
    """One free tet (no clamping, no pressure); handy for local checks."""
    if points is None:
        points = np.array([[0.0, 0, 0], [1.0, 0, 0], [0, 1.0, 0], [0, 0, 1.0]])
    tets = np.array([[0, 1, 2, 3]])
    facets = boundary_facets(tets)
    return Mesh(np.asarray(points, dtype=float), tets, facets, np.array([], dtype=np.int64),
                np.array([], dtype=np.int64), np.array([1]), ())
