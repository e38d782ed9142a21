"""Symmetric second-order tensors in Mandel notation.

A symmetric tensor ``a`` is stored as the 6-vector
``[a11, a22, a33, sqrt2*a23, sqrt2*a13, sqrt2*a12]`` so that the double
contraction ``a : b`` is the plain dot product of the two vectors.
"""

import numpy as np

SQRT2 = np.sqrt(2.0)

# Mandel index -> (i, j) tensor index
MANDEL_PAIRS = ((0, 0), (1, 1), (2, 2), (1, 2), (0, 2), (0, 1))
_SCALE = np.array([1.0, 1.0, 1.0, SQRT2, SQRT2, SQRT2])

IDENTITY = np.array([1.0, 1.0, 1.0, 0.0, 0.0, 0.0])


def to_mandel(t):
    """Convert ``(..., 3, 3)`` symmetric tensors to ``(..., 6)`` Mandel vectors."""
    t = np.asarray(t, dtype=float)
    out = np.empty(t.shape[:-2] + (6,))
    for k, (i, j) in enumerate(MANDEL_PAIRS):
        out[..., k] = 0.5 * (t[..., i, j] + t[..., j, i]) * _SCALE[k]
    return out


def from_mandel(v):
    v = np.asarray(v, dtype=float)
    out = np.empty(v.shape[:-1] + (3, 3))
    for k, (i, j) in enumerate(MANDEL_PAIRS):
        out[..., i, j] = v[..., k] / _SCALE[k]
        out[..., j, i] = v[..., k] / _SCALE[k]
    return out


def mandel_to_voigt_stress(v):
    """Return true tensor components ``[s11, s22, s33, s23, s13, s12]``."""
    return np.asarray(v, dtype=float) / _SCALE


def voigt_stress_to_mandel(s):
    return np.asarray(s, dtype=float) * _SCALE


def trace(v):
    v = np.asarray(v)
    return v[..., 0] + v[..., 1] + v[..., 2]


def deviator(v):
    v = np.asarray(v, dtype=float)
    return v - trace(v)[..., None] / 3.0 * IDENTITY


def von_mises(sigma):
    """Von Mises equivalent stress ``sqrt(3/2 s:s)`` of Mandel stress vectors."""
    s = deviator(sigma)
    return np.sqrt(1.5 * np.einsum("...i,...i->...", s, s))


def cubic_stiffness(c11, c12, c44):
    """Mandel 6x6 stiffness for cubic symmetry aligned with the global axes.

    Arguments may be arrays; the result then has shape ``(n, 6, 6)``.
    """
    c11, c12, c44 = np.broadcast_arrays(*(np.asarray(c, dtype=float) for c in (c11, c12, c44)))
    out = np.zeros(c11.shape + (6, 6))
    for i in range(3):
        for j in range(3):
            out[..., i, j] = c11 if i == j else c12
        out[..., 3 + i, 3 + i] = 2.0 * c44
    return out


def isotropic_stiffness(young, poisson):
    lam = young * poisson / ((1 + poisson) * (1 - 2 * poisson))
    mu = young / (2 * (1 + poisson))
    return cubic_stiffness(lam + 2 * mu, lam, mu)
