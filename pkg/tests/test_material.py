from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.integrate import solve_ivp

from romnet.material import (SLIP_SYSTEMS, MaterialParams, MaterialState, build_slip_systems,
                             consistent_tangent, default_material, integrate_point,
                             numerical_tangent, resolved_shear_stress)
from romnet.tensor import (IDENTITY, cubic_stiffness, from_mandel, isotropic_stiffness,
                           mandel_to_voigt_stress, to_mandel, von_mises)

T0 = 293.0
HOT = 1230.0
RAMP = np.array([-0.3, -0.3, 1.0, 0.0, 0.0, 0.2])   # Mandel strain direction


def _sym(a):
    return 0.5 * (a + a.T)


# ---------------------------------------------------------------- slip systems

def test_slip_system_counts():
    s = build_slip_systems()
    assert len(s) == 18
    assert s.octahedral.sum() == 12
    assert (~s.octahedral).sum() == 6


def test_slip_systems_orthogonal_and_unit():
    s = build_slip_systems()
    assert np.all(np.abs(np.einsum("si,si->s", s.normals, s.directions)) == 0.0)
    assert np.allclose(np.linalg.norm(s.normals, axis=1), 1.0)
    assert np.allclose(np.linalg.norm(s.directions, axis=1), 1.0)


def test_schmid_tensor_self_contraction_is_half():
    s = build_slip_systems()
    assert np.allclose(np.einsum("si,si->s", s.schmid, s.schmid), 0.5, atol=1e-15)
    # independent check through full 3x3 tensors
    for n, l in zip(s.normals, s.directions):
        m = _sym(np.outer(l, n))
        assert np.tensordot(m, m) == pytest.approx(0.5, abs=1e-15)


def test_slip_systems_distinct():
    s = build_slip_systems()
    G = np.abs(s.schmid @ s.schmid.T)
    np.fill_diagonal(G, 0.0)
    assert G.max() < 0.5 - 1e-12


# ---------------------------------------------------------------- Schmid law

def test_hydrostatic_stress_has_no_resolved_shear():
    tau = resolved_shear_stress(123.0 * IDENTITY)
    assert np.max(np.abs(tau)) <= 1e-12


def test_aligned_stress_resolves_to_half():
    s = build_slip_systems()
    for k in (0, 5, 13):
        sigma = to_mandel(7.0 * _sym(np.outer(s.directions[k], s.normals[k])))
        assert resolved_shear_stress(sigma)[k] == pytest.approx(3.5, rel=1e-14)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3), min_size=6, max_size=6),
       st.lists(st.floats(-1e3, 1e3), min_size=6, max_size=6), st.floats(-5, 5))
def test_resolved_shear_is_linear(a, b, c):
    a, b = np.array(a), np.array(b)
    lhs = resolved_shear_stress(a + c * b)
    rhs = resolved_shear_stress(a) + c * resolved_shear_stress(b)
    assert np.allclose(lhs, rhs, atol=1e-9 * (1 + np.abs(lhs).max()))


# ---------------------------------------------------------------- tensors

def test_von_mises_cases():
    assert von_mises(5.0 * IDENTITY) == pytest.approx(0.0, abs=1e-12)
    assert von_mises(np.array([42.0, 0, 0, 0, 0, 0])) == pytest.approx(42.0)
    tau = 3.0
    shear = to_mandel(np.array([[0, tau, 0], [tau, 0, 0], [0, 0, 0]]))
    assert von_mises(shear) == pytest.approx(np.sqrt(3.0) * tau)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3), min_size=6, max_size=6))
def test_mandel_round_trip(v):
    v = np.array(v)
    assert np.allclose(to_mandel(from_mandel(v)), v, atol=1e-12)
    assert np.allclose(mandel_to_voigt_stress(v)[3:], v[3:] / np.sqrt(2.0))


def test_isotropic_stiffness_is_cubic_special_case():
    E, nu = 200e3, 0.3
    lam = E * nu / ((1 + nu) * (1 - 2 * nu))
    mu = E / (2 * (1 + nu))
    C = isotropic_stiffness(E, nu)
    assert np.allclose(C, cubic_stiffness(lam + 2 * mu, lam, mu))


# ---------------------------------------------------------------- parameters

def test_material_interpolation_and_range(material):
    c = material.at(np.array([200.0, 1800.0, 0.5 * (700.0 + 900.0)]))
    assert c["c11"][0] == 252e3 and c["c11"][1] == 170e3
    assert c["c11"][2] == pytest.approx(0.5 * (238e3 + 230e3))
    with pytest.raises(ValueError):
        material.at(np.array([100.0]))


def test_material_rejects_bad_tables(material):
    d = material.to_dict()
    d["temperatures"] = d["temperatures"][::-1]
    with pytest.raises(ValueError):
        MaterialParams.from_dict(d)
    d = material.to_dict()
    del d["table"]["oct.K_h"]
    with pytest.raises(ValueError):
        MaterialParams.from_dict(d)


def test_material_dict_round_trip(material):
    again = MaterialParams.from_dict(material.to_dict())
    for k in material.table:
        assert np.array_equal(again.table[k], material.table[k])


# ---------------------------------------------------------------- update

def test_elastic_domain_step(material):
    state = MaterialState.zeros(1)
    T = np.array([900.0])
    alpha = material.at(T)["alpha"][0]
    eps = (alpha * (T[0] - T0) * IDENTITY + 1e-4 * RAMP)[None]
    sigma, new = integrate_point(state, eps, T, 10.0, material)
    c = material.at(T)
    C = cubic_stiffness(c["c11"], c["c12"], c["c44"])[0]
    assert np.allclose(sigma[0], C @ (eps[0] - alpha * (T[0] - T0) * IDENTITY), rtol=1e-14)
    assert np.all(new.dgamma == 0) and np.all(new.eps_p == 0)
    assert np.all(new.x == 0) and np.all(new.nu == 0) and np.all(new.p_cum == 0)


def _single_system_material(material):
    """Octahedral threshold high enough that a stress aligned with one system
    (coupling to the others at most 2/3) activates that system alone."""
    table = dict(material.table)
    table["oct.r0"] = np.full_like(material.temperatures, 300.0)
    table["cub.r0"] = np.full_like(material.temperatures, 1e12)
    return replace(material, table=table)


def _flow(material, T):
    F = material.flow_table(np.array([T]))[0]
    return dict(zip(("eps_h", "K_h", "n_h", "c", "d", "M", "m", "r0", "Q", "b"), F))


def test_single_system_rate_matches_flow_rule(material):
    material = _single_system_material(material)
    # hold tau constant on one system with x and r frozen: slip rate is
    # eps_h sinh(((tau - r0) / K)^n); a tiny dt makes the backward Euler
    # increment equal to rate * dt to first order
    P = _flow(material, HOT)
    k = 0
    m = SLIP_SYSTEMS.schmid[k]
    tau = P["r0"][k] + 0.6 * P["K_h"][k]
    rate = P["eps_h"][k] * np.sinh(((tau - P["r0"][k]) / P["K_h"][k]) ** P["n_h"][k])
    c = material.at(np.array([HOT]))
    C = cubic_stiffness(c["c11"], c["c12"], c["c44"])[0]
    alpha = c["alpha"][0]
    # stress aligned with system 0 only; check the others stay below threshold
    sigma = 2.0 * tau * m
    assert np.sum(np.abs(resolved_shear_stress(sigma)) > P["r0"]) == 1
    eps = np.linalg.solve(C, sigma) + alpha * (HOT - T0) * IDENTITY
    dt = 1e-6
    _, new = integrate_point(MaterialState.zeros(1), eps[None], np.array([HOT]), dt, material)
    assert new.dgamma[0, k] / dt == pytest.approx(rate, rel=1e-3)
    assert np.count_nonzero(new.dgamma[0]) == 1


def test_octahedral_slip_accumulates_over_sqrt3(material):
    material = _single_system_material(material)
    P = _flow(material, HOT)
    m = SLIP_SYSTEMS.schmid[3]
    c = material.at(np.array([HOT]))
    C = cubic_stiffness(c["c11"], c["c12"], c["c44"])[0]
    alpha = c["alpha"][0]
    sigma = 2.0 * (P["r0"][3] + 0.8 * P["K_h"][3]) * m
    eps = np.linalg.solve(C, sigma) + alpha * (HOT - T0) * IDENTITY
    _, new = integrate_point(MaterialState.zeros(1), eps[None], np.array([HOT]), 50.0, material)
    dg = new.dgamma[0]
    assert np.count_nonzero(dg) == 1 and dg[3] > 0
    assert new.p_cum[0] == pytest.approx(dg[3] / np.sqrt(3.0), rel=1e-12)


def _strain_ramp_oracle(material, T, rate, t_end):
    """Explicit high-order integration of the rate equations at one point."""
    P = _flow(material, T)
    c = material.at(np.array([T]))
    C = cubic_stiffness(c["c11"], c["c12"], c["c44"])[0]
    S = SLIP_SYSTEMS.schmid
    octa = SLIP_SYSTEMS.octahedral

    def rhs(t, y):
        ep, x, nu = y[:6], y[6:24], y[24:42]
        z = S @ (C @ (rate * t * RAMP - ep)) - x
        r = P["r0"] + P["Q"] * (1.0 - np.exp(-P["b"] * nu))
        f = np.maximum((np.abs(z) - r) / P["K_h"], 0.0)
        g = P["eps_h"] * np.sinh(f ** P["n_h"]) * np.sign(z)
        dx = P["c"] * g - P["d"] * np.abs(g) * x - P["c"] * (np.abs(x) / P["M"]) ** P["m"] * np.sign(x)
        dp = np.sqrt(2.0 / 3.0) * np.linalg.norm(g[octa] @ S[octa])
        return np.concatenate([g @ S, dx, np.abs(g), [dp]])

    sol = solve_ivp(rhs, (0.0, t_end), np.zeros(43), method="DOP853", rtol=1e-12, atol=1e-14)
    assert sol.success
    y = sol.y[:, -1]
    return C @ (rate * t_end * RAMP - y[:6]), y[-1]


def _backward_euler_ramp(material, T, rate, t_end, n):
    alpha = material.at(np.array([T]))["alpha"][0]
    state = MaterialState.zeros(1)
    dt = t_end / n
    for k in range(1, n + 1):
        eps = alpha * (T - T0) * IDENTITY + rate * k * dt * RAMP
        sigma, state = integrate_point(state, eps[None], np.array([T]), dt, material)
    return sigma[0], state


def test_backward_euler_first_order(material):
    sig_ref, p_ref = _strain_ramp_oracle(material, HOT, 1e-5, 300.0)
    assert p_ref > 1e-4
    errs = []
    for n in (16, 32, 64, 128):
        sigma, state = _backward_euler_ramp(material, HOT, 1e-5, 300.0, n)
        errs.append(np.linalg.norm(sigma - sig_ref) / np.linalg.norm(sig_ref))
    ratios = np.array(errs[:-1]) / np.array(errs[1:])
    assert np.all((ratios >= 1.7) & (ratios <= 2.3)), ratios


def test_inelastic_strain_traceless_and_dissipative(material):
    state = MaterialState.zeros(1)
    alpha = material.at(np.array([HOT]))["alpha"][0]
    dt = 25.0
    for k in range(1, 15):
        eps = alpha * (HOT - T0) * IDENTITY + 2e-3 * np.sin(0.5 * k) * RAMP
        sigma, new = integrate_point(state, eps[None], np.array([HOT]), dt, material)
        tau = resolved_shear_stress(sigma[0])
        assert np.sum((tau - new.x[0]) * new.dgamma[0]) >= 0.0
        assert abs(new.eps_p[0, :3].sum()) <= 1e-12
        assert new.p_cum[0] >= state.p_cum[0]
        state = new
    assert state.p_cum[0] > 0


def test_elastic_round_trip(material):
    T = np.array([700.0])
    alpha = material.at(T)["alpha"][0]
    th = alpha * (T[0] - T0) * IDENTITY
    state = MaterialState.zeros(1)
    _, state = integrate_point(state, (th + 5e-4 * RAMP)[None], T, 100.0, material)
    sigma, state = integrate_point(state, th[None], T, 100.0, material)
    assert np.max(np.abs(sigma)) <= 1e-9
    assert state.p_cum[0] == 0.0


def test_elastic_points_skip_flow(material):
    eps = np.tile(3e-3 * RAMP, (2, 1))
    T = np.full(2, HOT)
    sigma, new = integrate_point(MaterialState.zeros(2), eps, T, 100.0, material,
                                 plastic=np.array([False, True]))
    assert np.all(new.dgamma[0] == 0)
    assert np.any(new.dgamma[1] != 0)


def test_integrate_rejects_bad_dt(material):
    with pytest.raises(ValueError):
        integrate_point(MaterialState.zeros(1), np.zeros((1, 6)), np.array([T0]), 0.0, material)


def test_tangents_agree(material):
    rng = np.random.default_rng(3)
    n = 6
    T = np.full(n, HOT)
    alpha = material.at(T)["alpha"][0]
    eps = alpha * (HOT - T0) * IDENTITY + 2e-3 * rng.normal(size=(n, 6))
    state = MaterialState.zeros(n)
    sigma, new = integrate_point(state, eps, T, 50.0, material)
    assert np.any(new.dgamma != 0)
    Dn = numerical_tangent(state, eps, T, 50.0, material, sigma=sigma, new_state=new)
    Dc = consistent_tangent(state, eps, T, 50.0, material, new)
    scale = np.abs(Dc).max()
    assert np.max(np.abs(Dn - Dc)) <= 1e-4 * scale
