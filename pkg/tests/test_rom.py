import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from romnet.hfm import HighFidelityModel
from romnet.loading import CycleSchedule
from romnet.rom import (DUAL_NAMES, LocalROM, ReducedBasis, ReducedQuadrature, ReducedSolver,
                        dof_weights, ecm_quadrature, force_integrands, integrand_basis,
                        projection_errors, reduced_solve, snapshot_pod, train_local_rom)
from romnet.thermal import sample_temperature
from romnet.tensor import voigt_stress_to_mandel


# ---------------------------------------------------------------- POD

def test_single_snapshot_mode():
    u = np.array([3.0, 0.0, 4.0])
    b = snapshot_pod(u[None], 1e-8)
    assert b.n_modes == 1
    assert np.allclose(np.abs(b.modes[0]), u / 5.0, rtol=1e-15)


def test_two_orthogonal_equal_norm_snapshots():
    # correlation matrix [[2, 0], [0, 2]] by hand: lambda = 2, 2
    S = np.array([[1.0, 1.0, 0.0, 0.0], [0.0, 0.0, 1.0, -1.0]])
    b = snapshot_pod(S, 1e-8)
    assert b.n_modes == 2
    assert np.allclose(b.eigenvalues, [2.0, 2.0])
    assert np.allclose(b.gram(), np.eye(2), atol=1e-14)


def test_zero_snapshots_give_empty_basis(caplog):
    with caplog.at_level("WARNING"):
        b = snapshot_pod(np.zeros((3, 5)), 1e-4)
    assert b.n_modes == 0 and "zero" in caplog.text


def test_truncation_rule():
    # singular values 1, 1e-3, 1e-5 along orthogonal directions
    S = np.diag([1.0, 1e-3, 1e-5])
    assert snapshot_pod(S, 1e-4).n_modes == 2
    assert snapshot_pod(S, 1e-6).n_modes == 3
    assert snapshot_pod(S, 1e-2).n_modes == 1


@settings(max_examples=20, deadline=None)
@given(st.integers(1, 8), st.integers(8, 30), st.integers(0, 10_000), st.sampled_from([1e-8, 1e-4]))
def test_pod_properties(m, n, seed, tol):
    rng = np.random.default_rng(seed)
    S = rng.normal(size=(m, 3)) @ rng.normal(size=(3, n)) + 1e-6 * rng.normal(size=(m, n))
    w = rng.uniform(0.5, 2.0, n)
    b = snapshot_pod(S, tol, w)
    assert np.allclose(b.gram(), np.eye(b.n_modes), atol=1e-10)
    assert np.all(np.diff(b.eigenvalues) <= 1e-12 * b.eigenvalues[0])
    # discarded energy bounds the projection error of every snapshot
    err = projection_errors(b, S)
    bound = np.sqrt(b.eigenvalues[b.n_modes:].sum()) / np.sqrt(np.sum(S ** 2 * w, axis=1))
    assert np.all(err <= bound * (1 + 1e-6) + 1e-12)


def test_weighted_inner_product_orthonormality(small_mesh):
    rng = np.random.default_rng(1)
    S = rng.normal(size=(5, 3 * small_mesh.n_nodes))
    b = snapshot_pod(S, 1e-8, dof_weights(small_mesh))
    assert np.allclose(b.gram(), np.eye(5), atol=1e-10)


def test_basis_round_trip():
    b = snapshot_pod(np.eye(3)[:2], 1e-8, np.array([1.0, 2.0, 3.0]))
    again = ReducedBasis.from_arrays(b.to_arrays("x."), "x.")
    assert np.array_equal(again.modes, b.modes) and again.tol == b.tol


# ---------------------------------------------------------------- ECM

def test_constant_integrand_single_point():
    vol = np.array([0.5, 1.25, 2.0, 0.25])
    q = ecm_quadrature(np.ones((1, 4)), vol, 5e-4)
    assert len(q) == 1
    assert q.weights[0] == pytest.approx(vol.sum(), abs=1e-10)


def test_ecm_polynomial_integrands():
    rng = np.random.default_rng(2)
    x = np.sort(rng.random(200))
    vol = np.full(200, 1.0 / 200)
    G = np.vstack([x ** k for k in range(6)])
    q = ecm_quadrature(G, vol, 1e-8)
    assert q.residual <= 1e-8
    assert np.all(q.weights > 0)
    assert len(q) < 200
    assert np.allclose(G[:, q.points] @ q.weights, G @ vol, rtol=1e-7)


def test_ecm_rejects_zero_integrals():
    with pytest.raises(ValueError):
        ecm_quadrature(np.zeros((2, 3)), np.ones(3))


def test_integrand_basis_orthonormal_and_constant():
    rng = np.random.default_rng(3)
    vol = rng.uniform(0.1, 1.0, 40)
    blocks = [rng.normal(size=(5, 40)), rng.normal(size=(4, 40))]
    Phi, _ = integrand_basis(blocks, vol, 1e-10)
    assert np.allclose((Phi * vol) @ Phi.T, np.eye(Phi.shape[0]), atol=1e-10)
    q = ecm_quadrature(Phi, vol, 1e-10)
    assert q.weights.sum() == pytest.approx(vol.sum(), rel=1e-8)


# ---------------------------------------------------------------- local ROM

@pytest.fixture(scope="module")
def trained(small_mesh, small_thermal, material):
    hfm = HighFidelityModel(small_mesh, material)
    coords = [[1, 0.5, -0.3, 0.2, 0.0], [1, -0.8, 0.4, 0.1, -0.5], [1, 0.1, 1.0, -0.7, 0.3],
              [1, 1.2, 0.0, 0.4, 0.9]]
    samples = [sample_temperature(small_thermal, c) for c in coords]
    trajs = [hfm.solve_cycle(s) for s in samples]
    rom = train_local_rom(hfm, trajs, 0, np.arange(len(trajs)))
    return hfm, samples, trajs, rom


def test_rom_structure(trained):
    hfm, _, trajs, rom = trained
    assert set(rom.duals) == set(DUAL_NAMES)
    assert np.all(rom.quadrature.weights > 0)
    assert rom.quadrature.residual <= 5e-4
    assert len(rom.quadrature) < hfm.mesh.n_ip
    assert np.allclose(rom.primal.gram(), np.eye(rom.primal.n_modes), atol=1e-10)


def test_training_projection_errors(trained):
    _, _, trajs, rom = trained
    U = np.vstack([t.u[1:] for t in trajs])
    assert projection_errors(rom.primal, U).max() <= 10 * rom.primal.tol
    P = np.vstack([t.p_cum[1:] for t in trajs])
    assert projection_errors(rom.duals["p_cum"], P).max() <= 10 * rom.duals["p_cum"].tol


def test_ecm_reproduces_training_forces(trained):
    hfm, _, trajs, rom = trained
    # the cubature integrates an L2-orthonormal integrand basis within the
    # tolerance, so the error on an integrand g is bounded by
    # tol * ||g||_L2 * sqrt(|Omega|)
    vol = hfm.mesh.volumes
    for tr in trajs:
        for k in range(1, tr.n_steps + 1):
            G = force_integrands(hfm, rom.primal.modes, voigt_stress_to_mandel(tr.sigma[k]))
            full = G @ vol
            red = G[:, rom.rid] @ rom.quadrature.weights
            bound = 5e-4 * np.sqrt(np.sum(G ** 2 @ vol) * vol.sum())
            assert np.linalg.norm(red - full) <= bound


def test_training_sample_reduced_solve(trained):
    hfm, samples, trajs, rom = trained
    red = reduced_solve(hfm, rom, samples[1])
    u = red.displacement(rom)
    w = np.repeat(hfm.mesh.nodal_volumes(), 3)
    err = np.sqrt(np.sum((u - trajs[1].u) ** 2 * w)) / np.sqrt(np.sum(trajs[1].u ** 2 * w))
    assert err <= 2e-2


def test_zero_loading_gives_zero_coordinates(trained, small_mesh):
    hfm, _, _, rom = trained
    quiet = HighFidelityModel(small_mesh, hfm.material, CycleSchedule(omega_max=0.0, p_max=0.0))
    red = ReducedSolver(quiet, rom).solve(np.full(small_mesh.n_nodes, 293.0))
    assert np.all(red.q == 0)


def test_galerkin_consistency_with_exact_quadrature(trained):
    # a single trajectory's displacements span the basis and the full
    # quadrature is used, so the reduced problem has the HFM solution
    hfm, samples, trajs, rom = trained
    primal = snapshot_pod(trajs[2].u[1:], 1e-12, dof_weights(hfm.mesh), normalize=True)
    n = hfm.mesh.n_ip
    full = ReducedQuadrature(np.arange(n), hfm.mesh.volumes.copy(), 0.0)
    exact = LocalROM(0, primal, {}, full, np.array([2]))
    red = ReducedSolver(hfm, exact, newton_tol=1e-10).solve(samples[2])
    u = red.displacement(exact)
    assert np.max(np.abs(u - trajs[2].u)) <= 1e-6 * np.abs(trajs[2].u).max()


def test_numerical_and_consistent_tangent_agree(trained):
    hfm, samples, _, rom = trained
    a = ReducedSolver(hfm, rom, tangent="consistent").solve(samples[0])
    b = ReducedSolver(hfm, rom, tangent="numerical").solve(samples[0])
    assert np.allclose(a.q, b.q, rtol=1e-6, atol=1e-9 * np.abs(a.q).max())
    with pytest.raises(ValueError):
        ReducedSolver(hfm, rom, tangent="secant")


def test_rom_round_trip(trained):
    _, _, _, rom = trained
    again = LocalROM.from_arrays(rom.to_arrays())
    assert again.cluster == rom.cluster
    assert np.array_equal(again.rid, rom.rid)
    assert np.array_equal(again.duals["s12"].modes, rom.duals["s12"].modes)
