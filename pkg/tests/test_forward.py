import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qpatdot.config import preset
from qpatdot.forward import (
    SourceSpec, add_noise, assemble_system, boundary_current, compatibility_residual, generate_dataset,
    get_space, internal_data, load_dataset, save_dataset, solve_dot, solve_pat,
)
from qpatdot.mesh import build_structured_mesh
from qpatdot.pipeline import make_truth


def test_robin_static_operator_is_spd():
    mesh = build_structured_mesh(6)
    rng = np.random.default_rng(0)
    op = assemble_system(mesh, 0.01 + rng.random(36), rng.random(36), kappa=0.2)
    A = op.matrix.toarray()
    np.testing.assert_allclose(A, A.T, atol=1e-14)
    np.linalg.cholesky(A)


def test_modulated_operator_adds_imaginary_mass():
    mesh = build_structured_mesh(5)
    g, s = np.full(25, 0.03), np.full(25, 0.1)
    A0 = assemble_system(mesh, g, s, 0.2).matrix
    Aw = assemble_system(mesh, g, s, 0.2, omega=3.0).matrix
    M = get_space(mesh).mass(np.ones(25))
    np.testing.assert_allclose((Aw - A0 - 3j * M).toarray(), 0, atol=1e-14)


def test_single_cell_hand_assembly():
    mesh = build_structured_mesh(2)
    A = assemble_system(mesh, np.ones(4), np.ones(4), kappa=1.0).matrix.toarray()
    K = np.array([[1, -.5, -.5, 0], [-.5, 1, 0, -.5], [-.5, 0, 1, -.5], [0, -.5, -.5, 1]])
    M = np.diag([4 / 3, 2 / 3, 2 / 3, 4 / 3])
    Mb = np.array([[4, 1, 1, 0], [1, 4, 0, 1], [1, 0, 4, 1], [0, 1, 1, 4]]) / 3
    np.testing.assert_allclose(A, K + M + Mb, atol=1e-14)


@pytest.mark.parametrize("kappa", [0.0, 0.2])
def test_constant_boundary_data_without_absorption(kappa):
    mesh = build_structured_mesh(7)
    u = solve_dot(mesh, np.full(49, 0.05), np.zeros(49), kappa, np.full(49, 2.5), 0.0)
    np.testing.assert_allclose(u, 2.5, rtol=1e-12)
    J = boundary_current(mesh, u, np.full(49, 0.05), np.zeros(49), kappa, np.full(49, 2.5))
    np.testing.assert_allclose(J, 0.0, atol=1e-12)


@pytest.mark.parametrize("kappa, omega", [(0.0, 0.0), (0.2, 0.0), (0.2, 5.0)])
def test_zero_data_gives_zero(kappa, omega):
    mesh = build_structured_mesh(5)
    u = solve_dot(mesh, np.ones(25), np.ones(25), kappa, np.zeros(25), omega)
    np.testing.assert_array_equal(u, 0)


def _exponential_case(n, gamma=0.05, sigma=0.2, A=1.0, B=0.5):
    mesh = build_structured_mesh(n)
    lam = np.sqrt(sigma / gamma)
    x = mesh.nodes[:, 0]
    exact = A * np.exp(lam * x) + B * np.exp(-lam * x)
    g0, s0 = np.full(mesh.node_count, gamma), np.full(mesh.node_count, sigma)
    u = solve_pat(mesh, g0, s0, 0.0, exact)
    J = boundary_current(mesh, u, g0, s0, 0.0, exact)
    return mesh, u, exact, J, -gamma * lam * (A - B)


def test_exponential_solution_converges_second_order():
    errs = []
    for n in (9, 17, 33):
        _, u, exact, _, _ = _exponential_case(n)
        errs.append(np.max(np.abs(u - exact)))
    rates = np.log2(np.array(errs[:-1]) / np.array(errs[1:]))
    assert np.all(rates > 1.8)


def test_exponential_current_on_left_edge():
    errs = []
    for n in (17, 33, 65):
        mesh, _, _, J, flux = _exponential_case(n)
        p = mesh.nodes[mesh.boundary_nodes]
        left = (p[:, 0] == 0) & (p[:, 1] > 0) & (p[:, 1] < 2)
        errs.append(np.max(np.abs(J[left] - flux)))
    assert errs[-1] < 0.02 * abs(flux)
    assert np.all(np.log2(np.array(errs[:-1]) / np.array(errs[1:])) > 0.9)


def test_robin_current_is_boundary_identity():
    mesh = build_structured_mesh(9)
    rng = np.random.default_rng(3)
    g, s = 0.02 + 0.01 * rng.random(81), 0.1 * rng.random(81)
    src = SourceSpec((0.3, 0.0))
    u = solve_dot(mesh, g, s, 0.2, src, 2.0)
    J = boundary_current(mesh, u, g, s, 0.2, src, 2.0)
    b = mesh.boundary_nodes
    np.testing.assert_array_equal(J, (src.profile(mesh.nodes)[b] - u[b]) / 0.2)


def test_solution_shape_is_checked():
    mesh = build_structured_mesh(4)
    with pytest.raises(ValueError):
        boundary_current(mesh, np.zeros(5), np.ones(16), np.ones(16), 0.2, np.zeros(16))


@pytest.mark.parametrize("gamma, sigma", [(0.0, 0.1), (-1.0, 0.1), (0.1, -0.5)])
def test_rejects_unphysical_coefficients(gamma, sigma):
    mesh = build_structured_mesh(3)
    with pytest.raises(ValueError):
        assemble_system(mesh, np.full(9, gamma), np.full(9, sigma), 0.2)


def test_internal_data_products():
    np.testing.assert_array_equal(internal_data(np.full(4, 2.0), np.full(4, 0.5), np.full(4, 3.0)), 3.0)
    H = internal_data(np.array([1.0, 0.0]), np.array([2.0, 2.0]), np.array([1.0, 1.0]))
    assert H[1] == 0.0
    mesh = build_structured_mesh(5)
    s, g, G = make_truth(preset("small", n=5))
    U = np.random.default_rng(0).random(25)
    np.testing.assert_array_equal(internal_data(G, s, U), G.values * s.values * U)


def test_noise_level_zero_is_identity(small_robin):
    _, _, data = small_robin
    same = add_noise(data, 0.0, seed=5)
    np.testing.assert_array_equal(same.J, data.J)
    np.testing.assert_array_equal(same.H, data.H)


@given(st.floats(0.0, 0.2), st.integers(0, 2**31))
@settings(max_examples=10, deadline=None)
def test_noise_is_bounded(small_robin, level, seed):
    _, _, data = small_robin
    noisy = add_noise(data, level, seed)
    assert np.max(np.abs(noisy.H / data.H - 1)) <= level + 1e-14
    assert np.max(np.abs(noisy.J / data.J - 1)) <= level + 1e-14


def test_noise_is_unbiased(small_robin):
    _, _, data = small_robin
    data = data.subset(sources=[0])
    data = type(data)(data.mesh, data.sources, data.omegas, data.kappa,
                      J=np.ones((1, 1, 10**6)), H=np.ones((1, 1)))
    r = add_noise(data, 0.05, 11).J.ravel().real - 1
    assert abs(r.mean()) < 3 * r.std() / np.sqrt(r.size)


def test_negative_noise_rejected(small_robin):
    with pytest.raises(ValueError):
        add_noise(small_robin[2], -0.1, 0)


def test_compatibility_identity(small_robin):
    _, truth, data = small_robin
    Gamma = truth[2]
    k = data.zero_frequency_index()
    space = data.space
    for s in range(data.n_sources):
        scale = space.integrate(data.H[s] / Gamma.values)
        res = compatibility_residual(data.mesh, data.H[s], Gamma, data.J[s, k])
        assert abs(res) / scale <= 1e-10
        doubled = compatibility_residual(data.mesh, 2 * data.H[s], Gamma, data.J[s, k])
        assert doubled == pytest.approx(res + scale, rel=1e-9, abs=1e-12 * scale)


@pytest.mark.parametrize("kappa", [0.0, 0.2])
def test_compatibility_identity_dirichlet_and_robin(kappa):
    cfg = preset("small", kappa=kappa, noise_level=0.0)
    truth = make_truth(cfg)
    data = generate_dataset(cfg, truth)
    for s in range(data.n_sources):
        scale = data.space.integrate(data.H[s] / truth[2].values)
        assert abs(compatibility_residual(data.mesh, data.H[s], truth[2], data.J[s, 0])) <= 1e-10 * scale


def test_compatibility_without_absorption():
    mesh = build_structured_mesh(5)
    u = solve_pat(mesh, np.full(25, 0.1), np.zeros(25), 0.2, np.full(25, 1.0))
    J = boundary_current(mesh, u, np.full(25, 0.1), np.zeros(25), 0.2, np.full(25, 1.0))
    H = internal_data(np.ones(25), np.zeros(25), u)
    assert compatibility_residual(mesh, H, np.ones(25), J) == pytest.approx(0.0, abs=1e-13)


def test_default_dataset_layout():
    cfg = preset("full", noise_level=0.0)
    data = generate_dataset(cfg, make_truth(cfg))
    assert data.J.shape == (36, 5, 320)
    assert data.H.shape == (36, 6561)


def test_single_source_single_frequency():
    cfg = preset("small", n_sources=2, omegas=(0.0,))
    data = generate_dataset(cfg, make_truth(cfg)).subset(sources=[0])
    assert data.J.shape[:2] == (1, 1) and data.H.shape[0] == 1


def test_generation_is_deterministic():
    cfg = preset("small", noise_level=0.05, seed=9)
    a = generate_dataset(cfg, make_truth(cfg))
    b = generate_dataset(cfg, make_truth(cfg))
    np.testing.assert_array_equal(a.J, b.J)
    np.testing.assert_array_equal(a.H, b.H)


def test_dataset_round_trip(tmp_path, small_robin):
    _, _, data = small_robin
    save_dataset(data, tmp_path)
    back = load_dataset(tmp_path)
    np.testing.assert_array_equal(back.J, data.J)
    np.testing.assert_array_equal(back.H, data.H)
    assert back.kappa == data.kappa and back.sources == data.sources
    np.testing.assert_array_equal(back.omegas, data.omegas)


def test_missing_dataset_file_is_named(tmp_path, small_robin):
    save_dataset(small_robin[2], tmp_path)
    (tmp_path / "H_s1.csv").unlink()
    with pytest.raises(FileNotFoundError, match="H_s1.csv"):
        load_dataset(tmp_path)
