import numpy as np
import pytest

from qpatdot.adjoint import (
    GRADCHECK_TERMS, dot_adjoint_solves, evaluate, grad_dot, grad_pat, grad_reg, grad_total, gradient_check,
    pat_adjoint_solves,
)
from qpatdot.forward import get_space
from qpatdot.mesh import build_structured_mesh
from qpatdot.objective import PAT_VARIANTS, ObjectiveConfig

from conftest import boundary_zero_direction


def values(truth):
    s, g, G = truth
    return g.values, s.values, G.values


@pytest.mark.parametrize("variant", PAT_VARIANTS)
def test_pat_gradient_vanishes_at_truth(small_robin, small_init, variant):
    _, truth, data = small_robin
    g0, s0, _ = values(truth)
    ref = grad_pat(small_init[1].values, small_init[0].values, small_init[2].values, data, variant)
    scale = max(np.abs(ref.d_gamma).max(), np.abs(ref.d_sigma).max())
    gp = grad_pat(*values(truth), data, variant)
    assert np.abs(gp.d_gamma).max() <= 1e-10 * scale
    assert np.abs(gp.d_sigma).max() <= 1e-10 * scale


def test_dot_gradient_vanishes_at_truth(small_dirichlet):
    _, truth, data = small_dirichlet
    g, s, _ = values(truth)
    gd = grad_dot(g, s, data)
    ref = grad_dot(1.1 * g, s, data)
    assert np.abs(gd.d_gamma).max() <= 1e-10 * np.abs(ref.d_gamma).max()


def test_adjoints_vanish_at_truth_and_scale_linearly(tiny):
    _, truth, data = tiny
    g, s, G = values(truth)
    W = pat_adjoint_solves(1, 0, g, s, G, data)
    assert all(np.abs(w).max() <= 1e-12 for w in W)
    w = dot_adjoint_solves(0, 0, g, s, data)
    assert np.abs(w).max() <= 1e-12
    assert np.isrealobj(w) or np.abs(np.imag(w)).max() == 0


def test_pat_adjoint_linearity(tiny):
    # doubling Gamma doubles both Z and the Gamma*sigma factor of the load
    _, truth, data = tiny
    g, s, G = values(truth)
    W1 = pat_adjoint_solves(1, 0, g, 1.3 * s, G, data)
    W2 = pat_adjoint_solves(1, 0, g, 1.3 * s, 2 * G, data)
    for a, b in zip(W1, W2):
        np.testing.assert_allclose(b, 4 * a, rtol=1e-12, atol=1e-15)


def test_adjoint_solves_match_dense_resolve(tiny):
    from qpatdot.forward import assemble_system, solve_pat
    _, truth, data = tiny
    g, s, G = values(truth)
    s2 = 1.25 * s
    W_i, W_j = pat_adjoint_solves(1, 0, g, s2, G, data)
    A = assemble_system(data.mesh, g, s2, data.kappa).matrix.toarray()
    gb = data.boundary_data()
    U = [solve_pat(data.mesh, g, s2, data.kappa, gb[k]) for k in (0, 1)]
    m = get_space(data.mesh).lumped_mass
    H = [G * s2 * u for u in U]
    Z = H[0] / data.H[0] - H[1] / data.H[1]
    np.testing.assert_allclose(W_i, np.linalg.solve(A.T, -m * Z * G * s2 / data.H[1]), rtol=1e-9, atol=1e-14)
    np.testing.assert_allclose(W_j, np.linalg.solve(A.T, m * Z * G * s2 / data.H[0]), rtol=1e-9, atol=1e-14)


@pytest.mark.parametrize("kappa", [0.0, 0.2])
@pytest.mark.parametrize("term", ["pat", "dot", "total"])
def test_finite_difference_agreement(kappa, term, small_robin, small_dirichlet):
    cfg, truth, data = small_robin if kappa else small_dirichlet
    from qpatdot.pipeline import initial_guess
    s0, g0, G0 = initial_guess(truth, cfg)
    rows = gradient_check(term, g0.values, s0.values, G0.values, data, cfg.objective, seed=3, n_directions=3)
    assert max(r["rel_error"] for r in rows) <= 1e-4


@pytest.mark.parametrize("variant", ["full-pairs", "ratio", "plain-least-squares"])
def test_pat_variants_finite_difference(variant, small_robin, small_init):
    cfg, _, data = small_robin
    s0, g0, G0 = small_init
    obj = ObjectiveConfig(pat_variant=variant)
    rows = gradient_check("pat", g0.values, s0.values, G0.values, data, obj, seed=1, n_directions=2)
    assert max(r["rel_error"] for r in rows) <= 1e-4


def test_reg_gradient_properties(rng):
    mesh = build_structured_mesh(9)
    space = get_space(mesh)
    const = np.full(81, 0.4)
    gr = grad_reg(const, const, 1.0, 1.0, space)
    assert np.abs(gr.d_gamma).max() < 1e-14 and np.abs(gr.d_sigma).max() < 1e-14
    f = rng.random(81)
    np.testing.assert_allclose(grad_reg(2 * f, f, 1e-5, 1e-6, space).d_gamma,
                               2 * grad_reg(f, f, 1e-5, 1e-6, space).d_gamma)


def test_reg_finite_difference(small_robin, small_init):
    cfg, _, data = small_robin
    s0, g0, G0 = small_init
    rows = gradient_check("reg", g0.values, s0.values, G0.values, data, cfg.objective, n_directions=5)
    assert max(r["rel_error"] for r in rows) <= 1e-8


def test_total_is_sum_of_parts(small_robin, small_init):
    cfg, _, data = small_robin
    s0, g0, G0 = small_init
    obj = cfg.objective
    args = (g0.values, s0.values, G0.values)
    total = grad_total(*args, data, obj)
    parts = (grad_pat(*args, data, obj.pat_variant) + grad_dot(g0.values, s0.values, data)
             + grad_reg(g0.values, s0.values, obj.beta_gamma, obj.beta_sigma, data.space))
    parts = parts.pin_boundary(data.mesh.boundary_nodes)
    np.testing.assert_array_equal(total.d_gamma, parts.d_gamma)
    np.testing.assert_array_equal(total.d_sigma, parts.d_sigma)
    assert np.all(total.d_gamma[data.mesh.boundary_nodes] == 0)


def test_total_gradient_zero_at_truth_without_regularization(small_robin):
    _, truth, data = small_robin
    obj = ObjectiveConfig(beta_sigma=0.0, beta_gamma=0.0)
    value, _, grad = evaluate(*values(truth), data, obj)
    assert value <= 1e-18
    ref = evaluate(*(1.2 * v for v in values(truth)), data, obj)[2]
    assert np.abs(grad.d_sigma).max() <= 1e-10 * np.abs(ref.d_sigma).max()


def test_gradcheck_rejects_unknown_term(tiny):
    _, truth, data = tiny
    with pytest.raises(ValueError):
        gradient_check("bogus", *values(truth), data, ObjectiveConfig())
    assert "total" in GRADCHECK_TERMS


def test_directions_have_zero_boundary(rng):
    mesh = build_structured_mesh(5)
    d = boundary_zero_direction(rng, mesh)
    assert np.all(d[mesh.boundary_nodes] == 0)


@pytest.mark.parametrize("kappa", [0.0, 0.2])
def test_single_stage_gradient_with_free_boundary(kappa, small_robin, small_dirichlet, rng):
    # boundary gamma and Gamma are unknowns in the one-stage fit, so directions are nonzero everywhere
    cfg, truth, data = small_robin if kappa else small_dirichlet
    from qpatdot.pipeline import initial_guess

    s0, g0, G0 = (f.values for f in initial_guess(truth, cfg))
    obj = ObjectiveConfig(pat_variant="plain-least-squares", beta_Gamma=1e-6)

    def f(g, s, G):
        return evaluate(g, s, G, data, obj, with_Gamma=True, pin_boundary=False)[0]

    _, _, grad = evaluate(g0, s0, G0, data, obj, with_Gamma=True, pin_boundary=False)
    for k, (base, dg) in enumerate(((g0, grad.d_gamma), (s0, grad.d_sigma), (G0, grad.d_Gamma))):
        delta = rng.standard_normal(len(base))
        h = 1e-6 * np.max(np.abs(base))
        args_p, args_m = [g0, s0, G0], [g0, s0, G0]
        args_p[k], args_m[k] = base + h * delta, base - h * delta
        fd = (f(*args_p) - f(*args_m)) / (2 * h)
        assert abs(dg @ delta - fd) <= 1e-4 * abs(fd)
