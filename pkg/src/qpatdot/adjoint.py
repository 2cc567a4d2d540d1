"""Adjoint-state gradients of the objective terms.

Gradients are nodal dual vectors: ``grad @ delta`` is the directional
derivative of the discrete objective along the nodal perturbation ``delta``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .forward import DataSet, ForwardState, _values, forward_state
from .objective import ObjectiveConfig, dot_misfit, model_H, pat_misfit, regularization


@dataclass
class GradientPair:
    d_gamma: np.ndarray
    d_sigma: np.ndarray
    tag: str = ""
    d_Gamma: np.ndarray | None = None

    def __add__(self, other: "GradientPair") -> "GradientPair":
        if self.d_Gamma is None and other.d_Gamma is None:
            dG = None
        else:
            dG = sum(x for x in (self.d_Gamma, other.d_Gamma) if x is not None)
        tag = "+".join(t for t in (self.tag, other.tag) if t)
        return GradientPair(self.d_gamma + other.d_gamma, self.d_sigma + other.d_sigma, tag, dG)

    def pin_boundary(self, boundary_nodes) -> "GradientPair":
        d_gamma = self.d_gamma.copy()
        d_gamma[boundary_nodes] = 0.0
        return GradientPair(d_gamma, self.d_sigma, self.tag, self.d_Gamma)


def _state(dataset, gamma, sigma, state, need_dot=True):
    if state is None:
        state = forward_state(dataset, _values(gamma), _values(sigma), need_dot=need_dot)
    return state


def pat_adjoint_solves(i: int, j: int, gamma, sigma, Gamma, dataset: DataSet, state=None):
    """Adjoint states of the single pair term ``(i, j)`` of the rescaled PAT misfit.

    Each solves the forward operator with homogeneous boundary data and volume
    load ``dPhi_ij/dU``; ``Z_ij`` enters linearly.
    """
    st = _state(dataset, gamma, sigma, state, need_dot=False)
    Gamma = _values(Gamma)
    m = dataset.space.lumped_mass
    Hd = dataset.H
    H = model_H(st, Gamma)
    Z = H[j] / Hd[j] - H[i] / Hd[i]
    scale = Gamma * st.sigma
    W_i = st.pat_operator.adjoint_volume(-m * Z * scale / Hd[i])
    W_j = st.pat_operator.adjoint_volume(m * Z * scale / Hd[j])
    return W_i, W_j


def grad_pat(gamma, sigma, Gamma, dataset: DataSet, variant: str = "fixed-reference",
             state: ForwardState | None = None, with_Gamma: bool = False) -> GradientPair:
    """Gradient of the chosen PAT misfit with respect to gamma and sigma (and Gamma)."""
    st = _state(dataset, gamma, sigma, state, need_dot=False)
    m = dataset.space.lumped_mass
    Ns = dataset.n_sources
    if variant == "ratio":
        Gamma = np.ones_like(st.sigma)
        sigma_model = np.ones_like(st.sigma)  # H_i / H_j = U_i / U_j
    else:
        Gamma = _values(Gamma)
        sigma_model = st.sigma
    H = Gamma * sigma_model * st.U
    _, dH = pat_misfit(variant, H, dataset.H, m)
    d_gamma = np.zeros_like(st.sigma)
    d_sigma = np.zeros_like(st.sigma)
    if variant != "ratio":
        d_sigma += np.sum(dH * Gamma * st.U, axis=0)
    op = st.pat_operator
    for s in range(Ns):
        f = dH[s] * Gamma * sigma_model
        if not np.any(f):
            continue
        lam = op.adjoint_volume(f)
        sg, ss = op.sensitivity(lam, st.U[s])
        d_gamma -= sg
        d_sigma -= ss
    d_Gamma = np.sum(dH * sigma_model * st.U, axis=0) if with_Gamma and variant != "ratio" else None
    return GradientPair(d_gamma, d_sigma, "pat", d_Gamma)


def dot_adjoint_solves(j: int, i: int, gamma, sigma, dataset: DataSet, state=None) -> np.ndarray:
    """Adjoint state for source ``j`` at frequency index ``i``, driven by the
    normalised current residual on the boundary."""
    st = _state(dataset, gamma, sigma, state)
    _, a = dot_misfit(st.J[j:j + 1, i:i + 1], dataset.J[j:j + 1, i:i + 1], dataset.space.detector_weight)
    return st.operators[i].adjoint_current(a[0, 0])


def grad_dot(gamma, sigma, dataset: DataSet, state: ForwardState | None = None) -> GradientPair:
    st = _state(dataset, gamma, sigma, state)
    _, a = dot_misfit(st.J, dataset.J, dataset.space.detector_weight)
    d_gamma = np.zeros_like(st.sigma)
    d_sigma = np.zeros_like(st.sigma)
    for w, op in enumerate(st.operators):
        for s in range(dataset.n_sources):
            if not np.any(a[s, w]):
                continue
            lam = op.adjoint_current(a[s, w])
            sg, ss = op.sensitivity(lam, st.u[s, w])
            d_gamma -= np.real(sg)
            d_sigma -= np.real(ss)
    return GradientPair(d_gamma, d_sigma, "dot")


def grad_reg(gamma, sigma, beta_gamma: float, beta_sigma: float, space,
             Gamma=None, beta_Gamma: float = 0.0) -> GradientPair:
    K = space.stiffness_unit
    d_Gamma = None
    if Gamma is not None:
        d_Gamma = beta_Gamma * (K @ _values(Gamma))
    return GradientPair(beta_gamma * (K @ _values(gamma)), beta_sigma * (K @ _values(sigma)), "reg", d_Gamma)


def evaluate(gamma, sigma, Gamma, dataset: DataSet, config: ObjectiveConfig,
             with_Gamma: bool = False, pin_boundary: bool = True):
    """One forward pass: total value, breakdown and gradient of the total."""
    gamma, sigma, Gamma = _values(gamma), _values(sigma), _values(Gamma)
    st = forward_state(dataset, gamma, sigma, need_dot=config.include_dot)
    space = dataset.space
    if config.pat_variant == "ratio":
        pat, _ = pat_misfit("ratio", st.U, dataset.H, space.lumped_mass)
    else:
        pat, _ = pat_misfit(config.pat_variant, model_H(st, Gamma), dataset.H, space.lumped_mass)
    g = grad_pat(gamma, sigma, Gamma, dataset, config.pat_variant, st, with_Gamma)
    dot = 0.0
    if config.include_dot:
        dot, _ = dot_misfit(st.J, dataset.J, space.detector_weight)
        g = g + grad_dot(gamma, sigma, dataset, st)
    reg = regularization(gamma, sigma, config.beta_gamma, config.beta_sigma, space,
                         Gamma if with_Gamma else None, config.beta_Gamma)
    g = g + grad_reg(gamma, sigma, config.beta_gamma, config.beta_sigma, space,
                     Gamma if with_Gamma else None, config.beta_Gamma)
    if pin_boundary:
        g = g.pin_boundary(space.boundary_nodes)
    total = pat + dot + reg
    return total, {"pat": pat, "dot": dot, "reg": reg, "total": total}, g


def grad_total(gamma, sigma, Gamma, dataset: DataSet, config: ObjectiveConfig,
               with_Gamma: bool = False) -> GradientPair:
    """Sum of the selected term gradients with boundary gamma entries zeroed."""
    return evaluate(gamma, sigma, Gamma, dataset, config, with_Gamma)[2]


GRADCHECK_TERMS = ("pat", "dot", "reg", "total")


def term_value_and_gradient(term: str, gamma, sigma, Gamma, dataset: DataSet, config: ObjectiveConfig):
    """``(value, GradientPair)`` of one objective term, boundary entries kept."""
    if term not in GRADCHECK_TERMS:
        raise ValueError(f"unknown term {term!r}; choose from {GRADCHECK_TERMS}")
    gamma, sigma, Gamma = _values(gamma), _values(sigma), _values(Gamma)
    space = dataset.space
    if term == "reg":
        value = regularization(gamma, sigma, config.beta_gamma, config.beta_sigma, space)
        return value, grad_reg(gamma, sigma, config.beta_gamma, config.beta_sigma, space)
    if term == "total":
        value, _, grad = evaluate(gamma, sigma, Gamma, dataset, config, pin_boundary=False)
        return value, grad
    st = forward_state(dataset, gamma, sigma, need_dot=(term == "dot"))
    if term == "dot":
        return dot_misfit(st.J, dataset.J, space.detector_weight)[0], grad_dot(gamma, sigma, dataset, st)
    H = st.U if config.pat_variant == "ratio" else model_H(st, Gamma)
    value = pat_misfit(config.pat_variant, H, dataset.H, space.lumped_mass)[0]
    return value, grad_pat(gamma, sigma, Gamma, dataset, config.pat_variant, st)


def gradient_check(term: str, gamma, sigma, Gamma, dataset: DataSet, config: ObjectiveConfig,
                   seed: int = 0, n_directions: int = 5, rel_step: float | None = None, eps: float = 1e-14):
    """Compare adjoint directional derivatives with central differences.

    Directions are standard normal with zero boundary entries, drawn
    separately for gamma and sigma. Returns one dict per direction. The
    default step is 1e-6 relative; the quadratic regulariser has no
    truncation error, so it uses 1e-1 to keep cancellation out of the way.
    """
    if rel_step is None:
        rel_step = 1e-1 if term == "reg" else 1e-6
    gamma, sigma, Gamma = _values(gamma), _values(sigma), _values(Gamma)
    _, grad = term_value_and_gradient(term, gamma, sigma, Gamma, dataset, config)
    rng = np.random.default_rng(seed)
    b = dataset.space.boundary_nodes
    rows = []
    for name, base, g in (("gamma", gamma, grad.d_gamma), ("sigma", sigma, grad.d_sigma)):
        for k in range(n_directions):
            delta = rng.standard_normal(len(base))
            delta[b] = 0.0
            h = rel_step * np.max(np.abs(base)) / np.max(np.abs(delta))

            def value_at(step):
                x = base + step * delta
                args = (x, sigma) if name == "gamma" else (gamma, x)
                return term_value_and_gradient(term, *args, Gamma, dataset, config)[0]

            fd = (value_at(h) - value_at(-h)) / (2 * h)
            adj = float(g @ delta)
            rows.append({"term": term, "coefficient": name, "direction": k, "adjoint": adj, "fd": fd,
                         "rel_error": abs(adj - fd) / max(abs(fd), eps)})
    return rows
