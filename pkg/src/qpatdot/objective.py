"""Objective functionals for the coupled reconstruction.

All area integrals use the vertex rule of the P1 space; boundary integrals use
the detector (boundary-node) values with trapezoid weights.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .forward import DataSet, ForwardState, _values, forward_state

PAT_VARIANTS = ("full-pairs", "fixed-reference", "ratio", "plain-least-squares")
DATA_FLOOR = 1e-14


class InvalidDataError(ValueError):
    pass


@dataclass
class ObjectiveConfig:
    beta_sigma: float = 1e-6
    beta_gamma: float = 1e-5
    beta_Gamma: float = 1e-6  # used only when Gamma is optimised too
    pat_variant: str = "fixed-reference"
    include_dot: bool = True

    def __post_init__(self):
        if self.pat_variant not in PAT_VARIANTS:
            raise ValueError(f"pat_variant must be one of {PAT_VARIANTS}, got {self.pat_variant!r}")
        if min(self.beta_sigma, self.beta_gamma, self.beta_Gamma) < 0:
            raise ValueError("regularisation weights must be non-negative")


def pair_list(n_sources: int, variant: str) -> list[tuple[int, int]]:
    """Index pairs ``(i, j)``, ``j < i``, entering the PAT sum."""
    if variant == "fixed-reference":
        return [(i, 0) for i in range(1, n_sources)]
    return [(i, j) for i in range(1, n_sources) for j in range(i)]


def pat_misfit(variant: str, H: np.ndarray, H_data: np.ndarray, weights: np.ndarray):
    """PAT misfit of model maps ``H`` against ``H_data`` and its derivative in ``H``.

    ``weights`` are the nodal quadrature weights. Returns ``(value, dvalue/dH)``.
    """
    H = np.asarray(H, dtype=float)
    Hd = np.asarray(H_data, dtype=float)
    dH = np.zeros_like(H)
    value = 0.0
    if variant in ("full-pairs", "fixed-reference"):
        if np.any(Hd == 0):
            raise InvalidDataError("internal data vanish; rescaled PAT misfit undefined")
        rho = H / Hd
        # (H_i* H_j - H_i H_j*) / (H_i* H_j*) = rho_j - rho_i
        for i, j in pair_list(len(H), variant):
            Z = rho[j] - rho[i]
            value += 0.5 * (weights @ (Z * Z))
            dH[j] += weights * Z / Hd[j]
            dH[i] -= weights * Z / Hd[i]
    elif variant == "ratio":
        if np.any(np.abs(H) < DATA_FLOOR) or np.any(np.abs(Hd) < DATA_FLOOR):
            raise InvalidDataError(f"ratio misfit needs |H| >= {DATA_FLOOR:g}")
        for i, j in pair_list(len(H), "full-pairs"):
            r = H[i] / H[j] - Hd[i] / Hd[j]
            value += 0.5 * (weights @ (r * r))
            dH[i] += weights * r / H[j]
            dH[j] -= weights * r * H[i] / H[j] ** 2
    elif variant == "plain-least-squares":
        for j in range(len(H)):
            r = H[j] - Hd[j]
            value += 0.5 * (weights @ (r * r))
            dH[j] = weights * r
    else:
        raise ValueError(f"unknown PAT variant {variant!r}")
    return float(value), dH


def dot_misfit(J: np.ndarray, J_data: np.ndarray, weights: np.ndarray):
    """Relative boundary-current misfit and ``a`` with ``dPhi = Re(sum a dJ)``."""
    if np.any(np.abs(J_data) < DATA_FLOOR):
        raise InvalidDataError(f"boundary current below {DATA_FLOOR:g}; rescaling undefined")
    r = (J - J_data) / J_data
    value = 0.0
    for s in range(J.shape[0]):
        for w in range(J.shape[1]):
            value += 0.5 * (weights @ (np.abs(r[s, w]) ** 2))
    a = weights * np.conj(r) / J_data
    return float(value), a


def _state(dataset, gamma, sigma, state, need_dot=True):
    if state is None:
        state = forward_state(dataset, _values(gamma), _values(sigma), need_dot=need_dot)
    return state


def model_H(state: ForwardState, Gamma) -> np.ndarray:
    return _values(Gamma) * state.sigma * state.U


def phi_pat(variant, gamma, sigma, Gamma, dataset: DataSet, state: ForwardState | None = None) -> float:
    st = _state(dataset, gamma, sigma, state, need_dot=False)
    if variant == "ratio":
        H = st.U  # Gamma sigma cancels in H_i / H_j
        Hd = dataset.H
    else:
        H = model_H(st, Gamma)
        Hd = dataset.H
    return pat_misfit(variant, H, Hd, dataset.space.lumped_mass)[0]


def phi_pat_full(gamma, sigma, Gamma, dataset, state=None) -> float:
    """Rescaled misfit summed over all source pairs."""
    return phi_pat("full-pairs", gamma, sigma, Gamma, dataset, state)


def phi_pat_fixed_ref(gamma, sigma, Gamma, dataset, state=None) -> float:
    """Rescaled misfit over the pairs (1, j) only."""
    return phi_pat("fixed-reference", gamma, sigma, Gamma, dataset, state)


def phi_pat_ratio(gamma, sigma, dataset, state=None) -> float:
    return phi_pat("ratio", gamma, sigma, None, dataset, state)


def phi_pat_plain(gamma, sigma, Gamma, dataset, state=None) -> float:
    return phi_pat("plain-least-squares", gamma, sigma, Gamma, dataset, state)


def phi_dot(gamma, sigma, dataset: DataSet, state: ForwardState | None = None) -> float:
    st = _state(dataset, gamma, sigma, state)
    return dot_misfit(st.J, dataset.J, dataset.space.detector_weight)[0]


def regularization(gamma, sigma, beta_gamma: float, beta_sigma: float, space, Gamma=None, beta_Gamma=0.0) -> float:
    """Half the weighted squared H1-seminorms, evaluated exactly for P1 fields."""
    K = space.stiffness_unit
    g, s = _values(gamma), _values(sigma)
    value = 0.5 * (beta_gamma * (g @ (K @ g)) + beta_sigma * (s @ (K @ s)))
    if Gamma is not None and beta_Gamma:
        G = _values(Gamma)
        value += 0.5 * beta_Gamma * (G @ (K @ G))
    return float(value)


def total_objective(gamma, sigma, Gamma, dataset: DataSet, config: ObjectiveConfig,
                    state: ForwardState | None = None, regularize_Gamma: bool = False):
    """Total objective and a ``{"pat", "dot", "reg", "total"}`` breakdown."""
    st = _state(dataset, gamma, sigma, state, need_dot=config.include_dot)
    pat = phi_pat(config.pat_variant, gamma, sigma, Gamma, dataset, st)
    dot = phi_dot(gamma, sigma, dataset, st) if config.include_dot else 0.0
    reg = regularization(gamma, sigma, config.beta_gamma, config.beta_sigma, dataset.space,
                         Gamma if regularize_Gamma else None, config.beta_Gamma)
    total = pat + dot + reg
    return total, {"pat": pat, "dot": dot, "reg": reg, "total": total}
