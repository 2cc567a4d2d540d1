"""Three-stage reconstruction, the single-stage baseline and the Gruneisen
sensitivity experiment.

Stage I recovers gamma on the boundary from the zero-frequency data, Stage II
fits (gamma, sigma) with Gamma frozen, Stage III recovers Gamma algebraically
and a final pass refines sigma.
"""
from __future__ import annotations

import csv
import itertools
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .adjoint import evaluate, grad_pat, grad_reg
from .config import ExperimentConfig
from .fields import (
    PHANTOMS,
    POINT_BACKGROUND,
    CoefficientField,
    phantom_point_gaussians,
    relative_error_map,
    relative_norms,
    smooth_init,
    write_field_csv,
)
from .forward import DataSet, forward_state, generate_dataset, get_space
from .mesh import build_structured_mesh
from .objective import ObjectiveConfig, pat_misfit, regularization
from .optimize import OptimResult, bfgs_minimize

log = logging.getLogger(__name__)

DENOMINATOR_FLOOR = 1e-14


class DegenerateDataError(ValueError):
    """The data do not determine the requested quantity."""


class StageError(RuntimeError):
    def __init__(self, stage: str, exc: BaseException):
        super().__init__(f"{stage} failed: {exc}")
        self.stage = stage
        self.cause = exc


# Stage I ------------------------------------------------------------------


def _boundary_traces(dataset: DataSet):
    """Zero-frequency boundary values ``U`` and weak fluxes ``r`` (sources x detectors).

    ``U`` on the boundary is ``G`` for Dirichlet data and ``G - kappa J`` for
    Robin data; ``r`` is the detector current integrated against the nodal
    basis functions.
    """
    space = dataset.space
    b = space.boundary_nodes
    J = np.real(dataset.J[:, dataset.zero_frequency_index()])
    G = dataset.boundary_data()[:, b]
    if dataset.kappa > 0:
        U = G - dataset.kappa * J
        Mbb = space.boundary_mass.tocsr()[b][:, b]
        r = (Mbb @ J.T).T
    else:
        U = G
        r = J * space.detector_weight
    return U, r, J


def _stencils(space):
    """Per boundary node: (boundary neighbours, their positions in the loop,
    unit stiffness weights) and (interior neighbours, weights)."""
    K = space.stiffness_unit.tocsr()
    b = space.boundary_nodes
    where = -np.ones(space.node_count, dtype=int)
    where[b] = np.arange(len(b))
    scale = np.abs(K.diagonal()).max()
    out = []
    for k in b:
        lo, hi = K.indptr[k], K.indptr[k + 1]
        cols, vals = K.indices[lo:hi], K.data[lo:hi]
        keep = (cols != k) & (np.abs(vals) > 1e-12 * scale)
        cols, vals = cols[keep], vals[keep]
        on_b = where[cols] >= 0
        out.append((where[cols[on_b]], vals[on_b], cols[~on_b], vals[~on_b]))
    return out


def stage1_boundary_gamma(dataset: DataSet, pair=(0, 1), candidates=None,
                          method: str = "joint", rel_threshold: float = 1e-10,
                          return_uncertainty: bool = False):
    """Boundary trace of gamma (detector order) from zero-frequency data.

    For sources ``a, c`` the discrete equation at boundary node ``k`` gives

        U_c r_a - U_a r_c = sum_l K_kl(gamma) (U_c,k U_a,l - U_a,k U_c,l),

    where boundary ``U`` and ``r`` are known. The interior neighbour values
    ``U_l = H_l / (Gamma sigma)_l`` are not. ``method="joint"`` treats
    ``gamma / (Gamma sigma)_l`` as a second unknown and solves the pair
    equations from ``pair`` and ``candidates`` (default: every source) in the
    least-squares sense. ``method="pair"`` uses one pair with
    ``U_c,l ~ U_c,k - d J_c / gamma``, which needs only ``H_a / H_c``; when
    its denominator vanishes at a node the candidate pair with the largest
    denominator is used there instead.

    With ``return_uncertainty`` the relative standard error of each joint
    estimate (from the least-squares residual) is returned as well; the
    pair method has no redundancy and reports zeros.
    """
    if method not in ("joint", "pair"):
        raise ValueError(f"unknown method {method!r}")
    Ns = dataset.n_sources
    a0, c0 = (int(j) for j in pair)
    if a0 == c0 or not (0 <= a0 < Ns and 0 <= c0 < Ns):
        raise ValueError(f"invalid source pair {pair!r}")
    pool = sorted(set(range(Ns)) if candidates is None else set(int(j) for j in candidates) | {a0, c0})
    if method == "joint" and len(pool) < 3:
        method = "pair"
    space = dataset.space
    U, r, J = _boundary_traces(dataset)
    H = dataset.H
    nodes = space.mesh.nodes
    b = space.boundary_nodes
    stencils = _stencils(space)
    out = np.empty(len(b))
    rse = np.zeros(len(b))
    if method == "joint":
        pairs = np.array(list(itertools.combinations(pool, 2)))
        pa, pc = pairs[:, 0], pairs[:, 1]
        for t, (bpos, bval, inner, ival) in enumerate(stencils):
            Ua, Uc = U[pa, t], U[pc, t]
            norm = Ua * Uc
            y = (Uc * r[pa, t] - Ua * r[pc, t]) / norm
            col_p = ((Uc[:, None] * U[pa][:, bpos] - Ua[:, None] * U[pc][:, bpos]) @ bval) / norm
            cols = [col_p]
            if len(inner):
                cols.append(((Uc[:, None] * H[pa][:, inner] - Ua[:, None] * H[pc][:, inner]) @ ival) / norm)
            A = np.column_stack(cols)
            out[t], rse[t] = _solve_first(A, y, rel_threshold, int(b[t]))
        return (out, rse) if return_uncertainty else out

    pairs = [(a0, c0)] + [p for p in itertools.combinations(pool, 2) if set(p) != {a0, c0}]
    for t, (bpos, bval, inner, ival) in enumerate(stencils):
        best = None
        for a, c in pairs:
            num, den, scale = _pair_terms(a, c, t, U, r, J, H, bpos, bval, inner, ival, nodes, b)
            ok = abs(den) > rel_threshold * scale
            if (a, c) == (a0, c0) and ok:
                best = (num, den, 0.0)
                break
            if ok and (best is None or abs(den) / scale > best[2]):
                best = (num, den, abs(den) / scale)
        if best is None:
            raise DegenerateDataError(
                f"boundary node {int(b[t])}: normal derivative of H_a/H_c vanishes for every candidate pair")
        out[t] = best[0] / best[1]
    return (out, rse) if return_uncertainty else out


def _solve_first(A, y, rel_threshold, node):
    """First least-squares coefficient and its relative standard error,
    refusing when the coefficient is not identifiable."""
    p = A[:, 0]
    pn = np.linalg.norm(p)
    if A.shape[1] > 1:
        e = A[:, 1]
        en = np.linalg.norm(e)
        if en > 0:
            p = p - e * (e @ p) / en**2
    if not np.isfinite(pn) or np.linalg.norm(p) <= rel_threshold * max(pn, 1e-300) or pn == 0:
        raise DegenerateDataError(
            f"boundary node {node}: the source pairs do not determine gamma (normal derivative of H ratios vanishes)")
    x = np.linalg.lstsq(A, y, rcond=None)[0]
    m, k = A.shape
    if m <= k:
        return float(x[0]), 0.0
    dof_var = np.sum((y - A @ x) ** 2) / (m - k)
    var0 = np.linalg.pinv(A.T @ A)[0, 0] * dof_var
    return float(x[0]), float(np.sqrt(max(var0, 0.0)) / max(abs(x[0]), 1e-300))


def _pair_terms(a, c, t, U, r, J, H, bpos, bval, inner, ival, nodes, b):
    k = b[t]
    y = U[c, t] * r[a, t] - U[a, t] * r[c, t]
    terms = bval * (U[c, t] * U[a, bpos] - U[a, t] * U[c, bpos])
    num = y
    den = terms.sum()
    scale = np.abs(bval).sum() * abs(U[a, t] * U[c, t])
    Rk = U[a, t] / U[c, t]
    for l, v in zip(inner, ival):
        if H[c, l] <= 0:
            continue
        dR = H[a, l] / H[c, l] - Rk
        dist = np.linalg.norm(nodes[l] - nodes[k])
        den += v * U[c, t] ** 2 * dR
        num += v * U[c, t] * dist * J[c, t] * dR
        scale += abs(v) * U[c, t] ** 2 * abs(Rk)
    return num, den, scale


# Stage II / III and refinement ---------------------------------------------


@dataclass
class StageOutcome:
    gamma: np.ndarray
    sigma: np.ndarray
    optim: OptimResult


def sobolev_inverse(space, nodes, scale, length: float) -> np.ndarray:
    """Dense ``D^-1 (M + length^2 K)^-1 D^-1`` on ``nodes``, normalised to unit mean diagonal.

    ``D = diag(scale)`` undoes the variable scaling; ``M`` and ``K`` are the
    lumped mass and unit stiffness matrices restricted to ``nodes``.
    """
    G = (space.mass(np.ones(space.node_count)) + length**2 * space.stiffness_unit).tocsr()
    G = G[nodes][:, nodes].toarray()
    Ginv = np.linalg.inv(G)
    Ginv = 0.5 * (Ginv + Ginv.T)
    out = Ginv / np.outer(scale, scale)
    return out / np.mean(np.diag(out))


def _node_scale(values, floor) -> np.ndarray:
    return np.maximum(np.abs(values), 10.0 * floor)


def _scale(values) -> float:
    s = float(np.mean(np.abs(values)))
    return s if s > 0 else 1.0


def stage2_reconstruct(dataset: DataSet, init, Gamma_fixed, gamma_boundary,
                       config: ExperimentConfig, objective: ObjectiveConfig | None = None) -> StageOutcome:
    """Fit interior gamma and all of sigma with Gamma frozen.

    Each unknown is divided by its own initial magnitude (bounded below by
    ten times the floor), so small and large values move on the same
    relative footing in the quasi-Newton model.
    """
    objective = objective or config.objective
    space = dataset.space
    inner = space.interior_nodes
    b = space.boundary_nodes
    gamma0 = np.asarray(getattr(init[0], "values", init[0]), dtype=float).copy()
    sigma0 = np.asarray(getattr(init[1], "values", init[1]), dtype=float).copy()
    Gamma = np.asarray(getattr(Gamma_fixed, "values", Gamma_fixed), dtype=float)
    gamma0[b] = gamma_boundary
    sg, ss = _node_scale(gamma0[inner], config.gamma_floor), _node_scale(sigma0, config.sigma_floor)
    ni = len(inner)

    def unpack(x):
        gamma = gamma0.copy()
        gamma[inner] = x[:ni] * sg
        return gamma, x[ni:] * ss

    def fg(x):
        gamma, sigma = unpack(x)
        total, _, grad = evaluate(gamma, sigma, Gamma, dataset, objective)
        return total, np.concatenate([grad.d_gamma[inner] * sg, grad.d_sigma * ss])

    x0 = np.concatenate([gamma0[inner] / sg, sigma0 / ss])
    floors = np.concatenate([np.full(ni, config.gamma_floor / sg), np.full(len(sigma0), config.sigma_floor / ss)])
    H0 = None
    if config.smoothing_length > 0:
        H0 = np.zeros((len(x0), len(x0)))
        H0[:ni, :ni] = sobolev_inverse(space, inner, np.ones(ni), config.smoothing_length)
        H0[ni:, ni:] = sobolev_inverse(space, np.arange(space.node_count), np.ones(len(sigma0)),
                                       config.smoothing_length)
    res = bfgs_minimize(fg, None, x0, config.optimizer, floors=floors, initial_inverse=H0)
    gamma, sigma = unpack(res.x)
    return StageOutcome(gamma, sigma, res)


def stage3_gamma_big(dataset: DataSet, sigma, U) -> np.ndarray:
    """Source-averaged inversion ``Gamma = sum_j H_j / (sigma sum_j U_j)``."""
    sigma = np.asarray(getattr(sigma, "values", sigma), dtype=float)
    U = np.atleast_2d(np.asarray(U, dtype=float))
    den = sigma * U.sum(axis=0)
    bad = np.flatnonzero(np.abs(den) < DENOMINATOR_FLOOR)
    if len(bad):
        raise DegenerateDataError(f"sigma * sum(U) below {DENOMINATOR_FLOOR:g} at node {int(bad[0])}")
    return dataset.H.sum(axis=0) / den


def forward_densities(dataset: DataSet, gamma, sigma) -> np.ndarray:
    return forward_state(dataset, gamma, sigma, need_dot=False).U


def refine_sigma(dataset: DataSet, gamma_fixed, Gamma_used, sigma_init, config: ExperimentConfig) -> StageOutcome:
    """Fit sigma alone to the unscaled internal data with gamma and Gamma fixed."""
    gamma = np.asarray(getattr(gamma_fixed, "values", gamma_fixed), dtype=float)
    Gamma = np.asarray(getattr(Gamma_used, "values", Gamma_used), dtype=float)
    sigma0 = np.asarray(getattr(sigma_init, "values", sigma_init), dtype=float)
    space = dataset.space
    beta = config.objective.beta_sigma
    ss = _scale(sigma0)

    def fg(x):
        sigma = x * ss
        st = forward_state(dataset, gamma, sigma, need_dot=False)
        value, _ = pat_misfit("plain-least-squares", Gamma * sigma * st.U, dataset.H, space.lumped_mass)
        value += regularization(gamma, sigma, 0.0, beta, space)
        grad = grad_pat(gamma, sigma, Gamma, dataset, "plain-least-squares", st).d_sigma
        grad = grad + grad_reg(gamma, sigma, 0.0, beta, space).d_sigma
        return value, grad * ss

    settings = config.optimizer
    if config.refine_max_iter != settings.max_iter:
        from dataclasses import replace
        settings = replace(settings, max_iter=config.refine_max_iter)
    res = bfgs_minimize(fg, None, sigma0 / ss, settings, floors=np.full(len(sigma0), config.sigma_floor / ss))
    return StageOutcome(gamma, res.x * ss, res)


# results ------------------------------------------------------------------


@dataclass
class ReconstructionResult:
    sigma: CoefficientField
    gamma: CoefficientField
    Gamma: CoefficientField
    method: str
    gamma_boundary: BoundaryTrace | None = None
    Gamma_before_refine: CoefficientField | None = None
    histories: dict = field(default_factory=dict)
    statuses: dict = field(default_factory=dict)
    objective: dict = field(default_factory=dict)
    truth: tuple | None = None  # (sigma, gamma, Gamma)
    wall_time: float = 0.0

    def __post_init__(self):
        for f in (self.sigma, self.gamma, self.Gamma):
            if not np.all(f.values > 0):
                raise ValueError(f"reconstructed {f.name} is not strictly positive")

    @property
    def product(self) -> CoefficientField:
        return CoefficientField(self.sigma.mesh, self.Gamma.values * self.sigma.values, "product_GammaSigma")

    def _pairs(self):
        s, g, G = self.truth
        return {
            "sigma": (self.sigma, s),
            "gamma": (self.gamma, g),
            "Gamma": (self.Gamma, G),
            "product_GammaSigma": (self.product, CoefficientField(s.mesh, s.values * G.values, "product_GammaSigma")),
        }

    def errors(self) -> dict:
        """``{name: (relative L2, relative Linf)}`` against the truth."""
        if self.truth is None:
            return {}
        w = get_space(self.sigma.mesh).lumped_mass
        return {k: relative_norms(r.values, t.values, w) for k, (r, t) in self._pairs().items()}

    def error_maps(self) -> dict:
        if self.truth is None:
            return {}
        return {k: relative_error_map(r, t) for k, (r, t) in self._pairs().items()}

    def save(self, out_dir: str | Path) -> Path:
        """Write the result bundle; every CSV is a pure function of the inputs."""
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for f in (self.sigma, self.gamma, self.Gamma, self.product):
            write_field_csv(out / f"{f.name}.csv", f)
        for name, emap in self.error_maps().items():
            write_field_csv(out / f"{name}_err.csv", emap)
        if self.gamma_boundary is not None:
            mesh = self.sigma.mesh
            arc = mesh.arc_length()
            with open(out / "gamma_boundary.csv", "w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(["detector", "arc", "x", "y", "gamma", "stage1_estimate", "rel_se", "fallback"])
                tr = self.gamma_boundary
                for d, k in enumerate(mesh.boundary_nodes):
                    x, y = mesh.nodes[k]
                    w.writerow([d, f"{arc[d]:.17g}", f"{x:.17g}", f"{y:.17g}", f"{tr.values[d]:.17g}",
                                f"{tr.estimate[d]:.17g}", f"{tr.rel_se[d]:.17g}", int(tr.fallback[d])])
        for stage, hist in self.histories.items():
            with open(out / f"history_{stage}.csv", "w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(["iter", "objective", "grad_inf_norm", "step_length", "status"])
                for h in hist:
                    w.writerow([h["iter"], f"{h['f']:.17g}", f"{h['grad_inf_norm']:.17g}",
                                f"{h['step_length']:.17g}", h["status"]])
        with open(out / "summary.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["quantity", "value"])
            for name, (l2, linf) in self.errors().items():
                w.writerow([f"{name}_rel_l2", f"{l2:.17g}"])
                w.writerow([f"{name}_rel_linf", f"{linf:.17g}"])
            for key, val in self.objective.items():
                w.writerow([f"objective_{key}", f"{val:.17g}"])
            for stage, status in self.statuses.items():
                w.writerow([f"status_{stage}", status])
        # wall time varies between runs, so it lives outside the CSV files
        (out / "timing.json").write_text(json.dumps({"wall_time_s": self.wall_time, "method": self.method}) + "\n")
        return out


# drivers ------------------------------------------------------------------


def make_truth(config: ExperimentConfig):
    """(sigma, gamma, Gamma) on the configured mesh."""
    mesh = build_structured_mesh(config.n)
    sigma, gamma, Gamma = PHANTOMS[config.phantom](mesh)
    if config.gamma_constant is not None:
        gamma = gamma.with_values(np.full(mesh.node_count, config.gamma_constant))
    return sigma, gamma, Gamma


def initial_guess(truth, config: ExperimentConfig):
    """Smoothed truth, or its nodal mean when ``config.init == "constant"``."""
    if config.init == "smoothed":
        return tuple(smooth_init(f, config.init_smoothing_std) for f in truth)
    return tuple(f.with_values(np.full(len(f.values), float(np.mean(f.values)))) for f in truth)


def _prepare(config, dataset, truth):
    if truth is None:
        truth = make_truth(config)
    if dataset is None:
        dataset = generate_dataset(config, truth)
    return dataset, truth


def _run_stage(name, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except (StageError, KeyboardInterrupt):
        raise
    except Exception as exc:  # surface the failing stage
        raise StageError(name, exc) from exc


@dataclass
class BoundaryTrace:
    """Stage I output after gating: the values pinned in stage II."""

    values: np.ndarray
    estimate: np.ndarray  # raw stage I estimates
    rel_se: np.ndarray
    fallback: np.ndarray  # True where the initial guess was kept


def gated_boundary_trace(dataset: DataSet, config: ExperimentConfig, gamma_init) -> BoundaryTrace:
    """Stage I estimates, replaced by the initial guess wherever they are
    non-positive, non-finite or less certain than ``config.stage1_max_rel_se``."""
    est, rse = stage1_boundary_gamma(dataset, config.stage1_pair, config.stage1_candidates,
                                     return_uncertainty=True)
    init_b = np.asarray(getattr(gamma_init, "values", gamma_init), dtype=float)[dataset.space.boundary_nodes]
    bad = ~np.isfinite(est) | (est < config.gamma_floor) | ~(rse <= config.stage1_max_rel_se)
    if bad.any():
        log.warning("stage I: %d of %d boundary estimates rejected (relative standard error above %g "
                    "or below the floor); the initial guess is kept there",
                    int(bad.sum()), len(est), config.stage1_max_rel_se)
    values = np.where(bad, np.maximum(init_b, config.gamma_floor), est)
    return BoundaryTrace(values, est, rse, bad)


def run_three_stage(config: ExperimentConfig, dataset: DataSet | None = None, truth=None) -> ReconstructionResult:
    t0 = time.perf_counter()
    dataset, truth = _prepare(config, dataset, truth)
    sigma_t, gamma_t, Gamma_t = truth
    mesh = sigma_t.mesh
    sigma0, gamma0, Gamma0 = initial_guess(truth, config)
    trace = _run_stage("stage I", gated_boundary_trace, dataset, config, gamma0)
    s2 = _run_stage("stage II", stage2_reconstruct, dataset, (gamma0, sigma0), Gamma0, trace.values, config)
    U = _run_stage("stage III", forward_densities, dataset, s2.gamma, s2.sigma)
    Gamma3 = _run_stage("stage III", stage3_gamma_big, dataset, s2.sigma, U)
    Gamma_used = Gamma0.values if config.refine_gamma == "initial" else Gamma3
    ref = _run_stage("sigma refinement", refine_sigma, dataset, s2.gamma, Gamma_used, s2.sigma, config)
    U = _run_stage("final stage III", forward_densities, dataset, s2.gamma, ref.sigma)
    Gamma_final = _run_stage("final stage III", stage3_gamma_big, dataset, ref.sigma, U)
    hist = s2.optim.history
    return ReconstructionResult(
        sigma=CoefficientField(mesh, ref.sigma, "sigma"),
        gamma=CoefficientField(mesh, s2.gamma, "gamma"),
        Gamma=CoefficientField(mesh, Gamma_final, "Gamma"),
        method="three-stage",
        gamma_boundary=trace,
        Gamma_before_refine=CoefficientField(mesh, Gamma3, "Gamma"),
        histories={"stage2": hist, "refine": ref.optim.history},
        statuses={"stage2": s2.optim.status, "refine": ref.optim.status},
        objective={"initial": hist[0]["f"], "final": hist[-1]["f"],
                   "refine_initial": ref.optim.history[0]["f"], "refine_final": ref.optim.history[-1]["f"]},
        truth=truth,
        wall_time=time.perf_counter() - t0,
    )


def run_single_stage(config: ExperimentConfig, dataset: DataSet | None = None, truth=None) -> ReconstructionResult:
    """Joint least-squares fit of (gamma, sigma, Gamma) from the same initial guess."""
    t0 = time.perf_counter()
    dataset, truth = _prepare(config, dataset, truth)
    mesh = truth[0].mesh
    sigma0, gamma0, Gamma0 = initial_guess(truth, config)
    obj = ObjectiveConfig(beta_sigma=config.objective.beta_sigma, beta_gamma=config.objective.beta_gamma,
                          beta_Gamma=config.objective.beta_Gamma, pat_variant="plain-least-squares",
                          include_dot=config.objective.include_dot)
    nn = mesh.node_count
    # same per-node scaling as stage II, so both methods see the same metric
    scale = np.concatenate([_node_scale(gamma0.values, config.gamma_floor),
                            _node_scale(sigma0.values, config.sigma_floor),
                            _node_scale(Gamma0.values, config.Gamma_floor)])

    def unpack(x):
        v = x * scale
        return v[:nn], v[nn:2 * nn], v[2 * nn:]

    def fg(x):
        gamma, sigma, Gamma = unpack(x)
        total, _, grad = evaluate(gamma, sigma, Gamma, dataset, obj, with_Gamma=True, pin_boundary=False)
        return total, np.concatenate([grad.d_gamma, grad.d_sigma, grad.d_Gamma]) * scale

    x0 = np.concatenate([gamma0.values, sigma0.values, Gamma0.values]) / scale
    floors = np.concatenate([np.full(nn, config.gamma_floor), np.full(nn, config.sigma_floor),
                             np.full(nn, config.Gamma_floor)]) / scale
    res = _run_stage("single stage", bfgs_minimize, fg, None, x0, config.optimizer, floors=floors)
    gamma, sigma, Gamma = unpack(res.x)
    return ReconstructionResult(
        sigma=CoefficientField(mesh, sigma, "sigma"),
        gamma=CoefficientField(mesh, gamma, "gamma"),
        Gamma=CoefficientField(mesh, Gamma, "Gamma"),
        method="single-stage",
        histories={"single": res.history},
        statuses={"single": res.status},
        objective={"initial": res.history[0]["f"], "final": res.history[-1]["f"]},
        truth=truth,
        wall_time=time.perf_counter() - t0,
    )


@dataclass
class SensitivityReport:
    """Stage II reconstructions under two frozen Gruneisen fields."""

    sigma_diff: CoefficientField  # (sigma_1 - sigma_2) / sigma_1
    gamma_diff: CoefficientField
    runs: tuple  # two StageOutcome objects
    norms: dict

    def save(self, out_dir: str | Path) -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_field_csv(out / "sigma_reldiff.csv", self.sigma_diff)
        write_field_csv(out / "gamma_reldiff.csv", self.gamma_diff)
        with open(out / "summary.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["quantity", "value"])
            for k, v in self.norms.items():
                w.writerow([k, f"{v:.17g}"])
        return out


def _relative_difference(a, b, mesh, name):
    return CoefficientField(mesh, (a - b) / a, name)


def gamma_sensitivity_experiment(config: ExperimentConfig, Gammas=None, dataset: DataSet | None = None
                                 ) -> SensitivityReport:
    """Run Stage II with Gamma frozen at Gamma_1 and at Gamma_2 on the
    point-Gaussian phantoms and compare the two (sigma, gamma) fits."""
    config = config.replace(phantom="point_gaussians")
    mesh = build_structured_mesh(config.n)
    sigma_t, gamma_t, Gamma1, Gamma2 = phantom_point_gaussians(mesh, POINT_BACKGROUND)
    truth = (sigma_t, gamma_t, Gamma2)
    dataset, truth = _prepare(config, dataset, truth)
    if Gammas is None:
        Gammas = (Gamma1, Gamma2)
    sigma0, gamma0, _ = initial_guess(truth, config)
    trace = _run_stage("stage I", gated_boundary_trace, dataset, config, gamma0).values
    runs = tuple(
        _run_stage("stage II", stage2_reconstruct, dataset, (gamma0, sigma0), G, trace, config) for G in Gammas
    )
    sd = _relative_difference(runs[0].sigma, runs[1].sigma, mesh, "sigma_reldiff")
    gd = _relative_difference(runs[0].gamma, runs[1].gamma, mesh, "gamma_reldiff")
    w = get_space(mesh).lumped_mass
    norms = {
        "sigma_reldiff_linf": float(np.max(np.abs(sd.values))),
        "gamma_reldiff_linf": float(np.max(np.abs(gd.values))),
        "sigma_reldiff_l2": relative_norms(runs[1].sigma, runs[0].sigma, w)[0],
        "gamma_reldiff_l2": relative_norms(runs[1].gamma, runs[0].gamma, w)[0],
    }
    return SensitivityReport(sd, gd, runs, norms)
