"""Frequency-domain DOT and stationary PAT forward problems.

Solves ``i w u - div(gamma grad u) + sigma u = 0`` with
``u + kappa gamma du/dn = g`` on the boundary (``kappa = 0`` is Dirichlet),
and produces boundary currents ``gamma du/dn`` at the detectors (the
boundary nodes, in loop order) and internal maps ``H = Gamma sigma U``.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .fem import P1Space
from .mesh import Mesh, build_structured_mesh

log = logging.getLogger(__name__)

RESIDUAL_TOL = 1e-10


class SolverError(RuntimeError):
    pass


def get_space(mesh: Mesh) -> P1Space:
    space = mesh._cache.get("p1")
    if space is None:
        space = mesh._cache["p1"] = P1Space(mesh)
    return space


@dataclass(frozen=True)
class SourceSpec:
    """Boundary illumination ``baseline + amplitude exp(-|x - c|^2 / width)``."""

    center: tuple[float, float]
    baseline: float = 1.0
    amplitude: float = 5.0
    width: float = 0.02

    def profile(self, points: np.ndarray) -> np.ndarray:
        d = np.asarray(points, dtype=float) - np.asarray(self.center)
        return self.baseline + self.amplitude * np.exp(-np.sum(d * d, axis=-1) / self.width)


def evenly_spaced_sources(mesh: Mesh, count: int, **profile) -> list[SourceSpec]:
    """``count`` source centres at arc lengths ``(k + 1/2) P / count`` along the loop."""
    P = mesh.perimeter()
    return [
        SourceSpec(tuple(float(c) for c in mesh.point_at_arc((k + 0.5) * P / count)), **profile)
        for k in range(count)
    ]


def _check_coefficients(gamma, sigma, kappa, allow_zero_sigma=True):
    if np.any(~np.isfinite(gamma)) or np.any(gamma <= 0):
        raise ValueError("diffusion coefficient must be positive everywhere")
    if np.any(~np.isfinite(sigma)) or np.any(sigma < 0) or (not allow_zero_sigma and np.any(sigma == 0)):
        raise ValueError("absorption coefficient must be non-negative everywhere")
    if kappa < 0:
        raise ValueError(f"kappa must be >= 0, got {kappa}")


class DiffusionOperator:
    """Assembled and factored discrete operator for fixed (gamma, sigma, kappa, w).

    ``matrix`` is the full operator, including the Robin term when
    ``kappa > 0``. For ``kappa = 0`` boundary rows are eliminated and only the
    interior block is factored.
    """

    def __init__(self, space: P1Space, gamma, sigma, kappa: float, omega: float = 0.0):
        gamma = np.asarray(gamma, dtype=float)
        sigma = np.asarray(sigma, dtype=float)
        _check_coefficients(gamma, sigma, kappa)
        self.space = space
        self.kappa = float(kappa)
        self.omega = float(omega)
        self.dirichlet = self.kappa == 0.0
        A = space.stiffness(gamma) + space.mass(sigma)
        if self.omega != 0.0:
            A = A + 1j * self.omega * space.mass(np.ones(space.node_count))
        if not self.dirichlet:
            A = A + space.boundary_mass / self.kappa
        self.matrix = sp.csc_matrix(A)
        self.dtype = complex if self.omega != 0.0 else float
        self._interior = space.interior_nodes
        self._boundary = space.boundary_nodes
        if self.dirichlet:
            Ac = self.matrix.tocsr()
            self._A_II = sp.csc_matrix(Ac[self._interior][:, self._interior])
            self._A_IB = sp.csc_matrix(Ac[self._interior][:, self._boundary])
            self._A_B = sp.csr_matrix(Ac[self._boundary])
            system = self._A_II
        else:
            system = self.matrix
        try:
            self._lu = splu(system)
        except RuntimeError as exc:
            raise SolverError(f"factorisation failed ({exc}); matrix order {system.shape[0]}") from exc
        self._system = system

    def load(self, g: np.ndarray) -> np.ndarray:
        """Right-hand side for boundary data ``g`` (nodal values on the boundary)."""
        if self.dirichlet:
            return -(self._A_IB @ g[self._boundary])
        return (self.space.boundary_mass @ g) / self.kappa

    def _solve_system(self, rhs: np.ndarray) -> np.ndarray:
        if np.iscomplexobj(rhs) and self.dtype is float:
            return self._solve_system(rhs.real) + 1j * self._solve_system(rhs.imag)
        dtype = np.result_type(self.dtype, rhs.dtype)
        x = self._lu.solve(rhs.astype(dtype))
        r = rhs - self._system @ x
        scale = max(np.linalg.norm(rhs), 1e-300)
        if np.linalg.norm(r) > RESIDUAL_TOL * scale:
            x = x + self._lu.solve(r)  # one step of iterative refinement
            r = rhs - self._system @ x
            if np.linalg.norm(r) > RESIDUAL_TOL * scale or not np.all(np.isfinite(x)):
                raise SolverError(
                    f"relative residual {np.linalg.norm(r) / scale:.3e} exceeds {RESIDUAL_TOL:g}; "
                    f"system of order {self._system.shape[0]} is ill-conditioned"
                )
        return x

    def solve(self, g: np.ndarray, volume_source: np.ndarray | None = None) -> np.ndarray:
        """Nodal solution for boundary data ``g`` (and optional nodal load vector)."""
        g = np.asarray(g)
        rhs = self.load(g)
        if volume_source is not None:
            rhs = rhs + (volume_source[self._interior] if self.dirichlet else volume_source)
        dtype = np.result_type(self.dtype, rhs.dtype)
        if not self.dirichlet:
            return self._solve_system(rhs)
        u = np.zeros(self.space.node_count, dtype=dtype)
        u[self._boundary] = g[self._boundary]
        u[self._interior] = self._solve_system(rhs)
        return u

    def current(self, u: np.ndarray, g: np.ndarray) -> np.ndarray:
        """Outward current ``gamma du/dn`` at the detectors."""
        b = self._boundary
        if not self.dirichlet:
            return (g[b] - u[b]) / self.kappa
        return self.weak_flux(u) / self.space.detector_weight

    def weak_flux(self, u: np.ndarray, g: np.ndarray | None = None) -> np.ndarray:
        """Weak boundary fluxes ``int gamma du/dn phi_k`` at the detectors.

        For Dirichlet data these are the boundary rows of the unconstrained
        operator applied to ``u``; the Robin case needs ``g``.
        """
        if not self.dirichlet:
            if g is None:
                raise ValueError("Robin weak flux needs the boundary data g")
            return (self.space.boundary_mass @ (g - u))[self._boundary] / self.kappa
        return self._A_B @ u

    # adjoints: both return lam such that dPhi = -Re(lam^T dA u)

    def adjoint_volume(self, f: np.ndarray) -> np.ndarray:
        """Adjoint state for an objective with ``dPhi/du = f`` (homogeneous BC)."""
        if not self.dirichlet:
            return self._solve_system(f)
        lam = np.zeros(self.space.node_count, dtype=np.result_type(f.dtype, self.dtype))
        lam[self._interior] = self._solve_system(f[self._interior])
        return lam

    def adjoint_current(self, a: np.ndarray) -> np.ndarray:
        """Adjoint state for an objective with ``dPhi = Re(a^T dJ)``."""
        b = self._boundary
        nn = self.space.node_count
        if not self.dirichlet:
            f = np.zeros(nn, dtype=a.dtype)
            f[b] = -a / self.kappa
            return self._solve_system(f)
        c = a / self.space.detector_weight
        lam = np.zeros(nn, dtype=np.result_type(c.dtype, self.dtype))
        lam[self._interior] = self._solve_system(self._A_IB @ c)
        lam[b] = -c
        return lam

    def sensitivity(self, lam: np.ndarray, u: np.ndarray):
        """``(lam^T dA/dgamma_k u, lam^T dA/dsigma_k u)`` as nodal vectors."""
        space = self.space
        return space.grad_pairing(lam, u), space.lumped_mass * lam * u


def assemble_system(mesh: Mesh, gamma, sigma, kappa: float, omega: float = 0.0) -> DiffusionOperator:
    return DiffusionOperator(get_space(mesh), _values(gamma), _values(sigma), kappa, omega)


def _values(f):
    return np.asarray(getattr(f, "values", f), dtype=float)


def solve_dot(mesh, gamma, sigma, kappa, source: SourceSpec | np.ndarray, omega: float) -> np.ndarray:
    """Nodal photon density for one source at modulation ``omega`` (= w/c)."""
    op = assemble_system(mesh, gamma, sigma, kappa, omega)
    g = source.profile(mesh.nodes) if isinstance(source, SourceSpec) else np.asarray(source)
    return op.solve(g)


def solve_pat(mesh, gamma, sigma, kappa, G: SourceSpec | np.ndarray) -> np.ndarray:
    """Time-integrated density ``U`` for time-integrated boundary data ``G``."""
    u = solve_dot(mesh, gamma, sigma, kappa, G, 0.0)
    return np.real(u)


def boundary_current(mesh, solution, gamma, sigma, kappa, g, omega: float = 0.0) -> np.ndarray:
    """Detector currents for a computed ``solution``.

    For ``kappa > 0`` this is ``(g - u) / kappa``; otherwise the residual flux,
    which needs the operator (hence ``sigma`` and ``omega``).
    """
    solution = np.asarray(solution)
    if solution.shape != (mesh.node_count,):
        raise ValueError("solution does not match mesh")
    g = g.profile(mesh.nodes) if isinstance(g, SourceSpec) else np.asarray(g)
    if kappa > 0:
        return ((g - solution) / kappa)[mesh.boundary_nodes]
    op = assemble_system(mesh, gamma, sigma, kappa, omega)
    return op.current(solution, g)


def internal_data(Gamma, sigma, U) -> np.ndarray:
    return _values(Gamma) * _values(sigma) * np.asarray(U, dtype=float)


def compatibility_residual(mesh: Mesh, H, Gamma, J0) -> float:
    """``int H/Gamma dx - int J0 dS`` with the time integral taken as the w = 0 datum."""
    Gamma = _values(Gamma)
    if np.any(Gamma <= 0):
        raise ValueError("Grueneisen coefficient must be positive")
    space = get_space(mesh)
    J0 = np.asarray(J0)
    if J0.shape != (len(space.boundary_nodes),):
        raise ValueError("current does not match detector layout")
    return float(space.integrate(_values(H) / Gamma) - np.real(space.boundary_integral(J0)))


@dataclass(eq=False)
class DataSet:
    """Boundary currents ``J[s, w, d]`` and internal maps ``H[s, node]``."""

    mesh: Mesh
    sources: list[SourceSpec]
    omegas: np.ndarray
    kappa: float
    J: np.ndarray
    H: np.ndarray
    noise_level: float = 0.0
    seed: int | None = None
    meta: dict = field(default_factory=dict)

    @property
    def space(self) -> P1Space:
        return get_space(self.mesh)

    @property
    def n_sources(self) -> int:
        return len(self.sources)

    @property
    def n_freq(self) -> int:
        return len(self.omegas)

    def boundary_data(self) -> np.ndarray:
        """Nodal source profiles ``g_s`` (also the time-integrated ``G_s``)."""
        return np.stack([s.profile(self.mesh.nodes) for s in self.sources])

    def zero_frequency_index(self) -> int:
        idx = np.flatnonzero(self.omegas == 0.0)
        if len(idx) == 0:
            raise ValueError("dataset has no zero-frequency current")
        return int(idx[0])

    def subset(self, sources=None, freqs=None) -> "DataSet":
        s = np.arange(self.n_sources) if sources is None else np.asarray(sources)
        w = np.arange(self.n_freq) if freqs is None else np.asarray(freqs)
        return replace(
            self,
            sources=[self.sources[k] for k in s],
            omegas=self.omegas[w],
            J=self.J[np.ix_(s, w)],
            H=self.H[s],
            meta=dict(self.meta),
        )


@dataclass(eq=False)
class ForwardState:
    """All forward solves for one (gamma, sigma) iterate."""

    gamma: np.ndarray
    sigma: np.ndarray
    operators: list[DiffusionOperator]  # one per frequency
    pat_operator: DiffusionOperator
    u: np.ndarray  # (N_s, N_w, nodes) complex
    U: np.ndarray  # (N_s, nodes) real
    J: np.ndarray  # (N_s, N_w, detectors) complex


def forward_state(dataset: DataSet, gamma, sigma, need_dot: bool = True) -> ForwardState:
    gamma, sigma = _values(gamma), _values(sigma)
    space = dataset.space
    g = dataset.boundary_data()
    ops = []
    Ns, Nw = dataset.n_sources, dataset.n_freq
    ne = len(space.boundary_nodes)
    u = np.zeros((Ns, Nw, space.node_count), dtype=complex)
    J = np.zeros((Ns, Nw, ne), dtype=complex)
    pat_op = None
    for w, omega in enumerate(dataset.omegas):
        if omega != 0.0 and not need_dot:
            ops.append(None)
            continue
        op = DiffusionOperator(space, gamma, sigma, dataset.kappa, float(omega))
        ops.append(op)
        if omega == 0.0 and pat_op is None:
            pat_op = op
        if need_dot:
            for s in range(Ns):
                u[s, w] = op.solve(g[s])
                J[s, w] = op.current(u[s, w], g[s])
    if pat_op is None:
        pat_op = DiffusionOperator(space, gamma, sigma, dataset.kappa, 0.0)
    if need_dot and 0.0 in dataset.omegas:
        U = np.real(u[:, dataset.zero_frequency_index()]).copy()
    else:
        U = np.stack([pat_op.solve(g[s]) for s in range(Ns)])
    return ForwardState(gamma, sigma, ops, pat_op, u, U, J)


def add_noise(data: DataSet, level: float, seed: int | None) -> DataSet:
    """Multiply every datum by ``1 + level * xi``, ``xi ~ U[-1, 1]`` i.i.d."""
    if level < 0:
        raise ValueError(f"noise level must be >= 0, got {level}")
    if level == 0:
        return replace(data, J=data.J.copy(), H=data.H.copy(), noise_level=0.0, seed=seed)
    rng = np.random.default_rng(seed)
    xi_J = rng.uniform(-1.0, 1.0, size=data.J.shape)
    xi_H = rng.uniform(-1.0, 1.0, size=data.H.shape)
    return replace(
        data,
        J=data.J * (1.0 + level * xi_J),
        H=data.H * (1.0 + level * xi_H),
        noise_level=level,
        seed=seed,
    )


def generate_dataset(config, truth) -> DataSet:
    """Synthetic data for ``truth = (sigma, gamma, Gamma)`` under ``config``.

    ``config`` needs ``n_sources``, ``omegas``, ``kappa``, ``noise_level`` and
    ``seed`` attributes; the mesh is taken from the truth fields.
    """
    sigma, gamma, Gamma = truth
    mesh = sigma.mesh
    sources = evenly_spaced_sources(mesh, config.n_sources)
    omegas = np.asarray(config.omegas, dtype=float)
    empty = DataSet(mesh, sources, omegas, float(config.kappa),
                    J=np.zeros((len(sources), len(omegas), 0)), H=np.zeros((len(sources), 0)))
    st = forward_state(empty, gamma.values, sigma.values)
    H = np.stack([internal_data(Gamma, sigma, st.U[s]) for s in range(len(sources))])
    data = replace(empty, J=st.J, H=H, seed=config.seed)
    if config.noise_level > 0:
        data = add_noise(data, config.noise_level, config.seed)
    return data


def save_dataset(data: DataSet, out_dir: str | Path) -> None:
    """One CSV per quantity plus ``manifest.json``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    mesh = data.mesh
    arc = mesh.arc_length()
    for s in range(data.n_sources):
        for w in range(data.n_freq):
            rows = ["detector,arc,re_J,im_J"]
            rows += [f"{d},{arc[d]:.17g},{v.real:.17g},{v.imag:.17g}" for d, v in enumerate(data.J[s, w])]
            (out / f"J_s{s}_w{w}.csv").write_text("\n".join(rows) + "\n")
        rows = ["node,x,y,H"]
        rows += [f"{k},{x:.17g},{y:.17g},{h:.17g}" for k, ((x, y), h) in enumerate(zip(mesh.nodes, data.H[s]))]
        (out / f"H_s{s}.csv").write_text("\n".join(rows) + "\n")
    manifest = {
        "n": mesh.n,
        "kappa": data.kappa,
        "omegas": [float(w) for w in data.omegas],
        "noise_level": data.noise_level,
        "seed": data.seed,
        "sources": [
            {"center": list(s.center), "baseline": s.baseline, "amplitude": s.amplitude, "width": s.width}
            for s in data.sources
        ],
        **data.meta,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def load_dataset(in_dir: str | Path) -> DataSet:
    d = Path(in_dir)
    path = d / "manifest.json"
    if not path.exists():
        raise FileNotFoundError(f"missing dataset manifest: {path}")
    man = json.loads(path.read_text())
    mesh = build_structured_mesh(man["n"])
    sources = [SourceSpec(tuple(s["center"]), s["baseline"], s["amplitude"], s["width"]) for s in man["sources"]]
    omegas = np.asarray(man["omegas"], dtype=float)
    Ns, Nw = len(sources), len(omegas)
    J = np.zeros((Ns, Nw, len(mesh.boundary_nodes)), dtype=complex)
    H = np.zeros((Ns, mesh.node_count))
    for s in range(Ns):
        for w in range(Nw):
            f = d / f"J_s{s}_w{w}.csv"
            if not f.exists():
                raise FileNotFoundError(f"missing dataset file: {f}")
            a = np.loadtxt(f, delimiter=",", skiprows=1, ndmin=2)
            J[s, w] = a[:, 2] + 1j * a[:, 3]
        f = d / f"H_s{s}.csv"
        if not f.exists():
            raise FileNotFoundError(f"missing dataset file: {f}")
        H[s] = np.loadtxt(f, delimiter=",", skiprows=1, ndmin=2)[:, 3]
    meta = {k: v for k, v in man.items() if k not in {"n", "kappa", "omegas", "noise_level", "seed", "sources"}}
    return DataSet(mesh, sources, omegas, float(man["kappa"]), J, H,
                   noise_level=float(man["noise_level"]), seed=man["seed"], meta=meta)
