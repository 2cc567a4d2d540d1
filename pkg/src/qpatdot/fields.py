"""Nodal coefficient fields, test phantoms, smoothed initial guesses, error maps."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import convolve1d

from .mesh import DOMAIN_LENGTH, Mesh, build_structured_mesh, sample_to_grid

ERROR_FLOOR = 1e-12


@dataclass(eq=False)
class CoefficientField:
    mesh: Mesh
    values: np.ndarray
    name: str = "other"

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != (self.mesh.node_count,):
            raise ValueError(
                f"field {self.name!r} has {self.values.shape} values, "
                f"mesh has {self.mesh.node_count} nodes"
            )

    def __mul__(self, other):
        v = other.values if isinstance(other, CoefficientField) else other
        return CoefficientField(self.mesh, self.values * v, self.name)

    __rmul__ = __mul__

    def with_values(self, values: np.ndarray) -> "CoefficientField":
        return CoefficientField(self.mesh, values, self.name)

    def to_grid(self, m: int | None = None) -> np.ndarray:
        return sample_to_grid(self.values, self.mesh, m or self.mesh.n)


def _rotation(theta: float) -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s], [s, c]])


def rotated_gaussian(points, center, theta, scales) -> np.ndarray:
    """``exp(-|S R_theta (x - center)|^2 / 2)`` with ``S = diag(scales)``."""
    d = np.asarray(points, dtype=float) - np.asarray(center, dtype=float)
    v = (d @ _rotation(theta).T) * np.asarray(scales, dtype=float)
    return np.exp(-0.5 * np.sum(v * v, axis=-1))


# smooth mixture; the second term of each pair takes the negative angle
SIGMA_SCALES = (0.25, 4.0)
GAMMA_SCALES = (0.01, 0.1)


def gaussian_mixture_values(points):
    pts = np.asarray(points, dtype=float)
    sigma = (rotated_gaussian(pts, (0.5, 1.5), math.pi / 3, SIGMA_SCALES)
             + rotated_gaussian(pts, (1.5, 0.5), -math.pi / 3, SIGMA_SCALES))
    gamma = 0.04 * rotated_gaussian(pts, (1.0, 1.0), math.pi / 6, GAMMA_SCALES)
    Gamma = (rotated_gaussian(pts, (0.5, 1.5), math.pi / 8, SIGMA_SCALES)
             + rotated_gaussian(pts, (1.5, 0.5), -math.pi / 8, SIGMA_SCALES))
    return sigma, gamma, Gamma


def _ball(pts, center, r):
    d = pts - np.asarray(center)
    return (np.sum(d * d, axis=-1) <= r * r).astype(float)


def _box(pts, xr, yr):
    x, y = pts[..., 0], pts[..., 1]
    return ((x >= xr[0]) & (x <= xr[1]) & (y >= yr[0]) & (y <= yr[1])).astype(float)


def piecewise_values(points):
    pts = np.asarray(points, dtype=float)
    sigma = (0.2 + 0.2 * _ball(pts, (1.0, 1.5), 0.2)
             + 0.2 * _ball(pts, (1.7, 0.4), 0.2) + 0.2 * _ball(pts, (0.5, 0.4), 0.2))
    gamma = (0.02 + 0.02 * _box(pts, (0.5, 0.8), (0.5, 0.8))
             + 0.02 * _box(pts, (1.4, 1.7), (1.4, 1.7))
             + 0.02 * _box(pts, (1.0, 1.8), (0.3, 0.6)))
    Gamma = (0.5 + 0.2 * _ball(pts, (0.5, 1.2), 0.3)
             + 0.3 * _ball(pts, (1.4, 1.6), 0.2) + 0.3 * _ball(pts, (1.7, 0.4), 0.2))
    return sigma, gamma, Gamma


POINT_SIGMA_CENTER = (0.4, 1.5)
POINT_GAMMA_CENTER = (1.0, 1.0)
POINT_GAMMA1_CENTER = (1.4, 0.6)


def _radial(pts, center, amplitude, rate=10.0):
    d = np.asarray(pts, dtype=float) - np.asarray(center)
    return amplitude * np.exp(-rate * np.sum(d * d, axis=-1))


# Far from their centres the bare bumps fall to ~1e-21, below every data and
# positivity floor, so reconstructions add these constant backgrounds.
POINT_BACKGROUND = (0.2, 0.02)


def point_values(points, background=(0.0, 0.0)):
    """sigma*, gamma*, Gamma_1, Gamma_2 of the Grueneisen-sensitivity test.

    ``background`` is added to (sigma*, gamma*).
    """
    pts = np.asarray(points, dtype=float)
    sigma = background[0] + _radial(pts, POINT_SIGMA_CENTER, 0.3)
    gamma = background[1] + _radial(pts, POINT_GAMMA_CENTER, 0.04)
    Gamma1 = _radial(pts, POINT_GAMMA1_CENTER, 0.3)
    Gamma2 = np.full(pts.shape[:-1], 16.0)
    return sigma, gamma, Gamma1, Gamma2


def _fields(mesh, arrays, names):
    return tuple(CoefficientField(mesh, a, nm) for a, nm in zip(arrays, names))


def phantom_gaussian_mixture(mesh: Mesh):
    """(sigma, gamma, Gamma) for the smooth Gaussian-mixture test case."""
    return _fields(mesh, gaussian_mixture_values(mesh.nodes), ("sigma", "gamma", "Gamma"))


def phantom_piecewise(mesh: Mesh):
    """(sigma, gamma, Gamma) with disc and rectangle inclusions."""
    return _fields(mesh, piecewise_values(mesh.nodes), ("sigma", "gamma", "Gamma"))


def phantom_point_gaussians(mesh: Mesh, background=(0.0, 0.0)):
    """(sigma, gamma) plus the two trial Grueneisen fields (Gamma_1, Gamma_2).

    sigma is centred at (0.4, 1.5) and gamma at (1, 1).
    """
    return _fields(mesh, point_values(mesh.nodes, background), ("sigma", "gamma", "Gamma", "Gamma"))


PHANTOMS = {
    "gaussian_mixture": phantom_gaussian_mixture,
    "piecewise": phantom_piecewise,
    # data are generated with the constant Gamma_2
    "point_gaussians": lambda mesh: tuple(
        phantom_point_gaussians(mesh, POINT_BACKGROUND)[k] for k in (0, 1, 3)),
}


def gaussian_kernel(std: float) -> np.ndarray:
    radius = math.ceil(2.0 * std)
    x = np.arange(-radius, radius + 1, dtype=float)
    k = np.exp(-0.5 * (x / std) ** 2)
    return k / k.sum()


def smooth_grid(grid: np.ndarray, std: float) -> np.ndarray:
    """Separable truncated Gaussian blur with replicate padding."""
    if not std > 0:
        raise ValueError(f"smoothing width must be positive, got {std!r}")
    k = gaussian_kernel(std)
    out = convolve1d(grid, k, axis=0, mode="nearest")
    return convolve1d(out, k, axis=1, mode="nearest")


def smooth_init(truth: CoefficientField, std: float = 5.0) -> CoefficientField:
    """Blurred copy of ``truth``; ``std`` is in grid cells of the node grid."""
    grid = smooth_grid(truth.to_grid(), std)
    return truth.with_values(grid.ravel())


def relative_error_map(recon: CoefficientField, truth: CoefficientField) -> CoefficientField:
    if recon.values.shape != truth.values.shape:
        raise ValueError("fields live on different meshes")
    t = np.abs(truth.values)
    if np.mean(t == 0) > 0.01:
        raise ValueError("truth field vanishes on more than 1% of nodes")
    err = np.abs(recon.values - truth.values) / np.maximum(t, ERROR_FLOOR)
    return CoefficientField(truth.mesh, err, f"{truth.name}_err")


def relative_norms(recon: np.ndarray, truth: np.ndarray, weights: np.ndarray | None = None):
    """Relative L2 (weighted by ``weights``) and relative-Linf errors."""
    recon = np.asarray(recon)
    truth = np.asarray(truth)
    w = np.ones_like(truth) if weights is None else weights
    l2 = math.sqrt(np.sum(w * (recon - truth) ** 2) / np.sum(w * truth**2))
    linf = float(np.max(np.abs(recon - truth) / np.maximum(np.abs(truth), ERROR_FLOOR)))
    return l2, linf


def write_field_csv(path: str | Path, field: CoefficientField, m: int | None = None) -> None:
    """Grid CSV ``x,y,value``, row-major from (0, 0)."""
    m = m or field.mesh.n
    grid = field.to_grid(m)
    t = np.linspace(0.0, DOMAIN_LENGTH, m)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["x", "y", "value"])
        for j in range(m):
            for i in range(m):
                w.writerow([f"{t[i]:.17g}", f"{t[j]:.17g}", f"{grid[j, i]:.17g}"])


def read_field_csv(path: str | Path, name: str = "other") -> CoefficientField:
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    m = int(round(math.sqrt(len(data))))
    if m * m != len(data):
        raise ValueError(f"{path}: {len(data)} rows is not a square grid")
    mesh = build_structured_mesh(m)
    return CoefficientField(mesh, data[:, 2], name)
