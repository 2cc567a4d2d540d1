"""P1 element operators shared by the forward, objective and adjoint code.

Coefficients are nodal. In stiffness terms they enter through their value at
the element centroid; reaction and time-harmonic terms, and all area
integrals, use the vertex (lumped) rule, which integrates the P1 interpolant
of the integrand exactly.
"""
from __future__ import annotations

import numpy as np
import scipy.sparse as sp

from .mesh import Mesh


class P1Space:
    """Precomputed element geometry and sparse patterns for one mesh."""

    def __init__(self, mesh: Mesh):
        self.mesh = mesh
        tri = mesh.triangles
        p = mesh.nodes[tri]
        area = mesh.signed_areas()
        if np.any(area <= 0):
            raise ValueError("mesh has non-positive triangle areas")
        self.area = area
        # gradients of the three barycentric basis functions, shape (ne, 3, 2)
        x, y = p[..., 0], p[..., 1]
        b = np.stack([y[:, 1] - y[:, 2], y[:, 2] - y[:, 0], y[:, 0] - y[:, 1]], axis=1)
        c = np.stack([x[:, 2] - x[:, 1], x[:, 0] - x[:, 2], x[:, 1] - x[:, 0]], axis=1)
        self.grads = np.stack([b, c], axis=2) / (2.0 * area)[:, None, None]
        # unit-coefficient element stiffness matrices, (ne, 3, 3)
        self.k_local = area[:, None, None] * np.einsum("eik,ejk->eij", self.grads, self.grads)

        nn = mesh.node_count
        self.rows = np.repeat(tri, 3, axis=1).ravel()
        self.cols = np.tile(tri, (1, 3)).ravel()
        ne = len(tri)
        # node-by-element incidence carrying the centroid weight 1/3
        self.incidence = sp.csr_matrix(
            (np.full(3 * ne, 1.0 / 3.0), (tri.ravel(), np.repeat(np.arange(ne), 3))),
            shape=(nn, ne),
        )
        self.lumped_mass = self.incidence @ area  # sum over patch of area/3
        self.stiffness_unit = self.stiffness(np.ones(nn))

        # boundary: edges and P1 edge mass
        edges = mesh.boundary_edges
        self.edge_length = mesh.edge_lengths()
        L = self.edge_length
        self.boundary_mass = sp.csr_matrix(
            (
                np.concatenate([L / 3, L / 3, L / 6, L / 6]),
                (
                    np.concatenate([edges[:, 0], edges[:, 1], edges[:, 0], edges[:, 1]]),
                    np.concatenate([edges[:, 0], edges[:, 1], edges[:, 1], edges[:, 0]]),
                ),
            ),
            shape=(nn, nn),
        )
        self.boundary_nodes = mesh.boundary_nodes
        self.interior_nodes = mesh.interior_nodes
        self.boundary_lumped = np.zeros(nn)
        np.add.at(self.boundary_lumped, edges[:, 0], 0.5 * L)
        np.add.at(self.boundary_lumped, edges[:, 1], 0.5 * L)
        # detectors sit on the boundary nodes, in loop order
        self.detector_weight = self.boundary_lumped[self.boundary_nodes]

    @property
    def node_count(self) -> int:
        return self.mesh.node_count

    def centroid(self, values: np.ndarray) -> np.ndarray:
        return values[self.mesh.triangles].mean(axis=1)

    def stiffness(self, gamma: np.ndarray) -> sp.csr_matrix:
        data = (self.centroid(gamma)[:, None, None] * self.k_local).ravel()
        nn = self.mesh.node_count
        return sp.csr_matrix((data, (self.rows, self.cols)), shape=(nn, nn))

    def mass(self, sigma: np.ndarray) -> sp.dia_matrix:
        return sp.diags(self.lumped_mass * sigma)

    def integrate(self, values: np.ndarray) -> float | complex:
        """Area integral of the P1 interpolant of nodal ``values``."""
        return self.lumped_mass @ values

    def boundary_integral(self, detector_values: np.ndarray) -> float | complex:
        """Trapezoid-rule boundary integral of values at the detectors."""
        return self.detector_weight @ detector_values

    def grad_pairing(self, lam: np.ndarray, u: np.ndarray) -> np.ndarray:
        """Nodal vector ``k -> lam^T (dK/dgamma_k) u``.

        Each element contributes ``area * grad(lam) . grad(u)`` spread with weight
        1/3 to its vertices, the derivative of the centroid-valued coefficient.
        """
        tri = self.mesh.triangles
        gl = np.einsum("ei,eik->ek", lam[tri], self.grads)
        gu = np.einsum("ei,eik->ek", u[tri], self.grads)
        per_elem = self.area * np.einsum("ek,ek->e", gl, gu)
        return self.incidence @ per_elem
