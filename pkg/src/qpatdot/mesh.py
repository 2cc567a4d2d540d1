"""Structured P1 triangulation of the square [0, 2] x [0, 2]."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

DOMAIN_LENGTH = 2.0


@dataclass(frozen=True, eq=False)
class Mesh:
    """Triangle mesh with row-major nodes and a counterclockwise boundary loop.

    ``boundary_edges[e] = (a, b)`` traces the boundary counterclockwise starting
    at the origin, so consecutive edges share an endpoint.
    """

    nodes: np.ndarray
    triangles: np.ndarray
    boundary_edges: np.ndarray
    n: int = 0  # nodes per side for structured meshes, 0 otherwise
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def node_count(self) -> int:
        return len(self.nodes)

    @property
    def triangle_count(self) -> int:
        return len(self.triangles)

    @property
    def h(self) -> float:
        return DOMAIN_LENGTH / (self.n - 1)

    @property
    def boundary_nodes(self) -> np.ndarray:
        """Boundary node indices in loop order (start node of each edge)."""
        return self.boundary_edges[:, 0]

    @property
    def interior_nodes(self) -> np.ndarray:
        mask = np.ones(self.node_count, dtype=bool)
        mask[self.boundary_nodes] = False
        return np.flatnonzero(mask)

    def signed_areas(self) -> np.ndarray:
        p = self.nodes[self.triangles]
        d1 = p[:, 1] - p[:, 0]
        d2 = p[:, 2] - p[:, 0]
        return 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])

    def edge_lengths(self) -> np.ndarray:
        p = self.nodes[self.boundary_edges]
        return np.linalg.norm(p[:, 1] - p[:, 0], axis=1)

    def edge_midpoints(self) -> np.ndarray:
        return self.nodes[self.boundary_edges].mean(axis=1)

    def edge_normals(self) -> np.ndarray:
        """Outward unit normals of the boundary edges."""
        p = self.nodes[self.boundary_edges]
        t = p[:, 1] - p[:, 0]
        t /= np.linalg.norm(t, axis=1)[:, None]
        return np.column_stack([t[:, 1], -t[:, 0]])

    def arc_length(self) -> np.ndarray:
        """Arc-length coordinate of the boundary nodes, in loop order."""
        lengths = self.edge_lengths()
        return np.concatenate([[0.0], np.cumsum(lengths)[:-1]])

    def perimeter(self) -> float:
        return float(self.edge_lengths().sum())

    def point_at_arc(self, s: float) -> np.ndarray:
        """Point on the boundary loop at arc length ``s`` from the origin."""
        lengths = self.edge_lengths()
        s = float(s) % lengths.sum()
        ends = np.cumsum(lengths)
        e = int(np.searchsorted(ends, s, side="right"))
        e = min(e, len(lengths) - 1)
        start = ends[e] - lengths[e]
        t = (s - start) / lengths[e]
        a, b = self.nodes[self.boundary_edges[e]]
        return (1 - t) * a + t * b

    def export_text(self, path: str | Path) -> None:
        """Write node and triangle tables (debugging aid)."""
        lines = ["# nodes: index,x,y"]
        lines += [f"{k},{x:.17g},{y:.17g}" for k, (x, y) in enumerate(self.nodes)]
        lines.append("# triangles: index,i,j,k")
        lines += [f"{k},{a},{b},{c}" for k, (a, b, c) in enumerate(self.triangles)]
        Path(path).write_text("\n".join(lines) + "\n")


def build_structured_mesh(n: int) -> Mesh:
    """Uniform ``n x n`` grid on [0, 2]^2, every cell cut along its
    lower-left to upper-right diagonal."""
    if int(n) != n or n < 2:
        raise ValueError(f"nodes per side must be an integer >= 2, got {n!r}")
    n = int(n)
    t = np.linspace(0.0, DOMAIN_LENGTH, n)
    X, Y = np.meshgrid(t, t)  # row j is y = t[j]
    nodes = np.column_stack([X.ravel(), Y.ravel()])

    j, i = np.meshgrid(np.arange(n - 1), np.arange(n - 1), indexing="ij")
    p00 = (j * n + i).ravel()
    p10 = p00 + 1
    p01 = p00 + n
    p11 = p01 + 1
    lower = np.column_stack([p00, p10, p11])
    upper = np.column_stack([p00, p11, p01])
    triangles = np.empty((2 * len(p00), 3), dtype=np.int64)
    triangles[0::2] = lower
    triangles[1::2] = upper

    k = np.arange(n - 1)
    loop = np.concatenate([
        k,                          # bottom, left to right
        (k * n) + (n - 1),          # right, bottom to top
        (n - 1) * n + (n - 1 - k),  # top, right to left
        (n - 1 - k) * n,            # left, top to bottom
    ])
    edges = np.column_stack([loop, np.roll(loop, -1)])
    return Mesh(nodes=nodes, triangles=triangles, boundary_edges=edges, n=n)


def sample_to_grid(values: np.ndarray, mesh: Mesh, m: int) -> np.ndarray:
    """P1 interpolation of nodal ``values`` onto an ``m x m`` grid.

    Returns an array indexed ``[row, col]`` with row ``j`` at y = 2j/(m-1).
    """
    if int(m) != m or m < 2:
        raise ValueError(f"grid resolution must be an integer >= 2, got {m!r}")
    values = np.asarray(values)
    if values.shape[0] != mesh.node_count:
        raise ValueError("field does not match mesh")
    n = mesh.n
    if m == n:
        return values.reshape(n, n).copy()
    h = mesh.h
    t = np.linspace(0.0, DOMAIN_LENGTH, int(m))
    X, Y = np.meshgrid(t, t)
    x, y = X.ravel() / h, Y.ravel() / h
    i = np.clip(np.floor(x).astype(int), 0, n - 2)
    j = np.clip(np.floor(y).astype(int), 0, n - 2)
    xi, eta = x - i, y - j
    p00 = j * n + i
    v00, v10 = values[p00], values[p00 + 1]
    v01, v11 = values[p00 + n], values[p00 + n + 1]
    below = xi >= eta
    # lower triangle (p00, p10, p11): v = v00 + xi (v10 - v00) + eta (v11 - v10)
    # upper triangle (p00, p11, p01): v = v00 + xi (v11 - v01) + eta (v01 - v00)
    out = np.where(
        below,
        v00 + xi * (v10 - v00) + eta * (v11 - v10),
        v00 + xi * (v11 - v01) + eta * (v01 - v00),
    )
    return out.reshape(int(m), int(m))
