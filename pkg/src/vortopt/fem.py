"""Taylor-Hood (P2 velocity / P1 pressure) finite elements on triangle meshes.

Velocity unknowns are ordered ``[u_x at all P2 nodes, u_y at all P2 nodes]``;
P2 nodes are the mesh vertices followed by the edge midpoints.  Pressure
unknowns follow the velocity block in saddle-point vectors.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import Callable, Mapping

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
import qdldl

from .mesh import FREE, IN, OUT, TAGS, WALL, Mesh

# 6-point rule on the reference triangle, exact for degree 4 (weights sum to 1)
_A, _B = 0.445948490915965, 0.091576213509771
_WA, _WB = 0.223381589678011, 0.109951743655322
QUAD_BARY = np.array([
    [1 - 2 * _A, _A, _A], [_A, 1 - 2 * _A, _A], [_A, _A, 1 - 2 * _A],
    [1 - 2 * _B, _B, _B], [_B, 1 - 2 * _B, _B], [_B, _B, 1 - 2 * _B],
])
QUAD_WEIGHTS = np.array([_WA] * 3 + [_WB] * 3)

# 3-point Gauss-Legendre on [0, 1]
GAUSS_S = 0.5 + 0.5 * np.array([-np.sqrt(0.6), 0.0, np.sqrt(0.6)])
GAUSS_W = np.array([5.0, 8.0, 5.0]) / 18.0

# local P2 node k >= 3 sits on the edge between these local vertices
EDGE_VERTS = ((0, 1), (1, 2), (2, 0))


class SolverError(RuntimeError):
    pass


def p2_values(bary: np.ndarray) -> np.ndarray:
    """P2 shape functions at barycentric points, shape (..., 6)."""
    l0, l1, l2 = bary[..., 0], bary[..., 1], bary[..., 2]
    return np.stack([
        l0 * (2 * l0 - 1), l1 * (2 * l1 - 1), l2 * (2 * l2 - 1),
        4 * l0 * l1, 4 * l1 * l2, 4 * l2 * l0,
    ], axis=-1)


def p2_bary_grads(bary: np.ndarray) -> np.ndarray:
    """d(phi_k)/d(lambda_j) at barycentric points, shape (..., 6, 3)."""
    l0, l1, l2 = bary[..., 0], bary[..., 1], bary[..., 2]
    z = np.zeros_like(l0)
    return np.stack([
        np.stack([4 * l0 - 1, z, z], -1),
        np.stack([z, 4 * l1 - 1, z], -1),
        np.stack([z, z, 4 * l2 - 1], -1),
        np.stack([4 * l1, 4 * l0, z], -1),
        np.stack([z, 4 * l2, 4 * l1], -1),
        np.stack([4 * l2, z, 4 * l0], -1),
    ], axis=-2)


@dataclass(frozen=True, eq=False)
class DofMap:
    mesh: Mesh

    @property
    def n_nodes(self) -> int:
        return self.mesh.n_vertices + len(self.mesh.edges)

    @property
    def n_velocity(self) -> int:
        return 2 * self.n_nodes

    @property
    def n_pressure(self) -> int:
        return self.mesh.n_vertices

    @cached_property
    def cell_nodes(self) -> np.ndarray:
        """(T, 6) P2 node ids: three vertices then edges (0,1), (1,2), (2,0)."""
        return np.hstack([self.mesh.triangles, self.mesh.n_vertices + self.mesh.triangle_edges])

    @cached_property
    def node_coords(self) -> np.ndarray:
        m = self.mesh
        mids = 0.5 * (m.vertices[m.edges[:, 0]] + m.vertices[m.edges[:, 1]])
        return np.vstack([m.vertices, mids])

    @cached_property
    def _edge_lookup(self) -> dict:
        return {tuple(e): i for i, e in enumerate(self.mesh.edges.tolist())}

    def edge_node(self, a: int, b: int) -> int:
        return self.mesh.n_vertices + self._edge_lookup[(min(a, b), max(a, b))]

    @cached_property
    def boundary_edge_nodes(self) -> np.ndarray:
        """(K, 3) P2 nodes of each boundary edge: start, end, midpoint."""
        e = self.mesh.boundary_edges
        mid = [self.edge_node(a, b) for a, b in e.tolist()]
        return np.c_[e, np.array(mid, dtype=np.int64)] if len(e) else np.zeros((0, 3), np.int64)

    @cached_property
    def boundary_node_sets(self) -> dict:
        sets = {}
        for tag in TAGS:
            sel = self.mesh.boundary_tags == tag
            sets[tag] = np.unique(self.boundary_edge_nodes[sel])
        return sets

    def velocity_dofs(self, tag: str) -> np.ndarray:
        nodes = self.boundary_node_sets[tag]
        return np.concatenate([nodes, nodes + self.n_nodes])

    @cached_property
    def jacobians(self):
        """Per-triangle barycentric gradients (T, 3, 2) and areas (T,)."""
        p = self.mesh.vertices[self.mesh.triangles]
        d1, d2 = p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]
        det = d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0]
        g1 = np.c_[d2[:, 1], -d2[:, 0]] / det[:, None]
        g2 = np.c_[-d1[:, 1], d1[:, 0]] / det[:, None]
        grads = np.stack([-g1 - g2, g1, g2], axis=1)
        return grads, 0.5 * det

    def basis_grads(self, bary: np.ndarray) -> np.ndarray:
        """Physical P2 gradients at barycentric points: (T, Q, 6, 2)."""
        dl, _ = self.jacobians
        return np.einsum("qkj,tjd->tqkd", p2_bary_grads(bary), dl)

    @cached_property
    def quad(self):
        """Quadrature tabulation: points (T,Q,2), weights*area (T,Q), values (Q,6), grads (T,Q,6,2)."""
        _, area = self.jacobians
        pts = np.einsum("qj,tjd->tqd", QUAD_BARY, self.mesh.vertices[self.mesh.triangles])
        return pts, area[:, None] * QUAD_WEIGHTS[None], p2_values(QUAD_BARY), self.basis_grads(QUAD_BARY)


def build_dofmap(mesh: Mesh) -> DofMap:
    return DofMap(mesh)


@dataclass(frozen=True, eq=False)
class Field:
    dofmap: DofMap
    kind: str  # "vector" (P2) or "scalar" (P1)
    coefficients: np.ndarray

    def __post_init__(self):
        n = self.dofmap.n_velocity if self.kind == "vector" else self.dofmap.n_pressure
        if self.kind not in ("vector", "scalar"):
            raise ValueError(f"unknown field kind {self.kind!r}")
        if len(self.coefficients) != n:
            raise ValueError(f"{self.kind} field needs {n} coefficients, got {len(self.coefficients)}")

    @property
    def nodal(self) -> np.ndarray:
        """(n_nodes, 2) for vector fields, (V,) for scalar fields."""
        if self.kind == "scalar":
            return self.coefficients
        n = self.dofmap.n_nodes
        return np.c_[self.coefficients[:n], self.coefficients[n:]]

    def vertex_values(self) -> np.ndarray:
        return self.nodal[: self.dofmap.mesh.n_vertices]

    def boundary_values(self, tag: str) -> np.ndarray:
        nodes = self.dofmap.boundary_node_sets[tag]
        if self.kind == "scalar":
            nodes = nodes[nodes < self.dofmap.n_pressure]
        return self.nodal[nodes]

    def at_quadrature(self):
        """Values (T,Q,2) and gradients (T,Q,2,2) with grad[...,i,j] = d f_i / d x_j."""
        if self.kind != "vector":
            raise ValueError("at_quadrature is for vector fields")
        dm = self.dofmap
        _, _, vals, grads = dm.quad
        loc = self.nodal[dm.cell_nodes]  # (T,6,2)
        return np.einsum("qk,tki->tqi", vals, loc), np.einsum("tqkd,tki->tqid", grads, loc)

    def __add__(self, other: "Field") -> "Field":
        return replace(self, coefficients=self.coefficients + other.coefficients)

    def __sub__(self, other: "Field") -> "Field":
        return replace(self, coefficients=self.coefficients - other.coefficients)

    def __mul__(self, s: float) -> "Field":
        return replace(self, coefficients=s * self.coefficients)

    __rmul__ = __mul__


def interpolate(dofmap: DofMap, func: Callable) -> Field:
    """P2 nodal interpolant of ``func(x, y) -> (fx, fy)``."""
    x = dofmap.node_coords
    fx, fy = func(x[:, 0], x[:, 1])
    n = dofmap.n_nodes
    return Field(dofmap, "vector", np.concatenate([np.broadcast_to(fx, n), np.broadcast_to(fy, n)]).astype(float))


def interpolate_scalar(dofmap: DofMap, func: Callable) -> Field:
    x = dofmap.mesh.vertices
    return Field(dofmap, "scalar", np.broadcast_to(func(x[:, 0], x[:, 1]), len(x)).astype(float))


# ---------------------------------------------------------------- assembly

def _scatter(rows, cols, vals, shape):
    return sp.coo_matrix((vals.ravel(), (rows.ravel(), cols.ravel())), shape=shape).tocsr()


def scalar_stiffness(dofmap: DofMap) -> sp.csr_matrix:
    _, w, _, g = dofmap.quad
    local = np.einsum("tq,tqad,tqbd->tab", w, g, g)
    cn = dofmap.cell_nodes
    n = dofmap.n_nodes
    return _scatter(np.repeat(cn, 6, axis=1), np.tile(cn, (1, 6)), local, (n, n))


def scalar_mass(dofmap: DofMap) -> sp.csr_matrix:
    _, w, v, _ = dofmap.quad
    local = np.einsum("tq,qa,qb->tab", w, v, v)
    cn = dofmap.cell_nodes
    n = dofmap.n_nodes
    return _scatter(np.repeat(cn, 6, axis=1), np.tile(cn, (1, 6)), local, (n, n))


def divergence_matrix(dofmap: DofMap) -> sp.csr_matrix:
    """B with (B u)_j = b(u, psi_j) = -int psi_j div u."""
    _, w, v, g = dofmap.quad
    pv = QUAD_BARY  # P1 basis = barycentric coordinates
    bx = -np.einsum("tq,qj,tqa->tja", w, pv, g[..., 0])
    by = -np.einsum("tq,qj,tqa->tja", w, pv, g[..., 1])
    tri = dofmap.mesh.triangles
    cn = dofmap.cell_nodes
    n = dofmap.n_nodes
    rows = np.repeat(tri, 6, axis=1)
    cols = np.tile(cn, (1, 3))
    shape = (dofmap.n_pressure, 2 * n)
    return _scatter(rows, cols, bx, shape) + _scatter(rows, cols + n, by, shape)


def vector_block(m: sp.spmatrix) -> sp.csr_matrix:
    return sp.block_diag([m, m], format="csr")


def load_vector(dofmap: DofMap, f: Callable | None) -> np.ndarray:
    """Dual vector of (f, phi) for a body force ``f(x, y) -> (fx, fy)``."""
    n = dofmap.n_nodes
    out = np.zeros(2 * n)
    if f is None:
        return out
    pts, w, v, _ = dofmap.quad
    fx, fy = f(pts[..., 0], pts[..., 1])
    cn = dofmap.cell_nodes
    for comp, fc in enumerate((fx, fy)):
        local = np.einsum("tq,tq,qa->ta", w, np.broadcast_to(fc, w.shape), v)
        np.add.at(out, cn + comp * n, local)
    return out


def _edge_geometry(dofmap: DofMap, tag: str):
    mesh = dofmap.mesh
    sel = mesh.boundary_tags == tag
    nodes = dofmap.boundary_edge_nodes[sel]
    p0 = mesh.vertices[nodes[:, 0]]
    p1 = mesh.vertices[nodes[:, 1]]
    d = p1 - p0
    length = np.linalg.norm(d, axis=1)
    normal = np.c_[d[:, 1], -d[:, 0]] / length[:, None]  # fluid on the left => outward normal
    return nodes, p0, p1, length, normal


def p2_trace_values(s: np.ndarray) -> np.ndarray:
    """1D quadratic Lagrange basis (start, end, midpoint) at parameters s in [0,1]."""
    return np.stack([(1 - s) * (1 - 2 * s), s * (2 * s - 1), 4 * s * (1 - s)], axis=-1)


def boundary_mass(dofmap: DofMap, tag: str) -> sp.csr_matrix:
    """Scalar P2 mass matrix of the trace on the edges carrying ``tag``."""
    nodes, _, _, length, _ = _edge_geometry(dofmap, tag)
    phi = p2_trace_values(GAUSS_S)  # (3 qp, 3 basis)
    local = length[:, None, None] * np.einsum("q,qa,qb->ab", GAUSS_W, phi, phi)[None]
    n = dofmap.n_nodes
    return _scatter(np.repeat(nodes, 3, axis=1), np.tile(nodes, (1, 3)), local, (n, n))


def boundary_traction_load(dofmap: DofMap, tag: str, traction: Callable) -> np.ndarray:
    """Dual vector of (t, phi) on ``tag`` for ``traction(x, y, nx, ny) -> (tx, ty)``."""
    nodes, p0, p1, length, normal = _edge_geometry(dofmap, tag)
    pts = p0[:, None] + GAUSS_S[None, :, None] * (p1 - p0)[:, None]
    nx = np.broadcast_to(normal[:, None, 0], pts.shape[:2])
    ny = np.broadcast_to(normal[:, None, 1], pts.shape[:2])
    tx, ty = traction(pts[..., 0], pts[..., 1], nx, ny)
    phi = p2_trace_values(GAUSS_S)
    n = dofmap.n_nodes
    out = np.zeros(2 * n)
    for comp, tc in enumerate((tx, ty)):
        local = length[:, None] * np.einsum("q,eq,qa->ea", GAUSS_W, np.broadcast_to(tc, pts.shape[:2]), phi)
        np.add.at(out, nodes + comp * n, local)
    return out


# ---------------------------------------------------------------- saddle systems

@dataclass(frozen=True, eq=False)
class SaddleSystem:
    dofmap: DofMap
    nu: float
    A: sp.csr_matrix  # nu * vector stiffness
    B: sp.csr_matrix
    M: sp.csr_matrix
    constrained_dofs: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))
    constrained_values: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @cached_property
    def matrix(self) -> sp.csc_matrix:
        return sp.bmat([[self.A, self.B.T], [self.B, None]], format="csc")

    @property
    def size(self) -> int:
        return self.dofmap.n_velocity + self.dofmap.n_pressure

    @cached_property
    def free_dofs(self) -> np.ndarray:
        mask = np.ones(self.size, dtype=bool)
        mask[self.constrained_dofs] = False
        return np.flatnonzero(mask)

    @cached_property
    def reduced(self) -> sp.csc_matrix:
        """Matrix with constrained rows and columns eliminated."""
        K = self.matrix
        return K[self.free_dofs][:, self.free_dofs].tocsc()

    @cached_property
    def factorization(self):
        return factorize(self.reduced, self.dofmap.mesh)

    def lifted_rhs(self, rhs: np.ndarray) -> np.ndarray:
        """Right-hand side on free dofs, corrected for the constrained values."""
        x = np.zeros(self.size)
        x[self.constrained_dofs] = self.constrained_values
        return (rhs - self.matrix @ x)[self.free_dofs]


class DirectSolver:
    """Sparse LDL^T factorization with iterative refinement.

    Zero diagonal entries (the pressure block of a saddle matrix) receive a
    tiny negative shift so the factored matrix is quasi-definite; refinement
    against the exact matrix removes the perturbation.
    """

    def __init__(self, matrix: sp.spmatrix, refine: int = 4, rtol: float = 1e-13):
        self.matrix = sp.csc_matrix(matrix)
        diag = self.matrix.diagonal()
        scale = float(np.max(np.abs(diag))) if diag.size else 1.0
        shift = np.where(diag == 0, -1e-10 * scale, 0.0)
        self.refine, self.rtol = refine, rtol
        self._lu = None
        try:
            self._ldl = qdldl.Solver(sp.csc_matrix(self.matrix + sp.diags(shift)))
        except (ValueError, RuntimeError):
            self._ldl = None
            self._lu = spla.splu(self.matrix, permc_spec="COLAMD")

    def solve(self, b: np.ndarray) -> np.ndarray:
        b = np.asarray(b, dtype=float)
        if b.ndim == 2:
            return np.column_stack([self.solve(col) for col in b.T])
        if self._lu is not None:
            return self._lu.solve(b)
        x = self._ldl.solve(b)
        bnorm = np.linalg.norm(b)
        for _ in range(self.refine):
            r = b - self.matrix @ x
            if np.linalg.norm(r) <= self.rtol * bnorm:
                break
            x = x + self._ldl.solve(r)
        return x


def factorize(matrix: sp.spmatrix, mesh: Mesh | None = None) -> DirectSolver:
    try:
        return DirectSolver(matrix)
    except RuntimeError as exc:
        from .mesh import mesh_quality

        diag = ""
        if mesh is not None:
            q = mesh_quality(mesh)
            diag = f" (min angle {q.min_angle:.3g} deg, min area {q.min_area:.3g})"
        raise SolverError(f"singular factorization{diag}: {exc}") from exc


def assemble(dofmap: DofMap, nu: float) -> SaddleSystem:
    if nu <= 0:
        raise ValueError("viscosity must be positive")
    K = scalar_stiffness(dofmap)
    Mq = scalar_mass(dofmap)
    return SaddleSystem(dofmap, nu, nu * vector_block(K), divergence_matrix(dofmap), vector_block(Mq))


BoundaryData = Callable | tuple | None


def _boundary_values(dofmap: DofMap, tag: str, data: BoundaryData):
    nodes = dofmap.boundary_node_sets[tag]
    if data is None:
        vx = vy = np.zeros(len(nodes))
    elif callable(data):
        x = dofmap.node_coords[nodes]
        vx, vy = data(x[:, 0], x[:, 1])
    else:
        vx, vy = data
    n = dofmap.n_nodes
    vals = np.concatenate([np.broadcast_to(vx, len(nodes)), np.broadcast_to(vy, len(nodes))]).astype(float)
    return np.concatenate([nodes, nodes + n]), vals


def apply_dirichlet(system: SaddleSystem, tag_values: Mapping[str, BoundaryData]) -> SaddleSystem:
    """Constrain velocity on the given tags; OUT stays natural (do-nothing).

    ``tag_values`` maps tags to ``None`` (zero), a constant pair or a
    function ``(x, y) -> (ux, uy)``.  Later tags win on shared nodes.
    """
    if OUT in tag_values:
        raise ValueError("the outflow boundary carries the do-nothing condition and cannot be constrained")
    missing = {IN, WALL, FREE} - set(tag_values)
    present = set(system.dofmap.mesh.boundary_tags.tolist())
    if missing & present:
        raise ValueError(f"missing Dirichlet data for {sorted(missing & present)}")
    values = {}
    for tag, data in tag_values.items():
        dofs, vals = _boundary_values(system.dofmap, tag, data)
        values.update(zip(dofs.tolist(), vals.tolist()))
    dofs = np.array(sorted(values), dtype=np.int64)
    return replace(system, constrained_dofs=dofs, constrained_values=np.array([values[d] for d in dofs.tolist()]))


def solve_saddle(system: SaddleSystem, rhs: np.ndarray, tol: float = 1e-10) -> tuple[Field, Field]:
    """Solve the constrained saddle-point system; returns (velocity, pressure)."""
    dm = system.dofmap
    out_dofs = dm.velocity_dofs(OUT)
    if len(out_dofs) == 0 or np.all(np.isin(out_dofs, system.constrained_dofs)):
        raise SolverError("no free outflow dofs: pressure would be undetermined")
    if len(rhs) == dm.n_velocity:
        rhs = np.concatenate([rhs, np.zeros(dm.n_pressure)])
    b = system.lifted_rhs(rhs)
    xf = system.factorization.solve(b)
    if not np.all(np.isfinite(xf)):
        raise SolverError("non-finite solution; mesh is probably degenerate")
    res = np.linalg.norm(system.reduced @ xf - b)
    if res > tol * max(np.linalg.norm(b), 1.0):
        raise SolverError(f"residual {res:.3e} above tolerance")
    x = np.zeros(system.size)
    x[system.constrained_dofs] = system.constrained_values
    x[system.free_dofs] = xf
    nv = dm.n_velocity
    return Field(dm, "vector", x[:nv]), Field(dm, "scalar", x[nv:])


def export_triplets(matrix: sp.spmatrix, path) -> None:
    """Write a sparse matrix as 'i j value' lines."""
    coo = sp.coo_matrix(matrix)
    with open(path, "w") as fh:
        for i, j, v in zip(coo.row, coo.col, coo.data):
            fh.write(f"{i} {j} {v:.17g}\n")
