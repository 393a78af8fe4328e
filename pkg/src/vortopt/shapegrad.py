"""Boundary geometry, curvature and Hadamard shape gradients on the obstacle."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from . import fem
from .fem import DofMap, Field
from .flow import AdjointSolution, StateSolution, adjoint_rhs, channel_inflow, solve_adjoint, solve_state
from .functionals import ObjectiveParams, eval_breakdown, h_eval, h_prime
from .mesh import FREE, Mesh, MeshError, apply_deformation, mesh_quality

log = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class BoundaryScalar:
    """Scalar density on the obstacle boundary.

    ``values`` sit on the FREE vertices in loop order. ``gauss_values``, when
    present, give the density at the three Gauss points of each edge
    ``nodes[i] -> nodes[i+1]`` and are used for boundary integrals; otherwise
    the density is taken linear between vertices.
    """
    mesh: Mesh
    nodes: np.ndarray  # FREE vertex ids in loop order
    values: np.ndarray
    gauss_values: np.ndarray | None = None

    @property
    def coords(self) -> np.ndarray:
        return self.mesh.vertices[self.nodes]

    def shifted(self, c: float) -> "BoundaryScalar":
        gv = None if self.gauss_values is None else self.gauss_values + c
        return BoundaryScalar(self.mesh, self.nodes, self.values + c, gv)

    def at_gauss(self) -> np.ndarray:
        """Values at the edge Gauss points, shape (edges, 3)."""
        if self.gauss_values is not None:
            return self.gauss_values
        return np.outer(self.values, 1 - fem.GAUSS_S) + np.outer(np.roll(self.values, -1), fem.GAUSS_S)

    def to_csv(self, path, header: str = "value") -> None:
        with open(path, "w") as fh:
            fh.write(f"node,x,y,{header}\n")
            for n, (x, y), v in zip(self.nodes, self.coords, self.values):
                fh.write(f"{n},{x:.12g},{y:.12g},{v:.12g}\n")


@dataclass(frozen=True, eq=False)
class BoundaryFrame:
    nodes: np.ndarray
    normals: np.ndarray  # outward from the fluid, i.e. into the obstacle
    tangents: np.ndarray  # normals rotated by +pi/2, along the loop direction
    edge_normals: np.ndarray  # edge i joins nodes[i] -> nodes[i+1]
    edge_lengths: np.ndarray


def boundary_frame(mesh: Mesh) -> BoundaryFrame:
    loop = mesh.free_loop
    if len(loop) < 3:
        raise MeshError("FREE boundary must be a closed polyline")
    p = mesh.vertices[loop]
    d = np.roll(p, -1, axis=0) - p
    length = np.linalg.norm(d, axis=1)
    en = np.c_[d[:, 1], -d[:, 0]] / length[:, None]
    nn = en + np.roll(en, 1, axis=0)
    nn /= np.linalg.norm(nn, axis=1)[:, None]
    tang = np.c_[-nn[:, 1], nn[:, 0]]
    return BoundaryFrame(loop, nn, tang, en, length)


def _vertex_incidence(mesh: Mesh, vertex_ids: np.ndarray):
    """(triangle, local index, slot) triples for triangles touching the given vertices."""
    slot = -np.ones(mesh.n_vertices, dtype=np.int64)
    slot[vertex_ids] = np.arange(len(vertex_ids))
    tri, loc = np.nonzero(slot[mesh.triangles] >= 0)
    return tri, loc, slot[mesh.triangles[tri, loc]]


def _vertex_angles(mesh: Mesh, tri, loc):
    p = mesh.vertices[mesh.triangles[tri]]
    a = p[np.arange(len(tri)), loc]
    b = p[np.arange(len(tri)), (loc + 1) % 3]
    c = p[np.arange(len(tri)), (loc + 2) % 3]
    u, v = b - a, c - a
    cos = np.einsum("ij,ij->i", u, v) / (np.linalg.norm(u, axis=1) * np.linalg.norm(v, axis=1))
    return np.arccos(np.clip(cos, -1, 1))


def nodal_gradients(f: Field, vertex_ids: np.ndarray) -> np.ndarray:
    """Angle-weighted average of one-sided element gradients, (k, 2, 2).

    ``out[k, i, j] = d f_i / d x_j`` at vertex ``vertex_ids[k]``.
    """
    dm = f.dofmap
    mesh = dm.mesh
    tri, loc, slot = _vertex_incidence(mesh, vertex_ids)
    dl, _ = dm.jacobians
    corner = np.eye(3)[loc]  # barycentric coordinates of the vertex
    ref = fem.p2_bary_grads(corner)  # (m,6,3)
    grads = np.einsum("mkj,mjd->mkd", ref, dl[tri])  # (m,6,2)
    coeffs = f.nodal[dm.cell_nodes[tri]]  # (m,6,2)
    g = np.einsum("mki,mkd->mid", coeffs, grads)
    w = _vertex_angles(mesh, tri, loc)
    out = np.zeros((len(vertex_ids), 2, 2))
    np.add.at(out, slot, w[:, None, None] * g)
    wsum = np.bincount(slot, weights=w, minlength=len(vertex_ids))
    return out / wsum[:, None, None]


def default_epsilon(mesh: Mesh) -> float:
    lo, hi = mesh.vertices.min(axis=0), mesh.vertices.max(axis=0)
    return 1e-3 * float(np.linalg.norm(hi - lo))


def extend_normal(mesh: Mesh, epsilon: float | None = None, dofmap: DofMap | None = None,
                  scale: float = 1.0) -> Field:
    """Smooth vector field N with eps a(N, phi) + (N, phi)_F = (n, phi)_F."""
    dofmap = dofmap or fem.build_dofmap(mesh)
    eps = default_epsilon(mesh) if epsilon is None else epsilon
    if eps <= 0:
        raise ValueError("epsilon must be positive")
    # the operator acts on each component separately
    K = fem.scalar_stiffness(dofmap)
    Mb = fem.boundary_mass(dofmap, FREE)
    rhs = fem.boundary_traction_load(dofmap, FREE, lambda x, y, nx, ny: (scale * nx, scale * ny))
    lu = fem.factorize(eps * K + Mb, mesh)
    n = dofmap.n_nodes
    return Field(dofmap, "vector", np.concatenate([lu.solve(rhs[:n]), lu.solve(rhs[n:])]))


def curvature(N: Field, frame: BoundaryFrame | None = None) -> BoundaryScalar:
    """Mean curvature at FREE vertices as the tangential divergence of N/|N|.

    ``(div N - n . (DN n)) / |N|`` using one-sided element gradients. The
    trace of N falls short of unit length by O(epsilon * curvature), which
    would bias the curvature by the same relative amount; dividing by |N|
    removes it. Negative on a convex obstacle (n points into it).
    """
    mesh = N.dofmap.mesh
    frame = frame or boundary_frame(mesh)
    g = nodal_gradients(N, frame.nodes)
    n = frame.normals
    div = g[:, 0, 0] + g[:, 1, 1]
    normal_part = np.einsum("ki,kij,kj->k", n, g, n)
    length = np.linalg.norm(N.nodal[frame.nodes], axis=1)
    return BoundaryScalar(mesh, frame.nodes, (div - normal_part) / length)


def normal_derivative(f: Field, frame: BoundaryFrame) -> np.ndarray:
    """(n . grad) f at FREE vertices, shape (k, 2)."""
    return np.einsum("kij,kj->ki", nodal_gradients(f, frame.nodes), frame.normals)


def boundary_traces(dofmap: DofMap, residual: np.ndarray) -> np.ndarray:
    """Vector P2 trace t on the obstacle with (t, phi)_F = residual(phi).

    ``residual`` is a velocity dual vector; only its FREE rows are used.
    Returns (n_nodes, 2), zero away from the obstacle.
    """
    n = dofmap.n_nodes
    nodes = dofmap.boundary_node_sets[FREE]
    mass = fem.boundary_mass(dofmap, FREE).tocsr()[nodes][:, nodes]
    lu = fem.factorize(mass)
    out = np.zeros((n, 2))
    out[nodes] = lu.solve(np.c_[residual[nodes], residual[nodes + n]])
    return out


def _loop_midpoints(dofmap: DofMap, loop: np.ndarray) -> np.ndarray:
    nxt = np.roll(loop, -1)
    return np.array([dofmap.edge_node(a, b) for a, b in zip(loop.tolist(), nxt.tolist())], dtype=np.int64)


def _pointwise_gradient(state, adjoint, kappa, frame, params, nu) -> np.ndarray:
    n, tau = frame.normals, frame.tangents
    du = nodal_gradients(state.u, frame.nodes)
    dv = nodal_gradients(adjoint.v, frame.nodes)
    a11, a12, a21, a22 = du[:, 0, 0], du[:, 0, 1], du[:, 1, 0], du[:, 1, 1]
    curl = a21 - a12
    det = a11 * a22 - a12 * a21
    dn_u = np.einsum("kij,kj->ki", du, n)
    dn_v = np.einsum("kij,kj->ki", dv, n)
    cof_n = np.c_[a22 * n[:, 0] - a21 * n[:, 1], a11 * n[:, 1] - a12 * n[:, 0]]
    flux = nu * dn_v + params.gamma1 * curl[:, None] * tau + params.gamma2 * h_prime(det)[:, None] * cof_n
    return (params.alpha * kappa.values - 0.5 * params.gamma1 * curl ** 2
            - params.gamma2 * h_eval(det) + np.einsum("ki,ki->k", dn_u, flux))


def shape_gradient(mesh: Mesh, state: StateSolution, adjoint: AdjointSolution, kappa: BoundaryScalar,
                   frame: BoundaryFrame, params: ObjectiveParams, nu: float | None = None,
                   method: str = "flux") -> BoundaryScalar:
    """Shape gradient of alpha*P - J on the obstacle boundary.

    Density ``alpha k - g1/2 w^2 - g2 h(det Du) + d_n u . (nu d_n v + g1 w tau + g2 P(u))``
    with ``w = curl u`` and ``P(u) = h'(det Du) cof(Du) n``.

    ``method="pointwise"`` evaluates every term from one-sided element
    gradients at the vertices. ``method="flux"`` (default) recovers the two
    boundary fluxes variationally: the state residual on the obstacle is the
    traction ``nu d_n u - p n`` and the adjoint residual, because the adjoint
    load is in integrated-by-parts form, is the whole bracket minus ``pi n``.
    With no-slip ``d_n u`` is tangential, so ``Du = d_n u (x) n``, ``w = d_n u . tau``,
    ``det Du = 0`` and the pressure parts drop out. Values are produced at
    vertices and at edge Gauss points. ``nu`` only matters for ``"pointwise"``.
    """
    nu = state.nu if nu is None else nu
    if method == "pointwise":
        return BoundaryScalar(mesh, frame.nodes, _pointwise_gradient(state, adjoint, kappa, frame, params, nu))
    if method != "flux":
        raise ValueError(f"unknown shape-gradient method {method!r}")
    dm = state.u.dofmap
    system = state.system
    load = 0.0 if state.load is None else state.load
    traction = boundary_traces(dm, system.A @ state.u.coefficients + system.B.T @ state.p.coefficients - load)
    bracket = boundary_traces(dm, system.A @ adjoint.v.coefficients + system.B.T @ adjoint.pi.coefficients
                              - adjoint_rhs(state, params.gamma1, params.gamma2))
    loop = frame.nodes
    edge_tau = np.c_[-frame.edge_normals[:, 1], frame.edge_normals[:, 0]]
    trace = fem.p2_trace_values(fem.GAUSS_S)  # (q, 3)
    ends = np.c_[loop, np.roll(loop, -1), _loop_midpoints(dm, loop)]

    def density(t_u, t_v, tau, k):
        curl = np.einsum("...i,...i->...", t_u, tau) / state.nu
        dn_u = curl[..., None] * tau
        return (params.alpha * k - 0.5 * params.gamma1 * curl ** 2 - params.gamma2 * float(h_eval(0.0))
                + np.einsum("...i,...i->...", dn_u, t_v))

    at_q = lambda t: np.einsum("qa,eai->eqi", trace, t[ends])  # noqa: E731
    k_q = BoundaryScalar(mesh, loop, kappa.values).at_gauss()
    return BoundaryScalar(mesh, loop, density(traction[loop], bracket[loop], frame.tangents, kappa.values),
                          density(at_q(traction), at_q(bracket), edge_tau[:, None, :], k_q))


def lagrangian_gradient(grad_g: BoundaryScalar, ell: float, b: float, volume: float, m: float) -> BoundaryScalar:
    if volume <= 0:
        raise ValueError("volume must be positive")
    return grad_g.shifted(-ell + b * (volume - m))


def boundary_normal_load(dofmap: DofMap, s: BoundaryScalar) -> np.ndarray:
    """Dual vector L with L . theta = int_F s (theta . n) ds.

    ``theta`` uses its P2 trace and ``n`` is the exact edge normal.
    """
    mesh = dofmap.mesh
    loop = s.nodes
    nxt = np.roll(loop, -1)
    d = mesh.vertices[nxt] - mesh.vertices[loop]
    length = np.linalg.norm(d, axis=1)
    en = np.c_[d[:, 1], -d[:, 0]] / length[:, None]
    phi = fem.p2_trace_values(fem.GAUSS_S)  # (q, 3)
    local = length[:, None] * np.einsum("q,eq,qa->ea", fem.GAUSS_W, s.at_gauss(), phi)  # (e, 3)
    n = dofmap.n_nodes
    out = np.zeros(2 * n)
    nodes = np.c_[loop, nxt, _loop_midpoints(dofmap, loop)]
    for comp in range(2):
        np.add.at(out, nodes + comp * n, local * en[:, comp, None])
    return out


def boundary_pairing(s: BoundaryScalar, theta: Field) -> float:
    """int_F s (theta . n) ds."""
    return float(boundary_normal_load(theta.dofmap, s) @ theta.coefficients)


def boundary_l2_norm_sq(theta: Field) -> float:
    """||theta||^2 in L2 of the obstacle boundary (P2 trace)."""
    dm = theta.dofmap
    Mb = fem.vector_block(fem.boundary_mass(dm, FREE))
    return float(theta.coefficients @ (Mb @ theta.coefficients))


# ---------------------------------------------------------------- evaluation bundle

@dataclass(frozen=True, eq=False)
class Evaluation:
    """State, adjoint and shape gradient of one mesh."""
    mesh: Mesh
    dofmap: DofMap
    state: StateSolution
    adjoint: AdjointSolution
    frame: BoundaryFrame
    kappa: BoundaryScalar
    grad: BoundaryScalar


def evaluate_gradient(mesh: Mesh, params: ObjectiveParams, nu: float = 0.01, profile=channel_inflow,
                      epsilon: float | None = None, state: StateSolution | None = None,
                      method: str = "flux") -> Evaluation:
    dofmap = state.u.dofmap if state is not None else fem.build_dofmap(mesh)
    state = state or solve_state(mesh, nu, profile=profile, dofmap=dofmap)
    adjoint = solve_adjoint(mesh, state, nu, params.gamma1, params.gamma2)
    frame = boundary_frame(mesh)
    kappa = curvature(extend_normal(mesh, epsilon, dofmap), frame)
    grad = shape_gradient(mesh, state, adjoint, kappa, frame, params, nu, method)
    return Evaluation(mesh, dofmap, state, adjoint, frame, kappa, grad)


def objective_value(mesh: Mesh, params: ObjectiveParams, nu: float = 0.01, profile=channel_inflow) -> float:
    state = solve_state(mesh, nu, profile=profile)
    return eval_breakdown(mesh, state, params).objective


@dataclass
class DerivativeReport:
    derivative: float
    steps: list = field(default_factory=list)
    fd: list = field(default_factory=list)
    abs_error: list = field(default_factory=list)
    rel_error: list = field(default_factory=list)
    observed_order: float = float("nan")
    skipped: list = field(default_factory=list)

    def table(self) -> str:
        rows = ["t            FD               |FD - dG|       rel"]
        for t, f, a, r in zip(self.steps, self.fd, self.abs_error, self.rel_error):
            rows.append(f"{t:<12.3g} {f:<16.10g} {a:<15.3e} {r:.3e}")
        rows.append(f"shape derivative {self.derivative:.10g}; observed FD order {self.observed_order:.2f}")
        return "\n".join(rows)


def fd_order(steps: Sequence[float], values: Sequence[float]) -> float:
    """Observed order from successive differences of FD values at geometric steps."""
    if len(values) < 3:
        return float("nan")
    d1 = abs(values[0] - values[1])
    d2 = abs(values[1] - values[2])
    if d2 == 0 or d1 == 0:
        return float("inf")
    return math.log(d1 / d2) / math.log(steps[0] / steps[1])


def validate_shape_derivative(mesh: Mesh, params: ObjectiveParams, theta: Field, steps: Sequence[float],
                              nu: float = 0.01, profile=channel_inflow, epsilon: float | None = None,
                              order_steps: Sequence[float] | None = None,
                              method: str = "flux") -> DerivativeReport:
    """Compare central differences of the objective with the boundary shape derivative.

    Each perturbed mesh ``(I + t theta)(Omega)`` is re-solved from scratch.
    ``order_steps`` (three geometric steps) estimate the observed FD order.
    """
    ev = evaluate_gradient(mesh, params, nu, profile, epsilon, method=method)
    deriv = boundary_pairing(ev.grad, theta)
    report = DerivativeReport(deriv)

    def central(t):
        vals = []
        for s in (t, -t):
            m = apply_deformation(mesh, theta, s)
            if mesh_quality(m).degenerate:
                return None
            vals.append(objective_value(m, params, nu, profile))
        return (vals[0] - vals[1]) / (2 * t)

    for t in steps:
        fd = central(t)
        if fd is None:
            log.warning("step %g skipped: degenerate mesh", t)
            report.skipped.append(t)
            continue
        err = abs(fd - deriv)
        report.steps.append(t)
        report.fd.append(fd)
        report.abs_error.append(err)
        report.rel_error.append(err / abs(deriv) if deriv != 0 else (0.0 if err == 0 else float("inf")))
    if order_steps:
        vals = [central(t) for t in order_steps]
        if all(v is not None for v in vals):
            report.observed_order = fd_order(list(order_steps), vals)
    return report
