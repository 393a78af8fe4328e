"""Stokes state and adjoint solves for the obstacle channel."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import fem
from .fem import DofMap, Field, SaddleSystem
from .functionals import h_prime
from .mesh import FREE, IN, WALL, Mesh

Profile = Callable[[np.ndarray, np.ndarray], tuple]


def poiseuille(umax: float = 0.3, y0: float = -0.5, y1: float = 0.5) -> Profile:
    """Parabolic inflow with peak ``umax`` vanishing at ``y0`` and ``y1``."""
    c = 4.0 * umax / (y1 - y0) ** 2

    def profile(x, y):
        return c * (y - y0) * (y1 - y), np.zeros_like(np.asarray(y, dtype=float))

    return profile


def channel_inflow(x, y):
    """g = (1.2 (0.25 - y^2), 0)."""
    return 1.2 * (0.25 - y ** 2), np.zeros_like(np.asarray(y, dtype=float))


@dataclass(frozen=True, eq=False)
class StateSolution:
    u: Field
    p: Field
    g_lift: Field
    system: SaddleSystem
    nu: float
    load: np.ndarray | None = None  # velocity part of the right-hand side (None: zero force)

    @property
    def u_tilde(self) -> Field:
        return self.u - self.g_lift

    @property
    def mesh(self) -> Mesh:
        return self.u.dofmap.mesh


@dataclass(frozen=True, eq=False)
class AdjointSolution:
    v: Field
    pi: Field


def _check_compatible(dofmap: DofMap, profile: Profile, tol: float = 1e-12) -> None:
    corners = np.intersect1d(dofmap.mesh.tag_vertices(IN),
                             np.union1d(dofmap.mesh.tag_vertices(WALL), dofmap.mesh.tag_vertices(FREE)))
    if len(corners):
        x = dofmap.mesh.vertices[corners]
        gx, gy = profile(x[:, 0], x[:, 1])
        if np.max(np.abs(np.c_[np.broadcast_to(gx, len(x)), np.broadcast_to(gy, len(x))])) > tol:
            raise ValueError("inflow profile does not vanish where the inlet meets a no-slip wall")


def _stokes_system(dofmap: DofMap, nu: float, profile: Profile) -> SaddleSystem:
    return fem.apply_dirichlet(fem.assemble(dofmap, nu), {IN: profile, WALL: None, FREE: None})


def lift_inflow(dofmap: DofMap, profile: Profile = channel_inflow) -> Field:
    """Discretely divergence-free extension of the inflow data.

    Equal to ``profile`` on IN, zero on WALL and FREE; obtained as the
    discrete Stokes extension, which reduces to the nodal interpolant when
    the profile is a Poiseuille flow and there is no obstacle.
    """
    _check_compatible(dofmap, profile)
    system = _stokes_system(dofmap, 1.0, profile)
    g, _ = fem.solve_saddle(system, np.zeros(system.size))
    return g


def solve_state(mesh: Mesh, nu: float = 0.01, f: Callable | None = None,
                profile: Profile = channel_inflow, dofmap: DofMap | None = None) -> StateSolution:
    dofmap = dofmap or fem.build_dofmap(mesh)
    _check_compatible(dofmap, profile)
    system = _stokes_system(dofmap, nu, profile)
    n_p = dofmap.n_pressure
    load = fem.load_vector(dofmap, f)
    u, p = fem.solve_saddle(system, np.concatenate([load, np.zeros(n_p)]))
    if f is None:
        return StateSolution(u, p, u, system, nu)
    # same operator, zero force: the Stokes extension (independent of nu)
    g, _ = fem.solve_saddle(system, np.zeros(system.size))
    return StateSolution(u, p, g, system, nu, load)


def adjoint_rhs(state: StateSolution, gamma1: float, gamma2: float) -> np.ndarray:
    """Dual vector of phi -> -g1 (curl u, curl phi) - g2 (h'(det Du), dDet(Du)[D phi])."""
    dm = state.u.dofmap
    n = dm.n_nodes
    out = np.zeros(2 * n)
    if gamma1 == 0 and gamma2 == 0:
        return out
    _, w, _, g = dm.quad
    _, du = state.u.at_quadrature()
    a11, a12, a21, a22 = du[..., 0, 0], du[..., 0, 1], du[..., 1, 0], du[..., 1, 1]
    curl = a21 - a12
    hp = h_prime(a11 * a22 - a12 * a21)
    gx, gy = g[..., 0], g[..., 1]  # (T,Q,6)
    # phi = (phi_a, 0): curl phi = -d2 phi_a, dDet = a22 d1 phi_a - a21 d2 phi_a
    cx = gamma1 * curl[..., None] * (-gy) + gamma2 * hp[..., None] * (a22[..., None] * gx - a21[..., None] * gy)
    # phi = (0, phi_a): curl phi = d1 phi_a, dDet = a11 d2 phi_a - a12 d1 phi_a
    cy = gamma1 * curl[..., None] * gx + gamma2 * hp[..., None] * (a11[..., None] * gy - a12[..., None] * gx)
    cn = dm.cell_nodes
    np.add.at(out, cn, -np.einsum("tq,tqa->ta", w, cx))
    np.add.at(out, cn + n, -np.einsum("tq,tqa->ta", w, cy))
    return out


def solve_adjoint(mesh: Mesh, state: StateSolution, nu: float, gamma1: float, gamma2: float) -> AdjointSolution:
    """Adjoint Stokes problem; reuses the state factorization (same operator, zero data)."""
    system = state.system
    if mesh is not state.mesh:
        raise ValueError("state was solved on a different mesh")
    if nu != state.nu:
        raise ValueError("adjoint viscosity must match the state viscosity")
    homogeneous = system.__class__(system.dofmap, system.nu, system.A, system.B, system.M,
                                   system.constrained_dofs, np.zeros_like(system.constrained_values))
    # share the factorization; reduced matrices are identical
    homogeneous.__dict__["factorization"] = system.factorization
    homogeneous.__dict__["reduced"] = system.reduced
    rhs = np.concatenate([adjoint_rhs(state, gamma1, gamma2), np.zeros(system.dofmap.n_pressure)])
    v, pi = fem.solve_saddle(homogeneous, rhs)
    return AdjointSolution(v, pi)


def divergence_residual(field: Field) -> float:
    """max_j |b(field, psi_j)|."""
    return float(np.max(np.abs(fem.divergence_matrix(field.dofmap) @ field.coefficients)))


def export_vtk(path, state: StateSolution, adjoint: AdjointSolution | None = None) -> None:
    """Legacy ASCII VTK with vertex data (velocity, pressure, adjoint velocity)."""
    mesh = state.mesh
    lines = ["# vtk DataFile Version 3.0", "stokes state", "ASCII", "DATASET UNSTRUCTURED_GRID",
             f"POINTS {mesh.n_vertices} double"]
    lines += [f"{x:.10g} {y:.10g} 0" for x, y in mesh.vertices]
    lines.append(f"CELLS {mesh.n_triangles} {4 * mesh.n_triangles}")
    lines += [f"3 {a} {b} {c}" for a, b, c in mesh.triangles]
    lines.append(f"CELL_TYPES {mesh.n_triangles}")
    lines += ["5"] * mesh.n_triangles
    lines.append(f"POINT_DATA {mesh.n_vertices}")

    def vec(name, f):
        lines.append(f"VECTORS {name} double")
        lines.extend(f"{a:.10g} {b:.10g} 0" for a, b in f.vertex_values())

    vec("velocity", state.u)
    lines += ["SCALARS pressure double 1", "LOOKUP_TABLE default"]
    lines += [f"{v:.10g}" for v in state.p.coefficients]
    if adjoint is not None:
        vec("adjoint_velocity", adjoint.v)
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
