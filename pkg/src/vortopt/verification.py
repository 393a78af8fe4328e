"""Closed-form oracles shared by the test suite and ``vortopt validate``."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import fem
from .flow import channel_inflow, solve_state
from .functionals import h_eval, h_prime, h_second
from .mesh import IN, OUT, WALL, rectangle_mesh

PI = math.pi


@dataclass(frozen=True)
class Manufactured:
    """Divergence-free trigonometric Stokes solution on the unit square.

    u = (sin(pi x) cos(pi y), -cos(pi x) sin(pi y)), p = cos(pi x) cos(pi y),
    f = -nu lap u + grad p.
    """
    nu: float = 1.0

    def velocity(self, x, y):
        return np.sin(PI * x) * np.cos(PI * y), -np.cos(PI * x) * np.sin(PI * y)

    def velocity_gradient(self, x, y):
        """grad[..., i, j] = d u_i / d x_j."""
        g = np.empty(np.shape(x) + (2, 2))
        g[..., 0, 0] = PI * np.cos(PI * x) * np.cos(PI * y)
        g[..., 0, 1] = -PI * np.sin(PI * x) * np.sin(PI * y)
        g[..., 1, 0] = PI * np.sin(PI * x) * np.sin(PI * y)
        g[..., 1, 1] = -PI * np.cos(PI * x) * np.cos(PI * y)
        return g

    def pressure(self, x, y):
        return np.cos(PI * x) * np.cos(PI * y)

    def force(self, x, y):
        ux, uy = self.velocity(x, y)
        k = 2.0 * PI ** 2 * self.nu
        return k * ux - PI * np.sin(PI * x) * np.cos(PI * y), k * uy - PI * np.cos(PI * x) * np.sin(PI * y)

    def traction(self, x, y, nx, ny):
        """nu (grad u) n - p n."""
        g = self.velocity_gradient(x, y)
        p = self.pressure(x, y)
        return (self.nu * (g[..., 0, 0] * nx + g[..., 0, 1] * ny) - p * nx,
                self.nu * (g[..., 1, 0] * nx + g[..., 1, 1] * ny) - p * ny)


def mms_errors(n: int, nu: float = 1.0) -> tuple[float, float, float]:
    """(h, H1-seminorm velocity error, L2 pressure error) on an n x n square mesh."""
    ms = Manufactured(nu)
    mesh = rectangle_mesh(0.0, 1.0, 0.0, 1.0, n, n)
    dm = fem.build_dofmap(mesh)
    system = fem.apply_dirichlet(fem.assemble(dm, nu), {IN: ms.velocity, WALL: ms.velocity})
    rhs = fem.load_vector(dm, ms.force) + fem.boundary_traction_load(dm, OUT, ms.traction)
    u, p = fem.solve_saddle(system, rhs)
    pts, w, _, _ = dm.quad
    _, du = u.at_quadrature()
    eu = du - ms.velocity_gradient(pts[..., 0], pts[..., 1])
    h1 = math.sqrt(float(np.sum(w[..., None, None] * eu ** 2)))
    ph = np.einsum("qa,ta->tq", fem.QUAD_BARY, p.coefficients[mesh.triangles])
    l2 = math.sqrt(float(np.sum(w * (ph - ms.pressure(pts[..., 0], pts[..., 1])) ** 2)))
    return 1.0 / n, h1, l2


def observed_orders(hs, errs) -> list[float]:
    return [math.log(errs[i] / errs[i + 1]) / math.log(hs[i] / hs[i + 1]) for i in range(len(errs) - 1)]


@dataclass
class MMSReport:
    hs: list = field(default_factory=list)
    velocity_h1: list = field(default_factory=list)
    pressure_l2: list = field(default_factory=list)

    @property
    def velocity_orders(self) -> list[float]:
        return observed_orders(self.hs, self.velocity_h1)

    @property
    def pressure_orders(self) -> list[float]:
        return observed_orders(self.hs, self.pressure_l2)


def mms_convergence(sizes=(4, 8, 16, 32), nu: float = 1.0) -> MMSReport:
    rep = MMSReport()
    for n in sizes:
        h, eu, ep = mms_errors(n, nu)
        rep.hs.append(h)
        rep.velocity_h1.append(eu)
        rep.pressure_l2.append(ep)
    return rep


def poiseuille_errors(nu: float = 0.01, nx: int = 20, ny: int = 10) -> tuple[float, float]:
    """Max nodal velocity and pressure errors of the obstacle-free channel.

    Exact: u = g everywhere and p = -2.4 nu (x - 2).
    """
    mesh = rectangle_mesh(0.0, 2.0, -0.5, 0.5, nx, ny)
    st = solve_state(mesh, nu, profile=channel_inflow)
    x = st.u.dofmap.node_coords
    gx, gy = channel_inflow(x[:, 0], x[:, 1])
    eu = float(np.max(np.abs(st.u.nodal - np.c_[gx, gy])))
    v = mesh.vertices
    ep = float(np.max(np.abs(st.p.coefficients - (-2.4 * nu * (v[:, 0] - 2.0)))))
    return eu, ep


H_TABLE = ((0.0, 0.0), (1.0, 0.5), (2.0, 1.6), (-3.0, 0.0))


def h_table_errors() -> list[float]:
    return [abs(float(h_eval(t)) - v) for t, v in H_TABLE]


def h_derivative_errors(points=(0.3, 0.7, 1.0, 1.5, 2.0, 3.0), step: float = 1e-5) -> list[float]:
    """Relative mismatch of h' and h'' against central differences."""
    out = []
    for t in points:
        fd1 = (float(h_eval(t + step)) - float(h_eval(t - step))) / (2 * step)
        fd2 = (float(h_prime(t + step)) - float(h_prime(t - step))) / (2 * step)
        out.append(abs(fd1 - float(h_prime(t))) / abs(float(h_prime(t))))
        out.append(abs(fd2 - float(h_second(t))) / max(abs(float(h_second(t))), 1e-12))
    return out


def radial_field(center, radius_out: float):
    """Smooth radial deformation (x - c) * bump, vanishing beyond ``radius_out``."""
    cx, cy = center

    def bump(x, y):
        r2 = ((x - cx) ** 2 + (y - cy) ** 2) / radius_out ** 2
        return np.where(r2 < 1, (1 - r2) ** 3, 0.0)

    return lambda x, y: (bump(x, y) * (x - cx), bump(x, y) * (y - cy)), bump


def deformation_fields(center=(0.325, 0.0), radius_out: float = 0.3) -> dict:
    """Three independent smooth deformation fields supported near the obstacle."""
    radial, bump = radial_field(center, radius_out)
    cx, cy = center

    def lobed(x, y):
        ang = np.arctan2(y - cy, x - cx)
        rx, ry = radial(x, y)
        return rx * (1 + 0.5 * np.cos(ang)), ry * (1 + 0.5 * np.cos(ang))

    def shift(x, y):
        b = bump(x, y)
        return b * 1.0, b * 0.5

    return {"radial": radial, "lobed": lobed, "shift": shift}


__all__ = [
    "H_TABLE", "MMSReport", "Manufactured", "h_derivative_errors", "h_table_errors", "mms_convergence",
    "mms_errors", "observed_orders", "poiseuille_errors", "deformation_fields", "radial_field",
]
