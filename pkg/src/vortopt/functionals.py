"""Vortex functionals, perimeter/volume and the augmented Lagrangian."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


def h_eval(t):
    """h(t) = t^3 / (t^2 + 1) for t > 0, else 0."""
    t = np.asarray(t, dtype=float)
    tp = np.where(t > 0, t, 0.0)
    return tp ** 3 / (tp ** 2 + 1.0)


def h_prime(t):
    t = np.asarray(t, dtype=float)
    tp = np.where(t > 0, t, 0.0)
    return (tp ** 4 + 3.0 * tp ** 2) / (1.0 + tp ** 2) ** 2


def h_second(t):
    t = np.asarray(t, dtype=float)
    tp = np.where(t > 0, t, 0.0)
    return 2.0 * tp * (3.0 - tp ** 2) / (1.0 + tp ** 2) ** 3


@dataclass(frozen=True)
class ObjectiveParams:
    gamma1: float = 1.0
    gamma2: float = 0.0
    alpha: float = 5.0
    ell: float = 0.0
    b: float = 0.0
    m: float | None = None  # target volume; None means no constraint defect


@dataclass(frozen=True)
class ObjectiveBreakdown:
    j1: float
    j2: float
    perimeter: float
    volume: float
    objective: float
    lagrangian: float
    gamma1: float
    gamma2: float
    alpha: float
    defect: float


def vortex_terms(u, gamma1: float, gamma2: float) -> tuple[float, float]:
    """(gamma1/2 int |curl u|^2, gamma2 int h(det grad u)) by element quadrature."""
    _, w, _, _ = u.dofmap.quad
    _, du = u.at_quadrature()
    curl = du[..., 1, 0] - du[..., 0, 1]
    det = du[..., 0, 0] * du[..., 1, 1] - du[..., 0, 1] * du[..., 1, 0]
    j1 = 0.5 * gamma1 * float(np.sum(w * curl ** 2))
    j2 = gamma2 * float(np.sum(w * h_eval(det)))
    return j1, j2


def abs_det_integral(u) -> float:
    _, w, _, _ = u.dofmap.quad
    _, du = u.at_quadrature()
    det = du[..., 0, 0] * du[..., 1, 1] - du[..., 0, 1] * du[..., 1, 0]
    return float(np.sum(w * np.abs(det)))


def breakdown_from(j1: float, j2: float, perimeter: float, volume: float,
                   params: ObjectiveParams) -> ObjectiveBreakdown:
    objective = params.alpha * perimeter - j1 - j2
    defect = 0.0 if params.m is None else volume - params.m
    lagrangian = objective - params.ell * defect + 0.5 * params.b * defect ** 2
    return ObjectiveBreakdown(j1, j2, perimeter, volume, objective, lagrangian,
                              params.gamma1, params.gamma2, params.alpha, defect)


def eval_breakdown(mesh, state, params: ObjectiveParams) -> ObjectiveBreakdown:
    j1, j2 = vortex_terms(state.u, params.gamma1, params.gamma2)
    return breakdown_from(j1, j2, mesh.perimeter, mesh.volume, params)


def mixed_configuration(k: int) -> ObjectiveParams:
    """Mixed problem configuration k: alpha = 5 + k, gamma1 = 1, gamma2 = k."""
    if not 1 <= k <= 10:
        raise ValueError("configuration index must be in 1..10")
    return ObjectiveParams(gamma1=1.0, gamma2=float(k), alpha=5.0 + k)


def mixed_split(breakdown: ObjectiveBreakdown, k: int) -> tuple[float, float]:
    """Split the mixed objective into its curl part and its det-grad part.

    ``curl_part + k * detgrad_part == objective`` for configuration ``k``.
    """
    cfg = mixed_configuration(k)
    if (breakdown.gamma1, breakdown.gamma2, breakdown.alpha) != (cfg.gamma1, cfg.gamma2, cfg.alpha):
        raise ValueError(f"breakdown was not evaluated with configuration {k}")
    curl_part = 5.0 * breakdown.perimeter - breakdown.j1 / breakdown.gamma1
    detgrad_part = breakdown.perimeter - breakdown.j2 / breakdown.gamma2
    return curl_part, detgrad_part
