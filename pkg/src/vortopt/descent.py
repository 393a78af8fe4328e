"""Deformation fields, line search, multiplier updates and the descent loop."""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from . import fem
from .fem import DofMap, Field, SolverError
from .flow import channel_inflow, solve_state
from .functionals import ObjectiveBreakdown, ObjectiveParams, breakdown_from, eval_breakdown
from .mesh import (FREE, IN, OUT, WALL, ChannelGeometry, Mesh, MeshError, QualityReport, adapt_mesh,
                   apply_deformation, build_channel_mesh, mesh_quality, polyline_is_simple)
from .shapegrad import (BoundaryScalar, Evaluation, boundary_l2_norm_sq, boundary_normal_load,
                        evaluate_gradient, lagrangian_gradient)

log = logging.getLogger(__name__)

ALGORITHMS = ("aL", "dF")


@dataclass(frozen=True)
class RunConfig:
    """Everything one optimization run depends on.

    ``algorithm`` is ``"aL"`` (augmented Lagrangian, plain H1 deformation) or
    ``"dF"`` (divergence-free deformation, no multipliers).
    """
    algorithm: str = "dF"
    gamma1: float = 1.0
    gamma2: float = 0.0
    alpha: float = 5.0
    beta: float = 0.05
    gamma_smooth: float = 0.05
    epsilon: float | None = None  # normal-extension weight; None picks 1e-3 * bbox diagonal
    ell0: float = 0.0
    b0: float = 1e-4
    tau_mult: float = 1.05
    b_bar: float = 10.0
    m: float | None = None  # target volume; None uses the initial volume
    tol: float = 1e-6
    max_iter: int = 50
    h_min: float = 1 / 50
    h_max: float = 1 / 30
    nu: float = 0.01
    geometry: ChannelGeometry = field(default_factory=ChannelGeometry)
    adapt_initial: bool = True
    max_halvings: int = 12
    remesh_angle: float = 0.0  # regenerate the interior mesh when the min angle drops below this (0: never)
    seed: int = 0  # recorded for provenance; mesh generation is deterministic

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"algorithm must be one of {ALGORITHMS}, got {self.algorithm!r}")
        if self.beta <= 0:
            raise ValueError("beta must be positive")
        if self.gamma_smooth <= 0:
            raise ValueError("gamma_smooth must be positive")
        if self.tol <= 0:
            raise ValueError("tol must be positive")
        if self.max_iter < 0:
            raise ValueError("max_iter must be non-negative")
        if self.nu <= 0:
            raise ValueError("nu must be positive")
        if self.epsilon is not None and self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if not 0 < self.h_min <= self.h_max:
            raise ValueError("need 0 < h_min <= h_max")
        if self.algorithm == "aL":
            if self.tau_mult <= 1:
                raise ValueError("tau_mult must exceed 1")
            if not self.b_bar > self.b0 > 0:
                raise ValueError("need b_bar > b0 > 0")

    @property
    def lam(self) -> int:
        return 1 if self.algorithm == "dF" else 0

    def objective_params(self, ell: float, b: float, m: float) -> ObjectiveParams:
        return ObjectiveParams(self.gamma1, self.gamma2, self.alpha, ell, b, m)


@dataclass(frozen=True, eq=False)
class IterationRecord:
    iteration: int
    breakdown: ObjectiveBreakdown
    step: float
    retries: int
    ell: float
    b: float
    quality: QualityReport
    accepted: bool
    polyline: np.ndarray
    value: float  # objective (dF) or Lagrangian (aL) with the multipliers used for this step
    reference_value: float  # value the step had to beat (same multipliers, same discretization)
    remeshed: bool = False  # interior regenerated after this step
    seconds: float = 0.0


@dataclass
class OptimizationResult:
    records: list
    mesh: Mesh
    stop_reason: str
    initial_mesh: Mesh | None = None
    error: str | None = None

    @property
    def accepted(self) -> list:
        return [r for r in self.records if r.accepted]


class Converged(Exception):
    """Raised when the deformation field vanishes on the obstacle."""


# ---------------------------------------------------------------- deformation field

def _constrained_velocity_dofs(dofmap: DofMap) -> np.ndarray:
    tags = set(dofmap.mesh.boundary_tags.tolist()) & {IN, WALL, OUT}
    return np.unique(np.concatenate([dofmap.velocity_dofs(t) for t in sorted(tags)]))


def solve_deformation(mesh: Mesh, grad_k: BoundaryScalar, gamma_smooth: float, lam: int,
                      dofmap: DofMap | None = None) -> Field:
    """H1 descent field: gamma a(th, phi) + (th, phi) + lam b(q, phi) = -(gradK n, phi)_F.

    ``theta`` vanishes on IN, WALL and OUT. With ``lam == 1`` it is also
    discretely divergence free.
    """
    if lam not in (0, 1):
        raise ValueError("lam must be 0 or 1")
    if gamma_smooth <= 0:
        raise ValueError("gamma_smooth must be positive")
    dm = dofmap or fem.build_dofmap(mesh)
    n = dm.n_nodes
    load = -boundary_normal_load(dm, grad_k)
    fixed = _constrained_velocity_dofs(dm)
    if lam == 0:
        # components decouple: factor the scalar operator once
        scalar = (gamma_smooth * fem.scalar_stiffness(dm) + fem.scalar_mass(dm)).tocsr()
        free = np.setdiff1d(np.arange(n), fixed[fixed < n])
        lu = fem.factorize(scalar[free][:, free], mesh)
        theta = np.zeros(2 * n)
        sol = lu.solve(np.c_[load[free], load[free + n]])
        theta[free], theta[free + n] = sol[:, 0], sol[:, 1]
        return Field(dm, "vector", theta)
    A = fem.vector_block(gamma_smooth * fem.scalar_stiffness(dm) + fem.scalar_mass(dm))
    system = fem.SaddleSystem(dm, 1.0, A, fem.divergence_matrix(dm), fem.vector_block(fem.scalar_mass(dm)),
                              fixed, np.zeros(len(fixed)))
    b = system.lifted_rhs(np.concatenate([load, np.zeros(dm.n_pressure)]))
    xf = system.factorization.solve(b)
    res = np.linalg.norm(system.reduced @ xf - b)
    if not np.isfinite(res) or res > 1e-10 * max(np.linalg.norm(b), 1.0):
        raise SolverError(f"deformation solve residual {res:.3e}")
    x = np.zeros(system.size)
    x[system.free_dofs] = xf
    return Field(dm, "vector", x[: dm.n_velocity])


def deformation_energy(theta: Field, gamma_smooth: float) -> float:
    """gamma ||grad theta||^2 + ||theta||^2 over the fluid domain."""
    dm = theta.dofmap
    op = fem.vector_block(gamma_smooth * fem.scalar_stiffness(dm) + fem.scalar_mass(dm))
    return float(theta.coefficients @ (op @ theta.coefficients))


# ---------------------------------------------------------------- step control

def initial_step(value: float, theta: Field, beta: float) -> float:
    """t0 = beta |value| / ||theta||^2 on the obstacle boundary."""
    norm_sq = boundary_l2_norm_sq(theta)
    if norm_sq <= 1e-28:
        raise Converged("deformation field vanishes on the obstacle")
    if value < 0:
        log.warning("negative objective value %.6g; using its magnitude for the initial step", value)
    return beta * abs(value) / norm_sq


@dataclass(frozen=True, eq=False)
class Trial:
    mesh: Mesh
    value: float
    payload: object = None


Evaluator = Callable[[Mesh], Trial]


def admissible(mesh: Mesh) -> tuple[bool, QualityReport]:
    q = mesh_quality(mesh)
    return (not q.degenerate) and polyline_is_simple(mesh.free_polyline), q


def line_search(mesh: Mesh, theta: Field, t0: float, current: float, evaluator: Evaluator,
                max_halvings: int = 12):
    """First t in t0, t0/2, ... giving an admissible mesh with a strictly lower value.

    Returns ``(trial, t, retries)`` or ``None`` when every step fails.
    """
    if t0 <= 0:
        raise ValueError("initial step must be positive")
    t = t0
    for retries in range(max_halvings + 1):
        try:
            cand = apply_deformation(mesh, theta, t)
            ok, _ = admissible(cand)
            if ok:
                trial = evaluator(cand)
                if trial.value < current:
                    return trial, t, retries
        except (SolverError, MeshError) as exc:
            log.info("step %.3g failed: %s", t, exc)
        t *= 0.5
    return None


def update_multipliers(ell: float, b: float, defect: float, tau_mult: float, b_bar: float) -> tuple[float, float]:
    """ell' = ell - b F;  b' = tau b while b < b_bar."""
    return ell - b * defect, (tau_mult * b if b < b_bar else b)


# ---------------------------------------------------------------- main loop

def initial_mesh(config: RunConfig, profile=channel_inflow) -> Mesh:
    mesh = build_channel_mesh(config.geometry, config.h_min, config.h_max)
    if config.adapt_initial:
        mesh = adapt_mesh(mesh, solve_state(mesh, config.nu, profile=profile).u, config.h_min, config.h_max)
    return mesh


def optimize(config: RunConfig, mesh: Mesh | None = None, profile=channel_inflow,
             on_iteration: Callable[[IterationRecord, Evaluation], None] | None = None) -> OptimizationResult:
    """Shape descent: aL (lam = 0) or dF (lam = 1).

    Each iteration solves the deformation field on the current mesh, picks a
    step by halving from the rule ``beta |value| / ||theta||^2``, and accepts
    the first admissible mesh with a strictly lower value. The loop stops when
    two consecutive accepted values (same multipliers) differ by less than
    ``tol``, after ``max_iter`` iterations, or when no step decreases the value.
    Multipliers are updated after every accepted aL step.
    """
    start = time.perf_counter()
    mesh = mesh or initial_mesh(config, profile)
    mesh0 = mesh
    m = mesh.volume if config.m is None else config.m
    aL = config.algorithm == "aL"
    ell, b = (config.ell0, config.b0) if aL else (0.0, 0.0)
    params = config.objective_params(ell, b, m)

    def value_of(bd: ObjectiveBreakdown) -> float:
        return bd.lagrangian if aL else bd.objective

    def evaluator_for(p: ObjectiveParams) -> Evaluator:
        def evaluate(cand: Mesh) -> Trial:
            st = solve_state(cand, config.nu, profile=profile)
            bd = eval_breakdown(cand, st, p)
            return Trial(cand, value_of(bd), (st, bd))
        return evaluate

    records: list[IterationRecord] = []

    def record(k, bd, t, retries, accepted, msh, reference, remeshed=False):
        rec = IterationRecord(k, bd, t, retries, ell, b, mesh_quality(msh), accepted, msh.free_polyline,
                              value_of(bd), reference, remeshed, time.perf_counter() - start)
        records.append(rec)
        return rec

    try:
        ev = evaluate_gradient(mesh, params, config.nu, profile, config.epsilon)
    except SolverError as exc:
        return OptimizationResult(records, mesh, "solver failure", mesh0, str(exc))
    bd = eval_breakdown(mesh, ev.state, params)
    rec = record(0, bd, 0.0, 0, True, mesh, value_of(bd))
    if on_iteration:
        on_iteration(rec, ev)
    stop = "max_iter"
    for k in range(1, config.max_iter + 1):
        try:
            current = value_of(bd)
            grad = lagrangian_gradient(ev.grad, ell, b, mesh.volume, m) if aL else ev.grad
            theta = solve_deformation(mesh, grad, config.gamma_smooth, config.lam, ev.dofmap)
            try:
                t0 = initial_step(current, theta, config.beta)
            except Converged:
                stop = "converged (vanishing deformation)"
                break
            found = line_search(mesh, theta, t0, current, evaluator_for(params), config.max_halvings)
            if found is None:
                record(k, bd, 0.0, config.max_halvings + 1, False, mesh, current)
                stop = "no descent step found"
                break
            trial, t, retries = found
            mesh = trial.mesh
            state, bd = trial.payload
            step_bd, step_mesh = bd, mesh
            remeshed = mesh_quality(mesh).min_angle < config.remesh_angle
            if remeshed:
                # boundary vertices are kept, so volume and perimeter do not change
                mesh = adapt_mesh(mesh, state.u, config.h_min, config.h_max)
                state = solve_state(mesh, config.nu, profile=profile)
                bd = eval_breakdown(mesh, state, params)
            ev = evaluate_gradient(mesh, params, config.nu, profile, config.epsilon, state=state)
        except (SolverError, MeshError) as exc:
            log.error("failure at iteration %d: %s", k, exc)
            return OptimizationResult(records, mesh, "solver failure", mesh0, str(exc))
        rec = record(k, step_bd, t, retries, True, step_mesh, current, remeshed)
        if on_iteration:
            on_iteration(rec, ev)
        if abs(value_of(step_bd) - current) < config.tol:
            stop = "converged (tolerance)"
            break
        if aL:
            ell, b = update_multipliers(ell, b, bd.defect, config.tau_mult, config.b_bar)
            params = replace(params, ell=ell, b=b)
            bd = breakdown_from(bd.j1, bd.j2, bd.perimeter, bd.volume, params)
    return OptimizationResult(records, mesh, stop, mesh0)
