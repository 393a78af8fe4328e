"""Vorticity-maximizing obstacle shapes in 2D Stokes channel flow."""
from .descent import OptimizationResult, RunConfig, optimize
from .fem import build_dofmap
from .flow import channel_inflow, solve_adjoint, solve_state
from .functionals import ObjectiveParams, eval_breakdown, h_eval, h_prime, h_second
from .mesh import FREE, IN, OUT, WALL, ChannelGeometry, Mesh, build_channel_mesh, hausdorff_distance
from .shapegrad import evaluate_gradient, validate_shape_derivative

__version__ = "0.1.0"

__all__ = [
    "ChannelGeometry", "FREE", "IN", "Mesh", "OUT", "ObjectiveParams", "OptimizationResult", "RunConfig",
    "WALL", "build_channel_mesh", "build_dofmap", "eval_breakdown", "evaluate_gradient", "h_eval",
    "h_prime", "h_second", "hausdorff_distance", "optimize", "channel_inflow", "solve_adjoint",
    "solve_state", "validate_shape_derivative",
]
