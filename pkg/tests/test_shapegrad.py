import numpy as np
import pytest

from vortopt import fem
from vortopt.flow import solve_adjoint, solve_state
from vortopt.functionals import ObjectiveParams
from vortopt.mesh import FREE, IN, OUT, WALL, ChannelGeometry, _segment_points, _triangulate_pslg, _tri_area, build_channel_mesh
from vortopt.shapegrad import (
    BoundaryFrame, BoundaryScalar, boundary_frame, boundary_l2_norm_sq, boundary_pairing, curvature,
    evaluate_gradient, extend_normal, lagrangian_gradient, normal_derivative, shape_gradient,
    validate_shape_derivative,
)
from vortopt.verification import deformation_fields

from conftest import CURL

CENTER = np.array([0.325, 0.0])


def square_obstacle_mesh(per_side=10):
    """Channel with an axis-aligned square hole [0.2, 0.45] x [-0.125, 0.125]."""
    corners = np.array([[0, -0.5], [2, -0.5], [2, 0.5], [0, 0.5]], dtype=float)
    sides = [_segment_points(corners[i], corners[(i + 1) % 4], 1 / 15) for i in range(4)]
    outer = np.concatenate(sides)
    outer_tags = sum(([t] * len(side) for t, side in zip((WALL, OUT, WALL, IN), sides)), [])
    s = np.linspace(0, 1, per_side + 1)[:-1, None]
    c = np.array([[0.2, -0.125], [0.2, 0.125], [0.45, 0.125], [0.45, -0.125]])
    hole = np.concatenate([c[i] + s * (c[(i + 1) % 4] - c[i]) for i in range(4)])
    pts = np.concatenate([outer, hole])
    no = len(outer)
    segs = np.concatenate([np.c_[np.arange(no), (np.arange(no) + 1) % no],
                           no + np.c_[np.arange(len(hole)), (np.arange(len(hole)) + 1) % len(hole)]])
    tags = outer_tags + [FREE] * len(hole)
    return _triangulate_pslg(pts, segs, tags, [(0.325, 0.0)], _tri_area(1 / 15))


class TestFrame:
    def test_unit_orthogonal(self, channel_mesh):
        f = boundary_frame(channel_mesh)
        assert np.allclose(np.linalg.norm(f.normals, axis=1), 1, atol=1e-12)
        assert np.allclose(np.linalg.norm(f.tangents, axis=1), 1, atol=1e-12)
        assert np.max(np.abs(np.einsum("ki,ki->k", f.normals, f.tangents))) < 1e-12
        # (tau, n) positively oriented: det[tau, n] = -1 with tau = n rotated by +pi/2
        cross = f.tangents[:, 0] * f.normals[:, 1] - f.tangents[:, 1] * f.normals[:, 0]
        assert np.allclose(cross, -1)

    def test_circle_normals_point_into_obstacle(self, channel_mesh):
        f = boundary_frame(channel_mesh)
        radial = (CENTER - channel_mesh.vertices[f.nodes]) / 0.13
        assert np.max(np.linalg.norm(f.normals - radial, axis=1)) < 1e-2

    def test_closed_normal_integral(self, channel_mesh):
        f = boundary_frame(channel_mesh)
        assert np.linalg.norm((f.edge_normals * f.edge_lengths[:, None]).sum(axis=0)) < 1e-14

    def test_square_edges_axis_aligned(self):
        m = square_obstacle_mesh()
        f = boundary_frame(m)
        en = f.edge_normals
        assert np.all(np.isclose(np.abs(en), 0, atol=1e-15) | np.isclose(np.abs(en), 1, atol=1e-15))
        mid = m.vertices[f.nodes] + 0.5 * (np.roll(m.vertices[f.nodes], -1, axis=0) - m.vertices[f.nodes])
        left = np.isclose(mid[:, 0], 0.2)
        assert np.allclose(en[left], [1, 0])


class TestNormalExtension:
    def test_trace_close_to_normal(self, channel_mesh, channel_dofmap):
        N = extend_normal(channel_mesh, 1e-3, channel_dofmap)
        f = boundary_frame(channel_mesh)
        assert np.max(np.linalg.norm(N.nodal[f.nodes] - f.normals, axis=1)) <= 0.05

    def test_shrinks_with_epsilon(self, channel_mesh, channel_dofmap):
        norms = [np.linalg.norm(extend_normal(channel_mesh, e, channel_dofmap).coefficients) for e in (1e-3, 1e-1, 10.0)]
        assert norms[0] > norms[1] > norms[2]

    def test_linear_in_data(self, channel_mesh, channel_dofmap):
        a = extend_normal(channel_mesh, 1e-3, channel_dofmap)
        b = extend_normal(channel_mesh, 1e-3, channel_dofmap, scale=2.0)
        assert np.allclose(b.coefficients, 2 * a.coefficients, rtol=1e-12, atol=1e-14)

    def test_epsilon_must_be_positive(self, channel_mesh):
        with pytest.raises(ValueError):
            extend_normal(channel_mesh, 0.0)


class TestCurvature:
    def test_circle(self, curl_eval):
        k = curl_eval.kappa.values
        assert np.mean(k) == pytest.approx(-1 / 0.13, rel=0.02)
        assert np.all(k < 0)

    def test_straight_sides_flat(self):
        m = square_obstacle_mesh(12)
        f = boundary_frame(m)
        k = curvature(extend_normal(m), f).values
        p = m.vertices[f.nodes]
        corner = np.array([[0.2, -0.125], [0.2, 0.125], [0.45, 0.125], [0.45, -0.125]])
        far = np.min(np.linalg.norm(p[:, None] - corner[None], axis=2), axis=1) > 0.05
        assert np.max(np.abs(k[far])) < 0.05 * (1 / 0.13)

    def test_perimeter_derivative(self, channel_mesh, channel_dofmap):
        theta = fem.interpolate(channel_dofmap, deformation_fields()["radial"])
        rep = validate_shape_derivative(channel_mesh, ObjectiveParams(0.0, 0.0, 1.0), theta, [1e-4])
        assert rep.rel_error[0] <= 0.05


class TestNormalDerivative:
    def test_linear_and_constant(self, channel_mesh, channel_dofmap):
        f = boundary_frame(channel_mesh)
        lin = fem.interpolate(channel_dofmap, lambda x, y: (x, 0 * y))
        assert np.allclose(normal_derivative(lin, f), np.c_[f.normals[:, 0], 0 * f.normals[:, 0]], atol=1e-12)
        const = fem.interpolate(channel_dofmap, lambda x, y: (np.ones_like(x), 2 * np.ones_like(y)))
        assert np.max(np.abs(normal_derivative(const, f))) < 1e-12

    def test_no_slip_gradient_is_normal(self, curl_eval):
        from vortopt.shapegrad import nodal_gradients

        f = curl_eval.frame
        g = nodal_gradients(curl_eval.state.u, f.nodes)
        dn = normal_derivative(curl_eval.state.u, f)
        approx = np.einsum("ki,kj->kij", dn, f.normals)
        rel = np.linalg.norm(g - approx, axis=(1, 2)) / np.linalg.norm(g, axis=(1, 2))
        assert np.median(rel) <= 0.1


class TestShapeGradient:
    def test_perimeter_only(self, curl_eval, channel_mesh):
        p = ObjectiveParams(0.0, 0.0, 5.0)
        adj = solve_adjoint(channel_mesh, curl_eval.state, 0.01, 0.0, 0.0)
        g = shape_gradient(channel_mesh, curl_eval.state, adj, curl_eval.kappa, curl_eval.frame, p)
        assert np.allclose(g.values, 5 * curl_eval.kappa.values, rtol=1e-12, atol=1e-12)

    def test_zero_flow(self, channel_mesh):
        ev = evaluate_gradient(channel_mesh, ObjectiveParams(1.0, 2.0, 5.0), profile=lambda x, y: (0 * y, 0 * y))
        assert np.allclose(ev.grad.values, 5 * ev.kappa.values, atol=1e-12)

    @pytest.mark.parametrize("method", ["flux", "pointwise"])
    def test_termwise_additivity(self, curl_eval, channel_mesh, method):
        st = curl_eval.state

        def grad(g1, g2, alpha=5.0):
            adj = solve_adjoint(channel_mesh, st, 0.01, g1, g2)
            return shape_gradient(channel_mesh, st, adj, curl_eval.kappa, curl_eval.frame,
                                  ObjectiveParams(g1, g2, alpha), method=method).values

        lhs = grad(0.8, 0.0) + grad(0.0, 1.5) - grad(0.8, 1.5)
        rhs = grad(0.0, 0.0)
        assert np.max(np.abs(lhs - rhs)) <= 1e-10 * np.max(np.abs(grad(0.8, 1.5)))

    def test_matches_central_differences(self, channel_mesh, channel_dofmap):
        theta = fem.interpolate(channel_dofmap, deformation_fields()["lobed"])
        rep = validate_shape_derivative(channel_mesh, CURL, theta, [1e-4])
        assert rep.rel_error[0] <= 0.02

    def test_zero_field(self, channel_mesh, channel_dofmap):
        theta = fem.interpolate(channel_dofmap, lambda x, y: (0 * x, 0 * y))
        rep = validate_shape_derivative(channel_mesh, CURL, theta, [1e-4])
        assert rep.derivative == 0 and rep.fd == [0.0]

    def test_dropping_viscosity_on_adjoint_flux_breaks_oracle(self, channel_mesh, channel_dofmap, curl_eval):
        # pointwise formula with nu (kept) vs without nu (nu -> 1 in the bracket)
        theta = fem.interpolate(channel_dofmap, deformation_fields()["radial"])
        fd = validate_shape_derivative(channel_mesh, CURL, theta, [1e-4]).fd[0]
        ev = curl_eval
        kept = shape_gradient(channel_mesh, ev.state, ev.adjoint, ev.kappa, ev.frame, CURL, method="pointwise")
        dropped = shape_gradient(channel_mesh, ev.state, ev.adjoint, ev.kappa, ev.frame, CURL, nu=1.0,
                                 method="pointwise")
        err_kept = abs(boundary_pairing(kept, theta) - fd) / abs(fd)
        err_dropped = abs(boundary_pairing(dropped, theta) - fd) / abs(fd)
        assert err_kept < 0.15 and err_dropped > 10 * err_kept

    def test_orientation_flip_invariance(self, curl_eval):
        f = curl_eval.frame
        flipped = BoundaryFrame(f.nodes, -f.normals, -f.tangents, -f.edge_normals, f.edge_lengths)
        N = extend_normal(curl_eval.mesh, scale=-1.0)
        k_flip = curvature(N, flipped).values
        assert np.allclose(k_flip, -curl_eval.kappa.values, rtol=1e-10)
        theta = curl_eval.state.u.nodal[f.nodes] + 0.1  # any nodal vector data
        a = np.sum(curl_eval.kappa.values * np.einsum("ki,ki->k", theta, f.normals))
        b = np.sum(k_flip * np.einsum("ki,ki->k", theta, flipped.normals))
        assert a == pytest.approx(b, rel=1e-10)

    def test_unknown_method(self, curl_eval, channel_mesh):
        ev = curl_eval
        with pytest.raises(ValueError):
            shape_gradient(channel_mesh, ev.state, ev.adjoint, ev.kappa, ev.frame, CURL, method="magic")


class TestLagrangianGradient:
    def test_shifts(self, curl_eval):
        g = curl_eval.grad
        assert np.array_equal(lagrangian_gradient(g, 0, 0, 1.9, 1.8).values, g.values)
        assert np.allclose(lagrangian_gradient(g, 20, 1e-4, 1.9, 1.9).values, g.values - 20)
        shifted = lagrangian_gradient(g, 20, 1e-4, 1.91, 1.9)
        assert np.allclose(shifted.values - g.values, -20 + 1e-6, rtol=0, atol=1e-12)
        assert np.allclose(shifted.at_gauss() - g.at_gauss(), -20 + 1e-6, rtol=0, atol=1e-12)

    def test_volume_must_be_positive(self, curl_eval):
        with pytest.raises(ValueError):
            lagrangian_gradient(curl_eval.grad, 0, 0, 0.0, 1.0)


class TestBoundaryScalar:
    def test_csv(self, curl_eval, tmp_path):
        p = tmp_path / "k.csv"
        curl_eval.kappa.to_csv(p, "kappa")
        lines = p.read_text().splitlines()
        assert lines[0] == "node,x,y,kappa"
        assert len(lines) == len(curl_eval.kappa.nodes) + 1

    def test_nodes_are_free_loop(self, curl_eval, channel_mesh):
        assert np.array_equal(curl_eval.grad.nodes, channel_mesh.free_loop)

    def test_linear_gauss_fallback(self, channel_mesh):
        loop = channel_mesh.free_loop
        s = BoundaryScalar(channel_mesh, loop, np.ones(len(loop)))
        assert np.allclose(s.at_gauss(), 1.0)

    def test_pairing_of_constant_is_flux(self, channel_mesh, channel_dofmap):
        # int_F 1 * (theta . n) ds = int_Omega div theta for theta vanishing on the channel walls
        from vortopt.verification import radial_field

        field, _ = radial_field((0.325, 0.0), 0.3)
        theta = fem.interpolate(channel_dofmap, field)
        loop = channel_mesh.free_loop
        one = BoundaryScalar(channel_mesh, loop, np.ones(len(loop)))
        q = np.ones(channel_dofmap.n_pressure)
        div = -(q @ (fem.divergence_matrix(channel_dofmap) @ theta.coefficients))
        assert boundary_pairing(one, theta) == pytest.approx(div, rel=1e-10)
        assert boundary_l2_norm_sq(theta) > 0
