import math

import numpy as np
import pytest

from lib.manifolds.action_layer import ManifoldActionLayer


class TestProjection(ManifoldActionLayer):
    """
    Test Layer: closest-point projection and its jacobian.
    """
    TUBE_RADIUS = 0.3
    TORUS_TUBE_RADIUS = 0.2

    def test_sphere_projects_radially(self):
        self.project_and_verify(self.build_geometry("sphere2"), [0.0, 0.0, 2.0], [0.0, 0.0, 1.0])

    def test_flat_torus_normalizes_each_pair(self):
        self.project_and_verify(self.build_geometry("flat-torus"), [2.0, 0.0, 0.0, -3.0], [1.0, 0.0, 0.0, -1.0])

    def test_embedded_torus_projects_to_outer_equator(self):
        self.project_and_verify(self.build_geometry("embedded-torus"), [2.0, 0.0, 0.0], [1.5, 0.0, 0.0])

    def test_projective_plane_projects_radially(self):
        self.project_and_verify(self.build_geometry("projective2"), [0.0, -3.0, 0.0], [0.0, -1.0, 0.0])

    @pytest.mark.parametrize("name, point", [
        ("sphere2", [0.0, 0.0, 0.0]),
        ("circle", [0.0, 0.0]),
        ("flat-torus", [1.0, 0.0, 0.0, 0.0]),
        ("embedded-torus", [0.0, 0.0, 0.3]),
    ])
    def test_singular_points_are_rejected(self, name, point):
        self.project_and_expect_singular(self.build_geometry(name), point)

    @pytest.mark.parametrize("name", ["circle", "sphere2", "sphere3", "flat-torus", "projective2"])
    def test_projection_is_idempotent(self, name):
        self.project_twice_and_verify_idempotent(self.build_geometry(name), 500, self.TUBE_RADIUS)

    def test_embedded_torus_projection_is_idempotent(self):
        self.project_twice_and_verify_idempotent(self.build_geometry("embedded-torus"), 500, self.TORUS_TUBE_RADIUS)

    @pytest.mark.parametrize("name", ["sphere2", "flat-torus"])
    def test_projection_is_the_nearest_point(self, name):
        self.project_and_verify_nearest_point(self.build_geometry(name), 50, 5000, self.TUBE_RADIUS)

    def test_circle_jacobian_scales_tangent_direction(self):
        self.verify_jacobian_matrix(self.build_geometry("circle"), [2.0, 0.0], [[0.0, 0.0], [0.0, 0.5]])

    def test_euclidean_jacobian_is_identity(self):
        self.verify_jacobian_matrix(self.build_geometry("euclidean2"), [0.7, -4.0], np.eye(2))

    @pytest.mark.parametrize("name, point", [
        ("embedded-torus", [2.0, 0.0, 0.0]),
        ("embedded-torus", [0.3, 1.1, 0.2]),
        ("sphere2", [0.3, -0.4, 1.2]),
        ("flat-torus", [0.5, 0.9, -1.3, 0.2]),
        ("projective2", [1.1, 0.2, -0.3]),
    ])
    def test_jacobian_matches_finite_differences(self, name, point):
        self.compare_jacobian_with_finite_differences_and_verify(self.build_geometry(name), point)

    @pytest.mark.parametrize("name", ["sphere2", "flat-torus", "embedded-torus"])
    def test_jacobian_has_rank_d_on_the_manifold(self, name):
        self.verify_jacobian_rank_on_manifold(self.build_geometry(name), 50)


class TestDistances(ManifoldActionLayer):
    """
    Test Layer: geodesic distances.
    """

    def test_sphere_antipodes_are_pi_apart(self):
        self.measure_distance_and_verify(self.build_geometry("sphere2"), [1.0, 0.0, 0.0], [-1.0, 0.0, 0.0], math.pi)

    def test_flat_torus_wraps_angle_differences(self):
        torus = self.build_geometry("flat-torus")
        z = torus.from_angles([0.1, 0.0])
        y = torus.from_angles([-0.1, 0.0])
        self.measure_distance_and_verify(torus, z, y, 0.2)

    def test_projective_antipodes_are_identified(self):
        self.measure_distance_and_verify(self.build_geometry("projective2"), [1.0, 0.0, 0.0], [-1.0, 0.0, 0.0], 0.0)

    @pytest.mark.parametrize("name", ["circle", "sphere2", "sphere3", "flat-torus", "projective2", "euclidean2"])
    def test_distance_axioms(self, name):
        self.verify_distance_axioms(self.build_geometry(name), 200)

    def test_embedded_torus_distance_is_symmetric(self):
        self.verify_distance_axioms(self.build_geometry("embedded-torus"), 200, check_triangle=False)


class TestSamplingAndInvariants(ManifoldActionLayer):
    """
    Test Layer: uniform sampling, volume, curvature and membership.
    """
    MEAN_TOLERANCE = 4e-3

    def test_sphere_sample_means_vanish(self):
        self.sample_uniform_and_verify_means(self.build_geometry("sphere2"), 1_000_000, self.MEAN_TOLERANCE)

    def test_flat_torus_angles_are_uniform(self):
        self.sample_flat_torus_and_verify_uniform_angles(200_000)

    def test_embedded_torus_theta_density(self):
        self.sample_embedded_torus_and_verify_theta_density(self.build_geometry("embedded-torus"), 1_000_000)

    def test_sphere_volume_and_curvature(self):
        self.verify_volume_and_curvature(self.build_geometry("sphere2"), [0.0, 0.0, 1.0], 4.0 * math.pi, 2.0)

    def test_flat_torus_volume_and_curvature(self):
        torus = self.build_geometry("flat-torus")
        self.verify_volume_and_curvature(torus, torus.from_angles([0.3, -1.0]), 4.0 * math.pi ** 2, 0.0)

    def test_embedded_torus_is_flat_on_top(self):
        torus = self.build_geometry("embedded-torus")
        self.verify_volume_and_curvature(torus, torus.from_angles([math.pi / 2, 0.4]), 2.0 * math.pi ** 2, 0.0)

    def test_projective_plane_has_half_the_sphere_volume(self):
        self.verify_volume_and_curvature(self.build_geometry("projective2"), [1.0, 0.0, 0.0], 2.0 * math.pi, 2.0)

    @pytest.mark.parametrize("name, point, expected", [
        ("sphere2", [0.0, 0.0, 1.0], True),
        ("sphere2", [0.0, 0.0, 1.1], False),
        ("flat-torus", [1.0, 0.0, 0.6, 0.8], True),
        ("flat-torus", [1.0, 0.0, 0.6, 0.9], False),
    ])
    def test_contains(self, name, point, expected):
        self.verify_contains(self.build_geometry(name), point, 1e-9, expected)

    @pytest.mark.parametrize("angles", [[0.4, 1.0], [-2.0, 0.3], [2.9, -1.5]])
    def test_embedded_torus_curvature_gradient(self, angles):
        torus = self.build_geometry("embedded-torus")
        self.compare_curvature_gradient_with_finite_differences_and_verify(torus, torus.from_angles(angles))
