import numpy as np
import pytest
from scipy import stats

from lib.exceptions import SingularProjection
from lib.manifolds.physical_layer import ManifoldDescriptor, ManifoldGeometry


class ManifoldActionLayer:
    """
    Action Layer: self-verifying geometric checks on manifolds.
    Every method computes through the physical layer and asserts on the result.
    """

    @pytest.fixture(autouse=True)
    def setup_rng(self, generate_rng):
        """
        Injects the seeded generator fixture as self.rng.
        """
        self.rng = generate_rng

    def build_geometry(self, name):
        """
        Builds the geometry for a manifold name such as 'sphere2'.

        Args:
            name (str): Manifold name.

        Returns:
            ManifoldGeometry: The geometry.
        """
        return ManifoldGeometry(ManifoldDescriptor.from_name(name))

    def sample_tube_points(self, geometry, count, radius):
        """
        Draws ambient points at distance at most `radius` from the manifold.

        Args:
            geometry (ManifoldGeometry): The manifold.
            count (int): Number of points.
            radius (float): Tube radius.

        Returns:
            np.ndarray: Shape (count, n).
        """
        base = geometry.uniform_sample(self.rng, count)
        direction = self.rng.standard_normal(base.shape)
        direction /= np.linalg.norm(direction, axis=-1, keepdims=True)
        lengths = radius * self.rng.uniform(0.0, 1.0, size=(count, 1))
        return base + lengths * direction

    def project_and_verify(self, geometry, x, expected, tol=1e-12):
        result = geometry.project(np.asarray(x, dtype=float))
        assert np.allclose(result, expected, rtol=0.0, atol=tol), (
            f"{geometry.descriptor.name}: project({x}) expected {expected}, got {result}"
        )
        assert geometry.contains(result, 1e-9), f"projection {result} is not on {geometry.descriptor.name}"
        return result

    def project_and_expect_singular(self, geometry, x):
        with pytest.raises(SingularProjection):
            geometry.project(np.asarray(x, dtype=float))

    def project_twice_and_verify_idempotent(self, geometry, count, radius, tol=1e-12):
        """
        Verifies P(P(x)) = P(x) on points of a tube around the manifold.
        """
        points = self.sample_tube_points(geometry, count, radius)
        once = geometry.project(points)
        twice = geometry.project(once)
        worst = float(np.max(np.linalg.norm(twice - once, axis=-1)))
        assert worst <= tol, f"{geometry.descriptor.name}: idempotency defect {worst:.3e} > {tol:.1e}"
        assert np.all(geometry.contains(once, 1e-9)), f"{geometry.descriptor.name}: projection left the manifold"

    def project_and_verify_nearest_point(self, geometry, count, candidates, radius):
        """
        Verifies that no manifold sample is closer to x than P(x).
        """
        points = self.sample_tube_points(geometry, count, radius)
        projected = geometry.project(points)
        samples = geometry.uniform_sample(self.rng, candidates)
        to_projection = np.linalg.norm(points - projected, axis=-1)
        to_samples = np.linalg.norm(points[:, None, :] - samples[None, :, :], axis=-1).min(axis=1)
        violations = int(np.sum(to_projection > to_samples + 1e-12))
        assert violations == 0, f"{geometry.descriptor.name}: {violations} samples closer than the projection"

    def compare_jacobian_with_finite_differences_and_verify(self, geometry, x, step=1e-5, rel_tol=1e-6):
        """
        Compares project_jacobian with central finite differences of project.

        Returns:
            float: The relative Frobenius error.
        """
        x = np.asarray(x, dtype=float)
        analytic = geometry.project_jacobian(x)
        numeric = np.empty_like(analytic)
        for j in range(x.size):
            shift = np.zeros_like(x)
            shift[j] = step
            numeric[:, j] = (geometry.project(x + shift) - geometry.project(x - shift)) / (2.0 * step)
        error = float(np.linalg.norm(analytic - numeric) / max(np.linalg.norm(analytic), 1e-300))
        assert error < rel_tol, (
            f"{geometry.descriptor.name}: jacobian at {x} differs from finite differences, rel. error {error:.2e}"
        )
        return error

    def verify_jacobian_matrix(self, geometry, x, expected, tol=1e-12):
        result = geometry.project_jacobian(np.asarray(x, dtype=float))
        assert np.allclose(result, expected, rtol=0.0, atol=tol), f"jacobian at {x}: expected {expected}, got {result}"

    def verify_jacobian_rank_on_manifold(self, geometry, count):
        """
        Verifies that the projection jacobian has rank d at manifold points.
        """
        points = geometry.uniform_sample(self.rng, count)
        singular_values = np.linalg.svd(geometry.project_jacobian(points), compute_uv=False)
        d = geometry.dim
        assert np.all(singular_values[:, :d] > 1e-6), f"{geometry.descriptor.name}: rank below {d}"
        assert np.all(singular_values[:, d:] < 1e-9), f"{geometry.descriptor.name}: rank above {d}"

    def measure_distance_and_verify(self, geometry, z, y, expected, tol=1e-12):
        distance = geometry.geodesic_distance(np.asarray(z, dtype=float), np.asarray(y, dtype=float))
        assert abs(distance - expected) <= tol, f"distance({z}, {y}) expected {expected}, got {distance}"
        return distance

    def verify_distance_axioms(self, geometry, count, check_triangle=True, tol=1e-9):
        """
        Verifies exact symmetry and, optionally, the triangle inequality on random triples.
        """
        a, b, c = (geometry.uniform_sample(self.rng, count) for _ in range(3))
        ab = geometry.geodesic_distance(a, b)
        ba = geometry.geodesic_distance(b, a)
        assert np.array_equal(ab, ba), f"{geometry.descriptor.name}: distance is not symmetric"
        assert np.all(ab >= 0.0), f"{geometry.descriptor.name}: negative distance"
        if check_triangle:
            slack = ab + geometry.geodesic_distance(b, c) - geometry.geodesic_distance(a, c)
            assert np.all(slack >= -tol), f"{geometry.descriptor.name}: triangle inequality violated by {-slack.min():.2e}"

    def sample_uniform_and_verify_means(self, geometry, count, tol):
        points = geometry.uniform_sample(self.rng, count)
        means = points.mean(axis=0)
        assert np.all(np.abs(means) <= tol), f"{geometry.descriptor.name}: sample means {means} exceed {tol}"

    def sample_flat_torus_and_verify_uniform_angles(self, count, bins=20, alpha=0.01):
        """
        Chi-square test of uniformity for both flat-torus angles.
        """
        geometry = self.build_geometry("flat-torus")
        angles = geometry.to_angles(geometry.uniform_sample(self.rng, count))
        for axis in range(2):
            observed, _ = np.histogram(angles[:, axis], bins=bins, range=(-np.pi, np.pi))
            p_value = stats.chisquare(observed).pvalue
            assert p_value > alpha, f"flat torus angle {axis}: chi-square p-value {p_value:.4f} <= {alpha}"

    def sample_embedded_torus_and_verify_theta_density(self, geometry, count, bins=20, tol=0.01):
        """
        Compares the binned poloidal-angle density with (R + r cos theta) / (2 pi R).
        """
        theta = geometry.to_angles(geometry.uniform_sample(self.rng, count))[:, 0]
        edges = np.linspace(-np.pi, np.pi, bins + 1)
        empirical, _ = np.histogram(theta, bins=edges, density=True)
        R, r = geometry.R, geometry.r
        primitive = (R * edges + r * np.sin(edges)) / (2.0 * np.pi * R)
        expected = np.diff(primitive) / np.diff(edges)
        worst = float(np.max(np.abs(empirical - expected)))
        assert worst <= tol, f"embedded torus theta density off by {worst:.4f} > {tol}"

    def verify_volume_and_curvature(self, geometry, z, expected_volume, expected_curvature, tol=1e-12):
        volume = geometry.volume()
        curvature = geometry.scalar_curvature(np.asarray(z, dtype=float))
        assert abs(volume - expected_volume) <= tol * max(1.0, expected_volume), (
            f"{geometry.descriptor.name}: volume expected {expected_volume}, got {volume}"
        )
        assert abs(curvature - expected_curvature) <= tol, (
            f"{geometry.descriptor.name}: curvature expected {expected_curvature}, got {curvature}"
        )

    def verify_contains(self, geometry, x, tol, expected):
        result = geometry.contains(np.asarray(x, dtype=float), tol)
        assert result is expected, f"{geometry.descriptor.name}: contains({x}) expected {expected}, got {result}"

    def compare_curvature_gradient_with_finite_differences_and_verify(self, geometry, z, step=1e-6, rel_tol=1e-6):
        """
        Checks scalar_curvature_gradient against central differences of the
        curvature formula evaluated on projected neighbours.
        """
        z = np.asarray(z, dtype=float)
        analytic = geometry.project_jacobian(z).T @ geometry.scalar_curvature_gradient(z)
        numeric = np.empty_like(z)
        for j in range(z.size):
            shift = np.zeros_like(z)
            shift[j] = step
            numeric[j] = (
                geometry.scalar_curvature(geometry.project(z + shift))
                - geometry.scalar_curvature(geometry.project(z - shift))
            ) / (2.0 * step)
        error = float(np.linalg.norm(analytic - numeric) / max(np.linalg.norm(numeric), 1e-12))
        assert error < rel_tol, f"curvature gradient rel. error {error:.2e} at {z}"
