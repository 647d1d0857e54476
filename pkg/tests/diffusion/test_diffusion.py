import math

import pytest

from lib.diffusion.action_layer import DiffusionActionLayer


class TestRandomWalk(DiffusionActionLayer):
    """
    Test Layer: the projected random walk and its pathwise jacobians.
    """
    CLOSED_MANIFOLDS = ["circle", "sphere2", "flat-torus", "embedded-torus", "projective2"]

    @pytest.mark.parametrize("name", CLOSED_MANIFOLDS)
    def test_zero_noise_returns_the_center(self, name):
        self.walk_with_zero_noise_and_verify_center(self.build_geometry(name), 0.3)

    @pytest.mark.parametrize("name", ["circle", "sphere2", "flat-torus"])
    def test_vanishing_time_returns_the_center(self, name):
        self.walk_with_tiny_time_and_verify_center(self.build_geometry(name))

    @pytest.mark.parametrize("name", CLOSED_MANIFOLDS)
    def test_walk_jacobians_match_finite_differences(self, name):
        self.compare_walk_jacobians_with_finite_differences_and_verify(self.build_geometry(name), 0.01)

    def test_one_step_jacobian_is_the_tangent_projector(self):
        self.walk_one_step_and_verify_tangent_projector(self.build_geometry("sphere2"))

    def test_circle_walk_matches_exact_kernel(self):
        self.measure_circle_total_variation_and_verify(0.25, 16, 100_000, 0.02)

    @pytest.mark.slow
    def test_total_variation_shrinks_with_more_steps(self):
        self.measure_total_variation_convergence_and_verify(0.5, (16, 32, 64), 20_000_000, 20)

    @pytest.mark.slow
    def test_fine_walk_matches_exact_kernel(self):
        self.measure_circle_total_variation_and_verify(0.25, 64, 1_000_000, 0.012)

    @pytest.mark.slow
    def test_cosine_moment_error_shrinks_with_more_steps(self):
        self.measure_cosine_moment_convergence_and_verify(1.0, (16, 32, 64), 1_000_000)


class TestHeatKernel(DiffusionActionLayer):
    """
    Test Layer: heat kernel values and identities.
    """

    def test_circle_kernel_reaches_the_uniform_limit(self):
        circle = self.build_geometry("circle")
        self.evaluate_kernel_and_verify(circle, 100.0, [1.0, 0.0], [0.0, 1.0], 1.0 / (2.0 * math.pi), 1e-12)

    def test_circle_kernel_peak_at_small_time(self):
        circle = self.build_geometry("circle")
        self.evaluate_kernel_and_verify(circle, 0.01, [1.0, 0.0], [1.0, 0.0], 1.0 / math.sqrt(2.0 * math.pi * 0.01), 1e-9)

    def test_sphere_kernel_underflows_at_antipode(self):
        self.evaluate_kernel_and_expect_underflow(self.build_geometry("sphere2"), 1e-4, [0.0, 0.0, 1.0], [0.0, 0.0, -1.0])

    def test_parametrix_agrees_with_spectral_series(self):
        self.compare_sphere_parametrix_with_spectral_and_verify(self.build_geometry("sphere2"), 0.01, 0.5, 1e-3)

    @pytest.mark.parametrize("name", ["circle", "sphere2", "flat-torus"])
    @pytest.mark.parametrize("time", [0.01, 0.1, 1.0])
    def test_kernel_integrates_to_one(self, name, time):
        self.measure_kernel_normalization_and_verify(self.build_geometry(name), time)

    @pytest.mark.parametrize("name", ["circle", "sphere2", "flat-torus", "projective2", "euclidean2"])
    def test_kernel_is_symmetric(self, name):
        self.verify_kernel_symmetry(self.build_geometry(name), 0.05)

    @pytest.mark.parametrize("first, second", [(0.05, 0.05), (0.1, 0.2), (0.3, 0.7)])
    def test_circle_chapman_kolmogorov(self, first, second):
        self.measure_chapman_kolmogorov_and_verify(first, second)

    @pytest.mark.parametrize("time", [0.05, 0.1, 0.5])
    def test_circle_kernel_solves_the_heat_equation(self, time):
        self.measure_heat_equation_residual_and_verify(time)


class TestKlDivergence(DiffusionActionLayer):
    """
    Test Layer: asymptotic, numeric and Gaussian KL terms and the prior.
    """

    def test_flat_torus_asymptotic_kl(self):
        self.compute_kl_asymptotic_and_verify(self.build_geometry("flat-torus"), 3.766e-3, 6.42, 5e-3)

    def test_sphere_asymptotic_kl(self):
        self.compute_kl_asymptotic_and_verify(self.build_geometry("sphere2"), 0.01, 4.303, 1e-3)

    @pytest.mark.parametrize("name", ["circle", "sphere2", "flat-torus", "embedded-torus"])
    def test_asymptotic_kl_diverges_as_time_vanishes(self, name):
        self.verify_kl_asymptotic_decreasing(self.build_geometry(name), [1e-6, 1e-5, 1e-4, 1e-3])

    def test_circle_numeric_kl_vanishes_at_stationarity(self):
        self.compute_kl_numeric_and_verify(self.build_geometry("circle"), 100.0, 0.0, 1e-9)

    def test_flat_torus_numeric_kl_matches_asymptotic(self):
        self.compare_kl_numeric_with_asymptotic_and_verify(self.build_geometry("flat-torus"), 0.01, abs_tol=1e-6)

    @pytest.mark.parametrize("time, rel_tol", [(0.01, 0.01), (0.001, 0.001)])
    def test_sphere_numeric_kl_matches_asymptotic(self, time, rel_tol):
        self.compare_kl_numeric_with_asymptotic_and_verify(self.build_geometry("sphere2"), time, rel_tol=rel_tol)

    def test_sphere_kl_error_shrinks_faster_than_time(self):
        self.measure_kl_error_ratio_and_verify(self.build_geometry("sphere2"), 0.01)

    def test_gaussian_kl_of_the_prior_is_zero(self):
        self.compute_kl_gaussian_and_verify([0.0, 0.0], [1.0, 1.0], 0.0)

    def test_gaussian_kl_of_a_shifted_mean(self):
        self.compute_kl_gaussian_and_verify([1.0], [1.0], 0.5)

    def test_gaussian_kl_matches_monte_carlo(self):
        self.compare_kl_gaussian_with_monte_carlo_and_verify([0.3, -1.2], [0.5, 2.0])

    def test_sphere_prior(self):
        self.compute_prior_log_density_and_verify(self.build_geometry("sphere2"), [0.0, 1.0, 0.0], -math.log(4.0 * math.pi))

    def test_flat_torus_prior(self):
        torus = self.build_geometry("flat-torus")
        self.compute_prior_log_density_and_verify(torus, torus.from_angles([1.0, 2.0]), -math.log(4.0 * math.pi ** 2))

    def test_euclidean_prior_at_origin(self):
        self.compute_prior_log_density_and_verify(self.build_geometry("euclidean2"), [0.0, 0.0], -math.log(2.0 * math.pi))


class TestKernelCheckSuite(DiffusionActionLayer):
    """
    Test Layer: the composite validation suite behind the kernel-check command.
    """

    @pytest.mark.parametrize("name, time", [("sphere2", 0.01), ("flat-torus", 0.01)])
    def test_suite_passes(self, name, time):
        self.run_kernel_check_suite_and_verify(name, time, 16, 10_000)

    @pytest.mark.slow
    def test_circle_suite_passes(self):
        self.run_kernel_check_suite_and_verify("circle", 0.25, 16, 100_000)
