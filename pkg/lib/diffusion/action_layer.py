import math

import numpy as np
import pytest

from lib.diffusion.physical_layer import (
    KernelSeriesConfig,
    PosteriorParams,
    RandomWalkConfig,
    base_point,
    chapman_kolmogorov_residual,
    circle_cosine_moment_error,
    circle_total_variation,
    evaluate_heat_kernel,
    heat_equation_residual,
    heat_kernel_density,
    heat_kernel_log_density,
    kernel_normalization,
    kl_asymptotic,
    kl_gaussian,
    kl_numeric,
    prior_log_density,
    random_walk_sample,
    random_walk_sample_with_jacobians,
)
from lib.manifolds.action_layer import ManifoldActionLayer
from lib.validation import CompositeCheckRunner


class DiffusionActionLayer(ManifoldActionLayer, CompositeCheckRunner):
    """
    Action Layer: self-verifying checks of the random-walk sampler, heat kernels and KL terms.
    Atomic actions assert; the kernel-check composite collects their outcomes into a report.
    """

    @pytest.fixture(autouse=True)
    def setup_kernel_config(self, kernel_config):
        """
        Injects the default kernel series config as self.kernel_config.
        """
        self.kernel_config = kernel_config

    def walk_with_zero_noise_and_verify_center(self, geometry, time, steps=16):
        center = geometry.uniform_sample(self.rng)
        noise = np.zeros((steps, geometry.ambient_dim))
        params = PosteriorParams(center, time)
        cfg = RandomWalkConfig(steps=steps)
        point, _, d_time = random_walk_sample_with_jacobians(geometry, params, cfg, self.rng, noise=noise)
        assert np.allclose(point, center, rtol=0.0, atol=1e-14), f"zero-noise walk moved {center} to {point}"
        assert np.all(d_time == 0.0), f"zero-noise walk has time derivative {d_time}"
        return point

    def walk_with_tiny_time_and_verify_center(self, geometry, time=1e-300, tol=1e-15):
        center = geometry.uniform_sample(self.rng)
        point = random_walk_sample(geometry, PosteriorParams(center, time), RandomWalkConfig(), self.rng)
        moved = float(np.linalg.norm(point - center))
        assert moved <= tol, f"walk with t={time} moved {moved:.2e} > {tol:.1e}"
        return moved

    def compare_walk_jacobians_with_finite_differences_and_verify(
        self, geometry, time, steps=16, step=1e-6, rel_tol=1e-5
    ):
        """
        Compares the pathwise jacobians of the walk with central finite
        differences under frozen noise.

        Args:
            geometry (ManifoldGeometry): A closed manifold.
            time (float): Diffusion time.
            steps (int, optional): Walk steps. Defaults to 16.
            step (float, optional): Finite-difference step. Defaults to 1e-6.
            rel_tol (float, optional): Allowed relative error. Defaults to 1e-5.

        Returns:
            float: The worse of the two relative errors.
        """
        center = geometry.uniform_sample(self.rng)
        noise = self.rng.standard_normal((steps, geometry.ambient_dim))
        cfg = RandomWalkConfig(steps=steps)

        def walk(z, t):
            return random_walk_sample(geometry, PosteriorParams(z, t), cfg, self.rng, noise=noise)

        _, d_center, d_time = random_walk_sample_with_jacobians(
            geometry, PosteriorParams(center, time), cfg, self.rng, noise=noise
        )
        numeric_center = np.empty_like(d_center)
        for j in range(center.size):
            shift = np.zeros_like(center)
            shift[j] = step
            numeric_center[:, j] = (walk(center + shift, time) - walk(center - shift, time)) / (2.0 * step)
        numeric_time = (walk(center, time + step) - walk(center, time - step)) / (2.0 * step)
        center_error = float(np.linalg.norm(d_center - numeric_center) / max(np.linalg.norm(numeric_center), 1e-12))
        time_error = float(np.linalg.norm(d_time - numeric_time) / max(np.linalg.norm(numeric_time), 1e-12))
        assert center_error < rel_tol, f"{geometry.descriptor.name}: dg/dz rel. error {center_error:.2e} >= {rel_tol:.0e}"
        assert time_error < rel_tol, f"{geometry.descriptor.name}: dg/dt rel. error {time_error:.2e} >= {rel_tol:.0e}"
        return max(center_error, time_error)

    def walk_one_step_and_verify_tangent_projector(self, geometry, time=1e-10, tol=1e-3):
        center = geometry.uniform_sample(self.rng)
        _, d_center, _ = random_walk_sample_with_jacobians(
            geometry, PosteriorParams(center, time), RandomWalkConfig(steps=1), self.rng
        )
        projector = geometry.project_jacobian(center)
        error = float(np.max(np.abs(d_center - projector)))
        assert error <= tol, f"one-step dg/dz differs from the tangent projector by {error:.2e}"
        return error

    def measure_circle_total_variation_and_verify(self, time, steps, samples, limit, bins=100):
        """
        Binned total variation between circle walk samples and the exact wrapped Gaussian.

        Returns:
            float: The total variation distance.
        """
        tv = circle_total_variation(time, RandomWalkConfig(steps=steps), samples, bins, self.kernel_config, self.rng)
        assert tv < limit, f"circle t={time} N={steps}: total variation {tv:.4f} >= {limit}"
        return tv

    def measure_total_variation_convergence_and_verify(self, time, steps_sequence, samples, bins):
        """
        Verifies that the binned total variation to the exact circle kernel shrinks
        as the walk step count grows; samples and bins must put the binning noise
        floor well below the gap between consecutive step counts.

        Returns:
            list[float]: Total variation per step count.
        """
        tvs = [
            circle_total_variation(time, RandomWalkConfig(steps=steps), samples, bins, self.kernel_config, self.rng)
            for steps in steps_sequence
        ]
        for (fewer, coarse), (more, fine) in zip(zip(steps_sequence, tvs), zip(steps_sequence[1:], tvs[1:])):
            assert fine < coarse, f"total variation grew from {coarse:.2e} (N={fewer}) to {fine:.2e} (N={more})"
        return tvs

    def measure_cosine_moment_convergence_and_verify(self, time, steps_sequence, samples):
        """
        Verifies that |E[cos angle] - exp(-t/2)| shrinks as the walk step count grows.

        Returns:
            float: The error at the largest step count.
        """
        errors = [
            circle_cosine_moment_error(time, RandomWalkConfig(steps=steps), samples, self.rng)
            for steps in steps_sequence
        ]
        for (fewer, coarse), (more, fine) in zip(zip(steps_sequence, errors), zip(steps_sequence[1:], errors[1:])):
            assert fine < coarse, f"cosine moment error grew from {coarse:.2e} (N={fewer}) to {fine:.2e} (N={more})"
        return errors[-1]

    def evaluate_kernel_and_verify(self, geometry, time, z, y, expected, tol, cfg=None):
        density = heat_kernel_density(geometry, time, np.asarray(z, float), np.asarray(y, float), cfg or self.kernel_config)
        assert abs(density - expected) <= tol, (
            f"{geometry.descriptor.name}: q({time}; {z}, {y}) expected {expected}, got {density}"
        )
        return density

    def evaluate_kernel_and_expect_underflow(self, geometry, time, z, y):
        result = evaluate_heat_kernel(geometry, time, np.asarray(z, float), np.asarray(y, float), self.kernel_config)
        assert result.underflow, f"{geometry.descriptor.name}: expected underflow flag, log density {result.log_density}"
        assert result.density == 0.0, f"underflowed density reported as {result.density}"
        return result

    def compare_sphere_parametrix_with_spectral_and_verify(self, geometry, time, max_distance, rel_tol, points=50):
        """
        Compares the small-time parametrix with the spectral series along a meridian.

        Returns:
            float: The largest relative deviation.
        """
        pole = np.zeros(geometry.ambient_dim)
        pole[-1] = 1.0
        distances = np.linspace(0.0, max_distance, points)
        meridian = np.zeros((points, geometry.ambient_dim))
        meridian[:, 0] = np.sin(distances)
        meridian[:, -1] = np.cos(distances)
        parametrix = heat_kernel_log_density(geometry, time, pole, meridian, self.kernel_config, method="parametrix")
        spectral = heat_kernel_log_density(geometry, time, pole, meridian, self.kernel_config, method="spectral")
        deviation = float(np.max(np.abs(np.expm1(parametrix - spectral))))
        assert deviation <= rel_tol, f"{geometry.descriptor.name} t={time}: parametrix vs spectral {deviation:.2e} > {rel_tol}"
        return deviation

    def measure_kernel_normalization_and_verify(self, geometry, time, tol=1e-3):
        total = kernel_normalization(geometry, time, self.kernel_config)
        assert abs(total - 1.0) <= tol, f"{geometry.descriptor.name} t={time}: kernel integrates to {total:.6f}"
        return abs(total - 1.0)

    def verify_kernel_symmetry(self, geometry, time, count=200, tol=1e-9):
        z = geometry.uniform_sample(self.rng, count)
        y = geometry.uniform_sample(self.rng, count)
        forward = np.exp(heat_kernel_log_density(geometry, time, z, y, self.kernel_config))
        backward = np.exp(heat_kernel_log_density(geometry, time, y, z, self.kernel_config))
        worst = float(np.max(np.abs(forward - backward)))
        assert worst <= tol, f"{geometry.descriptor.name}: kernel asymmetry {worst:.2e} > {tol}"
        return worst

    def measure_chapman_kolmogorov_and_verify(self, first_time, second_time, tol=1e-6):
        residual = chapman_kolmogorov_residual(first_time, second_time, self.kernel_config)
        assert residual <= tol, f"Chapman-Kolmogorov residual {residual:.2e} at ({first_time}, {second_time}) > {tol}"
        return residual

    def measure_heat_equation_residual_and_verify(self, time, tol=1e-3):
        residual = heat_equation_residual(time, self.kernel_config)
        assert residual <= tol, f"heat equation residual {residual:.2e} at t={time} > {tol}"
        return residual

    def compute_kl_asymptotic_and_verify(self, geometry, time, expected, tol):
        kl = kl_asymptotic(geometry, PosteriorParams(base_point(geometry), time))
        assert abs(kl - expected) <= tol, f"{geometry.descriptor.name} t={time}: asymptotic KL {kl:.6f}, expected {expected}"
        return kl

    def compare_kl_numeric_with_asymptotic_and_verify(self, geometry, time, abs_tol=None, rel_tol=None):
        """
        Compares quadrature KL with the asymptotic formula at one time.

        Returns:
            float: The absolute error, or the relative error when rel_tol is given.
        """
        params = PosteriorParams(base_point(geometry), time)
        numeric = kl_numeric(geometry, params, self.kernel_config)
        asymptotic = kl_asymptotic(geometry, params)
        error = abs(numeric - asymptotic)
        if rel_tol is not None:
            error = error / abs(numeric)
            assert error < rel_tol, (
                f"{geometry.descriptor.name} t={time}: KL numeric {numeric:.8f} vs asymptotic {asymptotic:.8f}, "
                f"rel. error {error:.2e} >= {rel_tol}"
            )
        else:
            assert error < abs_tol, (
                f"{geometry.descriptor.name} t={time}: KL numeric {numeric:.10f} vs asymptotic {asymptotic:.10f}, "
                f"error {error:.2e} >= {abs_tol}"
            )
        return error

    def compute_kl_numeric_and_verify(self, geometry, time, expected, tol):
        kl = kl_numeric(geometry, PosteriorParams(base_point(geometry), time), self.kernel_config)
        assert abs(kl - expected) <= tol, f"{geometry.descriptor.name} t={time}: numeric KL {kl:.3e}, expected {expected}"
        return kl

    def measure_kl_error_ratio_and_verify(self, geometry, time, min_ratio=3.0):
        """
        Verifies that halving t shrinks |numeric - asymptotic| KL by at least min_ratio.

        Returns:
            float: The measured ratio.
        """
        errors = []
        for t in (time, time / 2.0):
            params = PosteriorParams(base_point(geometry), t)
            errors.append(abs(kl_numeric(geometry, params, self.kernel_config) - kl_asymptotic(geometry, params)))
        ratio = errors[0] / max(errors[1], 1e-300)
        assert ratio >= min_ratio, f"{geometry.descriptor.name}: KL error ratio {ratio:.2f} < {min_ratio} (errors {errors})"
        return ratio

    def measure_kl_numeric_grid_convergence_and_verify(self, geometry, time, tol=1e-6):
        params = PosteriorParams(base_point(geometry), time)
        coarse = kl_numeric(geometry, params, self.kernel_config)
        fine = kl_numeric(geometry, params, self.kernel_config.doubled())
        change = abs(fine - coarse)
        assert change <= tol, f"{geometry.descriptor.name} t={time}: numeric KL moved {change:.2e} under grid doubling"
        return change

    def verify_kl_asymptotic_decreasing(self, geometry, times):
        values = [kl_asymptotic(geometry, PosteriorParams(base_point(geometry), t)) for t in times]
        assert all(b < a for a, b in zip(values, values[1:])), f"asymptotic KL is not decreasing over {times}: {values}"

    def compute_kl_gaussian_and_verify(self, mean, var, expected, tol=1e-12):
        kl = kl_gaussian(mean, var)
        assert abs(kl - expected) <= tol, f"gaussian KL({mean}, {var}) expected {expected}, got {kl}"
        return kl

    def compare_kl_gaussian_with_monte_carlo_and_verify(self, mean, var, samples=1_000_000):
        """
        Checks the closed-form Gaussian KL against a Monte-Carlo estimate of E[log q - log p] within 3 standard errors.
        """
        mean = np.asarray(mean, dtype=float)
        var = np.asarray(var, dtype=float)
        draws = mean + np.sqrt(var) * self.rng.standard_normal((samples, mean.size))
        log_q = -0.5 * np.sum((draws - mean) ** 2 / var + np.log(2.0 * np.pi * var), axis=-1)
        log_p = -0.5 * np.sum(draws ** 2 + math.log(2.0 * math.pi), axis=-1)
        ratios = log_q - log_p
        estimate = float(ratios.mean())
        stderr = float(ratios.std(ddof=1) / math.sqrt(samples))
        exact = kl_gaussian(mean, var)
        assert abs(estimate - exact) <= 3.0 * stderr, f"gaussian KL {exact:.5f} vs MC {estimate:.5f} +- {stderr:.5f}"
        return abs(estimate - exact)

    def compute_prior_log_density_and_verify(self, geometry, y, expected, tol=1e-12):
        value = prior_log_density(geometry, np.asarray(y, dtype=float))
        assert abs(value - expected) <= tol, f"{geometry.descriptor.name}: prior log density {value}, expected {expected}"
        return value

    def run_kernel_check_suite(self, manifold_name, time, steps, samples, outcomes=None):
        """
        Composite action: the diffusion validation suite for one manifold.
        Every atomic check runs; failures are recorded, not raised.

        Args:
            manifold_name (str): 'circle', 'sphere2' or 'flat-torus'.
            time (float): Diffusion time for the sampler and KL checks.
            steps (int): Walk steps for the sampler checks.
            samples (int): Sample count for the total variation check.
            outcomes (list, optional): Rows to append to.

        Returns:
            list[CheckOutcome]: The report rows.
        """
        outcomes = [] if outcomes is None else outcomes
        geometry = self.build_geometry(manifold_name)
        name = geometry.descriptor.name
        for t in (0.01, 0.1, 1.0):
            self.run_check(outcomes, f"normalization t={t}", name, 1e-3, self.measure_kernel_normalization_and_verify, geometry, t)
        self.run_check(outcomes, "symmetry", name, 1e-9, self.verify_kernel_symmetry, geometry, time)
        if name == "circle":
            self.run_check(
                outcomes, f"total variation t={time} N={steps}", name, 0.02,
                self.measure_circle_total_variation_and_verify, time, steps, samples, 0.02,
            )
            self.run_check(
                outcomes, "cosine moment error N=16,32,64 t=1.0", name, math.inf,
                self.measure_cosine_moment_convergence_and_verify, 1.0, (16, 32, 64), samples,
            )
            for first, second in ((0.05, 0.05), (0.1, 0.2)):
                self.run_check(
                    outcomes, f"chapman-kolmogorov ({first}, {second})", name, 1e-6,
                    self.measure_chapman_kolmogorov_and_verify, first, second,
                )
            self.run_check(outcomes, "heat equation t=0.1", name, 1e-3, self.measure_heat_equation_residual_and_verify, 0.1)
            self.run_check(
                outcomes, f"kl numeric vs asymptotic t={min(time, 0.01)}", name, 1e-6,
                self.compare_kl_numeric_with_asymptotic_and_verify, geometry, min(time, 0.01), 1e-6,
            )
        elif name == "sphere2":
            self.run_check(
                outcomes, f"kl numeric vs asymptotic (relative) t={time}", name, 0.01,
                self.compare_kl_numeric_with_asymptotic_and_verify, geometry, time, None, 0.01,
            )
            self.run_check(outcomes, f"kl error ratio t={time}", name, 3.0, self.measure_kl_error_ratio_and_verify, geometry, time)
            self.run_check(
                outcomes, "parametrix vs spectral t=0.01", name, 1e-3,
                self.compare_sphere_parametrix_with_spectral_and_verify, geometry, 0.01, 0.5, 1e-3,
            )
        elif name == "flat-torus":
            self.run_check(
                outcomes, f"kl numeric vs asymptotic t={time}", name, 1e-6,
                self.compare_kl_numeric_with_asymptotic_and_verify, geometry, time, 1e-6,
            )
        self.run_check(
            outcomes, f"kl grid convergence t={time}", name, 1e-6,
            self.measure_kl_numeric_grid_convergence_and_verify, geometry, time,
        )
        return outcomes

    def run_kernel_check_suite_and_verify(self, manifold_name, time, steps, samples):
        self.kernel_config = kernel_check_config(time)
        outcomes = self.run_kernel_check_suite(manifold_name, time, steps, samples)
        failed = [f"{o.check}: {o.detail}" for o in outcomes if not o.passed]
        assert not failed, f"{manifold_name} kernel checks failed: {failed}"
        return outcomes


def kernel_check_config(time):
    """
    Kernel config covering the times the kernel-check suite evaluates.
    """
    return KernelSeriesConfig.covering(min(time / 2.0, 1e-3), max(time, 1.0))
