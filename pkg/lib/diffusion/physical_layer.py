import dataclasses
import logging
import math
from dataclasses import dataclass

import numpy as np
from scipy.interpolate import CubicSpline
from scipy.special import gammaln, logsumexp

from lib.diffusion.diffusion_constants import DiffusionDefaults
from lib.exceptions import DomainError, ResampleExceeded, UnsupportedManifold
from lib.manifolds.physical_layer import ManifoldDescriptor, ManifoldGeometry, ManifoldKind, wrap_angle

logger = logging.getLogger(__name__)

_LOG_TINY = math.log(np.finfo(np.float64).tiny)


@dataclass(frozen=True)
class PosteriorParams:
    """
    Parameters of the posterior Brownian transition kernel: center z and time t.
    """
    center: np.ndarray
    time: float

    def __post_init__(self):
        object.__setattr__(self, "center", np.asarray(self.center, dtype=np.float64))
        if not (math.isfinite(self.time) and self.time > 0):
            raise DomainError(f"diffusion time must be positive and finite, got {self.time}")

    def validate(self, t_min, t_max):
        if not t_min <= self.time <= t_max:
            raise DomainError(f"diffusion time {self.time} outside [{t_min}, {t_max}]")
        return self


@dataclass(frozen=True)
class RandomWalkConfig:
    steps: int = DiffusionDefaults.WALK_STEPS
    seed: int = 0
    max_resamples: int = DiffusionDefaults.MAX_RESAMPLES

    def __post_init__(self):
        if int(self.steps) < 1:
            raise DomainError(f"random walk needs at least one step, got {self.steps}")


def wrap_tail_bound(wrap_terms, time):
    """
    Upper bound on the omitted wrapped-Gaussian images for |k| > wrap_terms.
    """
    k = np.arange(wrap_terms + 1, wrap_terms + 200)
    exponents = -((np.pi * (2 * k - 1)) ** 2) / (2.0 * time)
    return float(2.0 * np.exp(logsumexp(exponents)) / math.sqrt(2.0 * math.pi * time))


def required_wrap_terms(max_time, tol=DiffusionDefaults.TAIL_TOLERANCE):
    terms = 1
    while wrap_tail_bound(terms, max_time) >= tol:
        terms += 1
    return terms


def _spectral_term_bounds(dim, time, count):
    # |e^{-l(l+d-1)t/2} (2l+d-1)/(d-1) C_l(x)| / Vol for l = 0..count-1, with |C_l| <= C_l(1)
    ell = np.arange(count, dtype=np.float64)
    log_gegenbauer_at_one = gammaln(ell + dim - 1) - gammaln(dim - 1) - gammaln(ell + 1)
    log_volume = math.log(2.0) + 0.5 * (dim + 1) * math.log(math.pi) - gammaln(0.5 * (dim + 1))
    log_terms = (
        -0.5 * ell * (ell + dim - 1) * time
        + np.log((2 * ell + dim - 1) / (dim - 1))
        + log_gegenbauer_at_one
        - log_volume
    )
    return np.exp(log_terms)


def spectral_tail_bound(dim, spectral_terms, time):
    count = spectral_terms + int(math.sqrt(400.0 / time)) + 200
    return float(_spectral_term_bounds(dim, time, count)[spectral_terms + 1:].sum())


def required_spectral_terms(dim, min_time, tol=DiffusionDefaults.TAIL_TOLERANCE):
    count = int(math.sqrt(400.0 / min_time)) + 200
    bounds = _spectral_term_bounds(dim, min_time, count)
    tails = np.cumsum(bounds[::-1])[::-1]
    # tails[l] is the sum over terms >= l; we need the sum over terms > L below tol
    below = np.nonzero(tails < tol)[0]
    return int(max(below[0] - 1, 1))


@dataclass(frozen=True)
class KernelSeriesConfig:
    """
    Truncation and quadrature controls for heat-kernel evaluation.

    wrap_terms and spectral_terms are derived from [min_time, max_time] when
    left as None; explicit values are rejected if their truncation tail is not
    below DiffusionDefaults.TAIL_TOLERANCE.
    """
    min_time: float = DiffusionDefaults.T_MIN
    max_time: float = DiffusionDefaults.VALIDATION_MAX_TIME
    wrap_terms: int = None
    spectral_terms: int = None
    circle_grid: int = DiffusionDefaults.CIRCLE_GRID
    sphere_panels: int = DiffusionDefaults.SPHERE_PANELS
    gauss_nodes: int = DiffusionDefaults.GAUSS_NODES
    sphere_method: str = "auto"
    parametrix_max_time: float = DiffusionDefaults.PARAMETRIX_MAX_TIME

    def __post_init__(self):
        if not 0 < self.min_time <= self.max_time:
            raise DomainError(f"kernel config needs 0 < min_time <= max_time, got {self.min_time}, {self.max_time}")
        if self.sphere_method not in DiffusionDefaults.SPHERE_METHODS:
            raise DomainError(f"unknown sphere_method '{self.sphere_method}'")
        if self.wrap_terms is None:
            object.__setattr__(self, "wrap_terms", required_wrap_terms(self.max_time))
        if self.spectral_terms is None:
            object.__setattr__(self, "spectral_terms", required_spectral_terms(3, self.min_time))
        wrap_tail = wrap_tail_bound(self.wrap_terms, self.max_time)
        if wrap_tail >= DiffusionDefaults.TAIL_TOLERANCE:
            raise DomainError(f"wrap_terms={self.wrap_terms} leaves tail {wrap_tail:.2e} at t={self.max_time}")
        spectral_tail = spectral_tail_bound(3, self.spectral_terms, self.min_time)
        if spectral_tail >= DiffusionDefaults.TAIL_TOLERANCE:
            raise DomainError(
                f"spectral_terms={self.spectral_terms} leaves tail {spectral_tail:.2e} at t={self.min_time}"
            )

    @classmethod
    def covering(cls, min_time, max_time, **overrides):
        return cls(min_time=min_time, max_time=max_time, **overrides)

    def doubled(self):
        """
        Same config with every quadrature resolution doubled.
        """
        return dataclasses.replace(
            self,
            circle_grid=2 * self.circle_grid,
            sphere_panels=2 * self.sphere_panels,
        )


@dataclass
class WalkResult:
    points: np.ndarray
    d_center: np.ndarray = None
    d_time: np.ndarray = None
    resamples: int = 0


@dataclass
class KernelEvaluation:
    density: np.ndarray
    log_density: np.ndarray
    underflow: bool


def _require_closed(geometry, operation):
    if not geometry.descriptor.is_closed:
        raise DomainError(f"{operation} needs a closed manifold, got {geometry.descriptor.name}")


def random_walk_batch(geometry, centers, times, cfg, rng, with_jacobians=False, noise=None):
    """
    Runs the projected random walk g = P(...P(P(z + s e_1) + s e_2)... + s e_N)
    with s = sqrt(t/N) for a batch of centers, optionally carrying the pathwise
    jacobians dg/dz and dg/dt for fixed noise.

    Args:
        geometry (ManifoldGeometry): A closed manifold.
        centers (np.ndarray): Start points, shape (B, n).
        times (np.ndarray): Diffusion times, shape (B,) or scalar.
        cfg (RandomWalkConfig): Step count and resampling limit.
        rng (np.random.Generator): Source of the step noise.
        with_jacobians (bool, optional): Also return dg/dz (B, n, n) and dg/dt (B, n).
        noise (np.ndarray, optional): Step noise of shape (N, B, n) to use instead of drawing it.

    Returns:
        WalkResult: End points, jacobians when requested, and the resample count.

    Raises:
        DomainError: For Euclidean space, bad shapes or non-positive times.
        ResampleExceeded: If the singular set is hit more than cfg.max_resamples times.
    """
    _require_closed(geometry, "random walk")
    centers = np.atleast_2d(np.asarray(centers, dtype=np.float64))
    batch, n = centers.shape
    times = np.broadcast_to(np.asarray(times, dtype=np.float64).reshape(-1), (batch,))
    if np.any(~np.isfinite(times)) or np.any(times <= 0):
        raise DomainError("random walk times must be positive and finite")
    steps = int(cfg.steps)
    if noise is None:
        noise = rng.standard_normal((steps, batch, n))
    else:
        noise = np.array(noise, dtype=np.float64, copy=True).reshape(steps, batch, n)
    scale = np.sqrt(times / steps)[:, None]
    d_scale = (0.5 / np.sqrt(times * steps))[:, None]

    position = centers.copy()
    d_center = np.broadcast_to(np.eye(n), (batch, n, n)).copy() if with_jacobians else None
    d_time = np.zeros((batch, n)) if with_jacobians else None
    resamples = 0
    for i in range(steps):
        step = noise[i]
        candidate = position + scale * step
        bad = geometry.singular_mask(candidate)
        while np.any(bad):
            resamples += int(bad.sum())
            if resamples > cfg.max_resamples:
                raise ResampleExceeded(f"random walk hit the singular set {resamples} times")
            logger.debug("step %d: redrawing noise for %d singular samples", i, int(bad.sum()))
            step[bad] = rng.standard_normal((int(bad.sum()), n))
            candidate = position + scale * step
            bad = geometry.singular_mask(candidate)
        if with_jacobians:
            jac = geometry.project_jacobian(candidate)
            d_center = jac @ d_center
            d_time = np.einsum("bij,bj->bi", jac, d_time + d_scale * step)
        position = geometry.project(candidate)
    return WalkResult(points=position, d_center=d_center, d_time=d_time, resamples=resamples)


def random_walk_sample(geometry, params, cfg, rng, noise=None):
    """
    Draws one approximate sample of the Brownian transition kernel Q^{t,z}.

    Args:
        geometry (ManifoldGeometry): A closed manifold.
        params (PosteriorParams): Center and time.
        cfg (RandomWalkConfig): Walk configuration.
        rng (np.random.Generator): Noise source.
        noise (np.ndarray, optional): Fixed noise of shape (N, n).

    Returns:
        np.ndarray: The end point, shape (n,).
    """
    fixed = None if noise is None else np.asarray(noise, dtype=np.float64)[:, None, :]
    return random_walk_batch(geometry, params.center[None, :], params.time, cfg, rng, noise=fixed).points[0]


def random_walk_sample_with_jacobians(geometry, params, cfg, rng, noise=None):
    """
    Like random_walk_sample, also returning dg/dz (n x n) and dg/dt (n,).
    """
    fixed = None if noise is None else np.asarray(noise, dtype=np.float64)[:, None, :]
    result = random_walk_batch(
        geometry, params.center[None, :], params.time, cfg, rng, with_jacobians=True, noise=fixed
    )
    return result.points[0], result.d_center[0], result.d_time[0]


def _circle_log_kernel(delta, time, wrap_terms):
    k = np.arange(-wrap_terms, wrap_terms + 1)
    delta = np.asarray(delta, dtype=np.float64)
    time = np.broadcast_to(np.asarray(time, dtype=np.float64), delta.shape)
    exponents = -((delta[..., None] + 2.0 * np.pi * k) ** 2) / (2.0 * time[..., None])
    return logsumexp(exponents, axis=-1) - 0.5 * np.log(2.0 * np.pi * time)


def _sphere_parametrix_log(dim, time, r):
    r = np.minimum(r, np.pi - DiffusionDefaults.ANTIPODE_MARGIN)
    curvature = dim * (dim - 1)
    small = r < DiffusionDefaults.SMALL_ANGLE
    r_safe = np.where(small, 1.0, r)
    log_ratio = np.where(small, r ** 2 / 6.0 + r ** 4 / 180.0, np.log(r_safe / np.sin(r_safe)))
    bracket = np.where(
        small,
        2.0 * dim / 3.0 - (dim - 3) * r ** 2 / 45.0,
        (3 - dim + (dim - 1) * r_safe ** 2 + (dim - 3) * r_safe / np.tan(r_safe)) / r_safe ** 2,
    )
    correction = 1.0 + curvature * time / (8.0 * dim) * bracket
    return (
        -0.5 * dim * np.log(2.0 * np.pi * time)
        - r ** 2 / (2.0 * time)
        + 0.5 * (dim - 1) * log_ratio
        + np.log(np.maximum(correction, np.finfo(np.float64).tiny))
    )


def _sphere_spectral_density(dim, time, r, spectral_terms):
    # addition-theorem series in Gegenbauer polynomials C_l^{(d-1)/2}(cos r)
    x = np.cos(r)
    time = np.broadcast_to(np.asarray(time, dtype=np.float64), x.shape)
    alpha = 0.5 * (dim - 1)
    c_prev = np.ones_like(x)
    c_curr = 2.0 * alpha * x
    total = c_prev + np.exp(-0.5 * dim * time) * (dim + 1) / (dim - 1) * c_curr
    for ell in range(2, spectral_terms + 1):
        c_next = (2.0 * (ell - 1 + alpha) * x * c_curr - (ell + 2 * alpha - 2) * c_prev) / ell
        weight = np.exp(-0.5 * ell * (ell + dim - 1) * time) * (2 * ell + dim - 1) / (dim - 1)
        total = total + weight * c_next
        c_prev, c_curr = c_curr, c_next
    log_volume = math.log(2.0) + 0.5 * (dim + 1) * math.log(math.pi) - gammaln(0.5 * (dim + 1))
    return total / math.exp(log_volume)


def _sphere_log_kernel(dim, time, r, cfg, method):
    if dim == 1:
        return _circle_log_kernel(r, time, cfg.wrap_terms)
    time = np.broadcast_to(np.asarray(time, dtype=np.float64), np.shape(r))
    if method == "auto":
        use_spectral = time > cfg.parametrix_max_time
    else:
        use_spectral = np.full(np.shape(r), method == "spectral")
    log_q = np.empty(np.shape(r))
    if np.any(~use_spectral):
        log_q = np.where(use_spectral, 0.0, _sphere_parametrix_log(dim, time, r))
    if np.any(use_spectral):
        density = _sphere_spectral_density(dim, time, r, cfg.spectral_terms)
        spectral_log = np.log(np.maximum(density, np.finfo(np.float64).tiny))
        log_q = np.where(use_spectral, spectral_log, log_q)
    return log_q


def _require_time(time, cfg):
    time = np.asarray(time, dtype=np.float64)
    low = cfg.min_time * (1.0 - 1e-12)
    high = cfg.max_time * (1.0 + 1e-12)
    if np.any(~np.isfinite(time)) or np.any(time < low) or np.any(time > high):
        raise DomainError(f"diffusion time outside [{cfg.min_time}, {cfg.max_time}]")
    return time


def heat_kernel_log_density(geometry, time, center, point, cfg, method=None):
    """
    Log-density of the Brownian transition kernel q(t; z, y) with respect to
    the Riemannian volume measure.

    Args:
        geometry (ManifoldGeometry): The manifold.
        time (float | np.ndarray): Diffusion time(s), broadcastable to the batch shape.
        center (np.ndarray): z, shape (..., n).
        point (np.ndarray): y, shape (..., n), broadcastable against center.
        cfg (KernelSeriesConfig): Series controls.
        method (str, optional): Override cfg.sphere_method for spheres of dimension >= 2.

    Returns:
        np.ndarray: log q, shape of the broadcast batch.

    Raises:
        DomainError: Off-manifold points or time outside [cfg.min_time, cfg.max_time].
    """
    time = _require_time(time, cfg)
    kind = geometry.kind
    method = method or cfg.sphere_method
    dim = geometry.dim
    if kind is ManifoldKind.SPHERE:
        r = geometry.geodesic_distance(center, point)
        return _sphere_log_kernel(dim, time, np.asarray(r), cfg, method)
    if kind is ManifoldKind.PROJECTIVE:
        sphere = ManifoldGeometry(ManifoldDescriptor.sphere(dim))
        arc = np.asarray(sphere.geodesic_distance(center, point))
        return np.logaddexp(
            _sphere_log_kernel(dim, time, arc, cfg, method),
            _sphere_log_kernel(dim, time, np.pi - arc, cfg, method),
        )
    if kind is ManifoldKind.FLAT_TORUS:
        geometry._require_on_manifold(center, point)
        delta = wrap_angle(geometry.to_angles(point) - geometry.to_angles(center))
        time = time[..., None] if np.ndim(time) else time
        return np.sum(_circle_log_kernel(delta, time, cfg.wrap_terms), axis=-1)
    if kind is ManifoldKind.EMBEDDED_TORUS:
        r = np.asarray(geometry.geodesic_distance(center, point))
        return -np.log(2.0 * np.pi * time) - r ** 2 / (2.0 * time)
    r = np.asarray(geometry.geodesic_distance(center, point))
    return -0.5 * dim * np.log(2.0 * np.pi * time) - r ** 2 / (2.0 * time)


def evaluate_heat_kernel(geometry, time, center, point, cfg, method=None):
    """
    Evaluates the kernel in both density and log form and flags underflow.

    Returns:
        KernelEvaluation: density (0 where exp underflows), log-density, underflow flag.
    """
    log_density = heat_kernel_log_density(geometry, time, center, point, cfg, method)
    density = np.exp(log_density)
    underflow = bool(np.any((density == 0.0) | (log_density <= _LOG_TINY)))
    if underflow:
        logger.warning("%s: heat kernel density underflows at some points", geometry.descriptor.name)
    if np.ndim(density) == 0:
        density, log_density = float(density), float(log_density)
    return KernelEvaluation(density=density, log_density=log_density, underflow=underflow)


def heat_kernel_density(geometry, time, center, point, cfg, method=None):
    """
    Density q(t; z, y) of the Brownian transition kernel.

    Args:
        geometry (ManifoldGeometry): The manifold.
        time (float): Diffusion time.
        center (np.ndarray): z.
        point (np.ndarray): y.
        cfg (KernelSeriesConfig): Series controls.
        method (str, optional): Sphere method override.

    Returns:
        float | np.ndarray: The density; 0 where it underflows.
    """
    return evaluate_heat_kernel(geometry, time, center, point, cfg, method).density


def prior_log_density(geometry, point):
    """
    Log-density of the prior: uniform for closed manifolds, standard Gaussian for Euclidean space.
    """
    point = np.asarray(point, dtype=np.float64)
    if not np.all(geometry.contains(point, 1e-6)):
        raise DomainError(f"point is not on {geometry.descriptor.name}")
    if geometry.descriptor.is_closed:
        value = np.full(point.shape[:-1], -math.log(geometry.volume()))
    else:
        value = -0.5 * geometry.dim * math.log(2.0 * math.pi) - 0.5 * np.sum(point ** 2, axis=-1)
    return float(value) if np.ndim(value) == 0 else value


def kl_asymptotic_terms(geometry, centers, times):
    """
    Asymptotic KL -d/2 log(2 pi t) - d/2 + log Vol + Sc t / 4 with its derivatives.

    Args:
        geometry (ManifoldGeometry): A closed manifold.
        centers (np.ndarray): Shape (..., n).
        times (np.ndarray): Shape (...,).

    Returns:
        tuple: (kl, d kl / d t, d kl / d z) with shapes (...,), (...,), (..., n).
    """
    _require_closed(geometry, "asymptotic KL")
    times = np.asarray(times, dtype=np.float64)
    d = geometry.dim
    curvature = np.asarray(geometry.scalar_curvature(centers))
    kl = -0.5 * d * np.log(2.0 * np.pi * times) - 0.5 * d + math.log(geometry.volume()) + 0.25 * curvature * times
    d_time = -0.5 * d / times + 0.25 * curvature
    d_center = 0.25 * np.asarray(times)[..., None] * geometry.scalar_curvature_gradient(centers)
    return kl, d_time, d_center


def kl_asymptotic(geometry, params):
    """
    Asymptotic KL divergence between Q^{t,z} and the uniform prior.

    Raises:
        DomainError: For Euclidean space (use kl_gaussian).
    """
    kl, _, _ = kl_asymptotic_terms(geometry, params.center, params.time)
    return float(kl)


def kl_gaussian(mean, var):
    """
    Closed-form KL(N(mean, diag(var)) || N(0, I)), summed over the last axis.

    Raises:
        DomainError: On non-positive variance.
    """
    mean = np.asarray(mean, dtype=np.float64)
    var = np.asarray(var, dtype=np.float64)
    if np.any(var <= 0):
        raise DomainError("gaussian KL needs positive variances")
    value = 0.5 * np.sum(var + mean ** 2 - 1.0 - np.log(var), axis=-1)
    return float(value) if np.ndim(value) == 0 else value


def _entropy_terms(log_q, weights):
    q = np.exp(log_q)
    plogp = np.where(q > 0.0, q * log_q, 0.0)
    return float(np.sum(q * weights)), float(np.sum(plogp * weights))


def _circle_grid(cfg, time):
    count = max(cfg.circle_grid, int(math.ceil(8.0 * math.pi / math.sqrt(time))))
    count += count % 2
    return -np.pi + 2.0 * np.pi * np.arange(count) / count, 2.0 * np.pi / count


def _zonal_nodes(cfg, time):
    # Gauss-Legendre panels over the polar angle measured from the kernel center
    panels = max(cfg.sphere_panels, int(math.ceil(2.0 * math.pi / math.sqrt(time))))
    nodes, weights = np.polynomial.legendre.leggauss(cfg.gauss_nodes)
    edges = np.linspace(0.0, np.pi, panels + 1)
    half = 0.5 * np.diff(edges)[:, None]
    mid = 0.5 * (edges[1:] + edges[:-1])[:, None]
    polar = (mid + half * nodes).ravel()
    polar_weights = (half * weights).ravel() * 2.0 * np.pi * np.sin(polar)
    return polar, polar_weights


def _require_numeric_support(geometry):
    kind, dim = geometry.kind, geometry.dim
    supported = (kind is ManifoldKind.SPHERE and dim in (1, 2)) or kind is ManifoldKind.FLAT_TORUS
    if not supported:
        raise UnsupportedManifold(f"numeric KL is available on circle, sphere2 and flat-torus, not {geometry.descriptor.name}")


def kl_numeric(geometry, params, cfg):
    """
    KL divergence by deterministic quadrature of q log q plus log Vol.

    Circle and flat torus use the trapezoid rule on a uniform angle grid (the
    flat-torus tensor grid is summed in factorized form); the 2-sphere uses
    Gauss-Legendre panels in the polar angle around the center, where the
    longitude integral is exact by rotational symmetry.

    Args:
        geometry (ManifoldGeometry): circle, sphere2 or flat-torus.
        params (PosteriorParams): The kernel parameters.
        cfg (KernelSeriesConfig): Resolution controls.

    Returns:
        float: The KL divergence.

    Raises:
        UnsupportedManifold: For any other manifold.
    """
    _require_numeric_support(geometry)
    time = float(_require_time(params.time, cfg))
    if geometry.kind is ManifoldKind.SPHERE and geometry.dim == 2:
        polar, weights = _zonal_nodes(cfg, time)
        pole = np.array([0.0, 0.0, 1.0])
        points = np.stack([np.sin(polar), np.zeros_like(polar), np.cos(polar)], axis=-1)
        log_q = heat_kernel_log_density(geometry, time, pole, points, cfg, method="spectral")
        _, entropy = _entropy_terms(log_q, weights)
        return entropy + math.log(geometry.volume())
    angles, step = _circle_grid(cfg, time)
    log_q = _circle_log_kernel(angles, time, cfg.wrap_terms)
    mass, entropy = _entropy_terms(log_q, np.full(angles.shape, step))
    if geometry.kind is ManifoldKind.FLAT_TORUS:
        return 2.0 * entropy * mass + math.log(geometry.volume())
    return entropy + math.log(geometry.volume())


def base_point(geometry):
    """
    A fixed reference point on the manifold (first ambient axis direction).
    """
    if geometry.kind is ManifoldKind.EMBEDDED_TORUS:
        return np.array([geometry.R + geometry.r, 0.0, 0.0])
    if geometry.kind is ManifoldKind.FLAT_TORUS:
        return np.array([1.0, 0.0, 1.0, 0.0])
    point = np.zeros(geometry.ambient_dim)
    if geometry.descriptor.is_closed:
        point[0] = 1.0
    return point


class NumericKlTable:
    """
    Numeric KL tabulated on a log-spaced time grid and interpolated by a cubic
    spline in log t, for use inside training loops.
    """

    def __init__(self, geometry, t_min, t_max, cfg, points=DiffusionDefaults.KL_TABLE_POINTS):
        _require_numeric_support(geometry)
        if not t_min < t_max:
            raise DomainError(f"numeric KL table needs t_min < t_max, got {t_min}, {t_max}")
        self.times = np.geomspace(t_min, t_max, points)
        center = base_point(geometry)
        self.values = np.array([kl_numeric(geometry, PosteriorParams(center, float(t)), cfg) for t in self.times])
        self._spline = CubicSpline(np.log(self.times), self.values)
        logger.debug("%s: numeric KL table over [%g, %g] built", geometry.descriptor.name, t_min, t_max)

    def value(self, times):
        return self._spline(np.log(np.asarray(times, dtype=np.float64)))

    def derivative(self, times):
        times = np.asarray(times, dtype=np.float64)
        return self._spline(np.log(times), 1) / times


def kernel_normalization(geometry, time, cfg, method=None):
    """
    Integral of the kernel over the manifold by quadrature (circle, sphere2, flat torus).

    Returns:
        float: The total mass.
    """
    _require_numeric_support(geometry)
    if geometry.kind is ManifoldKind.SPHERE and geometry.dim == 2:
        polar, weights = _zonal_nodes(cfg, time)
        pole = np.array([0.0, 0.0, 1.0])
        points = np.stack([np.sin(polar), np.zeros_like(polar), np.cos(polar)], axis=-1)
        log_q = heat_kernel_log_density(geometry, time, pole, points, cfg, method)
        return float(np.sum(np.exp(log_q) * weights))
    angles, step = _circle_grid(cfg, time)
    if geometry.kind is ManifoldKind.FLAT_TORUS:
        count = max(256, int(math.ceil(8.0 * math.pi / math.sqrt(time))))
        grid = -np.pi + 2.0 * np.pi * np.arange(count) / count
        first, second = np.meshgrid(grid, grid, indexing="ij")
        points = geometry.from_angles(np.stack([first, second], axis=-1))
        log_q = heat_kernel_log_density(geometry, time, base_point(geometry), points, cfg)
        return float(np.sum(np.exp(log_q)) * (2.0 * np.pi / count) ** 2)
    points = geometry.from_angles(angles[:, None])
    log_q = heat_kernel_log_density(geometry, time, base_point(geometry), points, cfg)
    return float(np.sum(np.exp(log_q)) * step)


def chapman_kolmogorov_residual(first_time, second_time, cfg, grid=2048, targets=16):
    """
    Largest |int q(s; z, w) q(t; w, y) dw - q(s + t; z, y)| on the circle over
    a set of targets y.
    """
    circle = ManifoldGeometry(ManifoldDescriptor.sphere(1))
    center = base_point(circle)
    middle = circle.from_angles((-np.pi + 2.0 * np.pi * np.arange(grid) / grid)[:, None])
    ends = circle.from_angles(np.linspace(-np.pi, np.pi, targets, endpoint=False)[:, None] + 0.1)
    left = np.exp(heat_kernel_log_density(circle, first_time, center, middle, cfg))
    right = np.exp(heat_kernel_log_density(circle, second_time, middle[None, :, :], ends[:, None, :], cfg))
    composed = right @ left * (2.0 * np.pi / grid)
    direct = np.exp(heat_kernel_log_density(circle, first_time + second_time, center, ends, cfg))
    return float(np.max(np.abs(composed - direct)))


def heat_equation_residual(time, cfg, time_step=1e-4, angle_step=1e-3, points=64):
    """
    Largest |d_t q - 1/2 d_theta^2 q| on the circle by central finite differences.
    """
    circle = ManifoldGeometry(ManifoldDescriptor.sphere(1))
    center = base_point(circle)
    angles = np.linspace(-np.pi, np.pi, points, endpoint=False) + 0.05

    def density(t, theta):
        return np.exp(heat_kernel_log_density(circle, t, center, circle.from_angles(theta[:, None]), cfg))

    d_time = (density(time + time_step, angles) - density(time - time_step, angles)) / (2.0 * time_step)
    d_angle = (
        density(time, angles + angle_step) - 2.0 * density(time, angles) + density(time, angles - angle_step)
    ) / angle_step ** 2
    return float(np.max(np.abs(d_time - 0.5 * d_angle)))


def circle_kernel_bin_masses(time, bins, cfg, nodes=16):
    """
    Exact probability of each of `bins` equal angle bins of [-pi, pi) under the
    circle kernel centered at angle 0.
    """
    edges = np.linspace(-np.pi, np.pi, bins + 1)
    x, w = np.polynomial.legendre.leggauss(nodes)
    half = 0.5 * np.diff(edges)[:, None]
    mid = 0.5 * (edges[1:] + edges[:-1])[:, None]
    angles = mid + half * x
    log_q = _circle_log_kernel(angles, time, cfg.wrap_terms)
    return np.sum(np.exp(log_q) * w * half, axis=1)


def circle_walk_angles(time, walk, samples, rng, chunk=50_000):
    """
    End angles of `samples` random walks on the circle started at angle 0,
    drawn in chunks to bound the noise buffer.
    """
    circle = ManifoldGeometry(ManifoldDescriptor.sphere(1))
    angles = []
    for start in range(0, samples, chunk):
        count = min(chunk, samples - start)
        centers = np.broadcast_to(base_point(circle), (count, 2))
        points = random_walk_batch(circle, centers, time, walk, rng).points
        angles.append(circle.to_angles(points)[:, 0])
    return np.concatenate(angles)


def circle_total_variation(time, walk, samples, bins, cfg, rng):
    """
    Binned total variation between random-walk samples and the exact circle kernel.
    """
    angles = circle_walk_angles(time, walk, samples, rng)
    counts, _ = np.histogram(angles, bins=bins, range=(-np.pi, np.pi))
    return float(0.5 * np.sum(np.abs(counts / samples - circle_kernel_bin_masses(time, bins, cfg))))


def circle_cosine_moment_error(time, walk, samples, rng):
    """
    |mean cos(angle) - exp(-t/2)| for random-walk samples on the circle.
    """
    angles = circle_walk_angles(time, walk, samples, rng)
    return float(abs(np.mean(np.cos(angles)) - math.exp(-0.5 * time)))
