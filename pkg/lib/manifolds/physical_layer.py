import math
from dataclasses import dataclass
from enum import Enum

import numpy as np
from scipy.special import gammaln

from lib.exceptions import DomainError, SingularProjection
from lib.manifolds.manifold_constants import ManifoldDefaults


class ManifoldKind(str, Enum):
    SPHERE = "sphere"
    FLAT_TORUS = "flat_torus"
    EMBEDDED_TORUS = "embedded_torus"
    PROJECTIVE = "projective"
    EUCLIDEAN = "euclidean"


@dataclass(frozen=True)
class ManifoldDescriptor:
    """
    A latent manifold given as data: its kind, intrinsic dimension d, ambient
    dimension n and, for the embedded torus, the radii (R, r).
    """
    kind: ManifoldKind
    intrinsic_dim: int
    ambient_dim: int
    major_radius: float = ManifoldDefaults.MAJOR_RADIUS
    minor_radius: float = ManifoldDefaults.MINOR_RADIUS

    def __post_init__(self):
        kind = ManifoldKind(self.kind)
        object.__setattr__(self, "kind", kind)
        d, n = self.intrinsic_dim, self.ambient_dim
        if kind is ManifoldKind.SPHERE and not (d in (1, 2, 3) and n == d + 1):
            raise DomainError(f"sphere needs d in {{1,2,3}} and n = d+1, got d={d}, n={n}")
        if kind is ManifoldKind.PROJECTIVE and not (d in (2, 3) and n == d + 1):
            raise DomainError(f"projective sphere needs d in {{2,3}} and n = d+1, got d={d}, n={n}")
        if kind is ManifoldKind.FLAT_TORUS and (d, n) != (2, 4):
            raise DomainError(f"flat torus needs d=2, n=4, got d={d}, n={n}")
        if kind is ManifoldKind.EMBEDDED_TORUS:
            if (d, n) != (2, 3):
                raise DomainError(f"embedded torus needs d=2, n=3, got d={d}, n={n}")
            if not self.major_radius > self.minor_radius > 0:
                raise DomainError(
                    f"embedded torus needs R > r > 0, got R={self.major_radius}, r={self.minor_radius}"
                )
        if kind is ManifoldKind.EUCLIDEAN and not (d in (2, 3) and n == d):
            raise DomainError(f"euclidean space needs d in {{2,3}} and n = d, got d={d}, n={n}")

    @classmethod
    def sphere(cls, d):
        return cls(ManifoldKind.SPHERE, d, d + 1)

    @classmethod
    def flat_torus(cls):
        return cls(ManifoldKind.FLAT_TORUS, 2, 4)

    @classmethod
    def embedded_torus(cls, major_radius=ManifoldDefaults.MAJOR_RADIUS, minor_radius=ManifoldDefaults.MINOR_RADIUS):
        return cls(ManifoldKind.EMBEDDED_TORUS, 2, 3, float(major_radius), float(minor_radius))

    @classmethod
    def projective(cls, d):
        return cls(ManifoldKind.PROJECTIVE, d, d + 1)

    @classmethod
    def euclidean(cls, d):
        return cls(ManifoldKind.EUCLIDEAN, d, d)

    @classmethod
    def from_name(cls, name, major_radius=ManifoldDefaults.MAJOR_RADIUS, minor_radius=ManifoldDefaults.MINOR_RADIUS):
        """
        Builds a descriptor from a command-line name such as 'sphere2' or 'flat-torus'.

        Args:
            name (str): One of the names in ManifoldDefaults.NAME_TABLE.
            major_radius (float, optional): R for the embedded torus.
            minor_radius (float, optional): r for the embedded torus.

        Returns:
            ManifoldDescriptor: The descriptor.

        Raises:
            DomainError: If the name is unknown.
        """
        key = name.strip().lower()
        if key not in ManifoldDefaults.NAME_TABLE:
            known = ", ".join(sorted(ManifoldDefaults.NAME_TABLE))
            raise DomainError(f"unknown manifold '{name}', expected one of: {known}")
        kind, d = ManifoldDefaults.NAME_TABLE[key]
        if kind == "sphere":
            return cls.sphere(d)
        if kind == "flat_torus":
            return cls.flat_torus()
        if kind == "embedded_torus":
            return cls.embedded_torus(major_radius, minor_radius)
        if kind == "projective":
            return cls.projective(d)
        return cls.euclidean(d)

    @property
    def name(self):
        if self.kind is ManifoldKind.SPHERE:
            return "circle" if self.intrinsic_dim == 1 else f"sphere{self.intrinsic_dim}"
        if self.kind is ManifoldKind.FLAT_TORUS:
            return "flat-torus"
        if self.kind is ManifoldKind.EMBEDDED_TORUS:
            return "embedded-torus"
        if self.kind is ManifoldKind.PROJECTIVE:
            return f"projective{self.intrinsic_dim}"
        return f"euclidean{self.intrinsic_dim}"

    @property
    def is_closed(self):
        return self.kind is not ManifoldKind.EUCLIDEAN


def wrap_angle(angle):
    """
    Wraps angles into [-pi, pi]; odd in its argument bit for bit.
    """
    return np.arctan2(np.sin(angle), np.cos(angle))


def _pair_angle_difference(a, b):
    # signed angle from unit 2-vector a to b, antisymmetric in (a, b)
    cross = a[..., 0] * b[..., 1] - a[..., 1] * b[..., 0]
    dot = a[..., 0] * b[..., 0] + a[..., 1] * b[..., 1]
    return np.arctan2(cross, dot)


def _sphere_arc(z, y):
    return 2.0 * np.arctan2(np.linalg.norm(z - y, axis=-1), np.linalg.norm(z + y, axis=-1))


def _radial_jacobian(x):
    # d(x/|x|)/dx over the last axis
    norm = np.linalg.norm(x, axis=-1)[..., None, None]
    u = x / norm[..., 0]
    eye = np.eye(x.shape[-1])
    return (eye - u[..., :, None] * u[..., None, :]) / norm


class ManifoldGeometry:
    """
    Physical Layer: geometric operations on one manifold.
    All methods are pure; arrays carry ambient coordinates in their last axis
    and may have any number of leading batch axes.
    """

    def __init__(self, descriptor: ManifoldDescriptor):
        self.descriptor = descriptor
        self.kind = descriptor.kind
        self.dim = descriptor.intrinsic_dim
        self.ambient_dim = descriptor.ambient_dim
        self.R = descriptor.major_radius
        self.r = descriptor.minor_radius

    def _as_ambient(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.ambient_dim:
            raise DomainError(f"expected ambient dimension {self.ambient_dim}, got shape {x.shape}")
        return x

    def _tube_center(self, x):
        rho = np.linalg.norm(x[..., :2], axis=-1)
        safe = np.where(rho > 0, rho, 1.0)[..., None]
        center = np.zeros_like(x)
        center[..., :2] = self.R * x[..., :2] / safe
        return rho, center

    def singular_mask(self, x):
        """
        Marks ambient points where the projection is undefined.

        Args:
            x (np.ndarray): Ambient points, shape (..., n).

        Returns:
            np.ndarray: Boolean array of shape x.shape[:-1].
        """
        x = self._as_ambient(x)
        threshold = ManifoldDefaults.SINGULAR_THRESHOLD
        if self.kind in (ManifoldKind.SPHERE, ManifoldKind.PROJECTIVE):
            return np.linalg.norm(x, axis=-1) < threshold
        if self.kind is ManifoldKind.FLAT_TORUS:
            pairs = x.reshape(x.shape[:-1] + (2, 2))
            return np.any(np.linalg.norm(pairs, axis=-1) < threshold, axis=-1)
        if self.kind is ManifoldKind.EMBEDDED_TORUS:
            rho, center = self._tube_center(x)
            return (rho < threshold) | (np.linalg.norm(x - center, axis=-1) < threshold)
        return np.zeros(x.shape[:-1], dtype=bool)

    def regularize(self, x):
        """
        Nudges points of the singular set off it by adding 1e-6 to the first
        coordinate of each degenerate component.

        Args:
            x (np.ndarray): Ambient points, shape (..., n).

        Returns:
            np.ndarray: A copy safe to project.
        """
        x = np.array(self._as_ambient(x), dtype=np.float64, copy=True)
        threshold = ManifoldDefaults.SINGULAR_THRESHOLD
        nudge = ManifoldDefaults.NUDGE
        if self.kind in (ManifoldKind.SPHERE, ManifoldKind.PROJECTIVE):
            x[..., 0] += np.where(np.linalg.norm(x, axis=-1) < threshold, nudge, 0.0)
        elif self.kind is ManifoldKind.FLAT_TORUS:
            x[..., 0] += np.where(np.linalg.norm(x[..., :2], axis=-1) < threshold, nudge, 0.0)
            x[..., 2] += np.where(np.linalg.norm(x[..., 2:], axis=-1) < threshold, nudge, 0.0)
        elif self.kind is ManifoldKind.EMBEDDED_TORUS:
            rho, _ = self._tube_center(x)
            x[..., 0] += np.where(rho < threshold, nudge, 0.0)
            _, center = self._tube_center(x)
            x[..., 2] += np.where(np.linalg.norm(x - center, axis=-1) < threshold, nudge, 0.0)
        return x

    def project(self, x):
        """
        Closest-point projection onto the manifold.

        Args:
            x (np.ndarray): Ambient points, shape (..., n).

        Returns:
            np.ndarray: Projected points, same shape.

        Raises:
            SingularProjection: If any point lies in the singular set.
        """
        x = self._as_ambient(x)
        if not np.all(np.isfinite(x)):
            raise DomainError("projection input contains non-finite entries")
        if np.any(self.singular_mask(x)):
            raise SingularProjection(f"{self.descriptor.name}: projection undefined near the singular set")
        if self.kind in (ManifoldKind.SPHERE, ManifoldKind.PROJECTIVE):
            return x / np.linalg.norm(x, axis=-1, keepdims=True)
        if self.kind is ManifoldKind.FLAT_TORUS:
            pairs = x.reshape(x.shape[:-1] + (2, 2))
            pairs = pairs / np.linalg.norm(pairs, axis=-1, keepdims=True)
            return pairs.reshape(x.shape)
        if self.kind is ManifoldKind.EMBEDDED_TORUS:
            _, center = self._tube_center(x)
            offset = x - center
            return center + self.r * offset / np.linalg.norm(offset, axis=-1, keepdims=True)
        return x.copy()

    def project_jacobian(self, x):
        """
        Jacobian dP/dx of the closest-point projection.

        Args:
            x (np.ndarray): Ambient points, shape (..., n).

        Returns:
            np.ndarray: Matrices of shape (..., n, n); entry [i, j] is dP_i/dx_j.

        Raises:
            SingularProjection: If any point lies in the singular set.
        """
        x = self._as_ambient(x)
        if np.any(self.singular_mask(x)):
            raise SingularProjection(f"{self.descriptor.name}: jacobian undefined near the singular set")
        n = self.ambient_dim
        if self.kind in (ManifoldKind.SPHERE, ManifoldKind.PROJECTIVE):
            return _radial_jacobian(x)
        if self.kind is ManifoldKind.FLAT_TORUS:
            jac = np.zeros(x.shape[:-1] + (n, n))
            jac[..., :2, :2] = _radial_jacobian(x[..., :2])
            jac[..., 2:, 2:] = _radial_jacobian(x[..., 2:])
            return jac
        if self.kind is ManifoldKind.EMBEDDED_TORUS:
            eye = np.eye(n)
            _, center = self._tube_center(x)
            center_jac = np.zeros(x.shape[:-1] + (n, n))
            center_jac[..., :2, :2] = self.R * _radial_jacobian(x[..., :2])
            offset = x - center
            return center_jac + self.r * _radial_jacobian(offset) @ (eye - center_jac)
        return np.broadcast_to(np.eye(n), x.shape[:-1] + (n, n)).copy()

    def distance_to_manifold(self, x):
        x = self._as_ambient(x)
        if self.kind in (ManifoldKind.SPHERE, ManifoldKind.PROJECTIVE):
            return np.abs(np.linalg.norm(x, axis=-1) - ManifoldDefaults.SPHERE_RADIUS)
        if self.kind is ManifoldKind.FLAT_TORUS:
            pairs = x.reshape(x.shape[:-1] + (2, 2))
            return np.max(np.abs(np.linalg.norm(pairs, axis=-1) - 1.0), axis=-1)
        if self.kind is ManifoldKind.EMBEDDED_TORUS:
            rho = np.linalg.norm(x[..., :2], axis=-1)
            return np.abs(np.hypot(rho - self.R, x[..., 2]) - self.r)
        return np.zeros(x.shape[:-1])

    def contains(self, x, tol=1e-9):
        """
        Checks whether ambient points lie on the manifold.

        Args:
            x (np.ndarray): Ambient points, shape (..., n).
            tol (float, optional): Allowed distance to the manifold. Defaults to 1e-9.

        Returns:
            bool | np.ndarray: True where every defining condition holds within tol.
        """
        x = self._as_ambient(x)
        inside = np.all(np.isfinite(x), axis=-1) & (self.distance_to_manifold(x) <= tol)
        return bool(inside) if inside.ndim == 0 else inside

    def _require_on_manifold(self, *points):
        for point in points:
            if not np.all(self.contains(point, ManifoldDefaults.ON_MANIFOLD_TOLERANCE)):
                raise DomainError(f"point is not on {self.descriptor.name}")

    def geodesic_distance(self, z, y):
        """
        Geodesic distance between points on the manifold.

        On the embedded torus this is the local-metric approximation
        sqrt(r^2 dtheta^2 + (R + r cos theta_mid)^2 dphi^2), accurate only for
        nearby points.

        Args:
            z (np.ndarray): Points, shape (..., n).
            y (np.ndarray): Points, broadcastable against z.

        Returns:
            float | np.ndarray: Distances.

        Raises:
            DomainError: If a point is off the manifold.
        """
        z = self._as_ambient(z)
        y = self._as_ambient(y)
        self._require_on_manifold(z, y)
        if self.kind is ManifoldKind.SPHERE:
            if self.dim == 1:
                distance = np.abs(_pair_angle_difference(z, y))
            else:
                distance = _sphere_arc(z, y)
        elif self.kind is ManifoldKind.PROJECTIVE:
            arc = _sphere_arc(z, y)
            distance = np.minimum(arc, np.pi - arc)
        elif self.kind is ManifoldKind.FLAT_TORUS:
            first = _pair_angle_difference(z[..., :2], y[..., :2])
            second = _pair_angle_difference(z[..., 2:], y[..., 2:])
            distance = np.sqrt(first ** 2 + second ** 2)
        elif self.kind is ManifoldKind.EMBEDDED_TORUS:
            theta_z, phi_z = np.moveaxis(self.to_angles(z), -1, 0)
            theta_y, phi_y = np.moveaxis(self.to_angles(y), -1, 0)
            d_theta = wrap_angle(theta_y - theta_z)
            d_phi = wrap_angle(phi_y - phi_z)
            theta_mid = np.arctan2(np.sin(theta_z) + np.sin(theta_y), np.cos(theta_z) + np.cos(theta_y))
            ring = self.R + self.r * np.cos(theta_mid)
            distance = np.sqrt((self.r * d_theta) ** 2 + (ring * d_phi) ** 2)
        else:
            distance = np.linalg.norm(z - y, axis=-1)
        return float(distance) if np.ndim(distance) == 0 else distance

    def uniform_sample(self, rng, size=None):
        """
        Draws points distributed by the normalized Riemannian volume (standard
        Gaussian for Euclidean space, the prior of the baseline VAE).

        Args:
            rng (np.random.Generator): Caller-owned generator.
            size (int, optional): Number of points. None draws a single point.

        Returns:
            np.ndarray: Shape (n,) or (size, n).
        """
        count = 1 if size is None else int(size)
        n = self.ambient_dim
        if self.kind in (ManifoldKind.SPHERE, ManifoldKind.PROJECTIVE):
            points = rng.standard_normal((count, n))
            norms = np.linalg.norm(points, axis=-1)
            while np.any(norms < ManifoldDefaults.SINGULAR_THRESHOLD):
                bad = norms < ManifoldDefaults.SINGULAR_THRESHOLD
                points[bad] = rng.standard_normal((int(bad.sum()), n))
                norms = np.linalg.norm(points, axis=-1)
            points = points / norms[:, None]
        elif self.kind is ManifoldKind.FLAT_TORUS:
            points = self.from_angles(rng.uniform(-np.pi, np.pi, size=(count, 2)))
        elif self.kind is ManifoldKind.EMBEDDED_TORUS:
            theta = np.empty(0)
            while theta.size < count:
                candidate = rng.uniform(-np.pi, np.pi, size=count)
                accept = rng.uniform(0.0, 1.0, size=count) < (self.R + self.r * np.cos(candidate)) / (self.R + self.r)
                theta = np.concatenate([theta, candidate[accept]])
            phi = rng.uniform(-np.pi, np.pi, size=count)
            points = self.from_angles(np.stack([theta[:count], phi], axis=-1))
        else:
            points = rng.standard_normal((count, n))
        return points[0] if size is None else points

    def volume(self):
        """
        Riemannian volume; infinite for Euclidean space.
        """
        d = self.dim
        sphere_volume = math.exp(math.log(2.0) + 0.5 * (d + 1) * math.log(math.pi) - gammaln(0.5 * (d + 1)))
        if self.kind is ManifoldKind.SPHERE:
            return sphere_volume
        if self.kind is ManifoldKind.PROJECTIVE:
            return sphere_volume / 2.0
        if self.kind is ManifoldKind.FLAT_TORUS:
            return 4.0 * math.pi ** 2
        if self.kind is ManifoldKind.EMBEDDED_TORUS:
            return 4.0 * math.pi ** 2 * self.R * self.r
        return math.inf

    def scalar_curvature(self, z):
        """
        Scalar curvature at points of the manifold.

        Args:
            z (np.ndarray): Points, shape (..., n).

        Returns:
            float | np.ndarray: Sc(z).

        Raises:
            DomainError: If a point is off the manifold.
        """
        z = self._as_ambient(z)
        self._require_on_manifold(z)
        batch = z.shape[:-1]
        if self.kind in (ManifoldKind.SPHERE, ManifoldKind.PROJECTIVE):
            curvature = np.full(batch, float(self.dim * (self.dim - 1)))
        elif self.kind is ManifoldKind.EMBEDDED_TORUS:
            cos_theta = np.cos(self.to_angles(z)[..., 0])
            curvature = 2.0 * cos_theta / (self.r * (self.R + self.r * cos_theta))
        else:
            curvature = np.zeros(batch)
        return float(curvature) if curvature.ndim == 0 else curvature

    def scalar_curvature_gradient(self, z):
        """
        Ambient gradient of the scalar curvature; zero except on the embedded torus.

        Args:
            z (np.ndarray): Points, shape (..., n).

        Returns:
            np.ndarray: Shape (..., n).
        """
        z = self._as_ambient(z)
        gradient = np.zeros_like(z)
        if self.kind is not ManifoldKind.EMBEDDED_TORUS:
            return gradient
        rho = np.linalg.norm(z[..., :2], axis=-1)
        w = rho - self.R
        denom = w ** 2 + z[..., 2] ** 2
        theta = np.arctan2(z[..., 2], w)
        d_sc_d_theta = -2.0 * self.R * np.sin(theta) / (self.r * (self.R + self.r * np.cos(theta)) ** 2)
        d_theta_d_w = -z[..., 2] / denom
        gradient[..., 0] = d_sc_d_theta * d_theta_d_w * z[..., 0] / rho
        gradient[..., 1] = d_sc_d_theta * d_theta_d_w * z[..., 1] / rho
        gradient[..., 2] = d_sc_d_theta * w / denom
        return gradient

    def to_angles(self, x):
        """
        Chart coordinates: circle -> (angle,); flat torus -> (theta, phi) per
        circle factor; embedded torus -> (poloidal theta, toroidal phi);
        2-sphere and projective plane -> (polar, azimuth).

        Args:
            x (np.ndarray): Ambient points, shape (..., n).

        Returns:
            np.ndarray: Angles, shape (..., d).
        """
        x = self._as_ambient(x)
        if self.kind is ManifoldKind.SPHERE and self.dim == 1:
            return np.arctan2(x[..., 1], x[..., 0])[..., None]
        if self.kind is ManifoldKind.FLAT_TORUS:
            return np.stack([np.arctan2(x[..., 1], x[..., 0]), np.arctan2(x[..., 3], x[..., 2])], axis=-1)
        if self.kind is ManifoldKind.EMBEDDED_TORUS:
            rho = np.linalg.norm(x[..., :2], axis=-1)
            return np.stack([np.arctan2(x[..., 2], rho - self.R), np.arctan2(x[..., 1], x[..., 0])], axis=-1)
        if self.kind in (ManifoldKind.SPHERE, ManifoldKind.PROJECTIVE) and self.dim == 2:
            polar = np.arctan2(np.linalg.norm(x[..., :2], axis=-1), x[..., 2])
            return np.stack([polar, np.arctan2(x[..., 1], x[..., 0])], axis=-1)
        if self.kind is ManifoldKind.EUCLIDEAN:
            return x.copy()
        raise DomainError(f"no angle chart for {self.descriptor.name}")

    def from_angles(self, angles):
        """
        Inverse of to_angles.

        Args:
            angles (np.ndarray): Shape (..., d).

        Returns:
            np.ndarray: Ambient points, shape (..., n).
        """
        angles = np.asarray(angles, dtype=np.float64)
        if self.kind is ManifoldKind.SPHERE and self.dim == 1:
            a = angles[..., 0]
            return np.stack([np.cos(a), np.sin(a)], axis=-1)
        if self.kind is ManifoldKind.FLAT_TORUS:
            a, b = angles[..., 0], angles[..., 1]
            return np.stack([np.cos(a), np.sin(a), np.cos(b), np.sin(b)], axis=-1)
        if self.kind is ManifoldKind.EMBEDDED_TORUS:
            theta, phi = angles[..., 0], angles[..., 1]
            ring = self.R + self.r * np.cos(theta)
            return np.stack([ring * np.cos(phi), ring * np.sin(phi), self.r * np.sin(theta)], axis=-1)
        if self.kind in (ManifoldKind.SPHERE, ManifoldKind.PROJECTIVE) and self.dim == 2:
            polar, azimuth = angles[..., 0], angles[..., 1]
            return np.stack(
                [np.sin(polar) * np.cos(azimuth), np.sin(polar) * np.sin(azimuth), np.cos(polar)], axis=-1
            )
        if self.kind is ManifoldKind.EUCLIDEAN:
            return angles.copy()
        raise DomainError(f"no angle chart for {self.descriptor.name}")
