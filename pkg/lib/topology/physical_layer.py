import colorsys
import csv
import logging
import math
from dataclasses import dataclass

import numpy as np

from lib.exceptions import DomainError, ShapeMismatch, UnsupportedManifold
from lib.manifolds.physical_layer import ManifoldKind, wrap_angle
from lib.nets.physical_layer import decode, encode
from lib.topology.topology_constants import PaletteConstants, TopologyDefaults

logger = logging.getLogger(__name__)


@dataclass
class LatentGrid:
    """
    Encoded translation grid: coords[i, j] is the ambient latent center of
    shift (i, j); angles holds chart coordinates when the manifold has a
    2-D angle chart.
    """
    coords: np.ndarray
    times: np.ndarray
    angles: np.ndarray = None

    @property
    def grid(self):
        return self.coords.shape[0]


@dataclass
class WindingMatrix:
    """
    [[a, b], [c, d]]: a, b are windings of u along the i and j loops; c, d the same for v.
    """
    matrix: np.ndarray
    degree: int
    resolved: bool
    raw: np.ndarray = None

    def as_dict(self):
        return {
            "a": int(self.matrix[0, 0]), "b": int(self.matrix[0, 1]),
            "c": int(self.matrix[1, 0]), "d": int(self.matrix[1, 1]),
            "degree": self.degree, "resolved": self.resolved,
        }


def encode_latents(model, images, batch=TopologyDefaults.ENCODE_BATCH):
    """
    Deterministic posterior parameters for every image: the center and the
    diffusion time, or for Euclidean latents the mean and the mean variance.
    """
    centers, times = [], []
    for start in range(0, len(images), batch):
        encoded = encode(model.encoder, model.geometry, images[start: start + batch])
        if model.encoder.head.gaussian:
            centers.append(encoded.mean)
            times.append(np.exp(encoded.logvar).mean(axis=1))
        else:
            centers.append(encoded.centers)
            times.append(encoded.times)
    return np.concatenate(centers), np.concatenate(times)


def latent_grid(model, dataset):
    """
    Encodes a TranslationDataset and lays the results out by shift.
    """
    grid = dataset.grid
    if len(dataset.images) != grid * grid:
        raise ShapeMismatch(f"{len(dataset.images)} records do not form a square shift grid")
    centers, times = encode_latents(model, dataset.flat())
    coords = np.empty((grid, grid, centers.shape[1]))
    grid_times = np.empty((grid, grid))
    i, j = dataset.shifts[:, 0].astype(int), dataset.shifts[:, 1].astype(int)
    coords[i, j] = centers
    grid_times[i, j] = times
    angles = None
    if model.geometry.dim == 2 and model.geometry.kind is not ManifoldKind.EUCLIDEAN:
        angles = model.geometry.to_angles(coords)
    return LatentGrid(coords, grid_times, angles)


def _loop_windings(angle, axis):
    steps = wrap_angle(np.roll(angle, -1, axis=axis) - angle)
    return steps.sum(axis=axis) / (2.0 * math.pi), float(np.max(np.abs(steps))) if steps.size else 0.0


def torus_degree(angles, max_step=TopologyDefaults.MAX_STEP, max_deviation=TopologyDefaults.MAX_WINDING_DEVIATION):
    """
    Degree of the map from the shift torus to the latent flat torus.

    Every cyclic loop of the grid (vary i at fixed j, and vary j at fixed i)
    is unwrapped step by step; its winding is the summed wrapped increment
    over 2 pi. Windings are averaged per (latent angle, loop direction),
    rounded and assembled into the 2x2 matrix whose determinant is the degree.

    Args:
        angles (np.ndarray): (G, G, 2) latent angles (u, v) at shift (i, j).

    Returns:
        WindingMatrix: resolved is False when a step exceeds max_step or a
        loop's winding strays more than max_deviation from the rounded average.
    """
    angles = np.asarray(angles, dtype=np.float64)
    if angles.ndim != 3 or angles.shape[2] != 2 or angles.shape[0] != angles.shape[1]:
        raise ShapeMismatch(f"angles must have shape (G, G, 2), got {angles.shape}")
    raw = np.empty((2, 2))
    matrix = np.zeros((2, 2), dtype=int)
    resolved = True
    for row in range(2):
        for col, axis in enumerate((0, 1)):
            windings, largest = _loop_windings(angles[..., row], axis)
            raw[row, col] = windings.mean()
            matrix[row, col] = int(np.rint(raw[row, col]))
            if largest > max_step:
                logger.debug("angle %d along axis %d: step %.3f exceeds %.3f", row, axis, largest, max_step)
                resolved = False
            if np.any(np.abs(windings - matrix[row, col]) > max_deviation):
                resolved = False
    degree = int(matrix[0, 0] * matrix[1, 1] - matrix[0, 1] * matrix[1, 0])
    return WindingMatrix(matrix, degree, resolved, raw)


def healpix_ring_index(polar, azimuth, nside):
    """
    Equal-area cell index in the HEALPix ring scheme, 12 * nside^2 cells.
    """
    z = np.cos(polar)
    za = np.abs(z)
    tt = np.mod(azimuth, 2.0 * math.pi) / (0.5 * math.pi)
    index = np.empty(np.shape(z), dtype=np.int64)

    equator = za <= 2.0 / 3.0
    if np.any(equator):
        zq, tq = z[equator], tt[equator]
        temp1 = nside * (0.5 + tq)
        temp2 = nside * zq * 0.75
        jp = np.floor(temp1 - temp2).astype(np.int64)
        jm = np.floor(temp1 + temp2).astype(np.int64)
        ring = nside + 1 + jp - jm
        kshift = 1 - (ring & 1)
        ip = np.mod((jp + jm - nside + kshift + 1) // 2, 4 * nside)
        index[equator] = 2 * nside * (nside - 1) + (ring - 1) * 4 * nside + ip

    caps = ~equator
    if np.any(caps):
        zc, tc = z[caps], tt[caps]
        tp = tc - np.floor(tc)
        tmp = nside * np.sqrt(3.0 * (1.0 - np.abs(zc)))
        jp = np.floor(tp * tmp).astype(np.int64)
        jm = np.floor((1.0 - tp) * tmp).astype(np.int64)
        ring = np.maximum(jp + jm + 1, 1)
        ip = np.mod(np.floor(tc * ring).astype(np.int64), 4 * ring)
        north = 2 * ring * (ring - 1) + ip
        south = 12 * nside * nside - 2 * ring * (ring + 1) + ip
        index[caps] = np.where(zc > 0, north, south)
    return index


def sphere_coverage(points, nside=TopologyDefaults.COVERAGE_NSIDE, tol=1e-6):
    """
    Fraction of the 12 * nside^2 equal-area cells that hold at least one point.

    Raises:
        DomainError: A point is off the unit 2-sphere.
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    cells = 12 * nside * nside
    if len(points) == 0:
        return 0.0
    radius = np.linalg.norm(points, axis=1)
    if np.any(np.abs(radius - 1.0) > tol):
        raise DomainError(f"sphere_coverage needs unit vectors; radius spans {radius.min()}..{radius.max()}")
    polar = np.arccos(np.clip(points[:, 2], -1.0, 1.0))
    azimuth = np.arctan2(points[:, 1], points[:, 0])
    return np.unique(healpix_ring_index(polar, azimuth, nside)).size / cells


def shift_color(i, j, grid):
    """
    Hex color of shift (i, j); periodic in both indices with period grid.
    """
    i, j = int(i) % grid, int(j) % grid
    hue = i / grid
    saturation = PaletteConstants.SATURATION_EVEN if (i + j) % 2 == 0 else PaletteConstants.SATURATION_ODD
    value = PaletteConstants.VALUE_BASE + PaletteConstants.VALUE_SWING * (0.5 + 0.5 * math.cos(2.0 * math.pi * j / grid))
    red, green, blue = colorsys.hsv_to_rgb(hue, saturation, value)
    return "#{:02x}{:02x}{:02x}".format(*(int(round(255 * c)) for c in (red, green, blue)))


def palette_header():
    return (
        f"# palette: hue=i/G; saturation={PaletteConstants.SATURATION_EVEN} for even i+j, "
        f"{PaletteConstants.SATURATION_ODD} for odd; value={PaletteConstants.VALUE_BASE}"
        f"+{PaletteConstants.VALUE_SWING}*(0.5+0.5*cos(2*pi*j/G))"
    )


def export_latents(model, images, shifts, grid, path):
    """
    Writes one CSV row per datapoint: index, shift_i, shift_j, ambient latent
    coordinates, t and the palette color of the shift.

    Returns:
        int: Number of rows written.
    """
    centers, times = encode_latents(model, images)
    shifts = np.asarray(shifts, dtype=int).reshape(len(images), 2)
    columns = ["index", "shift_i", "shift_j"] + [f"z{k}" for k in range(centers.shape[1])] + ["t", "color"]
    with open(path, "w", newline="", encoding="utf-8") as handle:
        handle.write(palette_header() + "\n")
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(columns)
        for index, ((i, j), center, time) in enumerate(zip(shifts, centers, times)):
            writer.writerow([index, i, j, *(repr(float(c)) for c in center), repr(float(time)), shift_color(i, j, grid)])
    logger.info("wrote %d latent rows to %s", len(centers), path)
    return len(centers)


def reconstruction_latents(geometry, resolution):
    """
    Latent points decoded by reconstruction_grid, as a (rows, cols, n) array:
    a strip of angles for the circle, an angle grid for tori, an
    equirectangular polar/azimuth grid for the 2-sphere and projective
    plane, and [-3, 3]^2 for the Euclidean plane.

    Raises:
        UnsupportedManifold: Latent dimension above 2.
    """
    if geometry.dim > 2:
        raise UnsupportedManifold(f"no reconstruction grid for {geometry.descriptor.name}; export 2-D slices instead")
    cells = (np.arange(resolution) + 0.5) / resolution
    angles = -math.pi + 2.0 * math.pi * cells
    if geometry.dim == 1:
        return geometry.from_angles(angles[None, :, None])
    if geometry.kind is ManifoldKind.EUCLIDEAN:
        line = TopologyDefaults.EUCLIDEAN_EXTENT * (2.0 * cells - 1.0)
        rows, cols = np.meshgrid(line, line, indexing="ij")
        return np.stack([rows, cols], axis=-1)
    if geometry.kind in (ManifoldKind.SPHERE, ManifoldKind.PROJECTIVE):
        polar, azimuth = np.meshgrid(math.pi * cells, angles, indexing="ij")
        return geometry.from_angles(np.stack([polar, azimuth], axis=-1))
    first, second = np.meshgrid(angles, angles, indexing="ij")
    return geometry.from_angles(np.stack([first, second], axis=-1))


def reconstruction_grid(model, resolution, image_shape):
    """
    Decodes a uniform latent grid and tiles the decoded images.

    Returns:
        np.ndarray: (rows * h, cols * w, 3) uint8 RGB image.
    """
    height, width = image_shape
    if height * width != model.data_dim:
        raise ShapeMismatch(f"image shape {image_shape} does not match data dimension {model.data_dim}")
    latents = reconstruction_latents(model.geometry, resolution)
    rows, cols = latents.shape[:2]
    beta, _ = decode(model.decoder, model.geometry, latents.reshape(rows * cols, -1))
    tiles = beta.reshape(rows, cols, height, width)
    mosaic = tiles.transpose(0, 2, 1, 3).reshape(rows * height, cols * width)
    gray = np.rint(255.0 * np.clip(mosaic, 0.0, 1.0)).astype(np.uint8)
    return np.repeat(gray[..., None], 3, axis=-1)


def encode_ppm(rgb):
    rgb = np.ascontiguousarray(rgb, dtype=np.uint8)
    height, width, _ = rgb.shape
    return f"P6\n{width} {height}\n255\n".encode("ascii") + rgb.tobytes()


def decode_ppm(data):
    """
    Reads back a binary PPM written by encode_ppm.
    """
    magic, size, maxval, pixels = data.split(b"\n", 3)
    if magic != b"P6" or maxval != b"255":
        raise DomainError("not a P6 PPM with maxval 255")
    width, height = (int(v) for v in size.split())
    return np.frombuffer(pixels, dtype=np.uint8, count=width * height * 3).reshape(height, width, 3)


def write_ppm(path, rgb):
    with open(path, "wb") as handle:
        handle.write(encode_ppm(rgb))
    logger.info("wrote %s", path)
