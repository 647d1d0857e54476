import gzip
import json
import logging
import os
import struct
from dataclasses import dataclass, field, replace

import numpy as np
import requests

from lib.data.data_constants import MnistDefaults, PictureDefaults
from lib.dvae.dvae_constants import TrainingDefaults
from lib.exceptions import BadGrid, BadMagic, ConfigError, CountMismatch, DatasetFormatError, TruncatedFile

logger = logging.getLogger(__name__)

_DIMS = struct.Struct("<III")
_LENGTH = struct.Struct("<I")
_IDX_IMAGES = struct.Struct(">IIII")
_IDX_LABELS = struct.Struct(">II")
_GZIP_MAGIC = b"\x1f\x8b"


@dataclass(frozen=True)
class PictureSpec:
    """
    A periodic picture on [-pi, pi)^2: either cos(theta) + cos(phi) or a
    random Fourier series truncated at |k|, |l| <= cutoff with coefficient
    discount gamma^(|k| + |l| - 1).
    """
    mode: str = "simple"
    cutoff: int = PictureDefaults.CUTOFF
    gamma: float = PictureDefaults.GAMMA
    seed: int = 0

    def validate(self):
        if self.mode not in PictureDefaults.MODES:
            raise ConfigError(f"picture mode must be one of {PictureDefaults.MODES}, got {self.mode!r}")
        if self.mode == "random_fourier":
            if int(self.cutoff) < 1:
                raise ConfigError(f"cutoff must be >= 1, got {self.cutoff}")
            if not 0.0 < self.gamma <= 1.0:
                raise ConfigError(f"gamma must lie in (0, 1], got {self.gamma}")
        return self

    def coefficients(self):
        """
        Complex coefficients a_kl for k, l in [-cutoff, cutoff]; real and
        imaginary parts are independent standard normals drawn from the seed.
        """
        shape = (2 * self.cutoff + 1, 2 * self.cutoff + 1)
        rng = np.random.default_rng(self.seed)
        real = rng.standard_normal(shape)
        imag = rng.standard_normal(shape)
        return real + 1j * imag

    def to_metadata(self):
        if self.mode == "simple":
            return {"mode": self.mode, "seed": self.seed}
        return {"mode": self.mode, "cutoff": self.cutoff, "gamma": self.gamma, "seed": self.seed}


def grid_angles(size=PictureDefaults.SIZE):
    return -np.pi + 2.0 * np.pi * np.arange(size) / size


def gen_picture(spec, size=PictureDefaults.SIZE):
    """
    Samples the picture on the uniform grid theta_i = -pi + 2 pi i / size.
    Rows follow theta, columns follow phi.

    Returns:
        np.ndarray: (size, size) float64 image in its native range.
    """
    spec.validate()
    angles = grid_angles(size)
    if spec.mode == "simple":
        return np.cos(angles)[:, None] + np.cos(angles)[None, :]
    k = np.arange(-spec.cutoff, spec.cutoff + 1)
    discount = spec.gamma ** (np.abs(k)[:, None] + np.abs(k)[None, :] - 1.0)
    waves = np.exp(1j * np.outer(angles, k))
    return np.real(waves @ (discount * spec.coefficients()) @ waves.T)


@dataclass(frozen=True)
class PixelScale:
    """
    Affine map from a picture's native range onto [0, 1].
    """
    low: float
    high: float

    @property
    def span(self):
        return self.high - self.low if self.high > self.low else 1.0

    @classmethod
    def of(cls, picture):
        return cls(float(np.min(picture)), float(np.max(picture)))

    def apply(self, values):
        return (np.asarray(values, dtype=np.float64) - self.low) / self.span

    def invert(self, values):
        return np.asarray(values, dtype=np.float64) * self.span + self.low


@dataclass
class TranslationDataset:
    """
    Every cyclic translation of one periodic picture on a G x G shift grid.

    images: (G^2, height, width) float32 in [0, 1]; shifts: (G^2, 2) grid
    indices (i, j), record i * G + j.
    """
    images: np.ndarray
    shifts: np.ndarray
    scale: PixelScale
    metadata: dict = field(default_factory=dict)

    @property
    def grid(self):
        return int(round(np.sqrt(len(self.images))))

    @property
    def image_shape(self):
        return self.images.shape[1:]

    def flat(self):
        return self.images.reshape(len(self.images), -1).astype(np.float64)


def roll_picture(picture, rows, cols):
    return np.roll(picture, (rows, cols), axis=(0, 1))


def translate_dataset(picture, grid=PictureDefaults.GRID, metadata=None):
    """
    Builds the G^2 translations of a square periodic picture; record (i, j)
    is rolled by (i, j) * size / G pixels and scaled by the picture's own
    min/max.

    Raises:
        BadGrid: G does not divide the picture size.
    """
    picture = np.asarray(picture, dtype=np.float64)
    size = picture.shape[0]
    if picture.ndim != 2 or picture.shape[1] != size:
        raise BadGrid(f"picture must be square, got shape {picture.shape}")
    if grid < 1 or size % grid:
        raise BadGrid(f"grid {grid} does not divide picture size {size}")
    step = size // grid
    scale = PixelScale.of(picture)
    scaled = scale.apply(picture)
    shifts = np.array([(i, j) for i in range(grid) for j in range(grid)], dtype=np.uint32)
    images = np.stack([roll_picture(scaled, int(i) * step, int(j) * step) for i, j in shifts]).astype(np.float32)
    meta = dict(metadata or {})
    meta["grid"] = grid
    logger.info("generated %d translations of a %dx%d picture (native range %.4g..%.4g)", len(images), size, size, scale.low, scale.high)
    return TranslationDataset(images, shifts, scale, meta)


def encode_dataset(dataset):
    """
    Container layout: magic, u32 count/height/width, f32 pixels record-major,
    u32 shift pairs, u32-length-prefixed UTF-8 JSON metadata. Little-endian.
    """
    count, height, width = dataset.images.shape
    metadata = dict(dataset.metadata)
    metadata["scale"] = {"low": dataset.scale.low, "high": dataset.scale.high}
    blob = json.dumps(metadata, sort_keys=True).encode("utf-8")
    return b"".join([
        PictureDefaults.CONTAINER_MAGIC,
        _DIMS.pack(count, height, width),
        np.ascontiguousarray(dataset.images, dtype="<f4").tobytes(),
        np.ascontiguousarray(dataset.shifts, dtype="<u4").tobytes(),
        _LENGTH.pack(len(blob)),
        blob,
    ])


def decode_dataset(data):
    """
    Raises:
        BadMagic: Not a dataset container.
        TruncatedFile: Fewer bytes than the header announces.
        DatasetFormatError: Trailing bytes after the metadata block.
    """
    magic = PictureDefaults.CONTAINER_MAGIC
    if data[: len(magic)] != magic:
        raise BadMagic(f"not a dataset container: magic {data[:len(magic)]!r}")
    offset = len(magic)
    if len(data) < offset + _DIMS.size:
        raise TruncatedFile("dataset header is truncated")
    count, height, width = _DIMS.unpack_from(data, offset)
    offset += _DIMS.size
    pixels = count * height * width
    if len(data) < offset + 4 * pixels + 8 * count + _LENGTH.size:
        raise TruncatedFile(f"dataset announces {count} records of {height}x{width} but holds {len(data)} bytes")
    images = np.frombuffer(data, dtype="<f4", count=pixels, offset=offset).astype(np.float32).reshape(count, height, width)
    offset += 4 * pixels
    shifts = np.frombuffer(data, dtype="<u4", count=2 * count, offset=offset).astype(np.uint32).reshape(count, 2)
    offset += 8 * count
    (blob_len,) = _LENGTH.unpack_from(data, offset)
    offset += _LENGTH.size
    if len(data) < offset + blob_len:
        raise TruncatedFile("dataset metadata is truncated")
    if len(data) > offset + blob_len:
        raise DatasetFormatError(f"{len(data) - offset - blob_len} trailing bytes after dataset metadata")
    metadata = json.loads(data[offset: offset + blob_len].decode("utf-8"))
    scale = metadata.pop("scale")
    return TranslationDataset(images, shifts, PixelScale(scale["low"], scale["high"]), metadata)


def write_dataset(path, dataset):
    with open(path, "wb") as handle:
        handle.write(encode_dataset(dataset))


def read_dataset(path):
    with open(path, "rb") as handle:
        return decode_dataset(handle.read())


@dataclass
class MnistSet:
    images: np.ndarray
    labels: np.ndarray
    split: str = "train"

    def flat(self):
        return self.images.reshape(len(self.images), -1).astype(np.float64)


def _read_maybe_gzip(path):
    with open(path, "rb") as handle:
        data = handle.read()
    if str(path).endswith(".gz") or data[:2] == _GZIP_MAGIC:
        return gzip.decompress(data)
    return data


def parse_idx_images(data):
    """
    Big-endian IDX image file: magic 2051, count, rows, cols, then unsigned
    bytes row-major. Pixels are returned divided by 255.
    """
    if len(data) < _IDX_IMAGES.size:
        raise TruncatedFile("IDX image header is truncated")
    magic, count, rows, cols = _IDX_IMAGES.unpack_from(data)
    if magic != MnistDefaults.IMAGES_MAGIC:
        raise BadMagic(f"IDX image magic {magic:#010x}, expected {MnistDefaults.IMAGES_MAGIC:#010x}")
    size = count * rows * cols
    if len(data) < _IDX_IMAGES.size + size:
        raise TruncatedFile(f"IDX image file announces {count} images of {rows}x{cols} but holds {len(data)} bytes")
    pixels = np.frombuffer(data, dtype=np.uint8, count=size, offset=_IDX_IMAGES.size)
    return pixels.reshape(count, rows, cols).astype(np.float32) / np.float32(255.0)


def parse_idx_labels(data):
    if len(data) < _IDX_LABELS.size:
        raise TruncatedFile("IDX label header is truncated")
    magic, count = _IDX_LABELS.unpack_from(data)
    if magic != MnistDefaults.LABELS_MAGIC:
        raise BadMagic(f"IDX label magic {magic:#010x}, expected {MnistDefaults.LABELS_MAGIC:#010x}")
    if len(data) < _IDX_LABELS.size + count:
        raise TruncatedFile(f"IDX label file announces {count} labels but holds {len(data)} bytes")
    labels = np.frombuffer(data, dtype=np.uint8, count=count, offset=_IDX_LABELS.size).copy()
    if labels.size and labels.max() > 9:
        raise DatasetFormatError(f"label {int(labels.max())} outside 0..9")
    return labels


def load_mnist(images_path, labels_path, split=None):
    """
    Loads an IDX image/label pair, plain or gzip-compressed.

    Raises:
        BadMagic, TruncatedFile: Malformed file.
        CountMismatch: Image and label counts differ.
    """
    images = parse_idx_images(_read_maybe_gzip(images_path))
    labels = parse_idx_labels(_read_maybe_gzip(labels_path))
    if len(images) != len(labels):
        raise CountMismatch(f"{len(images)} images but {len(labels)} labels")
    if split is None:
        split = "test" if "t10k" in os.path.basename(str(images_path)) else "train"
    logger.info("loaded %d %s images of %dx%d", len(images), split, images.shape[1], images.shape[2])
    return MnistSet(images, labels, split)


def binarize(mnist, seed, mode="stochastic"):
    """
    stochastic: each pixel becomes 1 with probability equal to its value;
    threshold: 1 iff the pixel is >= 0.5.
    """
    if mode not in MnistDefaults.BINARIZE_MODES:
        raise ConfigError(f"binarize mode must be one of {MnistDefaults.BINARIZE_MODES}, got {mode!r}")
    if mode == "threshold":
        bits = mnist.images >= 0.5
    else:
        rng = np.random.default_rng([seed, TrainingDefaults.BINARIZE_STREAM])
        bits = rng.random(mnist.images.shape) < mnist.images
    return replace(mnist, images=bits.astype(np.float32))


class MnistDownloader:
    """
    Physical Layer: HTTP client that fetches the MNIST IDX archives.
    """
    def __init__(self, base_url=MnistDefaults.BASE_URL):
        self.base_url = base_url
        self.requester = requests

    def download(self, url, path):
        """
        Streams url into path, replacing it only once the transfer completes.

        Raises:
            requests.HTTPError: Non-2xx response.
        """
        response = self.requester.get(url, stream=True, timeout=MnistDefaults.TIMEOUT_SECONDS)
        response.raise_for_status()
        partial = f"{path}.part"
        with open(partial, "wb") as handle:
            for chunk in response.iter_content(chunk_size=MnistDefaults.CHUNK_BYTES):
                handle.write(chunk)
        os.replace(partial, path)
        logger.info("downloaded %s -> %s", url, path)
        return path

    def fetch(self, directory, splits=("train", "test"), force=False):
        """
        Downloads the image and label archives for each split into directory.

        Returns:
            dict: split -> (images_path, labels_path).
        """
        os.makedirs(directory, exist_ok=True)
        paths = {}
        for split in splits:
            pair = []
            for name in MnistDefaults.FILES[split]:
                path = os.path.join(directory, name)
                if force or not os.path.exists(path):
                    self.download(self.base_url + name, path)
                else:
                    logger.info("keeping existing %s", path)
                pair.append(path)
            paths[split] = tuple(pair)
        return paths
