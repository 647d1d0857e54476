import gzip
import os
import struct

import numpy as np
import pytest

from lib.data.data_constants import MnistDefaults
from lib.data.physical_layer import (
    MnistDownloader,
    MnistSet,
    PixelScale,
    binarize,
    decode_dataset,
    encode_dataset,
    gen_picture,
    load_mnist,
    read_dataset,
    roll_picture,
    translate_dataset,
    write_dataset,
)
from lib.exceptions import BadGrid, BadMagic, CountMismatch, TruncatedFile


def idx_image_bytes(pixels):
    pixels = np.asarray(pixels, dtype=np.uint8)
    count, rows, cols = pixels.shape
    return struct.pack(">IIII", MnistDefaults.IMAGES_MAGIC, count, rows, cols) + pixels.tobytes()


def idx_label_bytes(labels):
    labels = np.asarray(labels, dtype=np.uint8)
    return struct.pack(">II", MnistDefaults.LABELS_MAGIC, len(labels)) + labels.tobytes()


class _StubResponse:
    def __init__(self, payload, status=200):
        self.payload = payload
        self.status = status

    def raise_for_status(self):
        if self.status >= 400:
            raise RuntimeError(f"HTTP {self.status}")

    def iter_content(self, chunk_size):
        for start in range(0, len(self.payload), chunk_size):
            yield self.payload[start: start + chunk_size]


class _StubRequester:
    def __init__(self, payloads):
        self.payloads = payloads
        self.urls = []

    def get(self, url, stream=False, timeout=None):
        self.urls.append(url)
        return _StubResponse(self.payloads[url.rsplit("/", 1)[-1]])


class DataActionLayer:
    """
    Action Layer: self-verifying checks of picture generation, translation datasets and MNIST ingestion.
    """

    @pytest.fixture(autouse=True)
    def setup_rng(self, generate_rng):
        self.rng = generate_rng

    def generate_picture_and_verify_value(self, spec, row, col, expected, tol=0.0):
        picture = gen_picture(spec)
        assert abs(picture[row, col] - expected) <= tol, f"pixel ({row}, {col}) = {picture[row, col]}, expected {expected}"
        return picture

    def generate_picture_and_verify_range(self, spec, low, high):
        picture = gen_picture(spec)
        assert picture.min() == low and picture.max() == high, (
            f"native range {picture.min()}..{picture.max()}, expected {low}..{high}"
        )
        return picture

    def generate_picture_twice_and_verify_identical(self, spec):
        first, second = gen_picture(spec), gen_picture(spec)
        assert first.tobytes() == second.tobytes(), f"seed {spec.seed} produced different pictures"
        return first

    def generate_pictures_and_verify_different(self, first_spec, second_spec):
        assert not np.array_equal(gen_picture(first_spec), gen_picture(second_spec)), "different seeds gave the same picture"

    def translate_and_verify_layout(self, picture, grid):
        """
        Checks the record count, the [0, 1] pixel range and that shift (0, 0) is the scaled base picture.
        """
        dataset = translate_dataset(picture, grid)
        assert len(dataset.images) == grid * grid, f"{len(dataset.images)} records, expected {grid * grid}"
        assert dataset.images.min() >= 0.0 and dataset.images.max() <= 1.0, (
            f"pixels span {dataset.images.min()}..{dataset.images.max()}"
        )
        assert tuple(dataset.shifts[0]) == (0, 0), f"first shift {dataset.shifts[0]}"
        base = dataset.scale.apply(picture).astype(np.float32)
        assert np.array_equal(dataset.images[0], base), "shift (0, 0) differs from the base picture"
        return dataset

    def translate_with_bad_grid_and_expect_error(self, picture, grid):
        with pytest.raises(BadGrid):
            translate_dataset(picture, grid)

    def verify_roll_periodicity(self, picture, rows, cols):
        size = picture.shape[0]
        wrapped = roll_picture(picture, rows + size, cols)
        assert np.array_equal(wrapped, roll_picture(picture, rows, cols)), f"shift ({rows + size}, {cols}) is not periodic"

    def verify_roll_composition(self, picture, first, second):
        size = picture.shape[0]
        composed = roll_picture(roll_picture(picture, *first), *second)
        combined = roll_picture(picture, (first[0] + second[0]) % size, (first[1] + second[1]) % size)
        assert np.array_equal(composed, combined), f"roll {first} then {second} differs from their sum"

    def compare_roll_with_phase_shift_and_verify(self, picture, rows, cols, tol=1e-9):
        """
        A cyclic shift multiplies every DFT coefficient by a phase; inverting
        the shifted spectrum must reproduce np.roll.
        """
        size = picture.shape[0]
        freqs = np.fft.fftfreq(size) * size
        phase = np.exp(-2j * np.pi * (np.outer(freqs, np.ones(size)) * rows + np.outer(np.ones(size), freqs) * cols) / size)
        shifted = np.real(np.fft.ifft2(np.fft.fft2(picture) * phase))
        error = float(np.max(np.abs(shifted - roll_picture(picture, rows, cols))))
        assert error <= tol, f"phase-shift reconstruction differs from roll by {error:.2e}"
        return error

    def scale_round_trip_and_verify(self, picture, tol=1e-12):
        scale = PixelScale.of(picture)
        error = float(np.max(np.abs(scale.invert(scale.apply(picture)) - picture)))
        assert error <= tol, f"unscale(scale(x)) differs from x by {error:.2e}"

    def round_trip_container_and_verify(self, dataset, tmp_path):
        path = os.path.join(tmp_path, "pictures.dvaeds")
        write_dataset(path, dataset)
        loaded = read_dataset(path)
        assert loaded.images.tobytes() == dataset.images.tobytes(), "pixels changed on round trip"
        assert np.array_equal(loaded.shifts, dataset.shifts), "shifts changed on round trip"
        assert loaded.scale == dataset.scale, f"scale {loaded.scale} != {dataset.scale}"
        assert loaded.metadata == dataset.metadata, f"metadata {loaded.metadata} != {dataset.metadata}"
        assert encode_dataset(loaded) == encode_dataset(dataset), "re-encoding changed the bytes"
        return loaded

    def decode_truncated_container_and_expect_error(self, dataset, keep):
        with pytest.raises(TruncatedFile):
            decode_dataset(encode_dataset(dataset)[:keep])

    def decode_container_with_bad_magic_and_expect_error(self, dataset):
        data = bytearray(encode_dataset(dataset))
        data[0:4] = b"NOPE"
        with pytest.raises(BadMagic):
            decode_dataset(bytes(data))

    def write_idx_pair(self, directory, count, rows=MnistDefaults.ROWS, cols=MnistDefaults.COLS, compress=False, prefix="train"):
        """
        Writes a random IDX image/label pair and returns (paths, pixels, labels).
        """
        pixels = self.rng.integers(0, 256, size=(count, rows, cols), dtype=np.uint8)
        labels = self.rng.integers(0, 10, size=count, dtype=np.uint8)
        paths = []
        for name, data in (("images-idx3-ubyte", idx_image_bytes(pixels)), ("labels-idx1-ubyte", idx_label_bytes(labels))):
            if compress:
                name, data = name + ".gz", gzip.compress(data)
            path = os.path.join(directory, f"{prefix}-{name}")
            with open(path, "wb") as handle:
                handle.write(data)
            paths.append(path)
        return paths, pixels, labels

    def load_mnist_and_verify(self, directory, count, compress=False, prefix="train", expected_split="train"):
        (images_path, labels_path), pixels, labels = self.write_idx_pair(directory, count, compress=compress, prefix=prefix)
        mnist = load_mnist(images_path, labels_path)
        assert mnist.images.shape == (count, MnistDefaults.ROWS, MnistDefaults.COLS), f"shape {mnist.images.shape}"
        assert np.array_equal(mnist.images, pixels.astype(np.float32) / np.float32(255.0)), "pixels not divided by 255"
        assert np.array_equal(mnist.labels, labels), "labels changed"
        assert mnist.labels.max() <= 9, f"label {mnist.labels.max()} out of range"
        assert mnist.split == expected_split, f"split {mnist.split}, expected {expected_split}"
        return mnist

    def load_truncated_mnist_and_expect_error(self, directory, count=3, drop=5):
        (images_path, labels_path), _, _ = self.write_idx_pair(directory, count)
        with open(images_path, "rb") as handle:
            data = handle.read()
        with open(images_path, "wb") as handle:
            handle.write(data[:-drop])
        with pytest.raises(TruncatedFile):
            load_mnist(images_path, labels_path)

    def load_mnist_with_swapped_files_and_expect_error(self, directory, count=3):
        (images_path, labels_path), _, _ = self.write_idx_pair(directory, count)
        with pytest.raises(BadMagic):
            load_mnist(labels_path, images_path)

    def load_mismatched_mnist_and_expect_error(self, directory, count=4):
        (images_path, _), _, _ = self.write_idx_pair(directory, count)
        labels_path = os.path.join(directory, "short-labels")
        with open(labels_path, "wb") as handle:
            handle.write(idx_label_bytes(np.zeros(count - 1)))
        with pytest.raises(CountMismatch):
            load_mnist(images_path, labels_path)

    def binarize_and_verify_extremes(self, mode, seeds=range(5)):
        images = np.zeros((2, 4, 4), dtype=np.float32)
        images[1] = 1.0
        for seed in seeds:
            bits = binarize(MnistSet(images, np.zeros(2, dtype=np.uint8)), seed, mode).images
            assert np.all(bits[0] == 0.0) and np.all(bits[1] == 1.0), f"seed {seed}: extremes flipped under {mode}"

    def measure_stochastic_binarize_mean_and_verify(self, value, draws, tol, seed=0):
        images = np.full((draws, 1, 1), value, dtype=np.float32)
        bits = binarize(MnistSet(images, np.zeros(draws, dtype=np.uint8)), seed, "stochastic").images
        mean = float(bits.mean())
        assert abs(mean - value) <= tol, f"stochastic binarization mean {mean:.4f}, expected {value} +- {tol}"
        return mean

    def binarize_twice_with_threshold_and_verify_idempotent(self, mnist):
        once = binarize(mnist, 0, "threshold")
        twice = binarize(once, 0, "threshold")
        assert np.array_equal(once.images, twice.images), "threshold binarization is not idempotent"
        assert set(np.unique(once.images)) <= {0.0, 1.0}, "threshold output is not binary"

    def fetch_with_stubbed_http_and_verify(self, monkeypatch, directory, splits=("train",)):
        """
        Replaces the downloader's HTTP getter, fetches, and checks the files land intact.
        """
        payloads = {}
        for split in splits:
            for name in MnistDefaults.FILES[split]:
                payloads[name] = gzip.compress(self.rng.bytes(64))
        downloader = MnistDownloader(base_url="https://example.invalid/mnist/")
        stub = _StubRequester(payloads)
        monkeypatch.setattr(downloader, "requester", stub)
        paths = downloader.fetch(directory, splits)
        for split in splits:
            for path in paths[split]:
                with open(path, "rb") as handle:
                    assert handle.read() == payloads[os.path.basename(path)], f"{path} content differs from the payload"
        assert len(stub.urls) == 2 * len(splits), f"expected {2 * len(splits)} requests, saw {stub.urls}"
        downloader.fetch(directory, splits)
        assert len(stub.urls) == 2 * len(splits), "existing files were downloaded again"
        return paths
