import numpy as np
import pytest

from lib.data.action_layer import DataActionLayer
from lib.data.data_constants import PictureDefaults
from lib.data.physical_layer import MnistSet, PictureSpec, gen_picture, translate_dataset


class TestPictures(DataActionLayer):
    """
    Test Layer: periodic picture generation.
    """
    SIMPLE = PictureSpec("simple")
    RANDOM = PictureSpec("random_fourier", seed=7)

    def test_simple_picture_peaks_at_the_center(self):
        self.generate_picture_and_verify_value(self.SIMPLE, 32, 32, 2.0)

    def test_simple_picture_corner(self):
        self.generate_picture_and_verify_value(self.SIMPLE, 0, 0, -2.0)

    def test_simple_picture_quarter_point(self):
        self.generate_picture_and_verify_value(self.SIMPLE, 16, 48, 0.0, tol=1e-15)

    def test_simple_picture_range(self):
        self.generate_picture_and_verify_range(self.SIMPLE, -2.0, 2.0)

    def test_random_picture_is_reproducible(self):
        self.generate_picture_twice_and_verify_identical(self.RANDOM)

    def test_seeds_give_different_pictures(self):
        self.generate_pictures_and_verify_different(self.RANDOM, PictureSpec("random_fourier", seed=8))

    def test_complicated_preset_is_reproducible(self):
        self.generate_picture_twice_and_verify_identical(PictureSpec("random_fourier", seed=3, **PictureDefaults.TOO_COMPLICATED))


class TestTranslations(DataActionLayer):
    """
    Test Layer: the translation dataset and its on-disk container.
    """

    @pytest.fixture(autouse=True)
    def setup_picture(self):
        self.picture = gen_picture(PictureSpec("random_fourier", seed=11))

    @pytest.mark.parametrize("grid", [64, 8])
    def test_translation_layout(self, grid):
        self.translate_and_verify_layout(self.picture, grid)

    @pytest.mark.parametrize("grid", [48, 7])
    def test_grid_must_divide_the_size(self, grid):
        self.translate_with_bad_grid_and_expect_error(self.picture, grid)

    def test_roll_is_periodic(self):
        self.verify_roll_periodicity(self.picture, 5, 17)

    def test_rolls_compose(self):
        self.verify_roll_composition(self.picture, (10, 3), (60, 12))

    def test_roll_matches_phase_shift(self):
        self.compare_roll_with_phase_shift_and_verify(self.picture, 9, 40)

    def test_scaling_round_trip(self):
        self.scale_round_trip_and_verify(self.picture)

    def test_container_round_trip(self, tmp_path):
        dataset = translate_dataset(self.picture, 8, metadata=PictureSpec("random_fourier", seed=11).to_metadata())
        self.round_trip_container_and_verify(dataset, tmp_path)

    @pytest.mark.parametrize("keep", [12, 20, 1000])
    def test_truncated_container_is_rejected(self, keep):
        self.decode_truncated_container_and_expect_error(translate_dataset(self.picture, 4), keep)

    def test_container_with_bad_magic_is_rejected(self):
        self.decode_container_with_bad_magic_and_expect_error(translate_dataset(self.picture, 4))


class TestMnist(DataActionLayer):
    """
    Test Layer: IDX parsing, binarization and download.
    """
    COUNT = 6

    def test_plain_idx_files_load(self, tmp_path):
        self.load_mnist_and_verify(str(tmp_path), self.COUNT)

    def test_gzipped_idx_files_load(self, tmp_path):
        self.load_mnist_and_verify(str(tmp_path), self.COUNT, compress=True)

    def test_test_split_is_recognized(self, tmp_path):
        self.load_mnist_and_verify(str(tmp_path), self.COUNT, prefix="t10k", expected_split="test")

    def test_truncated_images_are_rejected(self, tmp_path):
        self.load_truncated_mnist_and_expect_error(str(tmp_path))

    def test_swapped_files_are_rejected(self, tmp_path):
        self.load_mnist_with_swapped_files_and_expect_error(str(tmp_path))

    def test_count_mismatch_is_rejected(self, tmp_path):
        self.load_mismatched_mnist_and_expect_error(str(tmp_path))

    @pytest.mark.parametrize("mode", ["stochastic", "threshold"])
    def test_binarization_keeps_extremes(self, mode):
        self.binarize_and_verify_extremes(mode)

    def test_stochastic_binarization_mean(self):
        self.measure_stochastic_binarize_mean_and_verify(0.3, 10_000, 0.02)

    def test_threshold_binarization_is_idempotent(self):
        images = self.rng.random((5, 4, 4)).astype(np.float32)
        self.binarize_twice_with_threshold_and_verify_idempotent(MnistSet(images, np.zeros(5, dtype=np.uint8)))

    @pytest.mark.parametrize("splits", [("train",), ("train", "test")])
    def test_fetch_downloads_each_file_once(self, monkeypatch, tmp_path, splits):
        self.fetch_with_stubbed_http_and_verify(monkeypatch, str(tmp_path), splits)
