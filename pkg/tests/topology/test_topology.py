import math

import numpy as np
import pytest

from lib.topology.action_layer import TopologyActionLayer, identity_torus_angles


class TestTorusDegree(TopologyActionLayer):
    """
    Test Layer: winding matrices and degrees of latent torus grids.
    """
    GRID = 16

    def test_identity_map_has_degree_one(self):
        self.compute_degree_and_verify(identity_torus_angles(self.GRID), [[1, 0], [0, 1]], 1)

    def test_swapped_axes_have_degree_minus_one(self):
        swapped = identity_torus_angles(self.GRID)[..., ::-1]
        self.compute_degree_and_verify(swapped, [[0, 1], [1, 0]], -1)

    def test_constant_map_has_degree_zero(self):
        self.compute_degree_and_verify(np.full((self.GRID, self.GRID, 2), 0.7), [[0, 0], [0, 0]], 0)

    def test_double_winding(self):
        self.compute_degree_and_verify(identity_torus_angles(self.GRID, u_winding=2), [[2, 0], [0, 1]], 2)

    @pytest.mark.parametrize("offset", [(0.3, -1.2), (math.pi, math.pi)])
    def test_degree_is_rotation_invariant(self, offset):
        self.verify_degree_rotation_invariant(identity_torus_angles(self.GRID), offset)

    def test_reflection_flips_the_degree(self):
        self.verify_degree_reflection(identity_torus_angles(self.GRID))

    def test_coarse_grid_is_unresolved(self):
        self.compute_degree_with_coarse_steps_and_expect_unresolved(3)

    def test_disagreeing_loops_are_unresolved(self):
        self.compute_degree_with_disagreeing_loops_and_expect_unresolved(self.GRID)


class TestSphereCoverage(TopologyActionLayer):
    """
    Test Layer: equal-area cell coverage of latent points on the 2-sphere.
    """
    CELLS = 192

    def test_uniform_points_cover_the_sphere(self):
        points = self.build_geometry("sphere2").uniform_sample(self.rng, 100_000)
        self.measure_sphere_coverage_and_verify(points, minimum=0.99)

    def test_repeated_point_covers_one_cell(self):
        self.measure_sphere_coverage_and_verify(np.tile([0.0, 0.6, 0.8], (50, 1)), expected=1.0 / self.CELLS)

    def test_no_points_cover_nothing(self):
        self.measure_sphere_coverage_and_verify(np.empty((0, 3)), expected=0.0)

    def test_off_sphere_points_are_rejected(self):
        self.measure_sphere_coverage_off_sphere_and_expect_error([[0.0, 0.0, 2.0]])

    @pytest.mark.parametrize("nside", [1, 4])
    def test_cells_have_equal_area(self, nside):
        self.verify_healpix_cells_equal_area(nside, 100_000)


class TestPalette(TopologyActionLayer):
    """
    Test Layer: the shift-coloring palette.
    """

    @pytest.mark.parametrize("grid", [8, 64])
    def test_palette_is_periodic(self, grid):
        self.verify_palette_periodic(grid)

    def test_half_period_column_is_darkest(self):
        self.verify_palette_color(0, 4, 8, "#990f0f")


class TestLatentExport(TopologyActionLayer):
    """
    Test Layer: latent grids, CSV exports and reconstruction mosaics.
    """
    IMAGE_SHAPE = (4, 4)

    @pytest.mark.parametrize("name", ["flat-torus", "sphere2", "euclidean2"])
    def test_latent_grid_shapes(self, name):
        self.encode_latent_grid_and_verify(name, self.build_translation_dataset())

    def test_export_writes_one_row_per_datapoint(self, tmp_path):
        dataset = self.build_translation_dataset()
        model, _ = self.encode_latent_grid_and_verify("flat-torus", dataset)
        self.export_latents_and_verify(model, dataset, str(tmp_path))

    def test_export_is_deterministic(self, tmp_path):
        dataset = self.build_translation_dataset(mode="random_fourier", seed=4)
        model, _ = self.encode_latent_grid_and_verify("sphere2", dataset)
        self.export_latents_twice_and_verify_identical(model, dataset, str(tmp_path))

    @pytest.mark.parametrize("name, resolution, tiles", [
        ("flat-torus", 2, (2, 2)),
        ("circle", 5, (1, 5)),
        ("sphere2", 1, (1, 1)),
        ("euclidean2", 3, (3, 3)),
    ])
    def test_reconstruction_mosaic_size(self, name, resolution, tiles):
        self.reconstruct_and_verify_tiles(self.build_model(name), resolution, self.IMAGE_SHAPE, tiles)

    def test_constant_decoder_gives_identical_tiles(self):
        self.reconstruct_with_constant_decoder_and_verify_identical_tiles(self.build_model("projective2"), 3, self.IMAGE_SHAPE)

    def test_three_dimensional_latents_are_unsupported(self):
        self.reconstruct_unsupported_and_expect_error(self.build_model("sphere3"), self.IMAGE_SHAPE)

    def test_ppm_round_trip(self):
        self.round_trip_ppm_and_verify(self.rng.integers(0, 256, size=(5, 7, 3), dtype=np.uint8))


class TestShiftTorusCapture(TopologyActionLayer):
    """
    Test Layer: whether trained flat-torus latents recover the torus of translations.
    """
    SEEDS = range(10)
    MIN_CAPTURES = 6
    COMPARISON_SEEDS = range(3)
    SIZE = 64
    GRID = 64

    def test_phase_encoder_has_degree_one(self):
        self.encode_phase_model_and_verify_degree(self.build_translation_dataset(size=8, grid=8))

    @pytest.mark.slow
    def test_most_seeds_capture_the_shift_torus(self):
        self.sweep_seeds_and_verify_capture_rate(self.build_translation_dataset(self.SIZE, self.GRID), self.SEEDS, self.MIN_CAPTURES)

    @pytest.mark.slow
    def test_flat_torus_beats_the_sphere(self):
        self.compare_torus_with_sphere_and_verify(self.build_translation_dataset(self.SIZE, self.GRID), self.COMPARISON_SEEDS)
