import math
import os

import numpy as np
import pytest
from scipy import stats

from lib.data.physical_layer import PictureSpec, gen_picture, grid_angles, translate_dataset
from lib.diffusion.diffusion_constants import DiffusionDefaults
from lib.diffusion.physical_layer import RandomWalkConfig
from lib.dvae.action_layer import make_decoder_constant
from lib.dvae.dvae_constants import TrainingDefaults
from lib.dvae.physical_layer import TrainConfig, build_model, train
from lib.exceptions import DomainError, UnsupportedManifold
from lib.manifolds.action_layer import ManifoldActionLayer
from lib.manifolds.physical_layer import ManifoldDescriptor, wrap_angle
from lib.topology.physical_layer import (
    decode_ppm,
    encode_latents,
    encode_ppm,
    export_latents,
    healpix_ring_index,
    latent_grid,
    reconstruction_grid,
    shift_color,
    sphere_coverage,
    torus_degree,
)
from lib.validation import CompositeCheckRunner


def shift_angles(grid):
    return -math.pi + 2.0 * math.pi * np.arange(grid) / grid


def identity_torus_angles(grid, u_winding=1, v_winding=1):
    """
    (G, G, 2) angles with u winding u_winding times along i and v winding v_winding times along j.
    """
    rows, cols = np.meshgrid(shift_angles(grid), shift_angles(grid), indexing="ij")
    return np.stack([wrap_angle(u_winding * rows), wrap_angle(v_winding * cols)], axis=-1)


def phase_encoder_model(image_size):
    """
    Flat-torus model whose linear encoder reads the first Fourier phase of the
    rows and of the columns, so every translation lands on its own shift angles.
    """
    angles = grid_angles(image_size)
    rows, cols = np.repeat(angles, image_size), np.tile(angles, image_size)
    model = build_model(
        ManifoldDescriptor.flat_torus(), image_size * image_size, np.random.default_rng(0),
        width=4, encoder_layers=1, decoder_layers=1, activation="identity",
    )
    trunk = model.encoder.trunk.layers[0]
    trunk.weights[:] = np.stack([np.cos(rows), np.sin(rows), np.cos(cols), np.sin(cols)])
    trunk.bias[:] = 0.0
    ambient = model.encoder.head.ambient_out
    ambient.weights[:] = np.eye(4)
    ambient.bias[:] = 0.0
    return model


def build_full_model(manifold_name, data_dim, seed):
    """
    A model with the command-line training defaults.
    """
    return build_model(
        ManifoldDescriptor.from_name(manifold_name),
        data_dim,
        np.random.default_rng(seed),
        t_min=DiffusionDefaults.T_MIN,
        t_max=DiffusionDefaults.T_MAX,
        walk=RandomWalkConfig(steps=DiffusionDefaults.WALK_STEPS, seed=seed),
    )


class TopologyActionLayer(ManifoldActionLayer, CompositeCheckRunner):
    """
    Action Layer: self-verifying checks of degrees, coverage, palettes and latent exports.
    """

    @pytest.fixture(autouse=True)
    def setup_model_factory(self, tiny_model_factory):
        self.build_model = tiny_model_factory

    def compute_degree_and_verify(self, angles, expected_matrix, expected_degree, resolved=True):
        result = torus_degree(angles)
        assert np.array_equal(result.matrix, expected_matrix), f"winding matrix {result.matrix.tolist()}, expected {expected_matrix}"
        assert result.degree == expected_degree, f"degree {result.degree}, expected {expected_degree}"
        assert result.resolved is resolved, f"resolved {result.resolved}, expected {resolved}"
        return result

    def verify_degree_rotation_invariant(self, angles, offset):
        rotated = wrap_angle(angles + np.asarray(offset))
        before, after = torus_degree(angles), torus_degree(rotated)
        assert np.array_equal(before.matrix, after.matrix), f"rotation by {offset} changed {before.matrix.tolist()} to {after.matrix.tolist()}"
        assert before.resolved == after.resolved, "rotation changed the resolved flag"

    def verify_degree_reflection(self, angles):
        reflected = angles.copy()
        reflected[..., 0] = wrap_angle(-angles[..., 0])
        before, after = torus_degree(angles), torus_degree(reflected)
        assert after.degree == -before.degree, f"reflection gave degree {after.degree}, expected {-before.degree}"

    def compute_degree_with_coarse_steps_and_expect_unresolved(self, grid):
        """
        u winding once along i on a grid too coarse for the step guard.
        """
        result = torus_degree(identity_torus_angles(grid))
        assert result.resolved is False, f"grid {grid} with steps {2 * math.pi / grid:.3f} should be unresolved"
        return result

    def compute_degree_with_disagreeing_loops_and_expect_unresolved(self, grid):
        """
        Half the j-loops wind u once along i, the other half not at all.
        """
        angles = identity_torus_angles(grid)
        angles[:, grid // 2:, 0] = 0.0
        result = torus_degree(angles)
        assert result.resolved is False, f"disagreeing loops reported resolved with matrix {result.matrix.tolist()}"
        return result

    def measure_sphere_coverage_and_verify(self, points, expected=None, minimum=None, nside=4):
        coverage = sphere_coverage(points, nside)
        if expected is not None:
            assert coverage == expected, f"coverage {coverage}, expected {expected}"
        if minimum is not None:
            assert coverage >= minimum, f"coverage {coverage} below {minimum}"
        return coverage

    def measure_sphere_coverage_off_sphere_and_expect_error(self, points):
        with pytest.raises(DomainError):
            sphere_coverage(points)

    def verify_healpix_cells_equal_area(self, nside, samples, p_floor=1e-4):
        """
        Uniform sphere samples must fill the 12 nside^2 cells evenly (chi-square).
        """
        sphere = self.build_geometry("sphere2")
        points = sphere.uniform_sample(self.rng, samples)
        polar = np.arccos(np.clip(points[:, 2], -1.0, 1.0))
        index = healpix_ring_index(polar, np.arctan2(points[:, 1], points[:, 0]), nside)
        cells = 12 * nside * nside
        assert index.min() >= 0 and index.max() < cells, f"cell indices span {index.min()}..{index.max()}"
        counts = np.bincount(index, minlength=cells)
        p_value = stats.chisquare(counts).pvalue
        assert p_value > p_floor, f"cell counts are uneven: chi-square p = {p_value:.2e}"
        return p_value

    def verify_palette_periodic(self, grid, rows=(0, 1, 5), cols=(0, 3)):
        for i in rows:
            for j in cols:
                assert shift_color(i + grid, j, grid) == shift_color(i, j, grid), f"color of ({i + grid}, {j}) differs from ({i}, {j})"
                assert shift_color(i, j + grid, grid) == shift_color(i, j, grid), f"color of ({i}, {j + grid}) differs from ({i}, {j})"

    def verify_palette_color(self, i, j, grid, expected):
        color = shift_color(i, j, grid)
        assert color == expected, f"color of ({i}, {j}) is {color}, expected {expected}"

    def build_translation_dataset(self, size=8, grid=8, mode="simple", seed=0):
        return translate_dataset(gen_picture(PictureSpec(mode=mode, seed=seed), size), grid)

    def encode_latent_grid_and_verify(self, manifold_name, dataset):
        model = self.build_model(manifold_name, data_dim=int(np.prod(dataset.image_shape)))
        grid = latent_grid(model, dataset)
        assert grid.coords.shape[:2] == (dataset.grid, dataset.grid), f"latent grid shape {grid.coords.shape}"
        assert np.all(grid.times > 0.0), "non-positive diffusion times in the latent grid"
        if grid.angles is not None:
            assert grid.angles.shape == (dataset.grid, dataset.grid, 2), f"angle grid shape {grid.angles.shape}"
        return model, grid

    def export_latents_and_verify(self, model, dataset, directory):
        path = os.path.join(directory, "latents.csv")
        rows = export_latents(model, dataset.flat(), dataset.shifts, dataset.grid, path)
        with open(path, encoding="utf-8") as handle:
            lines = handle.read().splitlines()
        assert rows == len(dataset.images), f"{rows} rows for {len(dataset.images)} datapoints"
        assert lines[0].startswith("# palette"), f"missing palette header: {lines[0]!r}"
        assert len(lines) == rows + 2, f"{len(lines)} lines for {rows} rows"
        first = lines[2].split(",")
        assert first[-1] == shift_color(0, 0, dataset.grid), f"shift (0, 0) color {first[-1]}"
        return path

    def export_latents_twice_and_verify_identical(self, model, dataset, directory):
        contents = []
        for name in ("first.csv", "second.csv"):
            path = os.path.join(directory, name)
            export_latents(model, dataset.flat(), dataset.shifts, dataset.grid, path)
            with open(path, "rb") as handle:
                contents.append(handle.read())
        assert contents[0] == contents[1], "latent exports differ between runs"

    def reconstruct_and_verify_tiles(self, model, resolution, image_shape, expected_tiles):
        """
        Checks the mosaic size: expected_tiles = (rows, cols).
        """
        rgb = reconstruction_grid(model, resolution, image_shape)
        rows, cols = expected_tiles
        expected = (rows * image_shape[0], cols * image_shape[1], 3)
        assert rgb.shape == expected, f"mosaic shape {rgb.shape}, expected {expected}"
        assert np.array_equal(rgb[..., 0], rgb[..., 2]), "mosaic is not grayscale"
        return rgb

    def reconstruct_with_constant_decoder_and_verify_identical_tiles(self, model, resolution, image_shape):
        make_decoder_constant(model, 0.25)
        rgb = reconstruction_grid(model, resolution, image_shape)
        assert np.all(rgb == rgb[0, 0]), "constant decoder produced differing tiles"
        return rgb

    def reconstruct_unsupported_and_expect_error(self, model, image_shape):
        with pytest.raises(UnsupportedManifold):
            reconstruction_grid(model, 2, image_shape)

    def round_trip_ppm_and_verify(self, rgb):
        decoded = decode_ppm(encode_ppm(rgb))
        assert np.array_equal(decoded, rgb), "PPM round trip changed pixels"

    def encode_phase_model_and_verify_degree(self, dataset):
        model = phase_encoder_model(dataset.image_shape[0])
        result = torus_degree(latent_grid(model, dataset).angles)
        assert abs(result.degree) == 1, f"phase encoder degree {result.degree}, matrix {result.matrix.tolist()}"
        assert result.resolved, f"phase encoder windings unresolved: {result.raw.tolist()}"
        return result

    def train_and_verify_capture(self, model, dataset, epochs, seed, max_mse):
        """
        Trains one model and checks it maps the shift torus onto the latent torus
        with degree +-1 while reconstructing within max_mse.

        Returns:
            float: Final training MSE.
        """
        history = train(model, dataset.flat(), TrainConfig(epochs=epochs, seed=seed)).history
        mse = history[-1].mse
        result = torus_degree(latent_grid(model, dataset).angles)
        assert result.resolved and abs(result.degree) == 1, (
            f"seed {seed}: degree {result.degree} (resolved={result.resolved}), raw windings {result.raw.tolist()}"
        )
        assert mse <= max_mse, f"seed {seed}: final mse {mse:.3e} above {max_mse}"
        return mse

    def sweep_seeds_and_verify_capture_rate(self, dataset, seeds, min_captures, epochs=TrainingDefaults.EPOCHS_SYNTHETIC, max_mse=2e-2):
        """
        Composite action: one flat-torus training run per seed, each recorded as a
        capture check; at least min_captures runs must pass.

        Returns:
            list[CheckOutcome]: One row per seed.
        """
        outcomes = []
        for seed in seeds:
            model = build_full_model("flat-torus", int(np.prod(dataset.image_shape)), seed)
            self.run_check(
                outcomes, "shift torus capture", f"flat-torus-seed{seed}", max_mse,
                self.train_and_verify_capture, model, dataset, epochs, seed, max_mse,
            )
        captured = [o.value for o in outcomes if o.passed]
        failures = [o.detail for o in outcomes if not o.passed]
        assert len(captured) >= min_captures, (
            f"{len(captured)}/{len(outcomes)} seeds captured the shift torus, need {min_captures}; failures: {failures}"
        )
        return outcomes

    def train_and_measure(self, manifold_name, dataset, seed, epochs):
        model = build_full_model(manifold_name, int(np.prod(dataset.image_shape)), seed)
        history = train(model, dataset.flat(), TrainConfig(epochs=epochs, seed=seed)).history
        return model, history[-1].mse

    def compare_torus_with_sphere_and_verify(self, dataset, seeds, epochs=TrainingDefaults.EPOCHS_SYNTHETIC, max_coverage=0.9):
        """
        Flat-torus latents must reconstruct translations better than 2-sphere
        latents (median MSE over seeds) and find the shift torus, while every
        sphere run leaves part of the sphere unused.

        Returns:
            dict: Per-manifold MSE lists and the sphere coverages.
        """
        torus_mse, sphere_mse, coverages, degrees = [], [], [], []
        for seed in seeds:
            model, mse = self.train_and_measure("flat-torus", dataset, seed, epochs)
            torus_mse.append(mse)
            degrees.append(torus_degree(latent_grid(model, dataset).angles))
            model, mse = self.train_and_measure("sphere2", dataset, seed, epochs)
            sphere_mse.append(mse)
            centers, _ = encode_latents(model, dataset.flat())
            coverages.append(sphere_coverage(centers))
        summary = (
            f"torus mse {np.mean(torus_mse):.3e} +- {np.std(torus_mse):.1e}, "
            f"sphere mse {np.mean(sphere_mse):.3e} +- {np.std(sphere_mse):.1e}"
        )
        assert np.median(torus_mse) < np.median(sphere_mse), f"torus does not beat the sphere: {summary}"
        assert max(coverages) < max_coverage, f"sphere coverages {coverages} reach {max_coverage}"
        captured = [r for r in degrees if r.resolved and abs(r.degree) == 1]
        assert 2 * len(captured) > len(degrees), f"only {len(captured)}/{len(degrees)} torus runs have degree +-1; {summary}"
        return {"flat-torus": torus_mse, "sphere2": sphere_mse, "coverage": coverages}
