import pytest

from lib.cli.action_layer import CliActionLayer
from lib.cli.cli_constants import ExitCodes


class TestGenData(CliActionLayer):
    """
    Test Layer: the gen-data command.
    """

    def test_simple_dataset(self):
        self.generate_dataset_and_verify()

    def test_random_fourier_dataset_is_reproducible(self):
        self.generate_dataset_twice_and_verify_identical(["--mode", "random-fourier", "--seed", "3"])

    def test_complicated_preset(self):
        self.generate_dataset_and_verify(extra=["--preset", "too-complicated", "--seed", "1"])

    def test_missing_output_is_a_usage_error(self):
        self.run_cli_and_verify_exit(["gen-data"], ExitCodes.USAGE)

    def test_grid_must_divide_the_size(self):
        self.run_cli_and_verify_exit(["gen-data", "--size", "8", "--grid", "3", "--out", self.path("bad")], ExitCodes.USAGE)


class TestTrainAndEvaluate(CliActionLayer):
    """
    Test Layer: train, eval and latents on a tiny translation dataset.
    """

    @pytest.fixture(autouse=True)
    def setup_dataset(self, setup_workspace):
        self.dataset_path = self.generate_dataset_and_verify()

    def test_training_is_reproducible(self):
        self.train_twice_and_verify_identical_metrics(self.dataset_path)

    def test_config_file_is_honored(self):
        config_path = self.write_config_file("run.txt", {"manifold": "sphere2", "t-min": 1e-3, "t_max": 4e-3})
        self.train_and_verify_run_directory(self.dataset_path, manifold="sphere2", epochs=1, extra=["--config", config_path])

    def test_resume_takes_settings_from_the_checkpoint(self):
        run_dir = self.train_and_verify_run_directory(self.dataset_path, manifold="sphere2", epochs=1, extra=["--likelihood", "bernoulli"])
        expected = {"manifold": "sphere2", "likelihood": "bernoulli", "kl_mode": "asymptotic"}
        self.resume_and_verify_checkpoint_settings(run_dir, self.dataset_path, expected)

    def test_toy_run_reports_degree_one(self):
        self.train_toy_run_and_verify_degree(self.generate_dataset_and_verify("phase-data", size=8, grid=8))

    def test_unknown_config_key_is_a_usage_error(self):
        config_path = self.write_config_file("bad.txt", {"learning_speed": 3})
        self.run_cli_and_verify_exit(["train", "--config", config_path, "--dataset", self.dataset_path], ExitCodes.USAGE)

    def test_missing_dataset_is_an_io_error(self):
        argv = ["train", "--dataset", self.path("nowhere.dvaeds"), "--epochs", "1", "--out", self.path("runs")]
        self.run_cli_and_verify_exit(argv, ExitCodes.IO)

    def test_evaluation_writes_a_report(self):
        run_dir = self.train_and_verify_run_directory(self.dataset_path, epochs=1)
        self.evaluate_checkpoint_and_verify(run_dir, self.dataset_path)

    def test_missing_checkpoint_is_an_io_error(self):
        argv = ["eval", "--checkpoint", self.path("missing.bin"), "--dataset", self.dataset_path]
        self.run_cli_and_verify_exit(argv, ExitCodes.IO)

    def test_torus_latents_report_a_winding_matrix(self):
        run_dir = self.train_and_verify_run_directory(self.dataset_path, manifold="flat-torus", epochs=1)
        self.export_latents_via_cli_and_verify(run_dir, self.dataset_path, ["manifold", "winding"])

    def test_sphere_latents_report_coverage(self):
        run_dir = self.train_and_verify_run_directory(self.dataset_path, manifold="sphere2", epochs=1)
        self.export_latents_via_cli_and_verify(run_dir, self.dataset_path, ["manifold", "sphere_coverage"])


class TestCheckCommands(CliActionLayer):
    """
    Test Layer: the kernel-check and grad-check validation commands.
    """

    def test_grad_check_passes(self):
        self.run_check_command_and_verify_report(["grad-check", "--manifolds", "circle", "sphere2"], "grad-check.csv")

    def test_flat_torus_kernel_check_passes(self):
        argv = ["kernel-check", "--manifold", "flat-torus", "--samples", "10000"]
        self.run_check_command_and_verify_report(argv, "kernel-check.csv")

    @pytest.mark.slow
    def test_circle_kernel_check_passes(self):
        self.run_check_command_and_verify_report(["kernel-check", "--manifold", "circle"], "kernel-check.csv")
