import csv
import json
import os

import pytest

from lib.cli.cli_constants import CliDefaults, ExitCodes
from lib.cli.main import load_images, load_model, main, train_config_from
from lib.cli.run_config import load_run_config
from lib.data.physical_layer import read_dataset
from lib.dvae.dvae_constants import TrainingDefaults
from lib.dvae.physical_layer import model_to_record, read_history_csv, train
from lib.nets.checkpoint import write_checkpoint
from lib.topology.action_layer import phase_encoder_model

TINY_RUN = ("width=8", "encoder_layers=1", "decoder_layers=1", "walk_steps=4", "batch_size=8")


class CliActionLayer:
    """
    Action Layer: drives the dvae command line end to end inside a temporary workspace.
    """

    @pytest.fixture(autouse=True)
    def setup_workspace(self, tmp_path):
        self.workspace = str(tmp_path)

    def path(self, *parts):
        return os.path.join(self.workspace, *parts)

    def run_cli_and_verify_exit(self, argv, expected=ExitCodes.OK):
        code = main(["--log-level", "WARNING"] + list(argv))
        assert code == expected, f"dvae {' '.join(argv)} exited {code}, expected {expected}"
        return code

    def generate_dataset_and_verify(self, name="data", size=8, grid=4, extra=()):
        out = self.path(name)
        self.run_cli_and_verify_exit(["gen-data", "--size", str(size), "--grid", str(grid), "--out", out] + list(extra))
        dataset_path = os.path.join(out, CliDefaults.DATASET_FILE)
        dataset = read_dataset(dataset_path)
        assert dataset.images.shape == (grid * grid, size, size), f"dataset shape {dataset.images.shape}"
        return dataset_path

    def generate_dataset_twice_and_verify_identical(self, extra=()):
        contents = []
        for name in ("first", "second"):
            with open(self.generate_dataset_and_verify(name, extra=extra), "rb") as handle:
                contents.append(handle.read())
        assert contents[0] == contents[1], "gen-data with the same seed wrote different bytes"

    def write_config_file(self, name, values):
        config_path = self.path(name)
        with open(config_path, "w", encoding="utf-8") as handle:
            handle.write("# run configuration\n")
            for key, value in values.items():
                handle.write(f"{key} = {value}\n")
        return config_path

    def train_and_verify_run_directory(self, dataset_path, manifold="flat-torus", epochs=2, seed=0, extra=()):
        """
        Trains a tiny model and checks the run directory holds config, checkpoint and one metrics row per epoch.

        Returns:
            str: The run directory.
        """
        runs = self.path("runs")
        before = set(os.listdir(runs)) if os.path.isdir(runs) else set()
        argv = [
            "train", "--dataset", dataset_path, "--manifold", manifold, "--epochs", str(epochs),
            "--seed", str(seed), "--out", runs,
        ]
        for item in TINY_RUN:
            argv += ["--set", item]
        self.run_cli_and_verify_exit(argv + list(extra))
        created = sorted(set(os.listdir(runs)) - before)
        assert len(created) == 1, f"expected one new run directory, got {created}"
        run_dir = os.path.join(runs, created[0])
        for name in (CliDefaults.CONFIG_FILE, CliDefaults.CHECKPOINT_FILE, CliDefaults.METRICS_FILE):
            assert os.path.isfile(os.path.join(run_dir, name)), f"{name} missing from {run_dir}"
        with open(os.path.join(run_dir, CliDefaults.METRICS_FILE), newline="", encoding="utf-8") as handle:
            rows = list(csv.reader(handle))
        assert tuple(rows[0]) == TrainingDefaults.HISTORY_COLUMNS, f"metrics header {rows[0]}"
        assert len(rows) == epochs + 1, f"{len(rows) - 1} metrics rows for {epochs} epochs"
        return run_dir

    def train_twice_and_verify_identical_metrics(self, dataset_path, manifold="circle", epochs=2):
        metrics = []
        for _ in range(2):
            run_dir = self.train_and_verify_run_directory(dataset_path, manifold, epochs)
            with open(os.path.join(run_dir, CliDefaults.METRICS_FILE), "rb") as handle:
                metrics.append(handle.read())
        assert metrics[0] == metrics[1], "same configuration produced different metrics"

    def evaluate_checkpoint_and_verify(self, run_dir, dataset_path, samples=3):
        checkpoint = os.path.join(run_dir, CliDefaults.CHECKPOINT_FILE)
        self.run_cli_and_verify_exit(["eval", "--checkpoint", checkpoint, "--dataset", dataset_path, "--L", str(samples)])
        eval_path = os.path.join(run_dir, CliDefaults.EVAL_FILE)
        with open(eval_path, encoding="utf-8") as handle:
            lines = [line for line in handle.read().splitlines() if line and not line.startswith("#")]
        assert len(lines) == 2, f"eval file should hold a header and one row, got {lines}"
        return eval_path

    def export_latents_via_cli_and_verify(self, run_dir, dataset_path, expected_keys):
        checkpoint = os.path.join(run_dir, CliDefaults.CHECKPOINT_FILE)
        self.run_cli_and_verify_exit(["latents", "--checkpoint", checkpoint, "--dataset", dataset_path, "--resolution", "2"])
        assert os.path.isfile(os.path.join(run_dir, CliDefaults.LATENTS_FILE)), "latents.csv missing"
        with open(os.path.join(run_dir, CliDefaults.TOPOLOGY_FILE), encoding="utf-8") as handle:
            report = json.load(handle)
        missing = set(expected_keys) - set(report)
        assert not missing, f"topology report lacks {sorted(missing)}: {report}"
        return report

    def run_check_command_and_verify_report(self, argv, report_name):
        report_path = self.path(report_name)
        self.run_cli_and_verify_exit(list(argv) + ["--out", report_path])
        with open(report_path, newline="", encoding="utf-8") as handle:
            rows = list(csv.DictReader(handle))
        assert rows, f"{report_name} holds no checks"
        assert all(row["passed"] == "pass" for row in rows), f"failed checks in {report_name}: {rows}"
        return rows

    def resume_and_verify_checkpoint_settings(self, run_dir, dataset_path, expected, epochs=1):
        """
        Resumes run_dir's checkpoint under conflicting command-line defaults and
        checks the new run is named, configured and trained as the checkpoint says.

        Returns:
            str: The resumed run directory.
        """
        checkpoint = os.path.join(run_dir, CliDefaults.CHECKPOINT_FILE)
        resumed = self.train_and_verify_run_directory(dataset_path, epochs=epochs, extra=["--resume", checkpoint])
        model, state, counter = load_model(checkpoint)
        assert os.path.basename(resumed).startswith(f"{model.manifold.name}-seed"), f"resumed run named {resumed}"
        config = load_run_config(os.path.join(resumed, CliDefaults.CONFIG_FILE))
        for key, value in expected.items():
            assert getattr(config, key) == value, f"resumed config.txt has {key} = {getattr(config, key)}, expected {value}"
        images, _ = load_images(dataset_path)
        reference = train(model, images, train_config_from(config), optimizer_state=state, start_epoch=counter).history
        assert read_history_csv(os.path.join(resumed, CliDefaults.METRICS_FILE)) == reference, "resumed metrics differ from the checkpoint's settings"
        return resumed

    def write_phase_checkpoint(self, dataset_path, name="phase"):
        image_size = read_dataset(dataset_path).image_shape[0]
        os.makedirs(self.path(name), exist_ok=True)
        checkpoint = self.path(name, CliDefaults.CHECKPOINT_FILE)
        write_checkpoint(checkpoint, model_to_record(phase_encoder_model(image_size), None, 0))
        return checkpoint

    def train_toy_run_and_verify_degree(self, dataset_path, epochs=1):
        """
        Trains briefly from the phase-reading encoder and checks latents reports degree +-1.
        """
        checkpoint = self.write_phase_checkpoint(dataset_path)
        resumed = self.train_and_verify_run_directory(dataset_path, epochs=epochs, extra=["--resume", checkpoint])
        report = self.export_latents_via_cli_and_verify(resumed, dataset_path, ["manifold", "winding"])
        winding = report["winding"]
        assert abs(winding["degree"]) == 1 and winding["resolved"], f"toy run winding report {winding}"
        return report
