class ExitCodes:
    OK = 0
    USAGE = 2
    IO = 3
    TRAINING_ABORTED = 4
    VALIDATION_FAILED = 5


class CliDefaults:
    PROG = "dvae"
    LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"

    # Run directory contents
    CONFIG_FILE = "config.txt"
    CHECKPOINT_FILE = "checkpoint.bin"
    METRICS_FILE = "metrics.csv"
    EVAL_FILE = "eval.csv"
    DATASET_FILE = "pictures.dvaeds"
    LATENTS_FILE = "latents.csv"
    RECONSTRUCTION_FILE = "reconstruction.ppm"
    TOPOLOGY_FILE = "topology.json"

    # kernel-check
    KERNEL_CHECK_MANIFOLDS = ("circle", "sphere2", "flat-torus")
    KERNEL_CHECK_TIMES = {"circle": 0.25, "sphere2": 0.01, "flat-torus": 0.01}
    KERNEL_CHECK_SAMPLES = 100_000
