class PictureDefaults:
    # Sampling grid
    SIZE = 64
    GRID = 64

    # Random Fourier pictures
    CUTOFF = 3
    GAMMA = 0.5
    MODES = ("simple", "random_fourier")

    # Stock config that is too complicated for a torus encoder to capture
    TOO_COMPLICATED = {"cutoff": 10, "gamma": 0.3}

    # Dataset container
    CONTAINER_MAGIC = b"DVAEDS1\0"


class MnistDefaults:
    IMAGES_MAGIC = 2051
    LABELS_MAGIC = 2049
    ROWS = 28
    COLS = 28
    BINARIZE_MODES = ("stochastic", "threshold")

    BASE_URL = "https://ossci-datasets.s3.amazonaws.com/mnist/"
    FILES = {
        "train": ("train-images-idx3-ubyte.gz", "train-labels-idx1-ubyte.gz"),
        "test": ("t10k-images-idx3-ubyte.gz", "t10k-labels-idx1-ubyte.gz"),
    }
    TIMEOUT_SECONDS = 60
    CHUNK_BYTES = 1 << 16
