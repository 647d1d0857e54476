class TrainingDefaults:
    # Loop
    BATCH_SIZE = 128
    EPOCHS_SYNTHETIC = 300
    EPOCHS_MNIST = 100
    EVAL_EVERY = 0

    # Likelihoods and KL modes
    LIKELIHOODS = ("gaussian", "bernoulli")
    KL_MODES = ("asymptotic", "numeric", "gaussian")
    BERNOULLI_CLIP = 1e-7

    # Evaluation
    IMPORTANCE_SAMPLES = 100
    EVAL_BATCH = 128
    KL_AUDIT_REL_TOL = 0.01

    # Stream tags mixed into seeds so training, evaluation and binarization never share noise
    EVAL_STREAM = 0xE7A1
    BINARIZE_STREAM = 0xB1A5

    # CSV layouts
    HISTORY_COLUMNS = ("epoch", "re", "kl", "elbo", "mse", "wall_seconds")
    EVAL_COLUMNS = ("manifold", "ll", "elbo", "kl", "mse_or_re", "seed", "L", "ll_stderr", "elbo_stderr", "kl_numeric")
    EVAL_HEADER = (
        "# mse_or_re is the per-pixel mean squared error in [0,1]-scaled pixel units for gaussian runs "
        "and the reconstruction error in nats per datapoint for bernoulli runs"
    )
