import copy
import csv
import logging
import math
import time as wallclock
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from lib.diffusion.physical_layer import (
    KernelSeriesConfig,
    NumericKlTable,
    RandomWalkConfig,
    heat_kernel_log_density,
    kl_asymptotic_terms,
    prior_log_density,
    random_walk_batch,
)
from lib.dvae.dvae_constants import TrainingDefaults
from lib.exceptions import DegenerateWeights, DomainError, NonFiniteLoss, TrainingAborted, UnsupportedManifold
from lib.manifolds.physical_layer import ManifoldDescriptor, ManifoldGeometry, ManifoldKind
from lib.nets.checkpoint import CheckpointRecord
from lib.nets.nets_constants import NetDefaults
from lib.nets.physical_layer import (
    AdamHyper,
    AdamState,
    DenseLayer,
    Encoder,
    EncoderHead,
    MlpNetwork,
    adam_step,
    build_decoder,
    build_encoder,
    decode,
    decode_backward,
    encode,
    encode_backward,
)

logger = logging.getLogger(__name__)

_LOG_2PI = math.log(2.0 * math.pi)


@dataclass
class DvaeModel:
    """
    A diffusion VAE: latent manifold, encoder, decoder, walk settings,
    likelihood and KL mode. kl_mode is 'gaussian' exactly when the latent
    space is Euclidean; projective latents decode through the even feature map.
    """
    manifold: ManifoldDescriptor
    encoder: Encoder
    decoder: MlpNetwork
    walk: RandomWalkConfig
    likelihood: str = "gaussian"
    kl_mode: str = "asymptotic"
    kernel: KernelSeriesConfig = None
    kl_table: NumericKlTable = field(default=None, repr=False)

    def __post_init__(self):
        self.geometry = ManifoldGeometry(self.manifold)
        euclidean = self.manifold.kind is ManifoldKind.EUCLIDEAN
        if self.likelihood not in TrainingDefaults.LIKELIHOODS:
            raise DomainError(f"unknown likelihood '{self.likelihood}'")
        if self.kl_mode not in TrainingDefaults.KL_MODES:
            raise DomainError(f"unknown kl_mode '{self.kl_mode}'")
        if (self.kl_mode == "gaussian") != euclidean:
            raise DomainError(f"kl_mode '{self.kl_mode}' does not fit manifold {self.manifold.name}")
        if self.kernel is None:
            self.kernel = KernelSeriesConfig.covering(self.t_min, self.t_max)
        if self.kl_mode == "numeric" and self.kl_table is None:
            self.kl_table = NumericKlTable(self.geometry, self.t_min, self.t_max, self.kernel)

    @property
    def t_min(self):
        return self.encoder.head.t_min

    @property
    def t_max(self):
        return self.encoder.head.t_max

    @property
    def data_dim(self):
        return self.encoder.trunk.input_dim

    def parameters(self):
        return self.encoder.parameters() + self.decoder.parameters()


def build_model(
    descriptor,
    data_dim,
    rng,
    width=NetDefaults.HIDDEN_WIDTH,
    encoder_layers=NetDefaults.ENCODER_HIDDEN_LAYERS,
    decoder_layers=NetDefaults.DECODER_HIDDEN_LAYERS,
    activation=NetDefaults.HIDDEN_ACTIVATION,
    t_min=1e-4,
    t_max=4e-3,
    walk=None,
    likelihood="gaussian",
    kl_mode=None,
):
    """
    Initializes a model with freshly drawn weights.

    Args:
        descriptor (ManifoldDescriptor): Latent manifold.
        data_dim (int): Pixels per datapoint.
        rng (np.random.Generator): Initialization stream.
        kl_mode (str, optional): Defaults to 'gaussian' for Euclidean latents and 'asymptotic' otherwise.

    Returns:
        DvaeModel: The model.
    """
    geometry = ManifoldGeometry(descriptor)
    if kl_mode is None:
        kl_mode = "gaussian" if descriptor.kind is ManifoldKind.EUCLIDEAN else "asymptotic"
    encoder = build_encoder(geometry, data_dim, width, encoder_layers, activation, t_min, t_max, rng)
    decoder = build_decoder(geometry, data_dim, width, decoder_layers, activation, rng)
    return DvaeModel(descriptor, encoder, decoder, walk or RandomWalkConfig(), likelihood, kl_mode)


@dataclass
class LossBreakdown:
    re: float
    kl: float
    elbo: float
    mse: float


@dataclass
class _ForwardPass:
    re: np.ndarray
    kl: np.ndarray
    mse: np.ndarray
    d_re_d_beta: np.ndarray
    d_kl_d_first: np.ndarray
    d_kl_d_second: np.ndarray
    encoded: object
    decoder_cache: dict
    walk: object = None
    noise: np.ndarray = None


def log_likelihood(likelihood, x, beta):
    """
    Per-datapoint log p(x | beta) and its gradient with respect to beta.

    Gaussian: identity covariance, including the -(D/2) log 2 pi constant.
    Bernoulli: cross-entropy with beta clipped to [1e-7, 1 - 1e-7].
    """
    if likelihood == "gaussian":
        residual = x - beta
        value = -0.5 * np.sum(residual ** 2, axis=-1) - 0.5 * x.shape[-1] * _LOG_2PI
        return value, residual
    clip = TrainingDefaults.BERNOULLI_CLIP
    p = np.clip(beta, clip, 1.0 - clip)
    value = np.sum(x * np.log(p) + (1.0 - x) * np.log1p(-p), axis=-1)
    return value, (x - p) / (p * (1.0 - p))


def _forward(model, batch, rng, noise=None):
    geometry = model.geometry
    encoded = encode(model.encoder, geometry, batch)
    if model.kl_mode == "gaussian":
        if noise is None:
            noise = rng.standard_normal(encoded.mean.shape)
        std = np.exp(0.5 * encoded.logvar)
        latent = encoded.mean + std * noise
        var = std ** 2
        kl = 0.5 * np.sum(var + encoded.mean ** 2 - 1.0 - encoded.logvar, axis=-1)
        d_first, d_second = encoded.mean, 0.5 * (var - 1.0)
        walk = None
    else:
        walk = random_walk_batch(geometry, encoded.centers, encoded.times, model.walk, rng, with_jacobians=True, noise=noise)
        latent = walk.points
        if model.kl_mode == "numeric":
            kl = model.kl_table.value(encoded.times)
            d_second = model.kl_table.derivative(encoded.times)
            d_first = np.zeros_like(encoded.centers)
        else:
            kl, d_second, d_first = kl_asymptotic_terms(geometry, encoded.centers, encoded.times)
    beta, decoder_cache = decode(model.decoder, geometry, latent)
    log_p, d_log_p = log_likelihood(model.likelihood, batch, beta)
    return _ForwardPass(
        re=-log_p,
        kl=np.asarray(kl, dtype=np.float64),
        mse=np.mean((batch - beta) ** 2, axis=-1),
        d_re_d_beta=-d_log_p,
        d_kl_d_first=d_first,
        d_kl_d_second=d_second,
        encoded=encoded,
        decoder_cache=decoder_cache,
        walk=walk,
        noise=noise,
    )


def _diagnostics(model, batch, forward=None):
    info = {"manifold": model.manifold.name, "batch": int(len(batch))}
    if forward is not None:
        info.update(
            re=float(np.mean(forward.re)),
            kl=float(np.mean(forward.kl)),
            max_raw_norm=float(np.max(np.linalg.norm(forward.encoded.raw, axis=-1))),
        )
        if forward.encoded.times is not None:
            info.update(t_low=float(forward.encoded.times.min()), t_high=float(forward.encoded.times.max()))
    return info


def elbo_loss(model, batch, rng, noise=None):
    """
    Batch-averaged negative ELBO with pathwise gradients through encoder,
    projection, random walk and decoder.

    Args:
        model (DvaeModel): The model.
        batch (np.ndarray): Data, shape (B, D), pixels in [0, 1].
        rng (np.random.Generator): Walk noise stream.
        noise (np.ndarray, optional): Frozen noise, (N, B, n) for closed manifolds or (B, d) for Euclidean.

    Returns:
        tuple: (LossBreakdown, GradientSet aligned with model.parameters()).

    Raises:
        NonFiniteLoss: If the loss or any gradient is NaN or infinite.
    """
    batch = np.atleast_2d(np.asarray(batch, dtype=np.float64))
    if batch.shape[0] == 0:
        raise DomainError("elbo_loss needs a non-empty batch")
    count = batch.shape[0]
    forward = _forward(model, batch, rng, noise)
    re = float(np.mean(forward.re))
    kl = float(np.mean(forward.kl))
    breakdown = LossBreakdown(re=re, kl=kl, elbo=-(re + kl), mse=float(np.mean(forward.mse)))
    if not (math.isfinite(re) and math.isfinite(kl)):
        raise NonFiniteLoss(f"non-finite loss re={re} kl={kl}", _diagnostics(model, batch, forward))

    geometry = model.geometry
    decoder_grads, g_latent = decode_backward(model.decoder, geometry, forward.decoder_cache, forward.d_re_d_beta / count)
    if model.kl_mode == "gaussian":
        encoded = forward.encoded
        std = np.exp(0.5 * encoded.logvar)
        g_first = g_latent + forward.d_kl_d_first / count
        g_second = g_latent * forward.noise * 0.5 * std + forward.d_kl_d_second / count
    else:
        walk = forward.walk
        g_first = np.einsum("bij,bi->bj", walk.d_center, g_latent) + forward.d_kl_d_first / count
        g_second = np.einsum("bi,bi->b", walk.d_time, g_latent) + forward.d_kl_d_second / count
    encoder_grads, _ = encode_backward(model.encoder, geometry, forward.encoded, g_first, g_second)
    grads = encoder_grads + decoder_grads
    if not grads.is_finite():
        raise NonFiniteLoss("non-finite gradient", _diagnostics(model, batch, forward))
    return breakdown, grads


def per_datapoint_terms(model, batch, rng):
    """
    One-sample RE, KL and MSE for every datapoint, without gradients.
    """
    forward = _forward(model, np.atleast_2d(np.asarray(batch, dtype=np.float64)), rng)
    return forward.re, forward.kl, forward.mse


@dataclass(frozen=True)
class TrainConfig:
    epochs: int
    batch_size: int = TrainingDefaults.BATCH_SIZE
    seed: int = 0
    lr: float = NetDefaults.LEARNING_RATE
    beta1: float = NetDefaults.BETA1
    beta2: float = NetDefaults.BETA2
    adam_eps: float = NetDefaults.ADAM_EPSILON
    eval_every: int = TrainingDefaults.EVAL_EVERY
    binarize: bool = False
    record_wall_time: bool = False


@dataclass
class HistoryRow:
    epoch: int
    re: float
    kl: float
    elbo: float
    mse: float
    wall_seconds: float


@dataclass
class TrainResult:
    model: DvaeModel
    history: list
    optimizer_state: AdamState


def _snapshot(model, state):
    return copy.deepcopy(model.encoder), copy.deepcopy(model.decoder), copy.deepcopy(state)


def train(model, images, config, optimizer_state=None, start_epoch=0, on_epoch=None):
    """
    Minibatch Adam training of the negative ELBO.

    Epoch e draws its shuffle, binarization and walk noise from
    default_rng([seed, e]), so runs are bit-reproducible and resumable.

    Args:
        model (DvaeModel): Trained in place.
        images (np.ndarray): Dataset, shape (count, D), pixels in [0, 1].
        config (TrainConfig): Loop settings.
        optimizer_state (AdamState, optional): Resume state.
        start_epoch (int, optional): Epochs already completed.
        on_epoch (callable, optional): Called as on_epoch(model, history, optimizer_state) after each epoch.

    Returns:
        TrainResult: Model, per-epoch history and optimizer state.

    Raises:
        DomainError: On an empty dataset.
        TrainingAborted: On a non-finite loss; carries the last-good model.
    """
    images = np.asarray(images, dtype=np.float64)
    if images.shape[0] == 0:
        raise DomainError("cannot train on an empty dataset")
    params = model.parameters()
    state = optimizer_state or AdamState.zeros_like(params)
    hyper = AdamHyper(config.lr, config.beta1, config.beta2, config.adam_eps)
    history = []
    for epoch in range(start_epoch + 1, start_epoch + config.epochs + 1):
        started = wallclock.perf_counter()
        rng = np.random.default_rng([config.seed, epoch])
        last_good = _snapshot(model, state)
        data = images
        if config.binarize:
            data = (rng.random(images.shape) < images).astype(np.float64)
        order = rng.permutation(len(data))
        totals = np.zeros(4)
        try:
            for start in range(0, len(order), config.batch_size):
                batch = data[order[start: start + config.batch_size]]
                breakdown, grads = elbo_loss(model, batch, rng)
                adam_step(params, grads, state, hyper)
                totals += len(batch) * np.array([breakdown.re, breakdown.kl, breakdown.elbo, breakdown.mse])
            if not all(np.all(np.isfinite(p)) for p in params):
                raise NonFiniteLoss("parameters became non-finite", _diagnostics(model, data))
        except NonFiniteLoss as error:
            model.encoder, model.decoder, state = last_good
            logger.error("epoch %d: %s %s", epoch, error, error.diagnostics)
            raise TrainingAborted(f"training aborted at epoch {epoch}: {error}", model, history, error, state) from error
        re, kl, elbo, mse = totals / len(data)
        wall = wallclock.perf_counter() - started if config.record_wall_time else 0.0
        history.append(HistoryRow(epoch, float(re), float(kl), float(elbo), float(mse), wall))
        logger.info("epoch %d: re=%.4f kl=%.4f elbo=%.4f mse=%.6f", epoch, re, kl, elbo, mse)
        if config.eval_every and epoch % config.eval_every == 0:
            check = np.random.default_rng([config.seed, epoch, TrainingDefaults.EVAL_STREAM])
            re_all, kl_all, mse_all = per_datapoint_terms(model, data[: TrainingDefaults.EVAL_BATCH], check)
            logger.info(
                "epoch %d eval: re=%.4f kl=%.4f mse=%.6f", epoch, re_all.mean(), kl_all.mean(), mse_all.mean()
            )
        if on_epoch is not None:
            on_epoch(model, history, state)
    return TrainResult(model, history, state)


def latent_log_weights(model, batch, samples, rng):
    """
    log p(x|beta(y)) + log prior(y) - log q(y) for `samples` draws per datapoint; shape (samples, B).
    """
    geometry = model.geometry
    encoded = encode(model.encoder, geometry, batch)
    weights = np.empty((samples, len(batch)))
    for draw in range(samples):
        if model.kl_mode == "gaussian":
            noise = rng.standard_normal(encoded.mean.shape)
            latent = encoded.mean + np.exp(0.5 * encoded.logvar) * noise
            log_q = -0.5 * np.sum(noise ** 2 + encoded.logvar + _LOG_2PI, axis=-1)
        else:
            latent = random_walk_batch(geometry, encoded.centers, encoded.times, model.walk, rng).points
            log_q = heat_kernel_log_density(geometry, encoded.times, encoded.centers, latent, model.kernel)
        beta, _ = decode(model.decoder, geometry, latent)
        log_p, _ = log_likelihood(model.likelihood, batch, beta)
        weights[draw] = log_p + prior_log_density(geometry, latent) - log_q
    return weights


def importance_loglik_batch(model, batch, samples, rng, strict=False):
    """
    Importance-sampled log-likelihood log((1/L) sum_l w_l) per datapoint, in the log domain.

    Args:
        model (DvaeModel): The model.
        batch (np.ndarray): Data, shape (B, D).
        samples (int): L >= 1.
        rng (np.random.Generator): Sampling stream.
        strict (bool, optional): Raise instead of returning -inf when every weight underflows.

    Returns:
        np.ndarray: Estimates, shape (B,).

    Raises:
        DomainError: If samples < 1.
        DegenerateWeights: In strict mode, when all log-weights of a datapoint are -inf.
    """
    if int(samples) < 1:
        raise DomainError(f"importance sampling needs L >= 1, got {samples}")
    batch = np.atleast_2d(np.asarray(batch, dtype=np.float64))
    log_weights = latent_log_weights(model, batch, int(samples), rng)
    degenerate = np.all(np.isneginf(log_weights), axis=0)
    if np.any(degenerate):
        if strict:
            raise DegenerateWeights(f"{int(degenerate.sum())} datapoints have only -inf importance weights")
        logger.warning("%d datapoints have only -inf importance weights; reporting -inf", int(degenerate.sum()))
    with np.errstate(divide="ignore"):
        estimate = logsumexp(log_weights, axis=0) - math.log(samples)
    return np.where(degenerate, -np.inf, estimate)


def importance_loglik(model, x, samples, rng):
    """
    Importance-sampled log-likelihood of one datapoint.
    """
    return float(importance_loglik_batch(model, np.asarray(x, dtype=np.float64)[None, :], samples, rng)[0])


@dataclass
class EvalRow:
    manifold: str
    ll: float
    elbo: float
    kl: float
    mse_or_re: float
    seed: int
    L: int
    ll_stderr: float
    elbo_stderr: float
    kl_numeric: float = math.nan


def _stderr(values):
    return float(np.std(values, ddof=1) / math.sqrt(len(values))) if len(values) > 1 else 0.0


def audit_kl(model, times, kl_mean):
    """
    Numeric KL averaged over the encoded times, for manifolds that support
    quadrature; NaN otherwise. Logs a warning when it disagrees with `kl_mean`
    by more than KL_AUDIT_REL_TOL.
    """
    if model.kl_mode == "gaussian":
        return math.nan
    try:
        table = model.kl_table or NumericKlTable(model.geometry, model.t_min, model.t_max, model.kernel)
    except UnsupportedManifold:
        return math.nan
    numeric = float(np.mean(table.value(times)))
    if abs(numeric - kl_mean) > TrainingDefaults.KL_AUDIT_REL_TOL * abs(numeric):
        logger.warning("KL audit: asymptotic %.6f vs numeric %.6f", kl_mean, numeric)
    return numeric


def evaluate(model, images, samples=TrainingDefaults.IMPORTANCE_SAMPLES, seed=0, audit=True):
    """
    Dataset-averaged LL (importance sampled), ELBO, KL and MSE (gaussian) or RE (bernoulli).

    Returns:
        EvalRow: The row; deterministic given seed.
    """
    images = np.atleast_2d(np.asarray(images, dtype=np.float64))
    rng = np.random.default_rng([seed, TrainingDefaults.EVAL_STREAM])
    ll, elbo, kl, mse, re, times = [], [], [], [], [], []
    for start in range(0, len(images), TrainingDefaults.EVAL_BATCH):
        batch = images[start: start + TrainingDefaults.EVAL_BATCH]
        re_b, kl_b, mse_b = per_datapoint_terms(model, batch, rng)
        ll.append(importance_loglik_batch(model, batch, samples, rng))
        elbo.append(-(re_b + kl_b))
        kl.append(kl_b)
        mse.append(mse_b)
        re.append(re_b)
        if model.kl_mode != "gaussian":
            times.append(encode(model.encoder, model.geometry, batch).times)
    ll, elbo, kl = np.concatenate(ll), np.concatenate(elbo), np.concatenate(kl)
    metric = np.concatenate(mse) if model.likelihood == "gaussian" else np.concatenate(re)
    kl_numeric = audit_kl(model, np.concatenate(times), float(kl.mean())) if audit and times else math.nan
    return EvalRow(
        manifold=model.manifold.name,
        ll=float(ll.mean()),
        elbo=float(elbo.mean()),
        kl=float(kl.mean()),
        mse_or_re=float(metric.mean()),
        seed=int(seed),
        L=int(samples),
        ll_stderr=_stderr(ll),
        elbo_stderr=_stderr(elbo),
        kl_numeric=kl_numeric,
    )


def write_history_csv(path, history):
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(TrainingDefaults.HISTORY_COLUMNS)
        for row in history:
            writer.writerow([row.epoch, repr(row.re), repr(row.kl), repr(row.elbo), repr(row.mse), repr(row.wall_seconds)])


def read_history_csv(path):
    with open(path, newline="", encoding="utf-8") as handle:
        rows = list(csv.DictReader(handle))
    return [
        HistoryRow(int(r["epoch"]), float(r["re"]), float(r["kl"]), float(r["elbo"]), float(r["mse"]), float(r["wall_seconds"]))
        for r in rows
    ]


def write_eval_csv(path, rows):
    with open(path, "w", newline="", encoding="utf-8") as handle:
        handle.write(TrainingDefaults.EVAL_HEADER + "\n")
        writer = csv.writer(handle)
        writer.writerow(TrainingDefaults.EVAL_COLUMNS)
        for row in rows:
            writer.writerow([
                row.manifold, repr(row.ll), repr(row.elbo), repr(row.kl), repr(row.mse_or_re),
                row.seed, row.L, repr(row.ll_stderr), repr(row.elbo_stderr), repr(row.kl_numeric),
            ])


def model_to_record(model, optimizer_state, counter):
    """
    Packs a model, its Adam state and the completed-epoch counter into a checkpoint record.
    """
    descriptor = model.manifold
    metadata = {
        "manifold": descriptor.name,
        "major_radius": descriptor.major_radius,
        "minor_radius": descriptor.minor_radius,
        "t_min": model.t_min,
        "t_max": model.t_max,
        "walk_steps": model.walk.steps,
        "walk_seed": model.walk.seed,
        "likelihood": model.likelihood,
        "kl_mode": model.kl_mode,
        "trunk": model.encoder.trunk.layer_specs(),
        "head": [model.encoder.head.ambient_out.out_dim, model.encoder.head.time_out.out_dim, model.encoder.head.gaussian],
        "decoder": model.decoder.layer_specs(),
    }
    state = optimizer_state or AdamState.zeros_like(model.parameters())
    return CheckpointRecord(metadata, [p.copy() for p in model.parameters()], copy.deepcopy(state), int(counter))


def model_from_record(record):
    """
    Inverse of model_to_record.

    Returns:
        tuple: (DvaeModel, AdamState, counter).
    """
    meta = record.metadata
    descriptor = ManifoldDescriptor.from_name(meta["manifold"], meta["major_radius"], meta["minor_radius"])
    arrays = record.arrays
    trunk_count = 2 * len(meta["trunk"])
    trunk = MlpNetwork.from_specs([tuple(s) for s in meta["trunk"]], arrays[:trunk_count])
    wa, ba, wt, bt = arrays[trunk_count: trunk_count + 4]
    head = EncoderHead(
        ambient_out=DenseLayer(wa, ba, "identity"),
        time_out=DenseLayer(wt, bt, "identity"),
        t_min=meta["t_min"],
        t_max=meta["t_max"],
        gaussian=bool(meta["head"][2]),
    )
    decoder = MlpNetwork.from_specs([tuple(s) for s in meta["decoder"]], arrays[trunk_count + 4:])
    model = DvaeModel(
        descriptor,
        Encoder(trunk, head),
        decoder,
        RandomWalkConfig(steps=meta["walk_steps"], seed=meta["walk_seed"]),
        meta["likelihood"],
        meta["kl_mode"],
    )
    return model, record.adam, record.counter
