import math
from dataclasses import dataclass, field

import numpy as np

from lib.exceptions import DomainError, ShapeMismatch
from lib.manifolds.physical_layer import ManifoldKind
from lib.nets.nets_constants import NetDefaults


def _relu(z):
    return np.maximum(z, 0.0)


def _sigmoid(z):
    # split by sign so exp never overflows
    out = np.empty_like(z)
    positive = z >= 0
    out[positive] = 1.0 / (1.0 + np.exp(-z[positive]))
    e = np.exp(z[~positive])
    out[~positive] = e / (1.0 + e)
    return out


_ACTIVATIONS = {
    "relu": (_relu, lambda z, a: (z > 0).astype(z.dtype)),
    "tanh": (np.tanh, lambda z, a: 1.0 - a ** 2),
    "sigmoid": (_sigmoid, lambda z, a: a * (1.0 - a)),
    "identity": (lambda z: z.copy(), lambda z, a: np.ones_like(z)),
}


@dataclass
class DenseLayer:
    """
    Affine map followed by an elementwise activation; weights are (out, in).
    """
    weights: np.ndarray
    bias: np.ndarray
    activation: str = NetDefaults.HIDDEN_ACTIVATION

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.activation not in _ACTIVATIONS:
            raise DomainError(f"unknown activation '{self.activation}'")
        if self.weights.ndim != 2 or self.bias.shape != (self.weights.shape[0],):
            raise ShapeMismatch(f"dense layer weights {self.weights.shape} and bias {self.bias.shape} disagree")

    @property
    def in_dim(self):
        return self.weights.shape[1]

    @property
    def out_dim(self):
        return self.weights.shape[0]

    @classmethod
    def initialize(cls, in_dim, out_dim, activation, rng):
        """
        Uniform initialization in [-1/sqrt(in_dim), 1/sqrt(in_dim)].
        """
        bound = 1.0 / math.sqrt(in_dim)
        weights = rng.uniform(-bound, bound, size=(out_dim, in_dim))
        bias = rng.uniform(-bound, bound, size=out_dim)
        return cls(weights, bias, activation)


@dataclass
class MlpNetwork:
    layers: list

    def __post_init__(self):
        for previous, layer in zip(self.layers, self.layers[1:]):
            if previous.out_dim != layer.in_dim:
                raise ShapeMismatch(f"layer widths {previous.out_dim} -> {layer.in_dim} do not compose")

    @property
    def input_dim(self):
        return self.layers[0].in_dim

    @property
    def output_dim(self):
        return self.layers[-1].out_dim

    def parameters(self):
        """
        Parameter arrays in a fixed order: W_1, b_1, W_2, b_2, ...
        """
        arrays = []
        for layer in self.layers:
            arrays.extend([layer.weights, layer.bias])
        return arrays

    def layer_specs(self):
        return [(layer.out_dim, layer.in_dim, layer.activation) for layer in self.layers]

    @classmethod
    def initialize(cls, sizes, hidden_activation, output_activation, rng):
        """
        Builds a network with the given layer widths.

        Args:
            sizes (list[int]): Widths from input to output, e.g. [784, 256, 256, 3].
            hidden_activation (str): Activation of every layer but the last.
            output_activation (str): Activation of the last layer.
            rng (np.random.Generator): Initialization stream.

        Returns:
            MlpNetwork: The network.
        """
        layers = []
        for i, (fan_in, fan_out) in enumerate(zip(sizes, sizes[1:])):
            activation = output_activation if i == len(sizes) - 2 else hidden_activation
            layers.append(DenseLayer.initialize(fan_in, fan_out, activation, rng))
        return cls(layers)

    @classmethod
    def from_specs(cls, specs, arrays):
        """
        Rebuilds a network from layer_specs() and a parameters() list.
        """
        layers = []
        for (out_dim, in_dim, activation), weights, bias in zip(specs, arrays[0::2], arrays[1::2]):
            if weights.shape != (out_dim, in_dim):
                raise ShapeMismatch(f"stored weights {weights.shape} do not match layer shape {(out_dim, in_dim)}")
            layers.append(DenseLayer(weights, bias, activation))
        return cls(layers)


@dataclass
class GradientSet:
    """
    Gradients aligned with a parameter list, array by array.
    """
    arrays: list

    @classmethod
    def zeros_like(cls, params):
        return cls([np.zeros_like(p) for p in params])

    def __add__(self, other):
        return GradientSet(self.arrays + other.arrays)

    def scaled(self, factor):
        return GradientSet([factor * a for a in self.arrays])

    def is_finite(self):
        return all(np.all(np.isfinite(a)) for a in self.arrays)

    def flat(self):
        return np.concatenate([a.ravel() for a in self.arrays]) if self.arrays else np.zeros(0)


def mlp_forward(net, x):
    """
    Forward pass over a batch of rows (or a single vector).

    Args:
        net (MlpNetwork): The network.
        x (np.ndarray): Input of shape (in,) or (B, in).

    Returns:
        tuple: (output, cache) where the cache keeps each layer's input, pre-activation and output.

    Raises:
        ShapeMismatch: If x does not have net.input_dim columns.
    """
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    a = np.atleast_2d(x)
    if a.shape[-1] != net.input_dim:
        raise ShapeMismatch(f"network expects {net.input_dim} inputs, got shape {x.shape}")
    memory = []
    for layer in net.layers:
        z = a @ layer.weights.T + layer.bias
        out = _ACTIVATIONS[layer.activation][0](z)
        memory.append((a, z, out))
        a = out
    return (a[0] if single else a), {"memory": memory, "single": single}


def mlp_backward(net, cache, upstream):
    """
    Reverse-mode pass for a loss summed over the batch.

    Args:
        net (MlpNetwork): The network used in the forward pass.
        cache (dict): Cache returned by mlp_forward.
        upstream (np.ndarray): dLoss/dOutput, same shape as the forward output.

    Returns:
        tuple: (GradientSet aligned with net.parameters(), dLoss/dInput).

    Raises:
        ShapeMismatch: If upstream does not match the cached output.
    """
    memory = cache["memory"]
    grad = np.atleast_2d(np.asarray(upstream, dtype=np.float64))
    if grad.shape != memory[-1][2].shape:
        raise ShapeMismatch(f"upstream gradient {grad.shape} does not match output {memory[-1][2].shape}")
    arrays = []
    for layer, (a_in, z, out) in zip(reversed(net.layers), reversed(memory)):
        dz = grad * _ACTIVATIONS[layer.activation][1](z, out)
        arrays.append(dz.sum(axis=0))
        arrays.append(dz.T @ a_in)
        grad = dz @ layer.weights
    arrays.reverse()
    return GradientSet(arrays), (grad[0] if cache["single"] else grad)


@dataclass
class EncoderHead:
    """
    Output maps on top of the shared trunk: ambient_out gives the point that
    is projected to the manifold, time_out the scalar squashed into
    [t_min, t_max]. For Euclidean latents they emit mean and log-variance.
    """
    ambient_out: DenseLayer
    time_out: DenseLayer
    t_min: float
    t_max: float
    gaussian: bool = False

    def __post_init__(self):
        if not 0 < self.t_min < self.t_max:
            raise DomainError(f"encoder head needs 0 < t_min < t_max, got {self.t_min}, {self.t_max}")

    def parameters(self):
        return [self.ambient_out.weights, self.ambient_out.bias, self.time_out.weights, self.time_out.bias]


@dataclass
class Encoder:
    trunk: MlpNetwork
    head: EncoderHead

    def parameters(self):
        return self.trunk.parameters() + self.head.parameters()


@dataclass
class EncodedBatch:
    """
    Encoder output for a batch: centers and times on closed manifolds, mean
    and log-variance for Euclidean latents.
    """
    centers: np.ndarray = None
    times: np.ndarray = None
    mean: np.ndarray = None
    logvar: np.ndarray = None
    raw: np.ndarray = None
    cache: dict = field(default=None, repr=False)


def squash_time(s, t_min, t_max):
    return t_min + (t_max - t_min) * (np.tanh(s) + 1.0) / 2.0


def encode(encoder, geometry, x):
    """
    Encodes a batch of data vectors.

    Args:
        encoder (Encoder): Trunk and head.
        geometry (ManifoldGeometry): The latent manifold.
        x (np.ndarray): Data, shape (B, D).

    Returns:
        EncodedBatch: Posterior parameters with the cache needed by encode_backward.

    Raises:
        DomainError: If x is not finite.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if not np.all(np.isfinite(x)):
        raise DomainError("encoder input contains non-finite values")
    hidden, trunk_cache = mlp_forward(encoder.trunk, x)
    head = encoder.head
    a = hidden @ head.ambient_out.weights.T + head.ambient_out.bias
    s = hidden @ head.time_out.weights.T + head.time_out.bias
    cache = {"hidden": hidden, "trunk": trunk_cache, "s": s}
    if head.gaussian:
        return EncodedBatch(mean=a, logvar=s, raw=a, cache=cache)
    raw = geometry.regularize(a)
    cache["raw"] = raw
    return EncodedBatch(
        centers=geometry.project(raw),
        times=squash_time(s[:, 0], head.t_min, head.t_max),
        raw=raw,
        cache=cache,
    )


def encode_backward(encoder, geometry, encoded, g_first, g_second):
    """
    Backpropagates through encode.

    Args:
        encoder (Encoder): The encoder used for `encoded`.
        geometry (ManifoldGeometry): The latent manifold.
        encoded (EncodedBatch): Forward result.
        g_first (np.ndarray): dLoss/dcenter (B, n), or dLoss/dmean for Euclidean latents.
        g_second (np.ndarray): dLoss/dtime (B,), or dLoss/dlogvar (B, d) for Euclidean latents.

    Returns:
        tuple: (GradientSet aligned with encoder.parameters(), dLoss/dx).
    """
    cache = encoded.cache
    head = encoder.head
    hidden = cache["hidden"]
    if head.gaussian:
        g_a = np.asarray(g_first, dtype=np.float64)
        g_s = np.asarray(g_second, dtype=np.float64)
    else:
        jac = geometry.project_jacobian(cache["raw"])
        g_a = np.einsum("bij,bi->bj", jac, g_first)
        dt_ds = 0.5 * (head.t_max - head.t_min) * (1.0 - np.tanh(cache["s"][:, 0]) ** 2)
        g_s = (np.asarray(g_second, dtype=np.float64) * dt_ds)[:, None]
    head_grads = GradientSet([g_a.T @ hidden, g_a.sum(axis=0), g_s.T @ hidden, g_s.sum(axis=0)])
    g_hidden = g_a @ head.ambient_out.weights + g_s @ head.time_out.weights
    trunk_grads, g_x = mlp_backward(encoder.trunk, cache["trunk"], g_hidden)
    return trunk_grads + head_grads, g_x


def even_feature_map(z):
    """
    Quadratic monomials z_i z_j (i <= j) of a point on the sphere.

    Args:
        z (np.ndarray): Points on S^d, shape (..., d + 1).

    Returns:
        np.ndarray: Features of length (d + 1)(d + 2)/2; identical for z and -z.

    Raises:
        DomainError: If a point is off the unit sphere.
    """
    z = np.asarray(z, dtype=np.float64)
    if np.any(np.abs(np.linalg.norm(z, axis=-1) - 1.0) > 1e-6):
        raise DomainError("even feature map needs points on the unit sphere")
    rows, cols = np.triu_indices(z.shape[-1])
    return z[..., rows] * z[..., cols]


def even_feature_backward(z, upstream):
    z = np.asarray(z, dtype=np.float64)
    n = z.shape[-1]
    rows, cols = np.triu_indices(n)
    upper = np.zeros(z.shape[:-1] + (n, n))
    upper[..., rows, cols] = upstream
    return np.einsum("...ij,...j->...i", upper, z) + np.einsum("...ji,...j->...i", upper, z)


def decoder_input_dim(geometry):
    if geometry.kind is ManifoldKind.PROJECTIVE:
        n = geometry.ambient_dim
        return n * (n + 1) // 2
    return geometry.ambient_dim


def decode(decoder, geometry, z):
    """
    Maps latent points to data-space parameters in (0, 1): a Gaussian mean for
    [0, 1]-scaled pixels or Bernoulli probabilities, the same sigmoid head for both.
    Projective latents pass through even_feature_map first.

    Returns:
        tuple: (beta, cache).
    """
    z = np.asarray(z, dtype=np.float64)
    features = even_feature_map(z) if geometry.kind is ManifoldKind.PROJECTIVE else z
    beta, cache = mlp_forward(decoder, features)
    cache["latent"] = z
    return beta, cache


def decode_backward(decoder, geometry, cache, upstream):
    """
    Returns:
        tuple: (GradientSet aligned with decoder.parameters(), dLoss/dz).
    """
    grads, g_features = mlp_backward(decoder, cache, upstream)
    if geometry.kind is ManifoldKind.PROJECTIVE:
        return grads, even_feature_backward(cache["latent"], g_features)
    return grads, g_features


def build_encoder(geometry, data_dim, width, hidden_layers, activation, t_min, t_max, rng):
    trunk = MlpNetwork.initialize([data_dim] + [width] * hidden_layers, activation, activation, rng)
    gaussian = geometry.kind is ManifoldKind.EUCLIDEAN
    time_dim = geometry.dim if gaussian else 1
    head = EncoderHead(
        ambient_out=DenseLayer.initialize(width, geometry.ambient_dim, "identity", rng),
        time_out=DenseLayer.initialize(width, time_dim, "identity", rng),
        t_min=t_min,
        t_max=t_max,
        gaussian=gaussian,
    )
    return Encoder(trunk, head)


def build_decoder(geometry, data_dim, width, hidden_layers, activation, rng):
    sizes = [decoder_input_dim(geometry)] + [width] * hidden_layers + [data_dim]
    return MlpNetwork.initialize(sizes, activation, "sigmoid", rng)


@dataclass(frozen=True)
class AdamHyper:
    lr: float = NetDefaults.LEARNING_RATE
    beta1: float = NetDefaults.BETA1
    beta2: float = NetDefaults.BETA2
    eps: float = NetDefaults.ADAM_EPSILON


@dataclass
class AdamState:
    step: int
    first_moment: list
    second_moment: list

    @classmethod
    def zeros_like(cls, params):
        return cls(0, [np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params])


def adam_step(params, grads, state, hyper):
    """
    One Adam update with bias correction, applied to params in place.

    Args:
        params (list[np.ndarray]): Parameter arrays.
        grads (GradientSet): Gradients aligned with params.
        state (AdamState): Moments and step counter; updated in place.
        hyper (AdamHyper): lr, beta1, beta2, eps.

    Returns:
        tuple: (params, state).

    Raises:
        ShapeMismatch: If gradients do not align with params.
    """
    if len(params) != len(grads.arrays) or any(p.shape != g.shape for p, g in zip(params, grads.arrays)):
        raise ShapeMismatch("gradient set does not align with the parameters")
    state.step += 1
    correction1 = 1.0 - hyper.beta1 ** state.step
    correction2 = 1.0 - hyper.beta2 ** state.step
    for p, g, m, v in zip(params, grads.arrays, state.first_moment, state.second_moment):
        m *= hyper.beta1
        m += (1.0 - hyper.beta1) * g
        v *= hyper.beta2
        v += (1.0 - hyper.beta2) * g * g
        p -= hyper.lr * (m / correction1) / (np.sqrt(v / correction2) + hyper.eps)
    return params, state
