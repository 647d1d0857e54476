import os

import numpy as np
import pytest

from lib.exceptions import TruncatedFile
from lib.manifolds.action_layer import ManifoldActionLayer
from lib.nets import checkpoint
from lib.nets.checkpoint import CheckpointRecord, decode_checkpoint, encode_checkpoint, read_checkpoint, write_checkpoint
from lib.nets.physical_layer import (
    AdamHyper,
    AdamState,
    DenseLayer,
    GradientSet,
    MlpNetwork,
    adam_step,
    build_decoder,
    build_encoder,
    decode,
    decode_backward,
    encode,
    even_feature_backward,
    even_feature_map,
    mlp_backward,
    mlp_forward,
    squash_time,
)


def relative_error(analytic, numeric):
    analytic = np.asarray(analytic, dtype=float).ravel()
    numeric = np.asarray(numeric, dtype=float).ravel()
    return float(np.linalg.norm(analytic - numeric) / max(np.linalg.norm(numeric), np.linalg.norm(analytic), 1e-12))


def central_difference(loss, arrays, step):
    """
    Central finite differences of a scalar loss with respect to every entry of
    every array, perturbing the arrays in place and restoring them.
    """
    gradients = []
    for array in arrays:
        grad = np.empty_like(array)
        flat, flat_grad = array.reshape(-1), grad.reshape(-1)
        for i in range(flat.size):
            original = flat[i]
            flat[i] = original + step
            upper = loss()
            flat[i] = original - step
            lower = loss()
            flat[i] = original
            flat_grad[i] = (upper - lower) / (2.0 * step)
        gradients.append(grad)
    return gradients


class NetsActionLayer(ManifoldActionLayer):
    """
    Action Layer: self-verifying checks of dense networks, the encoder head, the even decoder and Adam.
    """

    def build_network(self, sizes, activation="tanh", output_activation="identity"):
        return MlpNetwork.initialize(sizes, activation, output_activation, self.rng)

    def forward_and_verify(self, net, x, expected, tol=1e-15):
        out, _ = mlp_forward(net, np.asarray(x, dtype=float))
        assert np.allclose(out, expected, rtol=0.0, atol=tol), f"forward({x}) expected {expected}, got {out}"
        return out

    def forward_and_verify_against_recomputation(self, net, batch, tol=1e-12):
        """
        Recomputes every row with explicit per-unit loops and compares with the vectorized pass.
        """
        out, _ = mlp_forward(net, batch)
        for row, result in zip(batch, out):
            a = list(row)
            for layer in net.layers:
                z = [sum(layer.weights[o, i] * a[i] for i in range(layer.in_dim)) + layer.bias[o] for o in range(layer.out_dim)]
                a = list(_reference_activation(layer.activation, np.array(z)))
            assert np.allclose(result, a, rtol=0.0, atol=tol), f"vectorized forward {result} differs from loop {a}"
        return out

    def compare_mlp_gradients_with_finite_differences_and_verify(self, net, x, target, step=1e-6, rel_tol=1e-5):
        """
        Checks mlp_backward for the loss 0.5 * ||net(x) - target||^2 against central differences.

        Returns:
            float: Relative error over all parameters and the input.
        """
        x = np.array(x, dtype=float)

        def loss():
            out, _ = mlp_forward(net, x)
            return 0.5 * float(np.sum((out - target) ** 2))

        out, cache = mlp_forward(net, x)
        grads, input_grad = mlp_backward(net, cache, out - target)
        numeric = central_difference(loss, net.parameters() + [x], step)
        error = relative_error(np.concatenate([grads.flat(), input_grad.ravel()]), np.concatenate([g.ravel() for g in numeric]))
        assert error < rel_tol, f"mlp backward rel. error {error:.2e} >= {rel_tol}"
        return error

    def verify_linear_quadratic_gradient(self, weights, x, y, tol=1e-12):
        """
        For a bias-free linear layer and loss 0.5 * ||Wx - y||^2 the weight gradient is (Wx - y) x^T.
        """
        net = MlpNetwork([DenseLayer(weights, np.zeros(len(weights)), "identity")])
        x = np.asarray(x, dtype=float)
        out, cache = mlp_forward(net, x)
        grads, _ = mlp_backward(net, cache, out - y)
        expected = np.outer(np.asarray(weights) @ x - y, x)
        assert np.allclose(grads.arrays[0], expected, rtol=0.0, atol=tol), f"weight gradient {grads.arrays[0]} != {expected}"

    def backward_with_zero_upstream_and_verify(self, net, batch):
        out, cache = mlp_forward(net, batch)
        grads, input_grad = mlp_backward(net, cache, np.zeros_like(out))
        assert all(np.all(g == 0.0) for g in grads.arrays), "zero upstream produced nonzero parameter gradients"
        assert np.all(input_grad == 0.0), "zero upstream produced a nonzero input gradient"

    def build_encoder_and_decoder(self, geometry, data_dim, width=8, activation="tanh", t_min=1e-3, t_max=4e-3):
        encoder = build_encoder(geometry, data_dim, width, 3, activation, t_min, t_max, self.rng)
        decoder = build_decoder(geometry, data_dim, width, 2, activation, self.rng)
        return encoder, decoder

    def encode_and_verify_time_bounds(self, encoder, geometry, batch):
        encoded = encode(encoder, geometry, batch)
        head = encoder.head
        assert np.all((encoded.times >= head.t_min) & (encoded.times <= head.t_max)), (
            f"encoded times {encoded.times.min()}..{encoded.times.max()} leave [{head.t_min}, {head.t_max}]"
        )
        assert np.all(geometry.contains(encoded.centers, 1e-9)), "encoded centers are off the manifold"
        return encoded

    def encode_with_fixed_head_and_verify(self, encoder, geometry, ambient_bias, time_bias, expected_center, expected_time):
        """
        Zeroes the head weights so the head outputs its biases, then checks z and t.
        """
        head = encoder.head
        head.ambient_out.weights[:] = 0.0
        head.ambient_out.bias[:] = ambient_bias
        head.time_out.weights[:] = 0.0
        head.time_out.bias[:] = time_bias
        encoded = encode(encoder, geometry, np.zeros((1, encoder.trunk.input_dim)))
        assert np.allclose(encoded.centers[0], expected_center, rtol=0.0, atol=1e-15), (
            f"center {encoded.centers[0]} expected {expected_center}"
        )
        assert np.isclose(encoded.times[0], expected_time, rtol=1e-14, atol=0.0), f"time {encoded.times[0]} expected {expected_time}"
        return encoded

    def verify_squashed_time(self, s, t_min, t_max, expected, tol=1e-15):
        t = squash_time(np.array([s], dtype=float), t_min, t_max)[0]
        assert abs(t - expected) <= tol, f"squash_time({s}) = {t}, expected {expected}"

    def decode_with_zero_output_layer_and_verify(self, decoder, geometry, count=5):
        decoder.layers[-1].weights[:] = 0.0
        decoder.layers[-1].bias[:] = 0.0
        beta, _ = decode(decoder, geometry, geometry.uniform_sample(self.rng, count))
        assert np.all(beta == 0.5), f"zero output layer should give 0.5 everywhere, got range {beta.min()}..{beta.max()}"

    def decode_twice_and_verify_identical(self, decoder, geometry):
        z = geometry.uniform_sample(self.rng, 4)
        first, _ = decode(decoder, geometry, z)
        second, _ = decode(decoder, geometry, z)
        assert np.array_equal(first, second), "decode is not a pure function"

    def verify_even_decoder(self, decoder, geometry, count=1000):
        """
        decode(z) and decode(-z) must agree bit-exactly on projective latents.
        """
        z = geometry.uniform_sample(self.rng, count)
        plus, _ = decode(decoder, geometry, z)
        minus, _ = decode(decoder, geometry, -z)
        assert np.array_equal(plus, minus), f"{geometry.descriptor.name}: decoder is not even"

    def verify_even_feature_map(self, z, expected):
        features = even_feature_map(np.asarray(z, dtype=float))
        assert np.array_equal(features, expected), f"feature map of {z}: {features}, expected {expected}"

    def compare_even_feature_jacobian_with_finite_differences_and_verify(self, geometry, step=1e-6, tol=1e-6):
        z = geometry.uniform_sample(self.rng)
        n = z.size
        count = n * (n + 1) // 2
        analytic = np.stack([even_feature_backward(z, np.eye(count)[k]) for k in range(count)])
        rows, cols = np.triu_indices(n)
        numeric = np.empty((count, n))
        for j in range(n):
            shift = np.zeros(n)
            shift[j] = step
            upper, lower = z + shift, z - shift
            numeric[:, j] = (upper[rows] * upper[cols] - lower[rows] * lower[cols]) / (2.0 * step)
        error = float(np.max(np.abs(analytic - numeric)))
        assert error <= tol, f"even feature jacobian differs from finite differences by {error:.2e}"
        return error

    def compare_decode_gradients_with_finite_differences_and_verify(self, decoder, geometry, target, step=1e-6, rel_tol=1e-5):
        z = geometry.uniform_sample(self.rng, 2)

        def loss():
            beta, _ = decode(decoder, geometry, z)
            return 0.5 * float(np.sum((beta - target) ** 2))

        beta, cache = decode(decoder, geometry, z)
        grads, _ = decode_backward(decoder, geometry, cache, beta - target)
        numeric = central_difference(loss, decoder.parameters(), step)
        error = relative_error(grads.flat(), np.concatenate([g.ravel() for g in numeric]))
        assert error < rel_tol, f"decode gradient rel. error {error:.2e} >= {rel_tol}"
        return error

    def adam_step_with_zero_gradient_and_verify_unchanged(self, params):
        before = [p.copy() for p in params]
        adam_step(params, GradientSet.zeros_like(params), AdamState.zeros_like(params), AdamHyper())
        assert all(np.array_equal(a, b) for a, b in zip(before, params)), "zero gradient changed parameters"

    def adam_first_step_and_verify(self, params, gradient_value, hyper=AdamHyper()):
        """
        The first bias-corrected step is -lr * g / (|g| + eps) for every entry.
        """
        before = [p.copy() for p in params]
        grads = GradientSet([np.full_like(p, gradient_value) for p in params])
        adam_step(params, grads, AdamState.zeros_like(params), hyper)
        expected = -hyper.lr * gradient_value / (abs(gradient_value) + hyper.eps)
        for old, new in zip(before, params):
            assert np.allclose(new - old, expected, rtol=1e-12, atol=0.0), f"first Adam step {new - old} != {expected}"

    def run_adam_on_quadratic_and_verify_decrease(self, start=3.0, steps=100, lr=0.05, after=5):
        param = [np.array([start])]
        state = AdamState.zeros_like(param)
        hyper = AdamHyper(lr=lr)
        losses = []
        for _ in range(steps):
            losses.append(0.5 * float(param[0][0] ** 2))
            adam_step(param, GradientSet([param[0].copy()]), state, hyper)
        tail = losses[after:]
        assert all(b < a for a, b in zip(tail, tail[1:])), f"quadratic loss not strictly decreasing after step {after}"
        return losses[-1]

    def round_trip_checkpoint_and_verify(self, arrays, metadata, counter=3):
        state = AdamState(7, [self.rng.standard_normal(a.shape) for a in arrays], [self.rng.random(a.shape) for a in arrays])
        record = CheckpointRecord(metadata, arrays, state, counter)
        data = encode_checkpoint(record)
        decoded = decode_checkpoint(data)
        assert decoded.metadata == metadata, f"metadata changed: {decoded.metadata}"
        assert decoded.counter == counter and decoded.adam.step == 7, "counters changed"
        for group_in, group_out in (
            (arrays, decoded.arrays),
            (state.first_moment, decoded.adam.first_moment),
            (state.second_moment, decoded.adam.second_moment),
        ):
            assert all(a.tobytes() == b.tobytes() for a, b in zip(group_in, group_out)), "array bytes changed"
        assert encode_checkpoint(decoded) == data, "re-encoding changed the bytes"
        return decoded

    def decode_truncated_checkpoint_and_expect_error(self, arrays, keep_fraction=0.5):
        record = CheckpointRecord({"manifold": "circle"}, arrays, AdamState.zeros_like(arrays), 0)
        data = encode_checkpoint(record)
        with pytest.raises(TruncatedFile):
            decode_checkpoint(data[:int(len(data) * keep_fraction)])

    def interrupt_checkpoint_write_and_verify_previous_kept(self, arrays, monkeypatch, directory):
        """
        A write that dies while encoding must leave the last complete checkpoint readable.
        """
        path = os.path.join(directory, "checkpoint.bin")
        kept = CheckpointRecord({"manifold": "circle"}, arrays, AdamState.zeros_like(arrays), 4)
        write_checkpoint(path, kept)

        def crash(record):
            raise OSError("disk full")

        monkeypatch.setattr(checkpoint, "encode_checkpoint", crash)
        with pytest.raises(OSError):
            write_checkpoint(path, CheckpointRecord({"manifold": "circle"}, arrays, AdamState.zeros_like(arrays), 5))
        monkeypatch.undo()
        restored = read_checkpoint(path)
        assert restored.counter == 4, f"checkpoint counter {restored.counter} after an interrupted write, expected 4"
        assert all(a.tobytes() == b.tobytes() for a, b in zip(arrays, restored.arrays)), "kept checkpoint changed"
        return restored


def _reference_activation(name, z):
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "tanh":
        return np.tanh(z)
    if name == "sigmoid":
        return 1.0 / (1.0 + np.exp(-z))
    return z
