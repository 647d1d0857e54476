import numpy as np
import pytest

from lib.nets.action_layer import NetsActionLayer
from lib.nets.physical_layer import squash_time


class TestDenseNetworks(NetsActionLayer):
    """
    Test Layer: forward and backward passes of dense networks.
    """
    SIZES = [5, 7, 6, 3]

    def test_identity_layer_passes_input_through(self):
        net = self.build_network([2, 2], output_activation="identity")
        net.layers[0].weights[:] = np.eye(2)
        net.layers[0].bias[:] = 0.0
        self.forward_and_verify(net, [0.3, -1.7], [0.3, -1.7])

    def test_relu_layer_clips_negative_inputs(self):
        net = self.build_network([2, 2], output_activation="relu")
        net.layers[0].weights[:] = np.eye(2)
        net.layers[0].bias[:] = 0.0
        self.forward_and_verify(net, [-1.0, 2.0], [0.0, 2.0])

    @pytest.mark.parametrize("activation", ["tanh", "relu", "sigmoid"])
    def test_forward_matches_loop_recomputation(self, activation):
        net = self.build_network(self.SIZES, activation, "sigmoid")
        self.forward_and_verify_against_recomputation(net, self.rng.standard_normal((4, self.SIZES[0])))

    @pytest.mark.parametrize("activation", ["tanh", "sigmoid"])
    def test_backward_matches_finite_differences(self, activation):
        net = self.build_network(self.SIZES, activation, "identity")
        x = self.rng.standard_normal(self.SIZES[0])
        self.compare_mlp_gradients_with_finite_differences_and_verify(net, x, self.rng.standard_normal(self.SIZES[-1]))

    def test_linear_quadratic_gradient(self):
        weights = self.rng.standard_normal((3, 4))
        self.verify_linear_quadratic_gradient(weights, self.rng.standard_normal(4), self.rng.standard_normal(3))

    def test_zero_upstream_gives_zero_gradients(self):
        net = self.build_network(self.SIZES)
        self.backward_with_zero_upstream_and_verify(net, self.rng.standard_normal((3, self.SIZES[0])))


class TestEncoderAndDecoder(NetsActionLayer):
    """
    Test Layer: the manifold-valued encoder head and the decoders.
    """
    DATA_DIM = 12
    T_MIN = 1e-3
    T_MAX = 4e-3

    @pytest.mark.parametrize("name", ["circle", "sphere2", "flat-torus", "embedded-torus", "projective2"])
    def test_encoded_times_stay_in_bounds(self, name):
        geometry = self.build_geometry(name)
        encoder, _ = self.build_encoder_and_decoder(geometry, self.DATA_DIM)
        self.encode_and_verify_time_bounds(encoder, geometry, 10.0 * self.rng.standard_normal((50, self.DATA_DIM)))

    def test_fixed_head_projects_onto_the_sphere(self):
        geometry = self.build_geometry("sphere2")
        encoder, _ = self.build_encoder_and_decoder(geometry, self.DATA_DIM, t_min=self.T_MIN, t_max=self.T_MAX)
        midpoint = squash_time(np.zeros(1), self.T_MIN, self.T_MAX)[0]
        self.encode_with_fixed_head_and_verify(encoder, geometry, [0.0, 0.0, 3.0], 0.0, [0.0, 0.0, 1.0], midpoint)

    def test_saturated_head_reaches_maximum_time(self):
        geometry = self.build_geometry("sphere2")
        encoder, _ = self.build_encoder_and_decoder(geometry, self.DATA_DIM, t_min=self.T_MIN, t_max=self.T_MAX)
        self.encode_with_fixed_head_and_verify(encoder, geometry, [0.0, 0.0, 3.0], 50.0, [0.0, 0.0, 1.0], self.T_MAX)

    def test_time_midpoint(self):
        self.verify_squashed_time(0.0, self.T_MIN, self.T_MAX, 0.5 * (self.T_MIN + self.T_MAX))

    @pytest.mark.parametrize("name", ["sphere2", "flat-torus", "projective2", "euclidean2"])
    def test_zero_output_layer_decodes_to_one_half(self, name):
        geometry = self.build_geometry(name)
        _, decoder = self.build_encoder_and_decoder(geometry, self.DATA_DIM)
        self.decode_with_zero_output_layer_and_verify(decoder, geometry)

    def test_decode_is_pure(self):
        geometry = self.build_geometry("flat-torus")
        _, decoder = self.build_encoder_and_decoder(geometry, self.DATA_DIM)
        self.decode_twice_and_verify_identical(decoder, geometry)

    def test_projective_decoder_is_even(self):
        geometry = self.build_geometry("projective2")
        _, decoder = self.build_encoder_and_decoder(geometry, self.DATA_DIM)
        self.verify_even_decoder(decoder, geometry)

    def test_even_feature_map_of_a_pole(self):
        self.verify_even_feature_map([1.0, 0.0, 0.0], [1.0, 0.0, 0.0, 0.0, 0.0, 0.0])

    def test_even_feature_jacobian(self):
        self.compare_even_feature_jacobian_with_finite_differences_and_verify(self.build_geometry("projective2"))

    @pytest.mark.parametrize("name", ["sphere2", "projective2"])
    def test_decode_gradients_match_finite_differences(self, name):
        geometry = self.build_geometry(name)
        _, decoder = self.build_encoder_and_decoder(geometry, self.DATA_DIM)
        self.compare_decode_gradients_with_finite_differences_and_verify(decoder, geometry, self.rng.random(self.DATA_DIM))


class TestAdamAndCheckpoints(NetsActionLayer):
    """
    Test Layer: the optimizer and the binary checkpoint codec.
    """

    def test_zero_gradient_leaves_parameters_unchanged(self):
        self.adam_step_with_zero_gradient_and_verify_unchanged([self.rng.standard_normal((3, 2)), self.rng.standard_normal(2)])

    @pytest.mark.parametrize("gradient", [0.7, -2.5])
    def test_first_step_closed_form(self, gradient):
        self.adam_first_step_and_verify([self.rng.standard_normal((2, 2))], gradient)

    def test_quadratic_loss_decreases(self):
        self.run_adam_on_quadratic_and_verify_decrease()

    def test_checkpoint_round_trip_is_bit_exact(self):
        net = self.build_network([4, 5, 3])
        metadata = {"manifold": "sphere2", "t_min": 1e-4, "layers": [[4, 5, "tanh"]]}
        self.round_trip_checkpoint_and_verify(net.parameters(), metadata)

    def test_truncated_checkpoint_is_rejected(self):
        self.decode_truncated_checkpoint_and_expect_error(self.build_network([3, 2]).parameters())

    def test_interrupted_write_keeps_the_previous_checkpoint(self, monkeypatch, tmp_path):
        arrays = self.build_network([3, 2]).parameters()
        self.interrupt_checkpoint_write_and_verify_previous_kept(arrays, monkeypatch, str(tmp_path))
