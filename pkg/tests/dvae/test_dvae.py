import numpy as np
import pytest

from lib.dvae.action_layer import GRAD_CHECK_MANIFOLDS, DvaeActionLayer, make_decoder_constant


class TestElboLoss(DvaeActionLayer):
    """
    Test Layer: the ELBO loss and its end-to-end gradient.
    """
    BATCH_SIZE = 3

    @pytest.mark.parametrize("name", GRAD_CHECK_MANIFOLDS)
    def test_elbo_gradient_matches_finite_differences(self, name):
        model = self.build_model(name)
        self.compare_elbo_gradients_with_finite_differences_and_verify(model, self.random_batch(self.BATCH_SIZE))

    def test_bernoulli_elbo_gradient_matches_finite_differences(self):
        model = self.build_model("sphere2", likelihood="bernoulli")
        batch = (self.random_batch(self.BATCH_SIZE) > 0.5).astype(float)
        self.compare_elbo_gradients_with_finite_differences_and_verify(model, batch)

    def test_numeric_kl_gradient_matches_finite_differences(self):
        model = self.build_model("sphere2", kl_mode="numeric")
        self.compare_elbo_gradients_with_finite_differences_and_verify(model, self.random_batch(self.BATCH_SIZE))

    @pytest.mark.parametrize("name", ["circle", "sphere2", "euclidean2"])
    def test_elbo_is_minus_re_minus_kl(self, name):
        self.compute_loss_and_verify_identity(self.build_model(name), self.random_batch(8))

    def test_constant_decoder_leaves_the_gaussian_constant(self):
        self.compute_loss_with_constant_decoder_and_verify(self.build_model("sphere2"))

    def test_pinned_time_gives_constant_kl(self):
        self.pin_time_at_maximum_and_verify_constant_kl(self.build_model("flat-torus"), self.random_batch(6))

    def test_grad_check_suite_passes(self):
        self.run_grad_check_suite_and_verify(("circle", "projective2"))


class TestTraining(DvaeActionLayer):
    """
    Test Layer: the minibatch Adam training loop.
    """
    IMAGE_COUNT = 32

    @pytest.mark.parametrize("seed", range(5))
    @pytest.mark.parametrize("name", GRAD_CHECK_MANIFOLDS)
    def test_training_lowers_the_loss(self, name, seed):
        self.train_and_verify_loss_decreases(self.build_model(name, seed=seed), self.random_batch(self.IMAGE_COUNT), seed=seed)

    def test_same_seed_trains_identically(self):
        self.train_twice_and_verify_identical("circle", self.random_batch(self.IMAGE_COUNT))

    def test_zero_epochs_leave_the_model_unchanged(self):
        self.train_zero_epochs_and_verify_unchanged(self.build_model("sphere2"), self.random_batch(self.IMAGE_COUNT))

    def test_history_rows_satisfy_the_elbo_identity(self):
        history = self.train_twice_and_verify_identical("flat-torus", self.random_batch(self.IMAGE_COUNT), epochs=4)
        self.verify_history_identity(history)


class TestEvaluation(DvaeActionLayer):
    """
    Test Layer: importance-sampled log-likelihood and dataset evaluation.
    """

    def test_estimate_is_exact_at_stationarity(self):
        self.estimate_loglik_at_stationarity_and_verify(self.random_batch(4))

    def test_single_sample_estimate_is_the_log_weight(self):
        self.estimate_loglik_with_one_sample_and_verify(self.build_model("sphere2"), self.random_batch(5))

    def test_single_datapoint_estimate_matches_the_batch(self):
        self.estimate_single_loglik_and_verify_batch_agreement(self.build_model("flat-torus"), self.random_batch(1)[0])

    def test_zero_samples_are_rejected(self):
        self.estimate_loglik_without_samples_and_expect_error(self.build_model("circle"), self.random_batch(2))

    @pytest.mark.slow
    def test_estimate_grows_with_more_samples(self):
        self.estimate_loglik_and_verify_monotone_in_samples(self.build_model("sphere2"), self.random_batch(1)[0])

    def test_constant_decoder_mse_is_the_pixel_variance(self):
        self.evaluate_constant_decoder_and_verify_mse(self.build_model("flat-torus"), self.random_batch(20))

    @pytest.mark.parametrize("name", ["sphere2", "euclidean2"])
    def test_loglik_bounds_the_elbo(self, name):
        self.evaluate_and_verify_bound(self.build_model(name), self.random_batch(20))

    def test_evaluation_is_deterministic(self):
        self.evaluate_twice_and_verify_identical(self.build_model("circle"), self.random_batch(10))

    def test_likelihoods_rank_models_like_mse(self):
        batch = np.full((6, 16), 0.8)
        good = make_decoder_constant(self.build_model("sphere2"), 0.8)
        poor = make_decoder_constant(self.build_model("sphere2"), 0.5)
        self.compare_likelihood_orderings_and_verify(good, poor, batch)
