import copy
import math

import numpy as np
import pytest

from lib.diffusion.physical_layer import PosteriorParams, RandomWalkConfig, kl_asymptotic
from lib.dvae.physical_layer import (
    TrainConfig,
    build_model,
    elbo_loss,
    evaluate,
    importance_loglik,
    importance_loglik_batch,
    latent_log_weights,
    log_likelihood,
    per_datapoint_terms,
    train,
)
from lib.exceptions import DomainError
from lib.manifolds.action_layer import ManifoldActionLayer
from lib.manifolds.physical_layer import ManifoldDescriptor
from lib.nets.action_layer import central_difference, relative_error
from lib.validation import CompositeCheckRunner

GRAD_CHECK_MANIFOLDS = ("circle", "flat-torus", "embedded-torus", "sphere2", "projective2", "euclidean2")


def build_tiny_model(
    manifold_name, data_dim=16, width=8, likelihood="gaussian", t_min=1e-3, t_max=4e-3, seed=0, kl_mode=None, steps=4
):
    """
    Small tanh model used by gradient checks and loop tests.
    """
    rng = np.random.default_rng(seed)
    return build_model(
        ManifoldDescriptor.from_name(manifold_name),
        data_dim,
        rng,
        width=width,
        activation="tanh",
        t_min=t_min,
        t_max=t_max,
        walk=RandomWalkConfig(steps=steps),
        likelihood=likelihood,
        kl_mode=kl_mode,
    )


def frozen_noise(model, count, rng):
    if model.kl_mode == "gaussian":
        return rng.standard_normal((count, model.manifold.intrinsic_dim))
    return rng.standard_normal((model.walk.steps, count, model.manifold.ambient_dim))


def make_decoder_constant(model, value=0.5):
    """
    Zeroes the last decoder layer and sets its bias to logit(value).
    """
    last = model.decoder.layers[-1]
    last.weights[:] = 0.0
    last.bias[:] = math.log(value / (1.0 - value))
    return model


class DvaeActionLayer(ManifoldActionLayer, CompositeCheckRunner):
    """
    Action Layer: self-verifying checks of the ELBO loss, its gradients, training and evaluation.
    """

    @pytest.fixture(autouse=True)
    def setup_model_factory(self, tiny_model_factory):
        """
        Injects the tiny-model factory as self.build_model.
        """
        self.build_model = tiny_model_factory

    def random_batch(self, count, data_dim=16):
        return self.rng.random((count, data_dim))

    def compare_elbo_gradients_with_finite_differences_and_verify(self, model, batch, step=1e-6, rel_tol=1e-4):
        """
        End-to-end check: encoder, projection, random walk, decoder and KL
        gradients against central differences of the loss under frozen noise.

        Returns:
            float: Relative error over every parameter.
        """
        noise = frozen_noise(model, len(batch), self.rng)
        seed = int(self.rng.integers(2 ** 32))

        def loss():
            breakdown, _ = elbo_loss(model, batch, np.random.default_rng(seed), noise=noise.copy())
            return -breakdown.elbo

        _, grads = elbo_loss(model, batch, np.random.default_rng(seed), noise=noise.copy())
        numeric = central_difference(loss, model.parameters(), step)
        error = relative_error(grads.flat(), np.concatenate([g.ravel() for g in numeric]))
        assert error < rel_tol, f"{model.manifold.name}: ELBO gradient rel. error {error:.2e} >= {rel_tol}"
        return error

    def compute_loss_and_verify_identity(self, model, batch, tol=1e-9):
        breakdown, _ = elbo_loss(model, batch, self.rng)
        gap = abs(breakdown.elbo + breakdown.re + breakdown.kl)
        assert gap <= tol, f"elbo {breakdown.elbo} != -(re {breakdown.re} + kl {breakdown.kl})"
        assert breakdown.mse >= 0.0, f"negative mse {breakdown.mse}"
        return breakdown

    def compute_loss_with_constant_decoder_and_verify(self, model, tol=1e-9):
        """
        A decoder stuck at 0.5 on data equal to 0.5 leaves only the Gaussian constant (D/2) log 2 pi.
        """
        make_decoder_constant(model)
        batch = np.full((4, model.data_dim), 0.5)
        breakdown, _ = elbo_loss(model, batch, self.rng)
        expected = 0.5 * model.data_dim * math.log(2.0 * math.pi)
        assert abs(breakdown.re - expected) <= tol, f"re {breakdown.re} expected {expected}"
        assert breakdown.mse == 0.0, f"mse {breakdown.mse} expected 0"
        return breakdown

    def pin_time_at_maximum_and_verify_constant_kl(self, model, batch):
        head = model.encoder.head
        head.time_out.weights[:] = 0.0
        head.time_out.bias[:] = 50.0
        _, kl, _ = per_datapoint_terms(model, batch, self.rng)
        expected = kl_asymptotic(model.geometry, PosteriorParams(model.geometry.uniform_sample(self.rng), model.t_max))
        assert np.all(kl == kl[0]), f"kl varies across datapoints: {kl}"
        assert abs(kl[0] - expected) <= 1e-12, f"pinned kl {kl[0]} != kl_asymptotic(t_max) {expected}"
        return float(kl[0])

    def train_and_verify_loss_decreases(self, model, images, epochs=50, seed=0, loss_seed=1234):
        """
        Compares a fixed-noise loss on the training set before and after training.
        """
        before, _ = elbo_loss(model, images, np.random.default_rng(loss_seed))
        train(model, images, TrainConfig(epochs=epochs, batch_size=len(images), seed=seed, lr=1e-2))
        after, _ = elbo_loss(model, images, np.random.default_rng(loss_seed))
        assert -after.elbo < -before.elbo, f"{model.manifold.name}: loss {-before.elbo:.4f} -> {-after.elbo:.4f}"
        return -after.elbo

    def train_twice_and_verify_identical(self, manifold_name, images, epochs=3, seed=5):
        results = []
        for _ in range(2):
            model = self.build_model(manifold_name, data_dim=images.shape[1])
            result = train(model, images, TrainConfig(epochs=epochs, batch_size=8, seed=seed))
            results.append(result)
        first, second = results
        assert first.history == second.history, "same seed produced different histories"
        for a, b in zip(first.model.parameters(), second.model.parameters()):
            assert a.tobytes() == b.tobytes(), "same seed produced different parameters"
        return first.history

    def train_zero_epochs_and_verify_unchanged(self, model, images):
        before = [p.copy() for p in model.parameters()]
        result = train(model, images, TrainConfig(epochs=0))
        assert result.history == [], f"history should be empty, got {result.history}"
        assert all(np.array_equal(a, b) for a, b in zip(before, model.parameters())), "zero epochs changed parameters"

    def verify_history_identity(self, history, tol=1e-9):
        for row in history:
            assert abs(row.elbo + row.re + row.kl) <= tol, f"epoch {row.epoch}: elbo identity broken"
        assert [row.epoch for row in history] == list(range(1, len(history) + 1)), "epoch column not consecutive"

    def estimate_loglik_at_stationarity_and_verify(self, batch, samples_list=(1, 10, 100), tol=1e-9):
        """
        With t far past mixing the posterior equals the prior; a constant
        decoder then makes every importance weight equal to p(x | 0.5).
        """
        model = self.build_model("circle", data_dim=batch.shape[1], t_min=50.0, t_max=100.0)
        make_decoder_constant(model)
        expected, _ = log_likelihood("gaussian", batch, np.full_like(batch, 0.5))
        for samples in samples_list:
            estimate = importance_loglik_batch(model, batch, samples, self.rng)
            assert np.allclose(estimate, expected, rtol=0.0, atol=tol), f"L={samples}: {estimate} != {expected}"

    def estimate_loglik_with_one_sample_and_verify(self, model, batch, seed=17):
        estimate = importance_loglik_batch(model, batch, 1, np.random.default_rng(seed))
        weights = latent_log_weights(model, batch, 1, np.random.default_rng(seed))[0]
        assert np.allclose(estimate, weights, rtol=0.0, atol=1e-12), f"L=1 estimate {estimate} != log weight {weights}"

    def estimate_single_loglik_and_verify_batch_agreement(self, model, x, samples=10, seed=23):
        single = importance_loglik(model, x, samples, np.random.default_rng(seed))
        batch = importance_loglik_batch(model, np.asarray(x)[None, :], samples, np.random.default_rng(seed))[0]
        assert single == batch, f"single-datapoint estimate {single} != batch estimate {batch}"
        return single

    def estimate_loglik_without_samples_and_expect_error(self, model, batch):
        with pytest.raises(DomainError):
            importance_loglik_batch(model, batch, 0, self.rng)

    def estimate_loglik_and_verify_monotone_in_samples(self, model, x, repetitions=200, samples_list=(1, 10, 100)):
        """
        Mean importance estimates over repetitions must not decrease with L.

        Returns:
            list[float]: Mean estimate per L.
        """
        repeated = np.repeat(np.asarray(x, dtype=float)[None, :], repetitions, axis=0)
        means = [float(importance_loglik_batch(model, repeated, samples, self.rng).mean()) for samples in samples_list]
        assert all(b >= a for a, b in zip(means, means[1:])), f"importance estimates decrease with L: {means}"
        return means

    def evaluate_constant_decoder_and_verify_mse(self, model, images, samples=2):
        make_decoder_constant(model)
        row = evaluate(model, images, samples=samples, seed=0)
        expected = float(np.mean((images - 0.5) ** 2))
        assert abs(row.mse_or_re - expected) <= 1e-6, f"mse {row.mse_or_re} expected pixel variance {expected}"
        return row

    def evaluate_and_verify_bound(self, model, images, samples=10, seed=0):
        row = evaluate(model, images, samples=samples, seed=seed)
        slack = 3.0 * math.hypot(row.ll_stderr, row.elbo_stderr)
        assert row.ll >= row.elbo - slack, f"ll {row.ll} below elbo {row.elbo} by more than {slack}"
        return row

    def evaluate_twice_and_verify_identical(self, model, images, samples=5, seed=3):
        first = evaluate(model, images, samples=samples, seed=seed)
        second = evaluate(model, images, samples=samples, seed=seed)
        assert repr(first) == repr(second), f"evaluation is not deterministic: {first} vs {second}"
        return first

    def compare_likelihood_orderings_and_verify(self, good, poor, batch, seed=11):
        """
        Gaussian RE is affine in the squared error; on one batch with shared
        noise both likelihoods must rank the two models like MSE does.
        """
        ranks = {}
        for likelihood in ("gaussian", "bernoulli"):
            res, mses = [], []
            for model in (good, poor):
                variant = copy.copy(model)
                variant.likelihood = likelihood
                re, _, mse = per_datapoint_terms(variant, batch, np.random.default_rng(seed))
                res.append(float(re.mean()))
                mses.append(float(mse.mean()))
                if likelihood == "gaussian":
                    affine = 0.5 * batch.shape[1] * (mse + math.log(2.0 * math.pi))
                    assert np.allclose(re, affine, rtol=1e-12, atol=1e-9), "gaussian re is not affine in mse"
            ranks[likelihood] = (res[0] < res[1], mses[0] < mses[1])
        for likelihood, (re_order, mse_order) in ranks.items():
            assert re_order == mse_order, f"{likelihood} RE ranks the models differently from MSE"

    def run_grad_check_suite(self, manifold_names=GRAD_CHECK_MANIFOLDS, batch_size=3, data_dim=16, outcomes=None):
        """
        Composite action: the end-to-end gradient check on a tiny model per manifold.

        Returns:
            list[CheckOutcome]: One row per manifold.
        """
        outcomes = [] if outcomes is None else outcomes
        for name in manifold_names:
            model = build_tiny_model(name, data_dim=data_dim, seed=int(self.rng.integers(2 ** 31)))
            batch = self.random_batch(batch_size, data_dim)
            self.run_check(
                outcomes, "elbo gradient", model.manifold.name, 1e-4,
                self.compare_elbo_gradients_with_finite_differences_and_verify, model, batch,
            )
        return outcomes

    def run_grad_check_suite_and_verify(self, manifold_names=GRAD_CHECK_MANIFOLDS):
        outcomes = self.run_grad_check_suite(manifold_names)
        failed = [f"{o.manifold}: {o.detail}" for o in outcomes if not o.passed]
        assert not failed, f"gradient checks failed: {failed}"
        return outcomes
