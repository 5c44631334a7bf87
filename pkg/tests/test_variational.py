"""
Tests for the stochastic variational inference engine.
"""

import joblib
import numpy as np
import pytest

from src.data.schemas import TrainingConfig
from src.models.variational import (
    draw_noise,
    elbo_estimate,
    elbo_gradient,
    fit_svi,
    has_converged,
    init_state,
    kl_divergence,
    kl_gradient,
    load_state,
    monitor_indices,
)
from src.utils.errors import ConfigError, DataError, NumericalError

LOG_2PI = np.log(2.0 * np.pi)


class GaussianMean:
    """y_i ~ N(mu, 1) with one scalar block ``mu``."""

    def __init__(self, y):
        self.y = np.asarray(y, dtype=float)
        self.n_observations = len(self.y)
        self.weights = np.ones(self.n_observations)

    def block_shapes(self):
        return {"mu": (1,)}

    def evaluate(self, params, idx, weights, gradient):
        resid = self.y[idx] - params["mu"][0]
        ll = -0.5 * resid ** 2 - 0.5 * LOG_2PI
        if not gradient:
            return ll, None
        return ll, {"mu": np.array([np.dot(weights, resid)])}


@pytest.fixture
def config():
    return TrainingConfig(
        batch_size=50, learning_rate=0.05, max_epochs=100, eval_every=20,
        tolerance=1e-12, monitor_size=100, seed=3,
    )


@pytest.fixture
def likelihood():
    rng = np.random.default_rng(0)
    return GaussianMean(rng.normal(2.0, 1.0, size=200))


class TestKl:
    """Tests for the closed-form prior term."""

    def test_zero_at_prior(self, config):
        """Test that q equal to the prior has zero divergence and zero gradient."""
        state = init_state(config, {"a": (2, 3)}, seed=0)
        state.means["a"][:] = 0.0
        state.log_scales["a"][:] = 0.0

        assert kl_divergence(state) == pytest.approx(0.0)
        d_mu, d_ls = kl_gradient(state)
        assert np.allclose(d_mu["a"], 0.0) and np.allclose(d_ls["a"], 0.0)

    def test_positive_elsewhere(self, config):
        state = init_state(config, {"a": (4,)}, seed=0)
        assert kl_divergence(state) > 0.0


class TestElbo:
    """Tests for Monte Carlo ELBO estimates and their gradients."""

    def test_gradient_matches_finite_difference(self, config, likelihood):
        """Test the reparameterization gradient against differences of the estimate under fixed noise."""
        state = init_state(config, likelihood.block_shapes(), seed=1)
        idx = np.arange(30)
        seed = [5, 0]
        g_mu, g_ls = elbo_gradient(state, likelihood, idx, draws=3, seed=seed, scale=2.0)

        h = 1e-5
        for block, grad in (("means", g_mu), ("log_scales", g_ls)):
            up, down = state.copy(), state.copy()
            getattr(up, block)["mu"][0] += h
            getattr(down, block)["mu"][0] -= h
            numeric = (
                elbo_estimate(up, likelihood, idx, 3, seed, scale=2.0)
                - elbo_estimate(down, likelihood, idx, 3, seed, scale=2.0)
            ) / (2 * h)
            assert grad["mu"][0] == pytest.approx(numeric, rel=1e-5, abs=1e-6)

    def test_same_seed_same_noise(self, config):
        state = init_state(config, {"a": (3,)}, seed=0)
        first, second = draw_noise(state, 2, [1, 2]), draw_noise(state, 2, [1, 2])
        assert all(np.array_equal(a["a"], b["a"]) for a, b in zip(first, second))

    def test_empty_slice(self, config, likelihood):
        state = init_state(config, likelihood.block_shapes(), seed=0)
        with pytest.raises(DataError, match="empty"):
            elbo_estimate(state, likelihood, np.array([], dtype=int), 1, 0)


class TestFitSvi:
    """Tests for the optimizer loop."""

    def test_recovers_mean(self, config, likelihood):
        """Test that the posterior mean lands near the sample mean."""
        state = fit_svi(likelihood, config, init_state(config, likelihood.block_shapes(), seed=0), "toy")

        assert state.means["mu"][0] == pytest.approx(likelihood.y.mean(), abs=0.3)
        assert state.trace and state.trace[-1][0] == state.iteration

    def test_resume_is_equivalent(self, config, likelihood):
        """Test that stopping and resuming repeats the uninterrupted run exactly."""
        start = init_state(config, likelihood.block_shapes(), seed=0)
        straight = fit_svi(likelihood, config, start, "toy", stop_after=20)
        halfway = fit_svi(likelihood, config, start, "toy", stop_after=10)
        resumed = fit_svi(likelihood, config, halfway, "toy", stop_after=20)

        assert halfway.iteration == 10
        assert resumed.equals(straight)

    def test_checkpoint_round_trip(self, config, likelihood, tmp_path):
        path = tmp_path / "ckpt.joblib"
        state = fit_svi(likelihood, config, init_state(config, likelihood.block_shapes(), seed=0), "toy",
                        checkpoint_path=path, stop_after=40)

        assert load_state(path).equals(state)

    def test_checkpoint_version_mismatch(self, tmp_path):
        """Test that a checkpoint of another layout version is refused."""
        path = tmp_path / "old.joblib"
        joblib.dump({"version": -1, "state": None}, path)
        with pytest.raises(DataError, match="layout version"):
            load_state(path)

    def test_non_finite_likelihood(self, config):
        """Test that a NaN log-likelihood raises with the last good state attached."""
        bad = GaussianMean([1.0, np.nan, 2.0])
        start = init_state(config, bad.block_shapes(), seed=0)
        with pytest.raises(NumericalError) as exc_info:
            fit_svi(bad, config, start, "toy")

        assert exc_info.value.state is not None
        assert exc_info.value.state.iteration == 0
        assert exc_info.value.exit_code == 3

    def test_saves_last_good_state_on_failure(self, config, tmp_path):
        path = tmp_path / "ckpt.joblib"
        bad = GaussianMean([np.nan] * 5)
        with pytest.raises(NumericalError):
            fit_svi(bad, config, init_state(config, bad.block_shapes(), seed=0), "toy", checkpoint_path=path)
        assert load_state(path).iteration == 0


class TestHelpers:
    """Tests for initialization, monitoring and convergence checks."""

    def test_empty_dimension(self, config):
        with pytest.raises(ConfigError, match="empty dimension"):
            init_state(config, {"theta": (0, 2)}, seed=0)

    def test_init_is_seeded(self, config):
        a = init_state(config, {"x": (3, 2)}, seed=4)
        b = init_state(config, {"x": (3, 2)}, seed=4)
        assert a.equals(b)
        assert np.allclose(a.scales()["x"], config.init_scale)

    def test_monitor_indices(self):
        """Test that the monitor subsample is fixed, sorted and unique."""
        first = monitor_indices(1000, 50, seed=2)
        assert np.array_equal(first, monitor_indices(1000, 50, seed=2))
        assert len(np.unique(first)) == 50 and np.all(np.diff(first) > 0)
        assert np.array_equal(monitor_indices(10, 50, seed=2), np.arange(10))

    def test_has_converged(self):
        trace = [(i, -100.0 - 1e-9 * i) for i in range(10)]
        assert has_converged(trace, window=5, tolerance=1e-6)
        assert not has_converged(trace[:5], window=5, tolerance=1e-6)
        assert not has_converged([(0, -100.0), (1, -50.0), (2, -49.0)], window=2, tolerance=1e-6)
