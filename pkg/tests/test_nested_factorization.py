"""
Tests for the two-stage Nested Factorization likelihoods and fit.
"""

import numpy as np
import pytest

from src.data.schemas import EventReport, EventTypeReport, TrainingConfig
from src.models.base import load_model
from src.models.nested_factorization import (
    InclusiveValueTable,
    NestedFactorizationModel,
    Stage1Likelihood,
    Stage2Likelihood,
    compute_inclusive_values,
    fit_nested_factorization,
    fit_selected,
    select_hyperparameters,
    stage1_point,
    training_cells,
)
from src.models.variational import init_state
from src.utils.errors import ConfigError, DataError

H = 1e-6


def numeric_gradient(likelihood, params, idx, name, entry):
    """Central difference of the summed log-likelihood in one parameter entry."""
    weights = np.ones(len(idx))
    up = {k: v.copy() for k, v in params.items()}
    down = {k: v.copy() for k, v in params.items()}
    up[name][entry] += H
    down[name][entry] -= H
    ll_up, _ = likelihood.evaluate(up, idx, weights, gradient=False)
    ll_down, _ = likelihood.evaluate(down, idx, weights, gradient=False)
    return (ll_up.sum() - ll_down.sum()) / (2 * H)


def random_params(shapes, seed):
    rng = np.random.default_rng(seed)
    return {name: rng.normal(0.0, 0.5, size=shape) for name, shape in shapes.items()}


@pytest.fixture(scope="module")
def purchases(dataset):
    trips, cats = training_cells(dataset)
    bought = dataset.choices[trips, cats] >= 0
    return trips[bought], cats[bought]


@pytest.fixture(scope="module")
def tiny_config():
    return TrainingConfig(
        K=2, M=1, week_factors=1, batch_size=128, max_epochs=2, eval_every=5,
        learning_rate=0.05, monitor_size=200, seed=1,
    )


class TestStage1Likelihood:
    """Tests for the item-choice stage."""

    def test_log_probabilities_normalized(self, dataset, purchases):
        """Test that the chosen item's log probability is at most zero."""
        likelihood = Stage1Likelihood(dataset, *purchases)
        params = random_params(likelihood.block_shapes(2, 1), seed=0)
        idx = np.arange(likelihood.n_observations)
        ll, _ = likelihood.evaluate(params, idx, np.ones(len(idx)), gradient=False)

        assert np.all(ll <= 1e-12)
        assert np.all(np.isfinite(ll))

    def test_gradient_matches_finite_difference(self, dataset, purchases):
        likelihood = Stage1Likelihood(dataset, *purchases)
        params = random_params(likelihood.block_shapes(2, 1), seed=1)
        idx = np.arange(min(40, likelihood.n_observations))
        _, grads = likelihood.evaluate(params, idx, np.ones(len(idx)), gradient=True)

        h0 = int(likelihood.household[idx[0]])
        j0 = int(likelihood.items[idx[0], likelihood.chosen_slot[idx[0]]])
        for name, entry in [
            ("theta", (h0, 1)), ("gamma", (h0, 0)), ("sigma", (h0, 0)),
            ("beta", (j0, 0)), ("lam", (j0, 0)), ("rho", (j0, 0)),
        ]:
            expected = numeric_gradient(likelihood, params, idx, name, entry)
            assert grads[name][entry] == pytest.approx(expected, rel=1e-4, abs=1e-6), name

    def test_rejects_non_purchases(self, dataset):
        trips, cats = training_cells(dataset)
        empty = dataset.choices[trips, cats] < 0
        with pytest.raises(DataError, match="purchases"):
            Stage1Likelihood(dataset, trips[empty][:3], cats[empty][:3])


class TestStage2Likelihood:
    """Tests for the category purchase stage."""

    @pytest.fixture(scope="class")
    def stage2(self, dataset, tiny_config, purchases):
        stage1 = init_state(tiny_config, Stage1Likelihood(dataset, *purchases).block_shapes(2, 1), seed=4)
        table = compute_inclusive_values(stage1, dataset)
        trips, cats = training_cells(dataset)
        iv = table.lookup(dataset.trip_household[trips], cats, dataset.trip_week[trips], dataset.trip_day[trips])
        finite = np.isfinite(iv)
        return Stage2Likelihood(dataset, stage1_point(stage1, dataset), table, trips[finite], cats[finite])

    def test_gradient_matches_finite_difference(self, stage2):
        params = random_params(stage2.block_shapes(2, 1, 1), seed=2)
        idx = np.arange(min(60, stage2.n_observations))
        _, grads = stage2.evaluate(params, idx, np.ones(len(idx)), gradient=True)

        c0, t0, d0 = int(stage2.category[idx[0]]), int(stage2.week[idx[0]]), int(stage2.day[idx[0]])
        for name, entry in [
            ("beta_c", (c0, 0)), ("lam_c", (c0, 0)), ("rho_c", (c0, 0)),
            ("mu_c", (c0, 0)), ("delta", (t0, 0)), ("w", (c0, d0)),
        ]:
            expected = numeric_gradient(stage2, params, idx, name, entry)
            assert grads[name][entry] == pytest.approx(expected, rel=1e-4, abs=1e-6), name

    def test_rejects_sentinel_inclusive_values(self, dataset, stage2):
        """Test that cells with nothing available cannot enter stage 2."""
        table = InclusiveValueTable(iv=np.full((dataset.n_households, dataset.n_categories, dataset.n_weeks, 2), -np.inf))
        trips, cats = training_cells(dataset)
        means = {"theta": stage2.theta, "gamma": stage2.gamma}
        with pytest.raises(DataError, match="finite inclusive values"):
            Stage2Likelihood(dataset, means, table, trips[:5], cats[:5])


class TestFit:
    """Tests for the full two-stage fit."""

    @pytest.fixture(scope="class")
    def fitted(self, dataset, tiny_config, tmp_path_factory):
        run_dir = tmp_path_factory.mktemp("nf")
        return fit_nested_factorization(dataset, tiny_config, run_dir=run_dir), run_dir

    def test_writes_logs_and_checkpoints(self, fitted):
        _, run_dir = fitted
        for name in ("stage1_log.jsonl", "stage1_checkpoint.joblib", "stage2_log.jsonl",
                     "stage2_checkpoint.joblib", "inclusive_values.joblib"):
            assert (run_dir / name).exists(), name

    def test_probabilities_sum_to_one(self, fitted, dataset):
        model, _ = fitted
        households = np.arange(dataset.n_households)
        weeks = np.zeros(dataset.n_households, dtype=int)
        days = np.ones(dataset.n_households, dtype=int)
        for c in range(dataset.n_categories):
            probs = model.alternative_probabilities(c, households, weeks, days)
            assert probs.shape == (dataset.n_households, dataset.layouts[c].n_alternatives + 1)
            np.testing.assert_allclose(probs.sum(axis=1), 1.0)
            assert np.all(probs >= 0.0)

    def test_resume_from_finished_checkpoints(self, fitted, dataset, tiny_config):
        """Test that resuming a finished run reproduces the same model."""
        model, run_dir = fitted
        again = fit_nested_factorization(dataset, tiny_config, run_dir=run_dir, resume=True)

        assert again.stage1.equals(model.stage1)
        assert again.stage2.equals(model.stage2)

    def test_save_and_load(self, fitted, tmp_path):
        model, _ = fitted
        path = tmp_path / "nf.joblib"
        model.save(path)
        loaded = load_model(path)

        assert isinstance(loaded, NestedFactorizationModel)
        np.testing.assert_array_equal(loaded.params.theta, model.params.theta)


class TestSelectHyperparameters:
    """Tests for validation-based model selection."""

    @staticmethod
    def report(ll):
        return EventReport(model="nf", by_type={
            "own-price": EventTypeReport(event_type="own-price", n_events=3, n_skipped=0, individual_mean_ll=ll)
        })

    def test_best_score_wins(self):
        small, large = TrainingConfig(K=1, M=1), TrainingConfig(K=5, M=3)
        assert select_hyperparameters([(small, self.report(-2.0)), (large, self.report(-1.0))]) is large

    def test_ties_go_to_smaller_model(self):
        small, large = TrainingConfig(K=1, M=1), TrainingConfig(K=5, M=3)
        assert select_hyperparameters([(large, self.report(-1.0)), (small, self.report(-1.0))]) is small

    def test_missing_score_loses(self):
        unscored = EventReport(model="nf", by_type={})
        scored = TrainingConfig(K=4, M=2)
        assert select_hyperparameters([(TrainingConfig(K=1, M=1), unscored), (scored, self.report(-9.0))]) is scored

    def test_no_candidates(self):
        with pytest.raises(ConfigError):
            select_hyperparameters([])


class TestFitSelected:
    """Tests for fitting a (K, M) grid and keeping the best candidate."""

    @staticmethod
    def score_by_k(model):
        """Rewards larger K so the choice is known in advance."""
        return TestSelectHyperparameters.report(-1.0 / model.config.K)

    def test_best_candidate_returned(self, dataset, tiny_config, tmp_path):
        config = tiny_config.model_copy(update={"grid": [(1, 1), (2, 1)]})
        model, scored = fit_selected(dataset, config, self.score_by_k, run_dir=tmp_path)

        assert (model.config.K, model.config.M) == (2, 1)
        assert [(c.K, c.M) for c, _ in scored] == [(1, 1), (2, 1)]
        assert all(c.grid == [] for c, _ in scored)
        assert (tmp_path / "K1_M1" / "stage1_checkpoint.joblib").exists()
        assert (tmp_path / "K2_M1" / "stage2_checkpoint.joblib").exists()

    def test_empty_grid(self, dataset, tiny_config):
        with pytest.raises(ConfigError, match="non-empty"):
            fit_selected(dataset, tiny_config, self.score_by_k)

    def test_grid_validation(self):
        with pytest.raises(ValueError, match="distinct"):
            TrainingConfig(grid=[(2, 1), (2, 1)])
        with pytest.raises(ValueError, match=">= 1"):
            TrainingConfig(grid=[(0, 1)])
