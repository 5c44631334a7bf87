"""
Tests for the multinomial, nested and mixed logit baselines.
"""

import numpy as np
import pytest

from src.data.schemas import LogitConfig, LogitSpec
from src.models.logit import (
    CategoryLogitData,
    LogitInputs,
    LogitObjective,
    build_category_data,
    fit_logit_models,
    fit_mixed_logit,
    fit_mnl,
    fit_nested_logit,
    halton_draws,
    parameter_layout,
    predict_probs,
)
from src.utils.errors import DataError

PLAIN = dict(controls="none", week_effects=False, weekday=False)


def simulated_data(alpha, eta, n=4000, seed=0, never_chosen=False):
    """Choices drawn from a known MNL with the outside utility at zero."""
    rng = np.random.default_rng(seed)
    A = len(alpha)
    log_price = np.log(rng.uniform(0.5, 2.0, size=(n, A)))
    V = np.asarray(alpha)[None, :] + eta * log_price
    expV = np.column_stack([np.exp(V), np.ones(n)])
    probs = expV / expV.sum(axis=1, keepdims=True)
    choice = (probs.cumsum(axis=1) < rng.random(n)[:, None]).sum(axis=1)
    if never_chosen:
        choice[choice == 0] = A
    return CategoryLogitData(
        category=0,
        labels=[f"item{a}" for a in range(A)],
        households=np.arange(n) % 50,
        weeks=np.zeros(n, dtype=int),
        days=rng.integers(0, 2, size=n),
        log_price=log_price,
        available=np.ones((n, A), dtype=bool),
        choice=choice,
        D=np.zeros((n, 0)),
        covariate_names=[],
        week_offset=np.zeros(n),
        control=np.zeros((n, A)),
        outside_control=np.zeros(n),
    )


@pytest.fixture(scope="module")
def mnl_data():
    return simulated_data([0.5, -0.2], -2.0)


class TestMnl:
    """Tests for plain multinomial logit estimation."""

    def test_recovers_parameters(self, mnl_data):
        fit = fit_mnl(mnl_data, LogitSpec(name="mnl", **PLAIN))

        assert fit.converged
        assert fit.coefficient("eta")[0] == pytest.approx(-2.0, abs=0.25)
        np.testing.assert_allclose(fit.params()["alpha"], [0.5, -0.2], atol=0.2)
        estimate, se, p_value = fit.coefficient("eta")
        assert 0 < se < 0.5 and p_value < 1e-6

    def test_probabilities(self, mnl_data):
        """Test that predictions cover the alternatives plus the outside good."""
        fit = fit_mnl(mnl_data, LogitSpec(name="mnl", **PLAIN))
        probs = predict_probs(fit, mnl_data)

        assert probs.shape == (mnl_data.n, 3)
        np.testing.assert_allclose(probs.sum(axis=1), 1.0)

    def test_predicted_shares_match_observed(self, mnl_data):
        """Test the first-order condition of the alternative constants at the optimum."""
        fit = fit_mnl(mnl_data, LogitSpec(name="mnl", **PLAIN))
        probs = predict_probs(fit, mnl_data)
        observed = np.bincount(mnl_data.choice, minlength=probs.shape[1]) / mnl_data.n

        np.testing.assert_allclose(probs.mean(axis=0), observed, atol=1e-4)

    def test_unavailable_alternative_gets_zero(self, mnl_data):
        fit = fit_mnl(mnl_data, LogitSpec(name="mnl", **PLAIN))
        rows = mnl_data.subset(np.arange(10))
        rows.available[:, 1] = False
        probs = predict_probs(fit, rows)

        assert np.all(probs[:, 1] == 0.0)
        np.testing.assert_allclose(probs.sum(axis=1), 1.0)

    def test_never_chosen_alternative_is_ridged(self):
        data = simulated_data([0.5, -0.2], -2.0, n=800, never_chosen=True)
        fit = fit_mnl(data, LogitSpec(name="mnl", **PLAIN))

        assert fit.ridge
        assert np.isfinite(fit.params()["alpha"]).all()

    def test_no_price_variation_is_not_identified(self, mnl_data):
        flat = mnl_data.subset(np.arange(500))
        flat.log_price[:] = 0.0
        fit = fit_mnl(flat, LogitSpec(name="mnl", **PLAIN))

        assert "eta" in fit.inestimable
        assert fit.coefficient("eta")[0] == 0.0

    def test_empty_data(self, mnl_data):
        with pytest.raises(DataError, match="No observations"):
            fit_mnl(mnl_data.subset(np.array([], dtype=int)), LogitSpec(name="mnl", **PLAIN))


class TestNestedLogit:
    """Tests for the single-nest logit."""

    def test_fit_within_bounds(self, mnl_data):
        data = mnl_data.subset(np.arange(1500))
        spec = LogitSpec(name="nested", variant="nested", **PLAIN)
        nested = fit_nested_logit(data, spec)
        mnl = fit_mnl(data, LogitSpec(name="mnl", **PLAIN))

        assert 0.01 <= nested.params()["lambda"][0] <= 1.0
        assert nested.log_likelihood >= mnl.log_likelihood - 1.0
        np.testing.assert_allclose(predict_probs(nested, data).sum(axis=1), 1.0)


class TestObjectiveGradient:
    """Tests for analytic gradients of the logit objectives."""

    @pytest.mark.parametrize("variant", ["mnl", "nested"])
    def test_matches_finite_difference(self, mnl_data, variant):
        spec = LogitSpec(name=variant, variant=variant, controls="none", week_effects=False, weekday=True)
        data = mnl_data.subset(np.arange(300))
        layout = parameter_layout(spec, data)
        objective = LogitObjective(data, spec, layout)
        rng = np.random.default_rng(1)
        x = rng.normal(0.0, 0.3, size=layout.size)
        if "lambda" in layout.blocks:
            x[layout.slices()["lambda"].start] = 0.7

        _, grad = objective(x)
        h = 1e-6
        for k in range(layout.size):
            step = np.zeros_like(x)
            step[k] = h
            numeric = (objective(x + step)[0] - objective(x - step)[0]) / (2 * h)
            assert grad[k] == pytest.approx(numeric, rel=1e-4, abs=1e-5)

    def test_hpf_spec_needs_controls(self, mnl_data):
        spec = LogitSpec(name="hpf", controls="hpf")
        with pytest.raises(DataError, match="attach_hpf_controls"):
            LogitObjective(mnl_data, spec, parameter_layout(spec, mnl_data))


class TestMixedLogit:
    """Tests for simulated maximum likelihood."""

    def test_halton_draws_are_fixed(self):
        first = halton_draws(5, 20, 2, seed=3)
        assert first.shape == (5, 20, 2)
        np.testing.assert_array_equal(first, halton_draws(5, 20, 2, seed=3))

    def test_not_worse_than_mnl(self, mnl_data):
        """Test that the mixed fit never ends below its zero-mixing MNL point."""
        data = mnl_data.subset(np.arange(600))
        spec = LogitSpec(name="mixed", variant="mixed", random_price=True, draws=100, **PLAIN)
        mixed = fit_mixed_logit(data, spec, LogitConfig(max_iter=100), seed=0, n_households=50)
        mnl = fit_mnl(data, LogitSpec(name="mnl", **PLAIN))

        assert mixed.log_likelihood >= mnl.log_likelihood - 1e-6
        assert mixed.params()["sd_eta"][0] >= 0.0
        probs = predict_probs(mixed, data)
        np.testing.assert_allclose(probs.sum(axis=1), 1.0)


class TestDatasetModels:
    """Tests for logit models fitted on the dense dataset."""

    def test_category_data_in_alternative_space(self, dataset):
        data = build_category_data(dataset, 0)
        layout = dataset.layouts[0]

        assert data.log_price.shape == (data.n, layout.n_alternatives)
        assert np.all((data.choice >= -1) & (data.choice <= layout.n_alternatives))

    def test_fit_and_predict(self, dataset):
        spec = LogitSpec(name="mnl_plain", controls="none")
        model = fit_logit_models(dataset, spec, categories=[0])
        households = np.arange(5)
        probs = model.alternative_probabilities(0, households, np.zeros(5, dtype=int), np.ones(5, dtype=int))

        assert model.name == "mnl_plain"
        np.testing.assert_allclose(probs.sum(axis=1), 1.0)
        with pytest.raises(DataError, match="not fitted"):
            model.alternative_probabilities(1, households, np.zeros(5, dtype=int), np.zeros(5, dtype=int))

    def test_hpf_spec_without_controls(self, dataset):
        with pytest.raises(DataError, match="needs HPF controls"):
            fit_logit_models(dataset, LogitSpec(name="mnl_hpf", controls="hpf"), categories=[0])

    def test_unknown_household(self, dataset):
        inputs = LogitInputs.from_dataset(dataset)
        with pytest.raises(DataError, match="Unknown household"):
            inputs.context(0, np.array([dataset.n_households]), np.array([0]), np.array([0]))
