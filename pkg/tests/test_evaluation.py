"""
Tests for event extraction, event likelihoods, placebo shifts and predictive fit.
"""

from types import SimpleNamespace

import numpy as np
import pandas as pd
import pytest
from scipy.special import gammaln, i0
from scipy.stats import skellam

from src.data.schemas import EvaluationConfig
from src.evaluation.counterfactual import (
    EVENT_TYPES,
    bernoulli_log_likelihood,
    counterfactual_event_likelihood,
    daily_purchase_rates,
    extract_events,
    focal_items,
    score_events,
    skellam_log_pmf,
)
from src.evaluation.elasticity import (
    elasticities,
    elasticity_summary,
    sample_sessions,
    split_terciles,
    tercile_demand_validation,
)
from src.evaluation.placebo import placebo_shift, run_placebo_suite
from src.evaluation.predictive import (
    category_ranks,
    decile_split,
    fit_table,
    never_buyer_deciles,
    personalization_metrics,
    predictive_fit,
    rank_models_by_category,
)
from src.models.base import item_columns
from src.utils.errors import DataError


def hand_grid(price, available=None):
    price = np.asarray(price, dtype=float)
    return SimpleNamespace(
        upcs=[f"u{j}" for j in range(price.shape[0])],
        item_category=np.zeros(price.shape[0], dtype=int),
        weeks=list(range(price.shape[1])),
        price=price,
        available=np.isfinite(price) if available is None else available,
    )


class LogLinearMnl:
    """Logit in log price with the outside utility at zero, used as an elasticity oracle."""

    name = "log_linear_mnl"

    def __init__(self, dataset, eta):
        self.dataset = dataset
        self.layouts = dataset.layouts
        self.eta = eta
        self.alpha = np.linspace(-1.0, 0.5, dataset.n_items)

    def item_probabilities(self, category, households, weeks, days, log_price=None, available=None):
        if log_price is None:
            log_price, available = self.dataset.session_prices(category, weeks, days)
        items = self.dataset.category_items(category)
        expu = np.where(available, np.exp(self.alpha[items] + self.eta * log_price), 0.0)
        total = 1.0 + expu.sum(axis=1, keepdims=True)
        return np.column_stack([expu / total, 1.0 / total])

    def alternative_probabilities(self, category, households, weeks, days, log_price=None, available=None):
        probs = self.item_probabilities(category, households, weeks, days, log_price, available)
        return self.layouts[category].aggregate(probs)


class TestExtractEvents:
    """Tests for Tuesday-to-Wednesday event extraction."""

    def test_own_and_cross_price(self):
        """Test that each item's own change is a cross change for its competitor."""
        grid = hand_grid([
            [[1.0, 0.8], [1.0, 1.0]],
            [[2.0, 2.0], [1.0, 1.5]],
        ])
        events = extract_events(grid)

        assert events["event_type"].tolist() == ["own-price", "own-price", "cross-price", "cross-price"]
        assert events["item"].tolist() == [0, 1, 0, 1]
        assert events["week"].tolist() == [0, 1, 1, 0]
        np.testing.assert_allclose(events["magnitude"], [-0.2, 0.5, 0.5, -0.2])

    def test_small_changes_ignored(self):
        grid = hand_grid([[[1.0, 0.95]], [[1.0, 1.0]]])
        assert extract_events(grid).empty

    def test_out_of_stock(self):
        """Test that a competitor leaving the shelf on Wednesday is a stock-out event."""
        grid = hand_grid([[[1.0, 1.0]], [[2.0, np.nan]]])
        events = extract_events(grid)

        assert len(events) == 1
        row = events.iloc[0]
        assert (row["event_type"], row["item"], row["magnitude"]) == ("out-of-stock", 0, -1.0)

    def test_focal_items_only(self):
        grid = hand_grid([
            [[1.0, 0.8], [1.0, 1.0]],
            [[2.0, 2.0], [1.0, 1.5]],
        ])
        assert set(extract_events(grid, items=[1])["item"]) == {1}


class TestSkellam:
    """Tests for the difference-of-Poissons likelihood."""

    def test_matches_scipy(self):
        k = np.arange(-6, 7)
        np.testing.assert_allclose(skellam_log_pmf(k, 2.0, 1.5), skellam.logpmf(k, 2.0, 1.5), rtol=1e-8)

    def test_sums_to_one(self):
        k = np.arange(-60, 61)
        assert np.exp(skellam_log_pmf(k, 3.0, 4.0)).sum() == pytest.approx(1.0, rel=1e-8)

    def test_known_value(self):
        """Test the zero difference at unit rates against exp(-2) I0(2)."""
        assert skellam_log_pmf(0, 1.0, 1.0) == pytest.approx(-2.0 + np.log(i0(2.0)), rel=1e-12)
        assert skellam_log_pmf(0, 1.0, 1.0) == pytest.approx(-1.1760065, abs=1e-7)

    @pytest.mark.parametrize("a", [0.5, 2.0, 10.0])
    @pytest.mark.parametrize("b", [0.5, 2.0, 10.0])
    def test_symmetry_and_normalization(self, a, b):
        k = np.arange(-150, 151)
        np.testing.assert_allclose(skellam_log_pmf(k, a, b), skellam_log_pmf(-k, b, a), rtol=1e-12)
        assert np.exp(skellam_log_pmf(k, a, b)).sum() == pytest.approx(1.0, abs=1e-9)

    def test_underflow_fallback(self):
        """Test that large counts at tiny rates use the leading series term."""
        value = skellam_log_pmf(120, 1e-3, 1e-3)
        expected = -2e-3 + 120 * np.log(1e-3) - gammaln(121.0)

        assert np.isfinite(value)
        assert value == pytest.approx(expected, rel=1e-6)

    def test_rejects_bad_rates(self):
        with pytest.raises(ValueError, match="positive"):
            skellam_log_pmf(0, 0.0, 1.0)
        with pytest.raises(ValueError):
            skellam_log_pmf(0, 1.0, np.inf)

    def test_bernoulli_clips(self):
        ll = bernoulli_log_likelihood(np.array([1.0, 0.0]), np.array([0.0, 1.0]))
        assert np.all(np.isfinite(ll))


class TestEventLikelihood:
    """Tests for scoring a model on the synthetic events."""

    def test_truth_model_report(self, dataset, truth_demand):
        events = extract_events(dataset, focal_items(dataset))
        report = counterfactual_event_likelihood(truth_demand, events, dataset, label="train", replicates=50)

        assert set(report.by_type) == set(EVENT_TYPES)
        assert report.model == "truth"
        for r in report.by_type.values():
            assert r.n_skellam + r.n_bernoulli == r.n_events
            if r.n_events:
                assert r.individual_mean_ll <= 0.0

    def test_rates_count_every_split(self, dataset):
        rates = daily_purchase_rates(dataset)
        assert rates.sum() * 2 * dataset.n_weeks == pytest.approx((dataset.choices >= 0).sum())

    @pytest.mark.parametrize("rate, branch", [(2.4, "bernoulli"), (2.6, "skellam")])
    def test_popular_branch_boundary(self, dataset, truth_demand, rate, branch):
        """Test that the branch switches where the item's daily rate crosses the threshold."""
        events = extract_events(dataset, focal_items(dataset))
        rates = daily_purchase_rates(dataset)
        usable = score_events(truth_demand, events, dataset, "train")
        usable = usable[~usable["skipped"]]
        item = int(usable["item"][rates[usable["item"].to_numpy()] > 0].iloc[0])
        threshold = rates[item] * 2.5 / rate

        scored = score_events(truth_demand, events[events["item"] == item], dataset, "train", threshold)
        scored = scored[~scored["skipped"]]
        assert len(scored)
        assert (scored["branch"] == branch).all()


class TestPlaceboShift:
    """Tests for relocating price changes to change-free weeks."""

    PRICE = np.array([[1.0, 1.0], [1.0, 0.8], [1.0, 1.0], [1.0, 1.0]])

    def test_forward(self):
        shifted, relocation = placebo_shift(self.PRICE, "forward")

        assert relocation == {1: 2}
        assert shifted[1, 1] == 1.0
        assert shifted[2, 1] == pytest.approx(0.8)
        np.testing.assert_array_equal(shifted[:, 0], self.PRICE[:, 0])

    def test_backward(self):
        _, relocation = placebo_shift(self.PRICE, "backward")
        assert relocation == {1: 0}

    def test_falls_back_to_other_direction(self):
        """Test that a change in the last week moves backward when shifted forward."""
        price = np.array([[1.0, 1.0], [1.0, 1.0], [1.0, 0.8]])
        _, relocation = placebo_shift(price, "forward")
        assert relocation == {2: 1}

    @pytest.mark.parametrize("mode, expected", [("forward", {2: 3, 5: 6}), ("backward", {2: 1, 5: 4})])
    def test_two_changes(self, mode, expected):
        """Test that changes in weeks 2 and 5 move one week over and never land on a change week."""
        price = np.ones((8, 2))
        price[[2, 5], 1] = 0.8
        shifted, relocation = placebo_shift(price, mode)

        assert relocation == expected
        assert not set(relocation.values()) & set(relocation)
        changed = np.flatnonzero(np.abs(shifted[:, 1] - shifted[:, 0]) > 0.005)
        assert changed.tolist() == sorted(expected.values())

    def test_no_free_week(self):
        price = np.array([[1.0, 0.8], [1.0, 1.2]])
        with pytest.raises(DataError, match="No change-free week"):
            placebo_shift(price, "forward")

    def test_unknown_mode(self):
        with pytest.raises(ValueError, match="mode"):
            placebo_shift(self.PRICE, "sideways")

    def test_suite_on_dataset(self, dataset):
        """Test that every mode and scope gets a result and p-values are probabilities."""
        report = run_placebo_suite(dataset, categories=[0])

        assert len(report.results) == 4
        for r in report.results:
            assert r.failed or 0.0 <= r.p_value <= 1.0
        assert set(report.fitted) == {"forward/single", "forward/all", "backward/single", "backward/all"}


class TestPredictiveFit:
    """Tests for per-purchase predictive metrics."""

    def test_hand_computed(self):
        probs = np.array([[0.5, 0.5], [0.25, 0.75]])
        report = predictive_fit(probs, np.array([0, 1]))

        assert report.n_purchases == 1
        assert report.mean_log_likelihood == pytest.approx(np.log(0.5) + np.log(0.75))
        assert report.mean_squared_error == pytest.approx(0.625)

    def test_no_purchases(self):
        with pytest.raises(DataError, match="No purchases"):
            predictive_fit(np.array([[0.5, 0.5]]), np.array([1]))

    def test_clipped_outcome_is_counted(self):
        report = predictive_fit(np.array([[0.0, 1.0]]), np.array([0]))
        assert report.n_clipped == 1
        assert np.isfinite(report.mean_log_likelihood)

    def test_fit_table_rows(self, dataset, truth_demand):
        table = fit_table({"truth": truth_demand}, dataset)

        assert len(table) == dataset.n_categories + 1
        assert table["category"].iloc[-1] == "all"
        assert table["n_cells"].iloc[-1] == table["n_cells"].iloc[:-1].sum()


class TestRanks:
    """Tests for per-category model ranking."""

    @pytest.fixture
    def table(self):
        return pd.DataFrame({
            "model": ["a", "b", "a", "b", "a"],
            "split": ["test"] * 5,
            "category": ["x", "x", "y", "y", "all"],
            "mean_log_likelihood": [-1.0, -2.0, -1.0, -1.0, -1.0],
            "mean_squared_error": [0.3, 0.2, 0.1, 0.4, 0.2],
        })

    def test_ties_share_rank(self, table):
        ranks = category_ranks(table)
        y = ranks[ranks["category"] == "y"]

        assert y["rank_ll"].tolist() == [1.5, 1.5]
        assert y["best_ll"].all()
        assert "all" not in set(ranks["category"])

    def test_summary(self, table):
        summary = rank_models_by_category(table).set_index("model")

        assert summary.loc["a", "mean_rank_ll"] == pytest.approx(1.25)
        assert summary.loc["a", "pct_best_ll"] == pytest.approx(100.0)
        assert summary.loc["b", "pct_best_ll"] == pytest.approx(50.0)
        assert summary.loc["b", "mean_rank_se"] == pytest.approx(1.5)


class TestPersonalization:
    """Tests for household-level spread and calibration."""

    def test_calibration_slope(self):
        predicted = np.array([[0.1, 0.2], [0.2, 0.4], [0.3, 0.6]])
        actual = 2.0 * predicted + 0.05
        report = personalization_metrics(predicted, actual)

        assert report.slope == pytest.approx(2.0)
        assert report.n_columns == 2 and report.n_households == 3

    def test_constant_predictions(self):
        """Test that predictions without spread leave the slope undefined."""
        predicted = np.full((4, 1), 0.2)
        report = personalization_metrics(predicted, np.array([[0.0], [1.0], [0.0], [0.0]]), level="category")

        assert report.coefficient_of_variation == 0.0
        assert report.slope is None and not report.slope_defined

    def test_households_without_trips_ignored(self):
        predicted = np.array([[0.1], [np.nan], [0.3]])
        actual = np.array([[0.0], [np.nan], [1.0]])
        report = personalization_metrics(predicted, actual)

        assert report.n_households == 2
        assert report.slope == pytest.approx(5.0)


class TestElasticity:
    """Tests for elasticities over sampled sessions."""

    def test_truth_own_elasticities_negative(self, dataset, truth_demand):
        config = EvaluationConfig(elasticity_households=10, elasticity_sessions=2)
        summary, products = elasticity_summary(truth_demand, dataset, config, seed=1)

        assert summary.model == "truth"
        assert summary.median_own < 0.0
        assert (products["mean_own"] < 0.0).all()
        assert summary.n_households == 10

    def test_matches_logit_closed_form(self, dataset):
        """Test own eta (1 - P) and cross -eta P against a logit with known price coefficient."""
        eta = -2.0
        model = LogLinearMnl(dataset, eta)
        mover, other = (int(j) for j in dataset.category_items(0)[:2])
        households, weeks, days = sample_sessions(dataset, 20, 3, seed=4)

        e = elasticities(model, dataset, 0, mover, households, weeks, days, targets=[mover, other])
        p = item_columns(model, 0, [mover, other], households, weeks, days)
        own, cross = np.isfinite(e[:, 0]), np.isfinite(e[:, 1])

        assert own.any() and cross.any()
        np.testing.assert_allclose(e[own, 0], eta * (1.0 - p[own, 0]), rtol=1e-3)
        np.testing.assert_allclose(e[cross, 1], -eta * p[cross, 0], rtol=1e-3)

    def test_sessions_seeded(self, dataset):
        first = sample_sessions(dataset, 5, 3, seed=2)
        second = sample_sessions(dataset, 5, 3, seed=2)

        assert len(first[0]) == 15
        for a, b in zip(first, second):
            np.testing.assert_array_equal(a, b)

    def test_split_terciles(self):
        """Test that the most negative scores land in the first tercile."""
        groups = split_terciles(np.array([0.0, -3.0, -1.0, -2.0, 1.0, 0.0]))
        assert [g.tolist() for g in groups] == [[1, 3], [2, 0], [5, 4]]

    def test_tercile_validation_shapes(self, dataset, truth_demand):
        events = extract_events(dataset, focal_items(dataset))
        buckets, response = tercile_demand_validation(truth_demand, dataset, events, label="train")

        assert response["tercile"].tolist() == [0, 1, 2]
        assert set(buckets["tercile"]) <= {0, 1, 2}
        assert {"d_rate", "sparse", "tercile_label"} <= set(buckets.columns)


class TestNeverBuyers:
    """Tests for never-buyer decile tables."""

    def test_deciles(self, dataset, truth_demand):
        table, skipped = never_buyer_deciles(truth_demand, dataset, min_eligible=1, n_bins=2)

        assert table["decile"].tolist() == [1, 2]
        assert skipped >= 0
        assert (table["purchases"] <= table["trips"]).all()

    def test_decile_sizes(self):
        """Test that bins differ by at most one household and ascend in score."""
        scores = np.random.default_rng(3).random(23)
        scores[[4, 9]] = scores[0]
        bins = decile_split(scores)
        sizes = [len(b) for b in bins]

        assert sum(sizes) == 23 and max(sizes) - min(sizes) <= 1
        ordered = np.concatenate(bins)
        assert np.all(np.diff(scores[ordered]) >= 0.0)
        ties = [int(i) for i in ordered if scores[i] == scores[0]]
        assert ties == [0, 4, 9]

    def test_too_few_eligible(self, dataset, truth_demand):
        """Test that columns below the eligibility floor are skipped and counted."""
        table, skipped = never_buyer_deciles(truth_demand, dataset, min_eligible=10 ** 6)

        assert skipped == len(focal_items(dataset))
        assert (table["households"] == 0).all()
