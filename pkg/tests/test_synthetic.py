"""
Tests for the synthetic generator and its reference oracle.
"""

import numpy as np
import pandas as pd
import pytest

from src.config import TUESDAY, WEDNESDAY
from src.evaluation.elasticity import elasticity
from src.synthetic.generator import SyntheticTruth, draw_truth, generate_panel
from src.synthetic.oracle import analytic_elasticity, brute_force_probs


class TestGenerator:
    """Tests for drawing and simulating a synthetic world."""

    def test_same_seed_same_panel(self, small_config, synthetic_world):
        """Test that a seed fully determines the simulated panel."""
        panel, _, _ = synthetic_world
        again, _, _ = generate_panel(small_config, seed=11)

        pd.testing.assert_frame_equal(panel.purchases, again.purchases)
        pd.testing.assert_frame_equal(panel.visits, again.visits)

    def test_other_seed_differs(self, small_config, truth):
        """Test that a different seed draws different parameters."""
        other = draw_truth(small_config, seed=12)
        assert not np.allclose(other.params.theta, truth.params.theta)

    def test_trips_on_session_days(self, synthetic_world):
        """Test that every trip falls on a Tuesday or Wednesday."""
        panel, _, _ = synthetic_world
        assert set(panel.visits["weekday"].unique()) <= {TUESDAY, WEDNESDAY}

    def test_unit_demand(self, synthetic_world):
        """Test at most one purchase per trip and category."""
        panel, _, _ = synthetic_world
        assert not panel.purchases.duplicated(["household_id", "date", "category"]).any()

    def test_price_process(self, truth):
        """Test that next Tuesday repeats the previous Wednesday price."""
        np.testing.assert_allclose(truth.price[:, 1:, 0], truth.price[:, :-1, 1])
        assert np.all(truth.price > 0)

    def test_truth_round_trip(self, truth, tmp_path):
        """Test that a saved truth loads back with identical arrays."""
        path = truth.save(tmp_path / "truth.json")
        loaded = SyntheticTruth.load(path)

        assert loaded.household_ids == truth.household_ids
        assert loaded.upcs == truth.upcs
        np.testing.assert_allclose(loaded.params.theta, truth.params.theta)
        np.testing.assert_allclose(loaded.price, truth.price)
        np.testing.assert_array_equal(loaded.available, truth.available)
        assert loaded.config == truth.config


class TestOracle:
    """Tests for the plain-loop reference computations."""

    def test_probabilities_sum_to_one(self, truth):
        probs = brute_force_probs(truth, 0, 1, 3, 1)
        assert sum(probs) == pytest.approx(1.0)
        assert len(probs) == truth.config.items_per_category + 1

    def test_nothing_available(self, truth):
        """Test that an empty choice set puts all mass on the outside good."""
        n = truth.config.items_per_category
        probs = brute_force_probs(truth, 0, 0, 0, 0, available=[False] * n)
        assert probs == [0.0] * n + [1.0]

    def test_other_category_has_no_cross_effect(self, truth):
        items_a, items_b = truth.category_items(0), truth.category_items(1)
        assert analytic_elasticity(truth, 0, int(items_a[0]), 0, 0, other=int(items_b[0])) == 0.0

    def test_analytic_matches_finite_difference(self, truth, dataset, truth_demand):
        """Test own and cross elasticities against central differences of the model."""
        category = 0
        items = [int(j) for j in dataset.category_items(category)]
        all_available = dataset.available[items].all(axis=0)
        week, day = (int(x[0]) for x in np.nonzero(all_available))
        i = 0
        h = truth.household_ids.index(dataset.household_ids[i])

        for item in items[:2]:
            for other in items[:3]:
                expected = analytic_elasticity(truth, h, item, week, day, other=other)
                got = elasticity(truth_demand, dataset, i, item, other=other, week=week, day=day, step=1e-3)
                assert got == pytest.approx(expected, rel=1e-3, abs=1e-5)
