"""
Tests for coupon targeting and personalized pricing.
"""

from types import SimpleNamespace

import numpy as np
import pytest

from src.data.schemas import TargetingScenario, TwoPriceReport
from src.targeting.coupons import (
    MERGED_CELL,
    allocate_by_cell,
    coupon_sessions,
    coupon_targeting,
    household_gains,
    merge_small_cells,
    top_n,
)
from src.targeting.pricing import (
    bucket_by_fraction,
    candidate_prices,
    expected_profit,
    expected_profits,
    profit,
    two_price_assignment,
)
from src.utils.errors import DataError


class TestCells:
    """Tests for cell merging and cell-level allocation."""

    def test_small_cells_pooled(self):
        labels = np.array(["a"] * 6 + ["b"] * 3 + ["c"] * 3)
        merged, n_merged = merge_small_cells(labels, min_size=5)

        assert n_merged == 2
        assert set(merged) == {"a", MERGED_CELL}
        assert (merged == MERGED_CELL).sum() == 6

    def test_small_merged_cell_joins_largest(self):
        """Test that a merged cell still below the minimum joins the largest cell."""
        labels = np.array(["a"] * 6 + ["b"] * 2 + ["c"] * 2)
        merged, n_merged = merge_small_cells(labels, min_size=5)

        assert n_merged == 2
        assert set(merged) == {"a"}

    def test_nothing_to_merge(self):
        labels = np.array(["a"] * 5 + ["b"] * 5)
        merged, n_merged = merge_small_cells(labels, min_size=5)
        assert n_merged == 0
        np.testing.assert_array_equal(merged, labels)

    def test_allocate_fills_best_cell_first(self):
        """Test that the partially covered cell contributes its mean truth gain."""
        cells = np.array(["x", "x", "y", "y"])
        gain = allocate_by_cell(cells, np.array([1.0, 1.0, 0.0, 0.0]), np.array([2.0, 4.0, 10.0, 10.0]), 3)
        assert gain == pytest.approx(16.0)

    def test_top_n_ties(self):
        np.testing.assert_array_equal(top_n(np.array([1.0, 3.0, 3.0, 2.0]), 2), [1, 2])
        np.testing.assert_array_equal(top_n(np.array([5.0, 5.0, 5.0]), 2), [0, 1])


class TestCoupons:
    """Tests for coupon simulations on the synthetic world."""

    def test_sessions_are_seeded_and_available(self, dataset):
        item = dataset.top_item(0)
        weeks, days = coupon_sessions(dataset, item, seed=2)
        again = coupon_sessions(dataset, item, seed=2)

        np.testing.assert_array_equal(weeks, again[0])
        assert dataset.available[item, weeks, days].all()

    def test_discount_range(self, dataset):
        item = dataset.top_item(0)
        weeks, days = coupon_sessions(dataset, item)
        with pytest.raises(ValueError, match="discount"):
            household_gains(None, dataset, item, 0.0, weeks, days)

    def test_truth_targeting_beats_uniform(self, dataset, truth_demand):
        """Test that individualized targeting by the truth model never loses to uniform coupons."""
        report = coupon_targeting(TargetingScenario(category=0), truth_demand, truth_demand, dataset)

        assert report.n_selected == int(np.floor(0.3 * dataset.n_households))
        assert set(report.regimes) == {"individualized", "demographic", "behavioral", "uniform"}
        individualized = report.regimes["individualized"].expected_gain
        assert individualized >= report.uniform_gain - 1e-12
        assert report.regimes["uniform"].pct_vs_uniform == 0.0

    @pytest.mark.parametrize("category", [0, 1, 2])
    def test_regime_ordering(self, dataset, truth_demand, category):
        """Test that individualized targeting by the truth model beats every coarser regime."""
        report = coupon_targeting(TargetingScenario(category=category), truth_demand, truth_demand, dataset)
        gains = {name: regime.expected_gain for name, regime in report.regimes.items()}

        assert report.n_selected == int(np.floor(0.3 * dataset.n_households))
        assert gains["individualized"] >= gains["demographic"] - 1e-12
        assert gains["individualized"] >= gains["behavioral"] - 1e-12
        assert gains["individualized"] >= gains["uniform"] - 1e-12

    def test_upc_outside_category(self, dataset, truth_demand):
        other = dataset.upcs[dataset.category_items(1)[0]]
        with pytest.raises(DataError, match="not in category"):
            coupon_targeting(TargetingScenario(category=0, upc=other), truth_demand, truth_demand, dataset)


class TestProfit:
    """Tests for expected profit."""

    def test_margin(self):
        assert profit(0.5, 2.0, 1.0) == pytest.approx(0.5)

    def test_below_cost(self):
        with pytest.raises(ValueError, match="below marginal cost"):
            profit(0.5, 0.9, 1.0)

    def test_model_profit(self, dataset, truth_demand):
        item = dataset.top_item(0)
        cost = float(dataset.cost[item])
        households = np.arange(3)
        values = expected_profits(truth_demand, dataset, item, cost + 1.0, households, [0, 0, 0], [1, 1, 1])

        assert values.shape == (3,)
        assert np.all((values >= 0.0) & (values <= 1.0))
        assert expected_profit(truth_demand, dataset, 1, item, cost + 1.0, week=0, day=1) == pytest.approx(values[1])
        with pytest.raises(ValueError):
            expected_profit(truth_demand, dataset, 0, item, cost - 0.01)


class TestTwoPrice:
    """Tests for personalized two-price assignment."""

    @pytest.fixture
    def priced(self):
        price = np.array([[[1.0, 1.0], [1.0, 1.2], [1.2, 1.2], [0.5, 1.5]]])
        return SimpleNamespace(
            upcs=["u0"], price=price, available=np.ones_like(price, dtype=bool), cost=np.array([0.6])
        )

    def test_most_common_prices(self, priced):
        """Test that prices below cost never qualify."""
        assert candidate_prices(priced, 0) == [1.0, 1.2]

    def test_too_few_prices(self, priced):
        with pytest.raises(DataError, match="distinct prices"):
            candidate_prices(priced, 0, n_prices=4)

    def test_assignment(self, dataset, truth_demand):
        item = dataset.top_item(0)
        cost = float(dataset.cost[item])
        report, assignment = two_price_assignment(truth_demand, dataset, item, prices=[cost + 0.5, cost + 0.1])

        assert report.prices == sorted([cost + 0.5, cost + 0.1])
        assert len(report.groups) == 2
        assert 0.0 <= report.preferred_fraction <= 1.0
        assert set(assignment["assigned_price"]) <= set(report.prices)
        assert sum(g.n_households for g in report.groups) == len(assignment)

    def test_assignment_needs_two_prices(self, dataset, truth_demand):
        item = dataset.top_item(0)
        with pytest.raises(ValueError, match="Two candidate prices"):
            two_price_assignment(truth_demand, dataset, item, prices=[float(dataset.cost[item]) + 1.0])

    def test_bucket_by_fraction(self):
        reports = [
            TwoPriceReport(upc="u", model="m", cost=0.5, prices=[1.0, 2.0], preferred_price=1.0,
                           preferred_fraction=fraction, groups=[], pct_gain=gain)
            for fraction, gain in ((0.51, 10.0), (0.53, 20.0), (1.0, 5.0))
        ]
        table = bucket_by_fraction(reports)

        assert table["range"].tolist() == ["50-55%", "95-100%"]
        assert table["items"].tolist() == [2, 1]
        assert table["mean_pct_gain"].tolist() == pytest.approx([15.0, 5.0])
