"""
Tests for panel ingestion, the session grid and the holdout split.
"""

from dataclasses import replace
from datetime import date

import numpy as np
import pandas as pd
import pytest

from src.config import TUESDAY, WEDNESDAY
from src.data.dataset import build_choice_dataset
from src.data.panel import (
    POOLED_SUFFIX,
    apply_category_filters,
    build_session_grid,
    export_panel,
    ingest_transactions,
    load_panel,
    resolve_unit_demand,
    restrict_sample,
)
from src.data.schemas import FilterConfig, GridConfig, SampleConfig
from src.utils.errors import DataError, MissingArtifactError


@pytest.fixture
def raw_files(tmp_path):
    """A tiny panel: two households, one category, two weeks."""
    transactions = pd.DataFrame([
        ["h1", "2005-05-03", "a", 1, 1.00, 0],
        ["h1", "2005-05-04", "b", 1, 2.00, 0],
        ["h2", "2005-05-04", "a", 1, 0.80, 0],
        ["h2", "2005-05-04", "b", 0, "", 1],
        ["h2", "2005-05-10", "a", 2, 0.80, 0],
        ["h1", "2005-05-11", "zzz", 1, 1.00, 0],
        ["h1", "2005-05-11", "b", 0, "", 0],
    ], columns=["household_id", "date", "upc", "quantity", "price", "oos_flag"])
    hierarchy = pd.DataFrame({
        "upc": ["a", "b"],
        "category": ["milk", "milk"],
        "class": ["dairy", "dairy"],
        "subclass": ["whole", "skim"],
        "cost": [0.5, ""],
    })
    paths = {"transactions": tmp_path / "tx.csv", "hierarchy": tmp_path / "hier.csv"}
    transactions.to_csv(paths["transactions"], index=False)
    hierarchy.to_csv(paths["hierarchy"], index=False)
    return paths


class TestIngest:
    """Tests for reading raw transaction files."""

    def test_week_and_weekday(self, raw_files):
        """Test that weeks count from the Monday before the first trip."""
        panel = ingest_transactions(raw_files["transactions"], raw_files["hierarchy"])

        assert panel.origin == date(2005, 5, 2)
        assert panel.weeks == [0, 1]
        first = panel.purchases.iloc[0]
        assert (first["week"], first["weekday"]) == (0, TUESDAY)
        assert set(panel.purchases["weekday"]) == {TUESDAY, WEDNESDAY}

    def test_rejected_rows(self, raw_files):
        """Test that unknown UPCs and unflagged zero quantities are reported, not kept."""
        panel = ingest_transactions(raw_files["transactions"], raw_files["hierarchy"])

        assert sorted(panel.rejected["reason"]) == ["unknown upc", "zero quantity without out-of-stock flag"]
        assert len(panel.purchases) == 4
        assert len(panel.oos) == 1

    def test_trip_without_retained_purchase_is_kept(self, raw_files):
        """Test that a trip whose only rows were rejected still counts as a visit."""
        panel = ingest_transactions(raw_files["transactions"], raw_files["hierarchy"])
        assert len(panel.trips) == 5

    def test_malformed_row_reports_line(self, raw_files, tmp_path):
        frame = pd.read_csv(raw_files["transactions"], dtype=str, keep_default_na=False)
        frame.loc[2, "quantity"] = "-1"
        path = tmp_path / "bad.csv"
        frame.to_csv(path, index=False)

        with pytest.raises(DataError, match="line 4"):
            ingest_transactions(path, raw_files["hierarchy"])

    def test_missing_file(self, raw_files, tmp_path):
        with pytest.raises(DataError, match="not found"):
            ingest_transactions(tmp_path / "absent.csv", raw_files["hierarchy"])

    def test_export_round_trip(self, raw_files, tmp_path):
        """Test that exported panels load back with the same records."""
        panel = ingest_transactions(raw_files["transactions"], raw_files["hierarchy"])
        export_panel(panel, tmp_path / "panel")
        loaded = load_panel(tmp_path / "panel")

        key = ["household_id", "date", "upc", "week", "weekday", "quantity"]
        pd.testing.assert_frame_equal(loaded.purchases[key], panel.purchases[key])
        assert len(loaded.visits) == len(panel.visits)
        assert loaded.origin == panel.origin

    def test_load_missing_panel(self, tmp_path):
        with pytest.raises(MissingArtifactError, match="nfdemand ingest"):
            load_panel(tmp_path / "nothing")


class TestUnitDemand:
    """Tests for keeping one purchase per trip and category."""

    def test_one_per_trip_category(self):
        purchases = pd.DataFrame({
            "household_id": ["h"] * 4,
            "date": pd.to_datetime(["2005-05-03"] * 3 + ["2005-05-04"]),
            "week": [0] * 4,
            "weekday": [TUESDAY] * 3 + [WEDNESDAY],
            "upc": ["a", "b", "a", "a"],
            "quantity": [1, 1, 2, 1],
            "price": [1.0, 2.0, 1.0, 1.0],
            "category": ["c"] * 4,
        })
        out = resolve_unit_demand(purchases, seed=0)

        assert len(out) == 2
        assert not out.duplicated(["household_id", "date", "category"]).any()
        pd.testing.assert_frame_equal(out, resolve_unit_demand(purchases, seed=0))


class TestSessionGrid:
    """Tests for the Tuesday/Wednesday price grid."""

    def test_modal_prices_and_carry_forward(self, raw_files):
        """Test observed prices, carried prices and unavailability without a source."""
        panel = ingest_transactions(raw_files["transactions"], raw_files["hierarchy"])
        grid = build_session_grid(panel, GridConfig(out_of_stock_share=0.4))

        assert grid.upcs == ["a", "b"]
        a, b = 0, 1
        assert grid.price[a, 0, 0] == 1.00
        assert grid.price[a, 0, 1] == 0.80
        assert grid.price[a, 1, 0] == 0.80
        assert grid.price[a, 1, 1] == 0.80
        assert not grid.available[b, 0, 0]
        # one of two Wednesday trips flags b out of stock
        assert not grid.available[b, 0, 1]

    def test_subset_keeps_order(self, synthetic_world):
        _, grid, _ = synthetic_world
        sub = grid.subset([grid.upcs[5], grid.upcs[0]], grid.weeks[2:4])

        assert sub.upcs == [grid.upcs[0], grid.upcs[5]]
        assert sub.weeks == grid.weeks[2:4]
        np.testing.assert_array_equal(sub.price[1], grid.price[5, 2:4])

    def test_subset_unknown_item(self, synthetic_world):
        _, grid, _ = synthetic_world
        with pytest.raises(DataError, match="Not on the session grid"):
            grid.subset(["nope"], grid.weeks)

    def test_save_load(self, synthetic_world, split, tmp_path):
        panel, grid, _ = synthetic_world
        rated = grid.with_week_rates(panel, split)
        rated.save(tmp_path / "grid")
        loaded = type(grid).load(tmp_path / "grid")

        assert loaded.upcs == grid.upcs
        np.testing.assert_allclose(loaded.price, grid.price)
        np.testing.assert_array_equal(loaded.available, grid.available)
        np.testing.assert_allclose(loaded.week_rates, rated.week_rates)


class TestSplit:
    """Tests for the household-week holdout."""

    def test_every_cell_labelled(self, synthetic_world, split):
        panel, _, _ = synthetic_world
        cells = panel.trips[["household_id", "week"]].drop_duplicates()

        assert len(split.assignments) == len(cells)
        assert set(split.assignments["split"]) == {"train", "validation", "test"}

    def test_fractions(self, split):
        counts = split.counts()
        total = sum(counts.values())
        assert counts["test"] == round(0.2 * total)
        assert counts["validation"] == round(0.2 * total)


class TestChoiceDataset:
    """Tests for the dense dataset."""

    def test_shapes(self, dataset, small_config):
        n_items = small_config.n_categories * small_config.items_per_category
        assert dataset.n_items == n_items
        assert dataset.choices.shape == (dataset.n_trips, small_config.n_categories)
        assert dataset.price.shape == (n_items, small_config.n_weeks, 2)

    def test_choices_match_purchases(self, synthetic_world, dataset):
        panel, _, _ = synthetic_world
        assert int((dataset.choices >= 0).sum()) == len(panel.purchases)

    def test_choices_belong_to_category(self, dataset):
        t, c = np.nonzero(dataset.choices >= 0)
        assert np.array_equal(dataset.item_category[dataset.choices[t, c]], c)

    def test_layouts_cover_items(self, dataset):
        for c, layout in enumerate(dataset.layouts):
            assert sorted(layout.items.tolist()) == dataset.category_items(c).tolist()
            assert layout.n_alternatives == len(layout.labels)

    def test_rejects_multiple_purchases(self, synthetic_world, split):
        """Test that unit demand must be resolved first."""
        panel, grid, _ = synthetic_world
        row = panel.purchases.iloc[[0]].copy()
        items = grid.upcs
        other = [u for u, c in zip(items, grid.item_category)
                 if grid.categories[c] == row["category"].iloc[0] and u != row["upc"].iloc[0]][0]
        row["upc"] = other
        doubled = replace(panel, purchases=pd.concat([panel.purchases, row], ignore_index=True))

        with pytest.raises(DataError, match="resolve unit demand"):
            build_choice_dataset(doubled, grid.with_week_rates(panel, split), split)


class TestRestrictSample:
    """Tests for the household trip band and calendar exclusions."""

    def test_trip_band(self, raw_files):
        panel = ingest_transactions(raw_files["transactions"], raw_files["hierarchy"])
        restricted = restrict_sample(panel, SampleConfig(min_trips=3, max_trips=10))

        assert set(restricted.purchases["household_id"]) == {"h1"}

    def test_holiday_week_excluded(self, raw_files):
        """Test that the week holding the day before a holiday is dropped."""
        panel = ingest_transactions(raw_files["transactions"], raw_files["hierarchy"])
        config = SampleConfig(min_trips=1, max_trips=10, holiday_dates=[date(2005, 5, 12)])
        restricted = restrict_sample(panel, config)

        assert set(restricted.purchases["week"]) == {0}

    def test_empty_sample(self, raw_files):
        panel = ingest_transactions(raw_files["transactions"], raw_files["hierarchy"])
        with pytest.raises(DataError, match="empty sample"):
            restrict_sample(panel, SampleConfig(min_trips=4, max_trips=10))


class TestCategoryFilters:
    """Tests for category filters and pooling beyond the top items."""

    PERMISSIVE = dict(
        top_items=2, max_multi_item_share=1.0, max_multi_top_item_share=1.0, max_price_correlation=1.0,
        min_items_with_variation=0, min_price_change_week_share=0.0, seasonality_drop_fraction=0.0,
    )

    def test_permissive_keeps_all(self, synthetic_world):
        panel, _, _ = synthetic_world
        kept, filtered = apply_category_filters(panel, FilterConfig(**self.PERMISSIVE))

        assert kept == sorted(panel.categories)
        assert all(decision.kept for decision in filtered.filter_log)
        pooled = filtered.pooling[filtered.pooling["alternative"] != filtered.pooling["upc"]]
        assert pooled["alternative"].str.endswith(POOLED_SUFFIX).all()
        assert filtered.pooling.groupby("category")["alternative"].nunique().max() <= 3

    def test_reapplying_keeps_categories(self, synthetic_world):
        panel, _, _ = synthetic_world
        config = FilterConfig(**{**self.PERMISSIVE, "seasonality_drop_fraction": 0.4})
        kept, filtered = apply_category_filters(panel, config)
        again, _ = apply_category_filters(filtered, config)

        assert again == kept

    def test_reasons_recorded(self, synthetic_world):
        panel, _, _ = synthetic_world
        config = FilterConfig(**{**self.PERMISSIVE, "min_items_with_variation": 100})
        kept, filtered = apply_category_filters(panel, config)

        assert kept == []
        assert all("items_with_variation" in decision.reasons[0] for decision in filtered.filter_log)
