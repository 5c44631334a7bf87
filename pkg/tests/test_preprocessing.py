"""
Tests for covariate encoding and per-category sample statistics.
"""

import numpy as np
import pandas as pd
import pytest

from src.config import TUESDAY, WEDNESDAY
from src.data.preprocessing import (
    age_levels,
    bucket_demographics,
    encode_covariates,
    herfindahl_by_upc,
    mean_abs_price_correlation,
    modal_session_prices,
    multi_item_shares,
    price_change_statistics,
    size_levels,
    top_items_by_category,
)
from src.data.schemas import CovariateConfig
from src.utils.errors import DataError


@pytest.fixture
def households():
    return pd.DataFrame({
        "household_id": ["a", "b", "c"],
        "age": [44, 45, 60],
        "gender": ["female", "M", "f"],
        "marital_status": ["Single", "married", "single"],
        "income": [99_999.0, 100_000.0, 20_000.0],
        "household_size": [1, 7, 5],
        "children": [0, 4, 2],
    })


class TestBuckets:
    """Tests for demographic bucketing."""

    def test_level_names(self):
        """Test bucket names implied by the default boundaries."""
        config = CovariateConfig()
        assert age_levels(config) == ["under_45", "45_55", "over_55"]
        assert size_levels(config) == ["1", "2", "3", "4", "5+"]

    def test_bucket_values(self, households):
        """Test boundary handling of every bucketed column."""
        out = bucket_demographics(households, CovariateConfig())

        assert out["age_bucket"].tolist() == ["under_45", "45_55", "over_55"]
        assert out["gender"].tolist() == ["F", "M", "F"]
        assert out["marital_status"].tolist() == ["single", "married", "single"]
        assert out["income_level"].tolist() == ["low", "high", "low"]
        assert out["household_size"].tolist() == ["1", "5+", "5+"]
        assert out["children"].tolist() == ["0", "3+", "2"]

    def test_missing_value_rejected(self, households):
        """Test that missing demographics raise instead of being imputed."""
        households.loc[1, "income"] = np.nan
        with pytest.raises(DataError, match="Missing demographics"):
            bucket_demographics(households, CovariateConfig())

    def test_unknown_level_rejected(self, households):
        """Test that an undocumented marital status raises."""
        households.loc[0, "marital_status"] = "divorced"
        with pytest.raises(DataError, match="marital_status"):
            bucket_demographics(households, CovariateConfig())


class TestEncodeCovariates:
    """Tests for the covariate matrix."""

    def test_intercept_only_without_demographics(self):
        """Test that households without demographics get an intercept column."""
        W, names, cells = encode_covariates(pd.DataFrame({"household_id": ["a", "b"]}), CovariateConfig())

        assert W.shape == (2, 1)
        assert names == ["intercept"]
        assert set(cells) == {"all"}

    def test_fixed_width(self, households):
        """Test one-hot width with one reference level dropped per column."""
        W, names, cells = encode_covariates(households, CovariateConfig())

        # intercept + age 2 + gender 1 + marital 1 + income 1 + size 4
        assert W.shape == (3, 10)
        assert names[0] == "intercept"
        assert np.all(W[:, 0] == 1.0)
        assert len(names) == W.shape[1]
        assert cells[0] == "single|low|under_45|0"


class TestCategoryStatistics:
    """Tests for the statistics behind the category filters."""

    def test_top_items_tie_break(self):
        """Test that ties in purchase counts are broken by UPC."""
        purchases = pd.DataFrame({
            "category": ["c"] * 5,
            "upc": ["b", "a", "c", "c", "b"],
        })
        assert top_items_by_category(purchases, 2) == {"c": ["b", "c"]}

    def test_multi_item_shares(self):
        """Test shares of trips holding two distinct items."""
        purchases = pd.DataFrame({
            "household_id": ["h", "h", "h", "g"],
            "date": ["d1", "d1", "d2", "d1"],
            "category": ["c"] * 4,
            "upc": ["a", "b", "a", "a"],
        })
        shares = multi_item_shares(purchases, {"c": ["a"]})

        assert shares.loc["c", "multi_item_share"] == pytest.approx(1 / 3)
        assert shares.loc["c", "multi_top_item_share"] == 0.0

    def test_modal_price_ties_low(self):
        """Test that the modal session price breaks ties toward the lower price."""
        purchases = pd.DataFrame({
            "upc": ["a"] * 4,
            "week": [0] * 4,
            "weekday": [TUESDAY] * 4,
            "price": [2.0, 1.5, 2.0, 1.5],
        })
        modal = modal_session_prices(purchases)

        assert len(modal) == 1
        assert modal.loc[0, "price"] == 1.5
        assert modal.loc[0, "n_prices"] == 2

    def test_price_change_statistics(self):
        """Test counting varying items and the share of large-change weeks."""
        session = pd.DataFrame({
            "upc": ["a", "a", "a", "a", "b", "b"],
            "week": [0, 0, 1, 1, 0, 0],
            "weekday": [TUESDAY, WEDNESDAY] * 3,
            "price": [1.00, 0.90, 1.00, 1.00, 2.00, 2.00],
        })
        n_varying, share = price_change_statistics(session, ["a", "b"], 2, 0.10, 0.005)

        assert n_varying == 1
        assert share == pytest.approx(0.5)

    def test_correlation_single_item(self):
        """Test that a single price series has no correlation."""
        session = pd.DataFrame({
            "upc": ["a", "a"], "week": [0, 1], "weekday": [TUESDAY, TUESDAY], "price": [1.0, 2.0]
        })
        assert mean_abs_price_correlation(session, ["a"]) == 0.0

    def test_herfindahl(self):
        """Test concentration of daily demand per UPC."""
        purchases = pd.DataFrame({
            "upc": ["a", "b", "b"],
            "date": ["d1", "d1", "d2"],
            "quantity": [3, 1, 1],
        })
        h = herfindahl_by_upc(purchases)

        assert h["a"] == pytest.approx(1.0)
        assert h["b"] == pytest.approx(0.5)
