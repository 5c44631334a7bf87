"""
Tests for report files and the assembled comparison tables.
"""

import numpy as np
import pandas as pd
import pytest

from src.evaluation import reports
from src.utils.errors import MissingArtifactError


@pytest.fixture
def fit_frame():
    rows = []
    for model, ll in (("nf", -1.0), ("mnl", -1.5)):
        for category in ("a", "b", "all"):
            rows.append({
                "model": model, "split": "test", "category": category,
                "mean_log_likelihood": ll, "mean_squared_error": -ll / 10,
                "n_purchases": 10, "n_cells": 40, "n_clipped": 0,
            })
    return pd.DataFrame(rows)


@pytest.fixture
def placebo_payload():
    return {
        "alpha": 0.01,
        "fitted": {"forward/all": 2, "backward/all": 0},
        "failures": {"forward/all": 1, "backward/all": 0},
        "results": [
            {"category": "a", "mode": "forward", "scope": "all", "p_value": 0.005},
            {"category": "b", "mode": "forward", "scope": "all", "p_value": 0.4},
            {"category": "a", "mode": "backward", "scope": "all", "p_value": None},
        ],
    }


class TestFiles:
    """Tests for deterministic JSON and CSV files."""

    def test_non_finite_becomes_null(self, tmp_path):
        path = reports.write_json({"b": np.float64(np.nan), "a": [np.int64(2), float("inf")]}, tmp_path / "x.json")
        assert reports.read_json(path) == {"a": [2, None], "b": None}
        assert path.read_text().index('"a"') < path.read_text().index('"b"')

    def test_missing_file_names_producer(self, tmp_path):
        with pytest.raises(MissingArtifactError, match="nfdemand placebo"):
            reports.read_json(tmp_path / reports.PLACEBO_FILE)

    def test_csv_is_stable(self, fit_frame, tmp_path):
        first = reports.write_csv(fit_frame, tmp_path / "a.csv").read_bytes()
        second = reports.write_csv(fit_frame, tmp_path / "b.csv").read_bytes()
        assert first == second


class TestTables:
    """Tests for the comparison tables."""

    def test_predictive_fit_table(self, fit_frame):
        table = reports.predictive_fit_table(fit_frame)

        assert table["model"].tolist() == ["mnl", "nf"]
        assert table["mean_log_likelihood_test"].tolist() == [-1.5, -1.0]

    def test_placebo_table(self, placebo_payload):
        table = reports.placebo_table(placebo_payload).set_index("mode")

        assert table.loc["forward", "failure_rate"] == pytest.approx(0.5)
        assert np.isnan(table.loc["backward", "failure_rate"])

    def test_coupon_table(self):
        payload = [{
            "candidate": "nf", "category": "a", "upc": "u",
            "regimes": {
                "uniform": {"expected_gain": 1.0, "pct_vs_uniform": 0.0},
                "individualized": {"expected_gain": 2.0, "pct_vs_uniform": 100.0},
            },
        }]
        table = reports.coupon_table(payload)
        assert table.loc[0, "individualized"] == pytest.approx(100.0)


class TestAssemble:
    """Tests for building tables from whatever raw results exist."""

    def test_nothing_to_assemble(self, tmp_path):
        with pytest.raises(MissingArtifactError, match="nfdemand evaluate"):
            reports.assemble_report(tmp_path)

    def test_partial_results(self, fit_frame, placebo_payload, tmp_path):
        """Test that missing sources are skipped and figures are rendered on request."""
        reports.write_csv(fit_frame, tmp_path / reports.FIT_FILE)
        reports.write_json(placebo_payload, tmp_path / reports.PLACEBO_FILE)
        written = reports.assemble_report(tmp_path, plots=True)

        assert set(written) == {
            "predictive_fit.csv", "category_ranks.csv", "placebo_summary.csv", "placebo_pvalues.png",
        }
        assert all(path.exists() for path in written.values())
        index = reports.read_json(tmp_path / "report_index.json")
        assert index["category_ranks.csv"] == "tables/category_ranks.csv"
