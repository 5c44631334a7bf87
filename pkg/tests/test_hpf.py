"""
Tests for hierarchical Poisson factorization and its controls.
"""

import numpy as np
import pytest

from src.data.schemas import HpfConfig
from src.models.hpf import (
    HpfDemandModel,
    HpfFit,
    control_table,
    fit_hpf,
    fit_hpf_dataset,
    hpf_control,
    load_control_table,
    outside_good_control,
    outside_good_controls,
    save_control_table,
)
from src.models.logit import controls_from_table
from src.utils.errors import DataError, MissingArtifactError


@pytest.fixture(scope="module")
def block_counts():
    """Two household groups buying from two disjoint item groups."""
    rng = np.random.default_rng(0)
    counts = np.zeros((20, 10), dtype=int)
    counts[:10, :5] = rng.poisson(3.0, size=(10, 5))
    counts[10:, 5:] = rng.poisson(3.0, size=(10, 5))
    return counts


@pytest.fixture(scope="module")
def block_fit(block_counts):
    return fit_hpf(block_counts, HpfConfig(k=2, max_iter=300, tolerance=1e-8, seed=1))


@pytest.fixture(scope="module")
def dataset_fit(dataset):
    return fit_hpf_dataset(dataset, HpfConfig(k=2, max_iter=100, seed=0))


class TestFitHpf:
    """Tests for coordinate-ascent fitting."""

    def test_elbo_never_decreases(self, block_fit):
        trace = np.asarray(block_fit.trace)
        assert len(trace) > 1
        assert np.all(np.diff(trace) >= -1e-8 * np.abs(trace[:-1]))

    def test_recovers_block_structure(self, block_fit):
        """Test that in-block rates dominate off-block rates."""
        rates = block_fit.rates()
        inside = np.concatenate([rates[:10, :5].ravel(), rates[10:, 5:].ravel()]).mean()
        outside = np.concatenate([rates[:10, 5:].ravel(), rates[10:, :5].ravel()]).mean()
        assert inside > 2.0 * outside

    def test_expected_counts_conserved(self, block_counts, block_fit):
        """Test that fitted rates add up to the observed total within five percent."""
        assert block_fit.rates().sum() / block_counts.sum() == pytest.approx(1.0, abs=0.05)

    def test_rescaling_keeps_rates(self, block_fit):
        np.testing.assert_allclose(block_fit.rescaled(3.0).rates(), block_fit.rates())

    def test_seeded(self, block_counts, block_fit):
        again = fit_hpf(block_counts, HpfConfig(k=2, max_iter=300, tolerance=1e-8, seed=1))
        np.testing.assert_array_equal(again.theta_shape, block_fit.theta_shape)

    def test_negative_counts(self):
        with pytest.raises(DataError, match="nonnegative integers"):
            fit_hpf(np.array([[1, -1], [0, 2]]), HpfConfig(k=1))

    def test_fractional_counts(self):
        with pytest.raises(DataError):
            fit_hpf(np.array([[1.5, 0.0]]), HpfConfig(k=1))

    def test_all_zero(self):
        with pytest.raises(DataError, match="degenerate counts"):
            fit_hpf(np.zeros((3, 4)), HpfConfig(k=1))

    def test_save_load(self, block_fit, tmp_path):
        path = tmp_path / "hpf.joblib"
        block_fit.save(path)
        np.testing.assert_array_equal(HpfFit.load(path).rates(), block_fit.rates())


class TestControls:
    """Tests for HPF controls handed to the logit baselines."""

    def test_scalar_and_matrix_agree(self, block_fit):
        rates = block_fit.rates()
        assert hpf_control(block_fit, "3", "7") == pytest.approx(np.log(rates[3, 7]))
        with pytest.raises(DataError, match="Unknown household"):
            hpf_control(block_fit, "99", "0")

    def test_outside_good_control(self, block_fit):
        item_category = np.array([0] * 5 + [1] * 5)
        matrix = outside_good_controls(block_fit, item_category, 2)
        scalar = outside_good_control(block_fit, "12", [str(j) for j in range(5, 10)])
        assert matrix[12, 1] == pytest.approx(scalar)

    def test_table_round_trip(self, dataset, dataset_fit, tmp_path):
        """Test the long table layout and that ids survive a CSV round trip."""
        table = control_table(dataset_fit, dataset.item_category, dataset.categories)
        assert len(table) == dataset.n_households * (dataset.n_items + dataset.n_categories)

        path = tmp_path / "controls.csv"
        save_control_table(table, path)
        loaded = load_control_table(path)
        assert loaded["household_id"].tolist() == table["household_id"].tolist()
        np.testing.assert_allclose(loaded["control"], table["control"], rtol=1e-8)

        controls, outside = controls_from_table(loaded, dataset)
        assert controls.shape == (dataset.n_households, dataset.n_items)
        assert np.all(np.isfinite(controls)) and np.all(np.isfinite(outside))

    def test_missing_pairs_listed(self, dataset, dataset_fit):
        table = control_table(dataset_fit, dataset.item_category, dataset.categories)
        table = table[table["upc"] != dataset.upcs[0]]
        with pytest.raises(DataError, match="Missing HPF controls"):
            controls_from_table(table, dataset)

    def test_missing_file(self, tmp_path):
        with pytest.raises(MissingArtifactError, match="fit-hpf"):
            load_control_table(tmp_path / "controls.csv")


class TestHpfDemandModel:
    """Tests for HPF used as a demand model."""

    def test_probabilities(self, dataset, dataset_fit):
        model = HpfDemandModel.from_dataset(dataset_fit, dataset)
        households = np.arange(dataset.n_households)
        weeks = np.full(dataset.n_households, 3)
        days = np.zeros(dataset.n_households, dtype=int)
        probs = model.item_probabilities(0, households, weeks, days)

        np.testing.assert_allclose(probs.sum(axis=1), 1.0)
        items = dataset.category_items(0)
        unavailable = ~dataset.available[items, 3, 0]
        assert np.all(probs[:, :-1][:, unavailable] == 0.0)

    def test_prices_play_no_role(self, dataset, dataset_fit):
        model = HpfDemandModel.from_dataset(dataset_fit, dataset)
        h, w, d = np.array([0]), np.array([1]), np.array([1])
        n = len(dataset.category_items(1))
        base = model.alternative_probabilities(1, h, w, d)
        moved = model.alternative_probabilities(1, h, w, d, log_price=np.full((1, n), 3.0))
        np.testing.assert_array_equal(base, moved)
