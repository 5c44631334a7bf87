"""
Shared fixtures: one small synthetic world and its dense dataset.
"""

import pytest

from src.data.dataset import build_choice_dataset
from src.data.panel import split_holdout
from src.data.schemas import SplitConfig, SyntheticConfig
from src.synthetic.generator import generate_panel, truth_model

SEED = 11


@pytest.fixture(scope="session")
def small_config():
    return SyntheticConfig(
        n_households=40,
        n_categories=3,
        items_per_category=4,
        n_weeks=12,
        K=2,
        M=1,
        week_factors=1,
        item_covariates=1,
        visit_prob=0.6,
        category_intercept=-0.5,
        stockout_prob=0.05,
        price_change_prob=0.4,
    )


@pytest.fixture(scope="session")
def synthetic_world(small_config):
    """(panel, true grid, truth) of the small world."""
    return generate_panel(small_config, seed=SEED)


@pytest.fixture(scope="session")
def truth(synthetic_world):
    return synthetic_world[2]


@pytest.fixture(scope="session")
def split(synthetic_world):
    panel, grid, _ = synthetic_world
    return split_holdout(panel, SplitConfig(validation_fraction=0.2, test_fraction=0.2), SEED, grid)


@pytest.fixture(scope="session")
def dataset(synthetic_world, split):
    panel, grid, _ = synthetic_world
    return build_choice_dataset(panel, grid.with_week_rates(panel, split), split)


@pytest.fixture(scope="session")
def truth_demand(truth, dataset):
    """The true model indexed like the dataset."""
    return truth_model(truth, dataset)
