"""
Coupon targeting under different information regimes.

A candidate model picks which households get a coupon for the category's
leading item; the truth model values the allocation. Households are scored by
the expected profit gain of the coupon per trip, averaged over a shared sample
of sessions where the item is on the shelf.
"""

from typing import Dict, Optional, Tuple

import numpy as np
import pandas as pd

from src.config import BEHAVIORAL_BINS, MIN_CELL_SIZE
from src.data.dataset import ChoiceDataset
from src.data.schemas import CouponReport, RegimeGain, TargetingConfig, TargetingScenario
from src.models.base import DemandModel, focal_probabilities
from src.utils.errors import DataError
from src.utils.logger import get_logger

logger = get_logger(__name__)

MERGED_CELL = "merged"
DEFAULT_SESSIONS = 8


def coupon_sessions(
    dataset: ChoiceDataset, item: int, n_sessions: int = DEFAULT_SESSIONS, seed: int = 0
) -> Tuple[np.ndarray, np.ndarray]:
    """Sampled (week, day) sessions where the item is available, sorted."""
    sessions = np.argwhere(dataset.available[item])
    if not len(sessions):
        raise DataError(f"Item {dataset.upcs[item]} is never available")
    rng = np.random.default_rng(seed)
    pick = np.sort(rng.choice(len(sessions), size=min(n_sessions, len(sessions)), replace=False))
    return sessions[pick, 0], sessions[pick, 1]


def household_gains(
    model: DemandModel,
    dataset: ChoiceDataset,
    item: int,
    discount: float,
    weeks: np.ndarray,
    days: np.ndarray
) -> np.ndarray:
    """
    Expected profit gain per trip [N] of a coupon, averaged over sessions.

    The gain is P(discounted) * ((1 - d) * price - cost) minus
    P(base) * (price - cost); the discount always applies to a purchase.
    """
    if not 0 < discount < 1:
        raise ValueError(f"discount must be in (0, 1), got {discount}")
    category = int(dataset.item_category[item])
    cost = float(dataset.cost[item])
    N, S = dataset.n_households, len(weeks)
    hh = np.repeat(np.arange(N), S)
    wk, dy = np.tile(weeks, N), np.tile(days, N)
    lp, av = dataset.session_prices(category, wk, dy)
    pos = np.flatnonzero(dataset.category_items(category) == item)[0]
    price = np.exp(lp[:, pos])
    base = focal_probabilities(model, category, item, hh, wk, dy, lp, av)
    discounted_lp = lp.copy()
    discounted_lp[:, pos] += np.log1p(-discount)
    discounted = focal_probabilities(model, category, item, hh, wk, dy, discounted_lp, av)
    gain = discounted * ((1.0 - discount) * price - cost) - base * (price - cost)
    return gain.reshape(N, S).mean(axis=1)


def merge_small_cells(labels: np.ndarray, min_size: int = MIN_CELL_SIZE) -> Tuple[np.ndarray, int]:
    """
    Pool cells with fewer than ``min_size`` households into one merged cell.

    If the merged cell is itself too small it joins the largest remaining
    cell. Returns the new labels and the number of cells merged away.
    """
    labels = np.asarray(labels).astype(str)
    values, counts = np.unique(labels, return_counts=True)
    small = values[counts < min_size]
    if not len(small):
        return labels, 0
    merged = np.where(np.isin(labels, small), MERGED_CELL, labels)
    if (merged == MERGED_CELL).sum() < min_size and len(small) < len(values):
        big_values, big_counts = values[counts >= min_size], counts[counts >= min_size]
        largest = big_values[np.lexsort((big_values, -big_counts))[0]]
        merged = np.where(merged == MERGED_CELL, largest, merged)
    logger.warning(f"Merged {len(small)} cells with fewer than {min_size} households")
    return merged, int(len(small))


def allocate_by_cell(
    cells: np.ndarray, candidate_gain: np.ndarray, truth_gain: np.ndarray, n_selected: int
) -> float:
    """
    Expected truth gain when coupons are uniform within cells.

    Cells are filled in order of the candidate's mean gain (ties by label);
    the cell reached last is covered partially and contributes the expected
    gain of a uniform random subset.
    """
    frame = pd.DataFrame({"cell": cells, "candidate": candidate_gain, "truth": truth_gain})
    stats = frame.groupby("cell", sort=True).agg(
        score=("candidate", "mean"), size=("truth", "size"), total=("truth", "sum")
    ).reset_index()
    stats = stats.sort_values(["score", "cell"], ascending=[False, True], kind="mergesort")
    remaining, gain = float(n_selected), 0.0
    for _, row in stats.iterrows():
        if remaining <= 0:
            break
        take = min(remaining, row["size"])
        gain += row["total"] * take / row["size"]
        remaining -= take
    return gain


def top_n(scores: np.ndarray, n: int) -> np.ndarray:
    """Indices of the ``n`` largest scores; ties go to the lower index."""
    order = np.lexsort((np.arange(len(scores)), -np.asarray(scores)))
    return np.sort(order[:n])


def _pct_vs_uniform(gain: float, uniform: float) -> Optional[float]:
    difference = gain - uniform
    if difference == 0:
        return 0.0
    if uniform == 0:
        return None
    return float(100.0 * difference / abs(uniform))


def behavioral_bins(dataset: ChoiceDataset, category: int, n_bins: int = BEHAVIORAL_BINS) -> np.ndarray:
    """Quantile bins of each household's training purchase count in the category."""
    counts = dataset.purchase_counts("train", level="category")[:, category]
    if len(np.unique(counts)) < 2:
        return np.zeros(len(counts), dtype=int).astype(str)
    bins = pd.qcut(counts, q=n_bins, labels=False, duplicates="drop")
    return np.asarray(bins, dtype=int).astype(str)


def coupon_targeting(
    scenario: TargetingScenario,
    candidate: DemandModel,
    truth: DemandModel,
    dataset: ChoiceDataset,
    config: Optional[TargetingConfig] = None,
    seed: int = 0,
    n_sessions: int = DEFAULT_SESSIONS
) -> CouponReport:
    """
    Profit gain of coupon allocations chosen by ``candidate`` and valued by ``truth``.

    Exactly floor(budget * N) households are selected. Regimes: individualized
    (free choice), demographic (uniform within demographic cells), behavioral
    (uniform within training purchase-count bins), and uniform (budget
    fraction of the population mean gain).
    """
    config = config or TargetingConfig()
    category = scenario.category
    item = dataset.top_item(category) if scenario.upc is None else dataset.upcs.index(scenario.upc)
    if int(dataset.item_category[item]) != category:
        raise DataError(f"UPC {dataset.upcs[item]} is not in category {dataset.categories[category]}")

    weeks, days = coupon_sessions(dataset, item, n_sessions, seed)
    candidate_gain = household_gains(candidate, dataset, item, scenario.discount, weeks, days)
    truth_gain = (
        candidate_gain if truth is candidate
        else household_gains(truth, dataset, item, scenario.discount, weeks, days)
    )
    N = dataset.n_households
    n_selected = int(np.floor(scenario.budget * N))
    uniform = n_selected * float(truth_gain.mean())

    regimes: Dict[str, RegimeGain] = {}
    for regime in scenario.regimes:
        n_cells = n_merged = 0
        if regime == "individualized":
            gain = float(truth_gain[top_n(candidate_gain, n_selected)].sum())
            n_cells = N
        elif regime == "uniform":
            gain = uniform
            n_cells = 1
        else:
            raw = dataset.demographic_cells if regime == "demographic" else behavioral_bins(
                dataset, category, config.behavioral_bins
            )
            cells, n_merged = merge_small_cells(raw, config.min_cell_size)
            gain = allocate_by_cell(cells, candidate_gain, truth_gain, n_selected)
            n_cells = len(np.unique(cells))
        regimes[regime] = RegimeGain(
            regime=regime,
            expected_gain=gain,
            pct_vs_uniform=_pct_vs_uniform(gain, uniform),
            n_cells=n_cells,
            n_merged=n_merged,
        )

    report = CouponReport(
        category=dataset.categories[category],
        upc=dataset.upcs[item],
        candidate=getattr(candidate, "name", type(candidate).__name__),
        discount=scenario.discount,
        budget=scenario.budget,
        n_households=N,
        n_selected=n_selected,
        uniform_gain=uniform,
        regimes=regimes,
    )
    logger.info(
        f"Coupons {report.category}/{report.upc} by {report.candidate}: "
        + ", ".join(f"{r} {g.pct_vs_uniform}" for r, g in regimes.items())
    )
    return report
