"""
Reference probabilities and elasticities computed straight from a synthetic truth.

Written with plain loops over the truth arrays and the ``math`` module so
that it shares no code with the vectorized choice kernel it checks.
"""

import math
from typing import List, Optional, Sequence

from src.synthetic.generator import SyntheticTruth
from src.utils.errors import DataError


def _dot(a: Sequence[float], b: Sequence[float]) -> float:
    total = 0.0
    for x, y in zip(a, b):
        total += float(x) * float(y)
    return total


def _session(truth: SyntheticTruth, category: int, week: int, day: int, prices, available):
    items = [j for j in range(len(truth.upcs)) if int(truth.item_category[j]) == category]
    if prices is None:
        prices = [float(truth.price[j, week, day]) for j in items]
    if available is None:
        available = [bool(truth.available[j, week, day]) for j in items]
    return items, [float(p) for p in prices], [bool(a) for a in available]


def _stages(truth: SyntheticTruth, household: int, category: int, week: int, day: int, items, prices, available):
    """Conditional shares, purchase probability and the two price loadings."""
    p = truth.params
    w_row = truth.W[household]
    utilities: List[Optional[float]] = []
    for k, j in enumerate(items):
        if not available[k]:
            utilities.append(None)
            continue
        if not prices[k] > 0:
            raise DataError(f"Missing price for item {truth.upcs[j]}")
        u = (
            _dot(p.theta[household], p.beta[j])
            + _dot(w_row, p.rho[j])
            + _dot(p.sigma[household], truth.item_X[j])
            - _dot(p.gamma[household], p.lam[j]) * math.log(prices[k])
        )
        utilities.append(u)
    finite = [u for u in utilities if u is not None]
    if not finite:
        return [0.0] * len(items), 0.0, None
    top = max(finite)
    weights = [math.exp(u - top) if u is not None else 0.0 for u in utilities]
    total = sum(weights)
    shares = [w / total for w in weights]
    iv = top + math.log(total)
    loading = _dot(p.gamma[household], p.lam_c[category])
    u_c = (
        _dot(p.theta[household], p.beta_c[category])
        + _dot(w_row, p.rho_c[category])
        + _dot(p.sigma[household], truth.category_X[category])
        + loading * iv
        + _dot(p.mu_c[category], p.delta[week])
        + float(p.w[category, day])
    )
    if u_c >= 0:
        s = 1.0 / (1.0 + math.exp(-u_c))
    else:
        s = math.exp(u_c) / (1.0 + math.exp(u_c))
    return shares, s, loading


def brute_force_probs(
    truth: SyntheticTruth,
    household: int,
    category: int,
    week: int,
    day: int,
    prices: Optional[Sequence[float]] = None,
    available: Optional[Sequence[bool]] = None
) -> List[float]:
    """
    Unconditional probabilities of the category's items, outside good last.

    Prices and availability default to the truth's session grid. Demand
    shocks are left out, matching the model's own predictions.
    """
    items, prices, available = _session(truth, category, week, day, prices, available)
    shares, s, _ = _stages(truth, household, category, week, day, items, prices, available)
    if not any(available):
        return [0.0] * len(items) + [1.0]
    return [s * q for q in shares] + [1.0 - s]


def analytic_elasticity(
    truth: SyntheticTruth,
    household: int,
    item: int,
    week: int,
    day: int,
    other: Optional[int] = None,
    prices: Optional[Sequence[float]] = None,
    available: Optional[Sequence[bool]] = None
) -> float:
    """
    d log P(item) / d log price(other), through both stages.

    ``other`` defaults to ``item`` (own elasticity). Items of another category
    give 0; an unavailable ``item`` gives NaN and an unavailable ``other`` 0.
    """
    other = item if other is None else other
    category = int(truth.item_category[item])
    if int(truth.item_category[other]) != category:
        return 0.0
    items, prices, available = _session(truth, category, week, day, prices, available)
    j, k = items.index(item), items.index(other)
    if not available[j]:
        return math.nan
    if not available[k]:
        return 0.0
    shares, s, loading = _stages(truth, household, category, week, day, items, prices, available)
    h = _dot(truth.params.gamma[household], truth.params.lam[other])
    same = 1.0 if j == k else 0.0
    return -h * ((same - shares[k]) + (1.0 - s) * loading * shares[k])
