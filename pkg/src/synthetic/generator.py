"""
Synthetic shopping panels drawn from a known Nested Factorization truth.

Every trip follows the two-stage process: a buy/no-buy draw from the
category stage, then an item draw from the within-category softmax. Prices
only change between the Tuesday and Wednesday sessions. With endogeneity on,
Wednesday category demand carries an unobserved shock and prices are raised
in the weeks whose shock is in the category's top quartile.

Random streams: ``[seed, 0]`` draws the truth, ``[seed, 2]`` the prices and
stock-outs, and ``[seed, 1, h]`` the trips of household ``h``.
"""

from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
import pandas as pd
from joblib import Parallel, delayed

from src.data.dataset import CategoryLayout, ChoiceDataset
from src.data.panel import SessionGrid, TransactionPanel, panel_from_frames
from src.data.preprocessing import encode_covariates
from src.data.schemas import CovariateConfig, SyntheticConfig
from src.models import choice_kernel as ck
from src.models.nested_factorization import LatentDemandModel
from src.utils.errors import DataError
from src.utils.logger import get_logger

logger = get_logger(__name__)

TRUTH_FILE = "truth.json"
ARRAY_FIELDS = (
    "W", "segment", "item_category", "item_class", "item_subclass", "item_X",
    "category_X", "base_price", "cost", "price", "available", "shocks",
)


@dataclass(frozen=True)
class SyntheticTruth:
    """
    Generator settings plus every drawn quantity of one synthetic world.

    Items are in grid order (category, then UPC). ``price`` and ``available``
    are [item, week, day]; ``shocks`` are the Wednesday demand shocks
    [category, week] (zero without endogeneity); ``segment`` marks the
    high-sensitivity households.
    """

    config: SyntheticConfig
    seed: int
    params: ck.LatentParams
    household_ids: List[str]
    households: pd.DataFrame
    W: np.ndarray
    covariate_names: List[str]
    segment: np.ndarray
    upcs: List[str]
    categories: List[str]
    item_category: np.ndarray
    item_class: np.ndarray
    item_subclass: np.ndarray
    item_X: np.ndarray
    category_X: np.ndarray
    base_price: np.ndarray
    cost: np.ndarray
    weeks: List[int]
    price: np.ndarray
    available: np.ndarray
    shocks: np.ndarray

    def category_items(self, category: int) -> np.ndarray:
        return np.flatnonzero(self.item_category == category)

    def hierarchy(self) -> pd.DataFrame:
        """Hierarchy table in the ingestion layout."""
        frame = pd.DataFrame({
            "upc": self.upcs,
            "category": [self.categories[c] for c in self.item_category],
            "class": [
                f"{self.categories[c]}-k{k}" for c, k in zip(self.item_category, self.item_class)
            ],
            "subclass": [
                f"{self.categories[c]}-k{k}-s{s}"
                for c, k, s in zip(self.item_category, self.item_class, self.item_subclass)
            ],
            "cost": self.cost,
        })
        for p in range(self.item_X.shape[1]):
            frame[f"x_{p}"] = self.item_X[:, p]
        return frame

    def session_grid(self) -> SessionGrid:
        """The true price and availability grid."""
        return SessionGrid(
            upcs=list(self.upcs),
            categories=list(self.categories),
            item_category=self.item_category.copy(),
            weeks=list(self.weeks),
            price=self.price.copy(),
            available=self.available.copy(),
        )

    def to_dict(self) -> Dict[str, Any]:
        payload: Dict[str, Any] = {
            "config": self.config.model_dump(mode="json"),
            "seed": self.seed,
            "params": {k: v.tolist() for k, v in self.params.to_dict().items()},
            "household_ids": list(self.household_ids),
            "households": self.households.to_dict(orient="list"),
            "covariate_names": list(self.covariate_names),
            "upcs": list(self.upcs),
            "categories": list(self.categories),
            "weeks": [int(w) for w in self.weeks],
        }
        payload.update({name: getattr(self, name).tolist() for name in ARRAY_FIELDS})
        return payload

    @classmethod
    def from_dict(cls, payload: Dict[str, Any]) -> "SyntheticTruth":
        int_fields = {"segment", "item_category", "item_class", "item_subclass"}
        arrays = {}
        for name in ARRAY_FIELDS:
            if name == "available":
                arrays[name] = np.asarray(payload[name], dtype=bool)
            elif name in int_fields:
                arrays[name] = np.asarray(payload[name], dtype=int)
            else:
                arrays[name] = np.asarray(payload[name], dtype=float)
        # Zero-width covariate blocks lose their row count in JSON
        n_items, n_categories = len(payload["upcs"]), len(payload["categories"])
        arrays["item_X"] = arrays["item_X"].reshape(n_items, -1)
        arrays["category_X"] = arrays["category_X"].reshape(n_categories, -1)
        params = {k: np.asarray(v, dtype=float) for k, v in payload["params"].items()}
        params["rho"] = params["rho"].reshape(n_items, -1)
        params["sigma"] = params["sigma"].reshape(len(payload["household_ids"]), -1)
        return cls(
            config=SyntheticConfig.model_validate(payload["config"]),
            seed=int(payload["seed"]),
            params=ck.LatentParams.from_dict(params),
            household_ids=list(payload["household_ids"]),
            households=pd.DataFrame(payload["households"]),
            covariate_names=list(payload["covariate_names"]),
            upcs=list(payload["upcs"]),
            categories=list(payload["categories"]),
            weeks=[int(w) for w in payload["weeks"]],
            **arrays,
        )

    def save(self, path: Path) -> Path:
        from src.evaluation.reports import write_json

        return write_json(self.to_dict(), path)

    @classmethod
    def load(cls, path: Path) -> "SyntheticTruth":
        from src.evaluation.reports import read_json

        return cls.from_dict(read_json(path, "synth"))


def _draw_households(rng: np.random.Generator, n: int) -> pd.DataFrame:
    size = rng.integers(1, 7, size=n)
    children = np.minimum(rng.integers(0, 4, size=n), size - 1)
    return pd.DataFrame({
        "household_id": [f"H{i:05d}" for i in range(n)],
        "age": rng.integers(22, 85, size=n),
        "gender": rng.choice(["F", "M"], size=n),
        "marital_status": rng.choice(["single", "married"], size=n),
        "income": np.round(np.exp(rng.normal(np.log(70_000.0), 0.6, size=n)), -2),
        "household_size": size,
        "children": children,
    })


def _draw_prices(
    rng: np.random.Generator,
    config: SyntheticConfig,
    base: np.ndarray,
    item_category: np.ndarray,
    shocks: np.ndarray
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Tuesday/Wednesday prices and availability [J, T, 2].

    Each item alternates between its regular price and a discount. Wednesday
    may differ from Tuesday; the next Tuesday repeats Wednesday.
    """
    J, T = len(base), config.n_weeks
    lo, hi = config.discount_range
    price = np.empty((J, T, 2))
    discounted = np.zeros(J, dtype=bool)
    current = base.copy()
    if config.endogeneity:
        cutoff = np.quantile(shocks, 0.75, axis=1, keepdims=True)
        high_demand = shocks >= cutoff
    else:
        high_demand = np.zeros_like(shocks, dtype=bool)
    for t in range(T):
        price[:, t, 0] = current
        change = rng.random(J) < config.price_change_prob
        discount = np.round(base * rng.uniform(lo, hi, size=J), 2)
        wednesday = np.where(change, np.where(discounted, base, discount), current)
        discounted = np.where(change, ~discounted, discounted)
        bumped = high_demand[item_category, t]
        wednesday = np.where(bumped, np.round(base * (1.0 + config.endogeneity_bump), 2), wednesday)
        discounted = discounted & ~bumped
        price[:, t, 1] = wednesday
        current = wednesday
    available = rng.random((J, T, 2)) >= config.stockout_prob
    return price, available


def draw_truth(config: SyntheticConfig, seed: int = 0) -> SyntheticTruth:
    """
    Draw parameters, households, hierarchy and the price process.

    Item intercept factors sit around class centers with subclass offsets, so
    items of one class are closer substitutes. Households fall into a low or
    high price-sensitivity segment; the category-stage IV coefficient averages
    ``iv_coefficient`` over households.
    """
    rng = np.random.default_rng([seed, 0])
    N, C, Jc, T = config.n_households, config.n_categories, config.items_per_category, config.n_weeks
    J = C * Jc
    K, M, L, P = config.K, config.M, config.week_factors, config.item_covariates

    households = _draw_households(rng, N)
    W, names, _ = encode_covariates(households, CovariateConfig())
    D = W.shape[1]

    local = np.tile(np.arange(Jc), C)
    item_category = np.repeat(np.arange(C), Jc)
    n_sub = config.subclasses_per_class
    group = local % (config.classes_per_category * n_sub)
    item_class, item_subclass = group // n_sub, group % n_sub

    centers = rng.normal(0.0, config.factor_scale, size=(C, config.classes_per_category, K))
    offsets = rng.normal(0.0, config.class_spread, size=(C, config.classes_per_category, n_sub, K))
    beta = (
        centers[item_category, item_class]
        + offsets[item_category, item_class, item_subclass]
        + rng.normal(0.0, config.class_spread / 2.0, size=(J, K))
    )
    theta = rng.normal(0.0, config.factor_scale, size=(N, K))

    segment = (rng.random(N) < 0.5).astype(int)
    level = 1.0 + config.sensitivity_spread * (2 * segment - 1)
    gamma = np.maximum(level, 0.05)[:, None] * np.exp(rng.normal(0.0, 0.1, size=(N, M)))
    lam = config.price_sensitivity / M * np.exp(rng.normal(0.0, 0.2, size=(J, M)))
    gamma_bar = gamma.mean(axis=0)
    lam_c = np.tile(config.iv_coefficient * gamma_bar / (gamma_bar @ gamma_bar), (C, 1))

    rho = rng.normal(0.0, 0.2, size=(J, D))
    rho[:, 0] = rng.normal(0.0, 0.5, size=J)
    rho_c = rng.normal(0.0, 0.2, size=(C, D))
    rho_c[:, 0] = config.category_intercept + rng.normal(0.0, 0.3, size=C)
    sigma = rng.normal(0.0, 0.3, size=(N, P))
    item_X = rng.normal(0.0, 1.0, size=(J, P))
    category_X = np.vstack([item_X[item_category == c].mean(axis=0) for c in range(C)])

    params = ck.LatentParams(
        theta=theta,
        beta=beta,
        gamma=gamma,
        lam=lam,
        rho=rho,
        sigma=sigma,
        beta_c=rng.normal(0.0, config.factor_scale / 2.0, size=(C, K)),
        lam_c=lam_c,
        rho_c=rho_c,
        mu_c=rng.normal(0.0, 0.3, size=(C, L)),
        delta=rng.normal(0.0, 0.3, size=(T, L)),
        w=rng.normal(0.0, 0.1, size=(C, 2)),
    ).validate()

    base_price = np.round(rng.uniform(*config.base_price_range, size=J), 2)
    cost = np.round(config.cost_fraction * base_price, 2)
    cost[rng.random(J) < config.missing_cost_share] = np.nan

    price_rng = np.random.default_rng([seed, 2])
    shocks = price_rng.normal(0.0, config.demand_shock_scale, size=(C, T))
    if not config.endogeneity:
        shocks = np.zeros_like(shocks)
    price, available = _draw_prices(price_rng, config, base_price, item_category, shocks)

    categories = [f"cat{c:02d}" for c in range(C)]
    upcs = [f"U{c:02d}{j:03d}" for c, j in zip(item_category, local)]
    return SyntheticTruth(
        config=config,
        seed=seed,
        params=params,
        household_ids=households["household_id"].tolist(),
        households=households,
        W=W,
        covariate_names=names,
        segment=segment,
        upcs=upcs,
        categories=categories,
        item_category=item_category,
        item_class=item_class,
        item_subclass=item_subclass,
        item_X=item_X,
        category_X=category_X,
        base_price=base_price,
        cost=cost,
        weeks=list(range(T)),
        price=price,
        available=available,
        shocks=shocks,
    )


def _empty_rows() -> Tuple[pd.DataFrame, pd.DataFrame]:
    visits = pd.DataFrame({"household_id": pd.Series(dtype=str), "date": pd.Series(dtype="datetime64[ns]")})
    rows = pd.DataFrame({
        "household_id": pd.Series(dtype=str), "date": pd.Series(dtype="datetime64[ns]"),
        "upc": pd.Series(dtype=str), "quantity": pd.Series(dtype=int),
        "price": pd.Series(dtype=float), "oos_flag": pd.Series(dtype=int),
    })
    return visits, rows


def simulate_household(truth: SyntheticTruth, household: int) -> Tuple[pd.DataFrame, pd.DataFrame]:
    """
    Trips and transaction rows of one household.

    Returns:
        Tuple of (visits: household_id, date; rows: household_id, date, upc,
        quantity, price, oos_flag)
    """
    config = truth.config
    rng = np.random.default_rng([truth.seed, 1, household])
    visit = rng.random((len(truth.weeks), 2)) < config.visit_prob
    weeks, days = np.nonzero(visit)
    if not len(weeks):
        return _empty_rows()
    hid = truth.household_ids[household]
    origin = pd.Timestamp(config.start_date)
    # Monday origin: Tuesday is one day in, Wednesday two
    dates = origin + pd.to_timedelta(7 * weeks + 1 + days, unit="D")
    hh = np.full(len(weeks), household)

    picked_trips: List[np.ndarray] = []
    picked_items: List[np.ndarray] = []
    for c in range(len(truth.categories)):
        items = truth.category_items(c)
        log_price = np.log(truth.price[items][:, weeks, days].T)
        available = truth.available[items][:, weeks, days].T
        u = ck.upc_utilities(truth.params, hh, items, log_price, truth.W, truth.item_X)
        iv = ck.inclusive_value(u, available)
        u_c = ck.category_utilities(truth.params, hh, c, iv, weeks, days, truth.W, truth.category_X)
        u_c = u_c + truth.shocks[c, weeks] * (days == 1)
        s = ck.category_purchase_prob(u_c)
        buy_draw, item_draw = rng.random(len(weeks)), rng.random(len(weeks))
        buy = np.flatnonzero(buy_draw < s)
        if not len(buy):
            continue
        cumulative = ck.conditional_choice_probs(u[buy], available[buy]).cumsum(axis=1)
        pick = np.minimum((cumulative < item_draw[buy, None]).sum(axis=1), len(items) - 1)
        picked_trips.append(buy)
        picked_items.append(items[pick])

    trips = np.concatenate(picked_trips) if picked_trips else np.zeros(0, dtype=int)
    bought = np.concatenate(picked_items) if picked_items else np.zeros(0, dtype=int)
    purchases = pd.DataFrame({
        "household_id": hid,
        "date": dates[trips],
        "upc": [truth.upcs[j] for j in bought],
        "quantity": 1,
        "price": truth.price[bought, weeks[trips], days[trips]],
        "oos_flag": 0,
    })
    out_j, out_trip = np.nonzero(~truth.available[:, weeks, days])
    flags = pd.DataFrame({
        "household_id": hid,
        "date": dates[out_trip],
        "upc": [truth.upcs[j] for j in out_j],
        "quantity": 0,
        "price": truth.price[out_j, weeks[out_trip], days[out_trip]],
        "oos_flag": 1,
    })
    visits = pd.DataFrame({"household_id": hid, "date": dates})
    return visits, pd.concat([purchases, flags], ignore_index=True)


def simulate_panel(truth: SyntheticTruth, n_jobs: int = 1) -> Tuple[TransactionPanel, SessionGrid]:
    """Simulate every household's trips; the same truth always yields the same panel."""
    results = Parallel(n_jobs=n_jobs)(
        delayed(simulate_household)(truth, h) for h in range(len(truth.household_ids))
    )
    visits = pd.concat([v for v, _ in results], ignore_index=True)
    rows = pd.concat([r for _, r in results], ignore_index=True)
    if visits.empty:
        raise DataError("Synthetic panel has no trips; raise visit_prob or n_weeks")
    rows = rows.sort_values(["household_id", "date", "upc"], kind="mergesort").reset_index(drop=True)
    rows["line"] = np.arange(len(rows)) + 2
    panel = panel_from_frames(
        rows, truth.hierarchy(), truth.households, origin=truth.config.start_date, visits=visits
    )
    logger.info(
        f"Simulated {len(panel.visits)} trips, {len(panel.purchases)} purchases and "
        f"{len(panel.oos)} out-of-stock flags for {len(truth.household_ids)} households"
    )
    return panel, truth.session_grid()


def generate_panel(
    config: Optional[SyntheticConfig] = None, seed: int = 0, n_jobs: int = 1
) -> Tuple[TransactionPanel, SessionGrid, SyntheticTruth]:
    """
    Draw a truth and simulate its panel.

    Returns:
        Tuple of (panel, true session grid, truth)
    """
    config = config or SyntheticConfig()
    truth = draw_truth(config, seed)
    panel, grid = simulate_panel(truth, n_jobs)
    return panel, grid, truth


def _positions(wanted: List, available: List, what: str) -> np.ndarray:
    lookup = {v: i for i, v in enumerate(available)}
    missing = [v for v in wanted if v not in lookup]
    if missing:
        raise DataError(f"{what} not in the synthetic truth: {missing[:10]}")
    return np.array([lookup[v] for v in wanted], dtype=int)


def _align_columns(values: np.ndarray, names: List[str], wanted: List[str]) -> np.ndarray:
    out = np.zeros((values.shape[0], len(wanted)))
    for d, name in enumerate(wanted):
        if name in names:
            out[:, d] = values[:, names.index(name)]
    return out


def truth_model(truth: SyntheticTruth, dataset: Optional[ChoiceDataset] = None) -> LatentDemandModel:
    """
    The true demand model, indexed like ``dataset``.

    Without a dataset the model covers the full synthetic world with one
    alternative per item. Demand shocks are not part of the model.

    Raises:
        DataError: If the dataset holds households, items or weeks the truth lacks
    """
    p = truth.params
    if dataset is None:
        layouts = [
            CategoryLayout(
                category=c,
                items=truth.category_items(c),
                labels=[truth.upcs[j] for j in truth.category_items(c)],
                item_alternative=np.arange(len(truth.category_items(c))),
                pooled_weights=np.ones(len(truth.category_items(c))),
            )
            for c in range(len(truth.categories))
        ]
        grid = truth.session_grid()
        model = LatentDemandModel(
            p, truth.W, truth.item_X, truth.category_X, truth.item_category,
            grid.log_price, truth.available, layouts,
        )
        model.name = "truth"
        return model

    hh = _positions(dataset.household_ids, truth.household_ids, "Households")
    items = _positions(dataset.upcs, truth.upcs, "Items")
    cats = _positions(dataset.categories, truth.categories, "Categories")
    weeks = _positions(dataset.weeks, truth.weeks, "Weeks")
    params = ck.LatentParams(
        theta=p.theta[hh],
        beta=p.beta[items],
        gamma=p.gamma[hh],
        lam=p.lam[items],
        rho=_align_columns(p.rho[items], truth.covariate_names, dataset.covariate_names),
        sigma=p.sigma[hh],
        beta_c=p.beta_c[cats],
        lam_c=p.lam_c[cats],
        rho_c=_align_columns(p.rho_c[cats], truth.covariate_names, dataset.covariate_names),
        mu_c=p.mu_c[cats],
        delta=p.delta[weeks],
        w=p.w[cats],
    )
    model = LatentDemandModel(
        params, dataset.W, truth.item_X[items], truth.category_X[cats], dataset.item_category,
        dataset.log_price, dataset.available, dataset.layouts,
    )
    model.name = "truth"
    return model
