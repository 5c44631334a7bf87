"""
Two-stage Nested Factorization fitted by stochastic variational inference.

Stage 1 learns which item a household picks given that it buys in a
category (softmax over the category's available items, purchased trips only).
Stage 2 plugs posterior-mean inclusive values into a binary buy/no-buy model
over every training trip and category.
"""

from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import joblib
import numpy as np
from scipy.special import expit

from src.config import CHECKPOINT_VERSION
from src.data.dataset import ChoiceDataset, CategoryLayout
from src.data.schemas import EventReport, TrainingConfig
from src.models import choice_kernel as ck
from src.models.base import load_model, save_model
from src.models.variational import (
    Blocks,
    VariationalState,
    fit_svi,
    init_state,
    load_state,
)
from src.utils.errors import ConfigError, DataError
from src.utils.logger import get_logger

logger = get_logger(__name__)

STAGE1_BLOCKS = ("theta", "beta", "gamma", "lam", "rho", "sigma")
STAGE2_BLOCKS = ("beta_c", "lam_c", "rho_c", "mu_c", "delta", "w")
SELECTION_EVENT_TYPE = "own-price"


class Stage1Likelihood:
    """
    Conditional item choice on purchased (trip, category) cells.

    Observations are padded to the largest category; padding and
    unavailable items are masked out of the softmax.
    """

    def __init__(
        self,
        dataset: ChoiceDataset,
        trips: np.ndarray,
        categories: np.ndarray,
        weights: Optional[np.ndarray] = None
    ):
        self.N, self.J = dataset.n_households, dataset.n_items
        self.W = dataset.W
        self.X = dataset.item_X
        self.P = dataset.item_X.shape[1]
        self.household = dataset.trip_household[trips]
        chosen = dataset.choices[trips, categories]
        if np.any(chosen < 0):
            raise DataError("Stage 1 observations must be purchases")

        sizes = [len(dataset.category_items(c)) for c in range(dataset.n_categories)]
        width = max(sizes)
        pad = np.full((dataset.n_categories, width), -1, dtype=int)
        for c in range(dataset.n_categories):
            pad[c, :sizes[c]] = dataset.category_items(c)
        items = pad[categories]
        valid_slot = items >= 0
        self.items = np.where(valid_slot, items, 0)

        weeks, days = dataset.trip_week[trips], dataset.trip_day[trips]
        self.available = valid_slot & dataset.available[self.items, weeks[:, None], days[:, None]]
        self.log_price = np.where(
            self.available, dataset.log_price[self.items, weeks[:, None], days[:, None]], 0.0
        )
        self.chosen_slot = np.argmax(items == chosen[:, None], axis=1)
        self.n_observations = len(trips)
        self.weights = np.ones(self.n_observations) if weights is None else np.asarray(weights, dtype=float)

    def block_shapes(self, K: int, M: int) -> Dict[str, Tuple[int, ...]]:
        shapes = {
            "theta": (self.N, K), "beta": (self.J, K),
            "gamma": (self.N, M), "lam": (self.J, M),
            "rho": (self.J, self.W.shape[1]),
        }
        if self.P:
            shapes["sigma"] = (self.N, self.P)
        return shapes

    def utilities(self, params: Blocks, idx: np.ndarray) -> np.ndarray:
        h, items = self.household[idx], self.items[idx]
        u = np.einsum("bk,bjk->bj", params["theta"][h], params["beta"][items])
        u += np.einsum("bd,bjd->bj", self.W[h], params["rho"][items])
        if self.P:
            u += np.einsum("bp,bjp->bj", params["sigma"][h], self.X[items])
        u -= np.einsum("bm,bjm->bj", params["gamma"][h], params["lam"][items]) * self.log_price[idx]
        return u

    def evaluate(
        self, params: Blocks, idx: np.ndarray, weights: np.ndarray, gradient: bool
    ) -> Tuple[np.ndarray, Optional[Blocks]]:
        u = self.utilities(params, idx)
        mask = self.available[idx]
        rows = np.arange(len(idx))
        ll = u[rows, self.chosen_slot[idx]] - ck.inclusive_value(u, mask)
        if not gradient:
            return ll, None

        p = ck.conditional_choice_probs(u, mask)
        r = -p
        r[rows, self.chosen_slot[idx]] += 1.0
        r *= weights[:, None]
        h, items = self.household[idx], self.items[idx]
        lp = self.log_price[idx]
        flat = items.ravel()

        grads = {name: np.zeros_like(params[name]) for name in params}
        beta, lam, theta, gamma = params["beta"][items], params["lam"][items], params["theta"][h], params["gamma"][h]
        np.add.at(grads["theta"], h, np.einsum("bj,bjk->bk", r, beta))
        np.add.at(grads["beta"], flat, (r[..., None] * theta[:, None, :]).reshape(-1, theta.shape[1]))
        np.add.at(grads["gamma"], h, -np.einsum("bj,bjm->bm", r * lp, lam))
        np.add.at(grads["lam"], flat, (-(r * lp)[..., None] * gamma[:, None, :]).reshape(-1, gamma.shape[1]))
        np.add.at(grads["rho"], flat, (r[..., None] * self.W[h][:, None, :]).reshape(-1, self.W.shape[1]))
        if self.P:
            np.add.at(grads["sigma"], h, np.einsum("bj,bjp->bp", r, self.X[items]))
        return ll, grads


@dataclass(frozen=True)
class InclusiveValueTable:
    """Posterior-mean inclusive values iv[household, category, week, day]; -inf where empty."""

    iv: np.ndarray

    def lookup(self, households, categories, weeks, days) -> np.ndarray:
        return self.iv[households, categories, weeks, days]

    def save(self, path: Path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        joblib.dump({"version": CHECKPOINT_VERSION, "iv": self.iv}, path)

    @classmethod
    def load(cls, path: Path) -> "InclusiveValueTable":
        payload = joblib.load(path)
        if payload.get("version") != CHECKPOINT_VERSION:
            raise DataError(f"Inclusive value table {path} has an unsupported layout version")
        return cls(iv=payload["iv"])


class Stage2Likelihood:
    """Binary category purchase on every (trip, category) cell with a finite IV."""

    def __init__(
        self,
        dataset: ChoiceDataset,
        stage1_means: Blocks,
        iv_table: InclusiveValueTable,
        trips: np.ndarray,
        categories: np.ndarray,
        weights: Optional[np.ndarray] = None
    ):
        self.W = dataset.W
        self.X_c = dataset.category_X
        self.theta = stage1_means["theta"]
        self.gamma = stage1_means["gamma"]
        self.sigma = stage1_means.get("sigma")
        self.household = dataset.trip_household[trips]
        self.category = np.asarray(categories, dtype=int)
        self.week = dataset.trip_week[trips]
        self.day = dataset.trip_day[trips]
        self.iv = iv_table.lookup(self.household, self.category, self.week, self.day)
        if not np.all(np.isfinite(self.iv)):
            raise DataError("Stage 2 observations need finite inclusive values")
        self.y = (dataset.choices[trips, categories] >= 0).astype(float)
        self.C, self.T = dataset.n_categories, dataset.n_weeks
        self.n_observations = len(trips)
        self.weights = np.ones(self.n_observations) if weights is None else np.asarray(weights, dtype=float)

    def block_shapes(self, K: int, M: int, L: int) -> Dict[str, Tuple[int, ...]]:
        return {
            "beta_c": (self.C, K), "lam_c": (self.C, M), "rho_c": (self.C, self.W.shape[1]),
            "mu_c": (self.C, L), "delta": (self.T, L), "w": (self.C, 2),
        }

    def utilities(self, params: Blocks, idx: np.ndarray) -> np.ndarray:
        h, c, t, d = self.household[idx], self.category[idx], self.week[idx], self.day[idx]
        u = np.einsum("bk,bk->b", self.theta[h], params["beta_c"][c])
        u += np.einsum("bd,bd->b", self.W[h], params["rho_c"][c])
        if self.sigma is not None:
            u += np.einsum("bp,bp->b", self.sigma[h], self.X_c[c])
        u += np.einsum("bm,bm->b", self.gamma[h], params["lam_c"][c]) * self.iv[idx]
        u += np.einsum("bl,bl->b", params["mu_c"][c], params["delta"][t])
        u += params["w"][c, d]
        return u

    def evaluate(
        self, params: Blocks, idx: np.ndarray, weights: np.ndarray, gradient: bool
    ) -> Tuple[np.ndarray, Optional[Blocks]]:
        u = self.utilities(params, idx)
        y = self.y[idx]
        ll = -np.logaddexp(0.0, np.where(y > 0, -u, u))
        if not gradient:
            return ll, None

        r = (y - expit(u)) * weights
        h, c, t, d = self.household[idx], self.category[idx], self.week[idx], self.day[idx]
        grads = {name: np.zeros_like(params[name]) for name in params}
        np.add.at(grads["beta_c"], c, r[:, None] * self.theta[h])
        np.add.at(grads["lam_c"], c, (r * self.iv[idx])[:, None] * self.gamma[h])
        np.add.at(grads["rho_c"], c, r[:, None] * self.W[h])
        np.add.at(grads["mu_c"], c, r[:, None] * params["delta"][t])
        np.add.at(grads["delta"], t, r[:, None] * params["mu_c"][c])
        np.add.at(grads["w"], (c, d), r)
        return ll, grads


def training_cells(dataset: ChoiceDataset, label: str = "train") -> Tuple[np.ndarray, np.ndarray]:
    """All valid (trip, category) cells of a split, in trip-major order."""
    trips = np.flatnonzero(dataset.split_mask(label))
    t_idx, c_idx = np.nonzero(dataset.valid[trips])
    return trips[t_idx], c_idx


def _stage_paths(run_dir: Optional[Path], stage: str) -> Tuple[Optional[Path], Optional[Path]]:
    if run_dir is None:
        return None, None
    run_dir = Path(run_dir)
    return run_dir / f"{stage}_log.jsonl", run_dir / f"{stage}_checkpoint.joblib"


def fit_stage1_upc(
    dataset: ChoiceDataset,
    config: TrainingConfig,
    run_dir: Optional[Path] = None,
    state: Optional[VariationalState] = None,
    stop_after: Optional[int] = None
) -> VariationalState:
    """
    Fit the item-choice stage on training trips where the household bought in the category.

    Args:
        dataset: Dense choice dataset
        config: SVI settings
        run_dir: Directory for the JSON training log and checkpoint
        state: State to resume from (a fresh one is initialized otherwise)
        stop_after: Stop after this many total iterations

    Returns:
        Fitted stage-1 VariationalState
    """
    trips, cats = training_cells(dataset)
    bought = dataset.choices[trips, cats] >= 0
    trips, cats = trips[bought], cats[bought]
    if trips.size == 0:
        raise DataError("No training purchases for stage 1")
    likelihood = Stage1Likelihood(dataset, trips, cats)
    if state is None:
        state = init_state(config, likelihood.block_shapes(config.K, config.M), config.seed)
    log_path, checkpoint = _stage_paths(run_dir, "stage1")
    logger.info(f"Stage 1: {likelihood.n_observations} purchases, K={config.K}, M={config.M}")
    return fit_svi(likelihood, config, state, "stage1", log_path, checkpoint, stop_after)


def stage1_point(state: VariationalState, dataset: ChoiceDataset) -> Blocks:
    """Posterior means of the stage-1 blocks, with an empty sigma when there are no observables."""
    means = {name: state.means[name] for name in STAGE1_BLOCKS if name in state.means}
    if "sigma" not in means:
        means["sigma"] = np.zeros((dataset.n_households, 0))
    return means


def export_utilities(state: VariationalState, dataset: ChoiceDataset, category: int) -> np.ndarray:
    """Posterior-mean item utilities [N, T, 2, J_c] of one category at every session."""
    m = stage1_point(state, dataset)
    items = dataset.category_items(category)
    base = m["theta"] @ m["beta"][items].T + dataset.W @ m["rho"][items].T
    if dataset.item_X.shape[1]:
        base = base + m["sigma"] @ dataset.item_X[items].T
    slope = m["gamma"] @ m["lam"][items].T
    lp = np.transpose(dataset.log_price[items], (1, 2, 0))
    return base[:, None, None, :] - slope[:, None, None, :] * lp[None]


def compute_inclusive_values(state: VariationalState, dataset: ChoiceDataset) -> InclusiveValueTable:
    """Posterior-mean inclusive values for every household, category and session."""
    iv = np.empty((dataset.n_households, dataset.n_categories, dataset.n_weeks, 2))
    for c in range(dataset.n_categories):
        items = dataset.category_items(c)
        available = np.transpose(dataset.available[items], (1, 2, 0))
        iv[:, c] = ck.inclusive_value(export_utilities(state, dataset, c), available)
    return InclusiveValueTable(iv=iv)


def fit_stage2_category(
    iv_table: InclusiveValueTable,
    stage1: VariationalState,
    dataset: ChoiceDataset,
    config: TrainingConfig,
    run_dir: Optional[Path] = None,
    state: Optional[VariationalState] = None,
    stop_after: Optional[int] = None
) -> VariationalState:
    """
    Fit the category purchase stage over all training trip-category cells.

    Cells whose category is empty at the session (sentinel IV) are forced
    no-purchase and carry no information, so they are left out.
    """
    trips, cats = training_cells(dataset)
    iv = iv_table.lookup(dataset.trip_household[trips], cats, dataset.trip_week[trips], dataset.trip_day[trips])
    finite = np.isfinite(iv)
    if (~finite).any():
        logger.info(f"Stage 2: {int((~finite).sum())} cells with no available item left out")
    trips, cats = trips[finite], cats[finite]
    if trips.size == 0:
        raise DataError("No training cells for stage 2")
    likelihood = Stage2Likelihood(dataset, stage1_point(stage1, dataset), iv_table, trips, cats)
    if state is None:
        state = init_state(
            config, likelihood.block_shapes(config.K, config.M, config.week_factors), [config.seed, 2]
        )
    log_path, checkpoint = _stage_paths(run_dir, "stage2")
    logger.info(f"Stage 2: {likelihood.n_observations} trip-category cells")
    return fit_svi(likelihood, config, state, "stage2", log_path, checkpoint, stop_after)


class LatentDemandModel:
    """Nested Factorization predictions from fixed point parameters."""

    name = "latent"

    def __init__(
        self,
        params: ck.LatentParams,
        W: np.ndarray,
        item_X: np.ndarray,
        category_X: np.ndarray,
        item_category: np.ndarray,
        log_price: np.ndarray,
        available: np.ndarray,
        layouts: Sequence[CategoryLayout]
    ):
        self.params = params.validate()
        self.W = W
        self.item_X = item_X
        self.category_X = category_X
        self.item_category = item_category
        self.log_price = log_price
        self.available = available
        self.layouts = list(layouts)

    def category_items(self, category: int) -> np.ndarray:
        return np.flatnonzero(self.item_category == category)

    def item_probabilities(
        self,
        category: int,
        households: np.ndarray,
        weeks: np.ndarray,
        days: np.ndarray,
        log_price: Optional[np.ndarray] = None,
        available: Optional[np.ndarray] = None
    ) -> np.ndarray:
        """
        Unconditional item probabilities [n, J_c + 1], outside good last.

        ``log_price`` and ``available`` [n, J_c] override the session grid.
        """
        items = self.category_items(category)
        weeks, days = np.asarray(weeks), np.asarray(days)
        if log_price is None:
            log_price = self.log_price[items][:, weeks, days].T
        if available is None:
            available = self.available[items][:, weeks, days].T
        log_price = np.where(available, log_price, 0.0)
        return ck.unconditional_item_probs(
            self.params, np.asarray(households), category, items, log_price, available,
            weeks, days, self.W, self.item_X, self.category_X,
        )

    def alternative_probabilities(
        self,
        category: int,
        households: np.ndarray,
        weeks: np.ndarray,
        days: np.ndarray,
        log_price: Optional[np.ndarray] = None,
        available: Optional[np.ndarray] = None
    ) -> np.ndarray:
        """Item probabilities summed into the category's alternative layout [n, A + 1]."""
        probs = self.item_probabilities(category, households, weeks, days, log_price, available)
        return self.layouts[category].aggregate(probs)

    def save(self, path: Path) -> None:
        save_model(self, path)
        logger.info(f"Model saved to {path}")

    @classmethod
    def load(cls, path: Path) -> "LatentDemandModel":
        return load_model(path, "fit-nf")


class NestedFactorizationModel(LatentDemandModel):
    """Fitted two-stage model predicting at posterior means."""

    name = "nested_factorization"

    def __init__(
        self,
        stage1: VariationalState,
        stage2: VariationalState,
        config: TrainingConfig,
        dataset: ChoiceDataset
    ):
        means = dict(stage1_point(stage1, dataset))
        means.update(stage2.means)
        super().__init__(
            ck.LatentParams.from_dict(means), dataset.W, dataset.item_X, dataset.category_X,
            dataset.item_category, dataset.log_price, dataset.available, dataset.layouts,
        )
        self.stage1 = stage1
        self.stage2 = stage2
        self.config = config


def fit_nested_factorization(
    dataset: ChoiceDataset,
    config: TrainingConfig,
    run_dir: Optional[Path] = None,
    resume: bool = False
) -> NestedFactorizationModel:
    """
    Fit both stages and return the predictive model.

    Args:
        dataset: Dense choice dataset
        config: SVI settings
        run_dir: Directory for training logs and checkpoints
        resume: Continue from checkpoints found in ``run_dir``
    """
    stage1_state = stage2_state = None
    if resume and run_dir is not None:
        for stage in ("stage1", "stage2"):
            _, checkpoint = _stage_paths(run_dir, stage)
            if checkpoint.exists():
                logger.info(f"Resuming {stage} from {checkpoint}")
                if stage == "stage1":
                    stage1_state = load_state(checkpoint)
                else:
                    stage2_state = load_state(checkpoint)

    stage1 = fit_stage1_upc(dataset, config, run_dir, stage1_state)
    iv_table = compute_inclusive_values(stage1, dataset)
    if run_dir is not None:
        iv_table.save(Path(run_dir) / "inclusive_values.joblib")
    stage2 = fit_stage2_category(iv_table, stage1, dataset, config, run_dir, stage2_state)
    return NestedFactorizationModel(stage1, stage2, config, dataset)


def select_hyperparameters(
    candidates: List[Tuple[TrainingConfig, EventReport]],
    event_type: str = SELECTION_EVENT_TYPE
) -> TrainingConfig:
    """
    Pick the configuration with the best validation counterfactual log-likelihood.

    The score is the individual-level mean log-likelihood on ``event_type``
    events; ties go to the smaller K + M.

    Raises:
        ConfigError: If no candidates are given
    """
    if not candidates:
        raise ConfigError("select_hyperparameters needs at least one candidate")

    def score(item: Tuple[TrainingConfig, EventReport]) -> float:
        report = item[1].by_type.get(event_type)
        if report is None or report.individual_mean_ll is None:
            return -np.inf
        return report.individual_mean_ll

    best = max(candidates, key=lambda item: (score(item), -(item[0].K + item[0].M)))
    logger.info(
        f"Selected K={best[0].K}, M={best[0].M} "
        f"({event_type} validation LL {score(best):.5f} over {len(candidates)} candidates)"
    )
    return best[0]


def fit_selected(
    dataset: ChoiceDataset,
    config: TrainingConfig,
    score: Callable[[NestedFactorizationModel], EventReport],
    run_dir: Optional[Path] = None,
    resume: bool = False
) -> Tuple[NestedFactorizationModel, List[Tuple[TrainingConfig, EventReport]]]:
    """
    Fit every (K, M) candidate of ``config.grid`` and keep the best one.

    Each candidate trains in its own ``K<k>_M<m>`` subdirectory of ``run_dir``.

    Args:
        dataset: Dense choice dataset
        config: SVI settings with a non-empty grid
        score: Validation event likelihoods of a fitted model
        run_dir: Directory for training logs and checkpoints
        resume: Continue each candidate from its checkpoints

    Returns:
        (chosen model, (candidate config, event report) pairs in grid order)

    Raises:
        ConfigError: If the grid is empty
    """
    if not config.grid:
        raise ConfigError("fit_selected needs a non-empty nf.grid")
    fitted: Dict[Tuple[int, int], NestedFactorizationModel] = {}
    scored: List[Tuple[TrainingConfig, EventReport]] = []
    for candidate in config.candidates():
        subdir = None if run_dir is None else Path(run_dir) / f"K{candidate.K}_M{candidate.M}"
        model = fit_nested_factorization(dataset, candidate, subdir, resume)
        fitted[(candidate.K, candidate.M)] = model
        scored.append((candidate, score(model)))
    chosen = select_hyperparameters(scored)
    return fitted[(chosen.K, chosen.M)], scored
