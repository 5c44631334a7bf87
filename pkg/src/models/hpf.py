"""
Hierarchical Poisson factorization by closed-form coordinate ascent.

Counts y_ij ~ Poisson(theta_i . beta_j) with gamma factors and gamma
activity hyper-factors on households (xi) and items (eta). The fitted rates
mu_ij become "HPF controls" log(mu_ij) for the logit baselines.
"""

from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import List, Optional, Sequence

import joblib
import numpy as np
import pandas as pd
from scipy import sparse
from scipy.special import digamma, gammaln, logsumexp

from src.config import CHECKPOINT_VERSION
from src.data.dataset import CategoryLayout, ChoiceDataset
from src.data.schemas import HpfConfig
from src.models.base import load_model, save_model
from src.models.choice_kernel import conditional_choice_probs
from src.utils.errors import DataError, MissingArtifactError
from src.utils.logger import get_logger

logger = get_logger(__name__)

OUTSIDE_SUFFIX = "::outside"
INIT_SMOOTHNESS = 100.0


def _expectations(shape: np.ndarray, rate: np.ndarray):
    """E[x] and E[log x] under Gamma(shape, rate)."""
    return shape / rate, digamma(shape) - np.log(rate)


def _neg_entropy(shape: np.ndarray, rate: np.ndarray) -> float:
    """E_q[log q] of a Gamma(shape, rate) factor, summed."""
    return float(np.sum(
        shape * np.log(rate) - gammaln(shape) + (shape - 1) * (digamma(shape) - np.log(rate)) - shape
    ))


@dataclass
class HpfFit:
    """Variational gamma parameters of a fitted HPF model."""

    theta_shape: np.ndarray
    theta_rate: np.ndarray
    beta_shape: np.ndarray
    beta_rate: np.ndarray
    xi_shape: np.ndarray
    xi_rate: np.ndarray
    eta_shape: np.ndarray
    eta_rate: np.ndarray
    household_ids: List[str] = field(default_factory=list)
    upcs: List[str] = field(default_factory=list)
    trace: List[float] = field(default_factory=list)
    converged: bool = False

    @property
    def k(self) -> int:
        return self.theta_shape.shape[1]

    @property
    def expected_theta(self) -> np.ndarray:
        return self.theta_shape / self.theta_rate

    @property
    def expected_beta(self) -> np.ndarray:
        return self.beta_shape / self.beta_rate

    def rates(self) -> np.ndarray:
        """Poisson rates mu [N, J] = E[theta] E[beta]^T."""
        return self.expected_theta @ self.expected_beta.T

    def rescaled(self, scale: float) -> "HpfFit":
        """Same predictions with E[theta] multiplied by ``scale`` and E[beta] divided by it."""
        return replace(self, theta_rate=self.theta_rate / scale, beta_rate=self.beta_rate * scale)

    def household_position(self, household_id) -> int:
        try:
            return self.household_ids.index(household_id)
        except ValueError as e:
            raise DataError(f"Unknown household id {household_id}") from e

    def upc_position(self, upc) -> int:
        try:
            return self.upcs.index(upc)
        except ValueError as e:
            raise DataError(f"Unknown UPC {upc}") from e

    def save(self, path: Path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        joblib.dump({"version": CHECKPOINT_VERSION, "fit": self}, path)

    @classmethod
    def load(cls, path: Path) -> "HpfFit":
        payload = joblib.load(path)
        if payload.get("version") != CHECKPOINT_VERSION:
            raise DataError(f"HPF file {path} has an unsupported layout version")
        return payload["fit"]


def hpf_elbo(counts: sparse.csr_matrix, fit: HpfFit, config: HpfConfig) -> float:
    """Evidence lower bound with the multinomial auxiliaries at their optimum."""
    coo = counts.tocoo()
    e_theta, elog_theta = _expectations(fit.theta_shape, fit.theta_rate)
    e_beta, elog_beta = _expectations(fit.beta_shape, fit.beta_rate)
    e_xi, elog_xi = _expectations(fit.xi_shape, fit.xi_rate)
    e_eta, elog_eta = _expectations(fit.eta_shape, fit.eta_rate)
    a, c = config.shape, config.shape
    a_act, b_act = config.activity_shape, config.activity_rate

    log_s = logsumexp(elog_theta[coo.row] + elog_beta[coo.col], axis=1)
    elbo = float(np.sum(coo.data * log_s - gammaln(coo.data + 1.0)))
    elbo -= float(e_theta.sum(axis=0) @ e_beta.sum(axis=0))

    elbo += float(np.sum(
        a * elog_xi[:, None] - gammaln(a) + (a - 1) * elog_theta - e_xi[:, None] * e_theta
    ))
    elbo += float(np.sum(
        c * elog_eta[:, None] - gammaln(c) + (c - 1) * elog_beta - e_eta[:, None] * e_beta
    ))
    for e_act, elog_act in ((e_xi, elog_xi), (e_eta, elog_eta)):
        elbo += float(np.sum(
            a_act * np.log(b_act) - gammaln(a_act) + (a_act - 1) * elog_act - b_act * e_act
        ))
    elbo -= _neg_entropy(fit.theta_shape, fit.theta_rate)
    elbo -= _neg_entropy(fit.beta_shape, fit.beta_rate)
    elbo -= _neg_entropy(fit.xi_shape, fit.xi_rate)
    elbo -= _neg_entropy(fit.eta_shape, fit.eta_rate)
    return elbo


def _ratio(counts: sparse.coo_matrix, elog_theta: np.ndarray, elog_beta: np.ndarray) -> sparse.csr_matrix:
    """y_ij / sum_k exp(E log theta_ik + E log beta_jk) on the nonzero entries."""
    denom = np.einsum(
        "nk,nk->n", np.exp(elog_theta[counts.row]), np.exp(elog_beta[counts.col])
    )
    return sparse.csr_matrix((counts.data / denom, (counts.row, counts.col)), shape=counts.shape)


def fit_hpf(
    counts,
    config: HpfConfig,
    household_ids: Optional[Sequence[str]] = None,
    upcs: Optional[Sequence[str]] = None
) -> HpfFit:
    """
    Fit HPF to a household x UPC count matrix.

    Each sweep updates household factors, household activity, item factors
    and item activity in turn, recomputing the multinomial auxiliaries before
    each factor block so the bound never decreases.

    Args:
        counts: Nonnegative integer counts [N, J] (dense or sparse)
        config: Priors, rank, tolerance, seed
        household_ids: Row labels
        upcs: Column labels

    Raises:
        DataError: If counts are negative, non-integer or all zero
    """
    counts = sparse.csr_matrix(counts, dtype=float)
    if counts.nnz and (np.any(counts.data < 0) or np.any(counts.data != np.round(counts.data))):
        raise DataError("HPF counts must be nonnegative integers")
    counts.eliminate_zeros()
    if counts.nnz == 0:
        raise DataError("degenerate counts: the count matrix is all zero")

    n, j = counts.shape
    k = config.k
    a, c = config.shape, config.shape
    a_act, b_act = config.activity_shape, config.activity_rate
    rng = np.random.default_rng(config.seed)
    s = INIT_SMOOTHNESS

    fit = HpfFit(
        theta_shape=a + rng.gamma(s, 1.0 / s, size=(n, k)),
        theta_rate=a + rng.gamma(s, 1.0 / s, size=(n, k)),
        beta_shape=c + rng.gamma(s, 1.0 / s, size=(j, k)),
        beta_rate=c + rng.gamma(s, 1.0 / s, size=(j, k)),
        xi_shape=np.full(n, a_act + k * a),
        xi_rate=np.full(n, a_act + k * a) / b_act,
        eta_shape=np.full(j, a_act + k * c),
        eta_rate=np.full(j, a_act + k * c) / b_act,
        household_ids=list(household_ids) if household_ids is not None else [str(i) for i in range(n)],
        upcs=list(upcs) if upcs is not None else [str(i) for i in range(j)],
    )
    coo = counts.tocoo()
    previous = hpf_elbo(counts, fit, config)
    fit.trace.append(previous)

    for sweep in range(config.max_iter):
        _, elog_theta = _expectations(fit.theta_shape, fit.theta_rate)
        e_beta, elog_beta = _expectations(fit.beta_shape, fit.beta_rate)
        ratio = _ratio(coo, elog_theta, elog_beta)
        fit.theta_shape = a + np.exp(elog_theta) * (ratio @ np.exp(elog_beta))
        fit.theta_rate = (fit.xi_shape / fit.xi_rate)[:, None] + e_beta.sum(axis=0)[None, :]
        e_theta, elog_theta = _expectations(fit.theta_shape, fit.theta_rate)
        fit.xi_rate = b_act + e_theta.sum(axis=1)

        ratio = _ratio(coo, elog_theta, elog_beta)
        fit.beta_shape = c + np.exp(elog_beta) * (ratio.T @ np.exp(elog_theta))
        fit.beta_rate = (fit.eta_shape / fit.eta_rate)[:, None] + e_theta.sum(axis=0)[None, :]
        e_beta, _ = _expectations(fit.beta_shape, fit.beta_rate)
        fit.eta_rate = b_act + e_beta.sum(axis=1)

        current = hpf_elbo(counts, fit, config)
        fit.trace.append(current)
        change = abs(current - previous) / max(abs(previous), 1e-12)
        logger.debug(f"HPF sweep {sweep + 1}: ELBO {current:.6f} (relative change {change:.2e})")
        if change < config.tolerance:
            fit.converged = True
            break
        previous = current

    logger.info(
        f"HPF k={k}: {len(fit.trace) - 1} sweeps, ELBO {fit.trace[-1]:.4f}, "
        f"{'converged' if fit.converged else 'iteration limit reached'}"
    )
    return fit


def count_matrix(dataset: ChoiceDataset, label: str = "train") -> sparse.csr_matrix:
    """Household x UPC purchase counts of one split (exposure ignored)."""
    return sparse.csr_matrix(dataset.purchase_counts(label, level="upc"))


def fit_hpf_dataset(dataset: ChoiceDataset, config: HpfConfig) -> HpfFit:
    """Fit HPF on the training counts of a dataset."""
    return fit_hpf(count_matrix(dataset, "train"), config, dataset.household_ids, dataset.upcs)


def hpf_control(fit: HpfFit, household, upc) -> float:
    """Utility-scale control log(mu_ij) for a household and UPC id."""
    i, j = fit.household_position(household), fit.upc_position(upc)
    return float(np.log(fit.expected_theta[i] @ fit.expected_beta[j]))


def control_matrix(fit: HpfFit) -> np.ndarray:
    """log(mu) for every household and UPC [N, J]."""
    return np.log(fit.rates())


def outside_good_controls(fit: HpfFit, item_category: np.ndarray, n_categories: int) -> np.ndarray:
    """Outside-good control 1 - sum_j log(mu_ij) over each category's items [N, C]."""
    logs = control_matrix(fit)
    out = np.ones((logs.shape[0], n_categories))
    for cat in range(n_categories):
        out[:, cat] -= logs[:, item_category == cat].sum(axis=1)
    return out


def outside_good_control(fit: HpfFit, household, category_upcs: Sequence) -> float:
    """Outside-good control of one household for a category given by its UPC ids."""
    i = fit.household_position(household)
    cols = [fit.upc_position(u) for u in category_upcs]
    mu = fit.expected_theta[i] @ fit.expected_beta[cols].T
    return float(1.0 - np.sum(np.log(mu)))


def control_table(fit: HpfFit, item_category: np.ndarray, categories: Sequence[str]) -> pd.DataFrame:
    """
    Long table (household_id, upc, control) for every household and UPC.

    Outside-good controls are appended with upc '<category>::outside'.
    """
    logs = control_matrix(fit)
    n, j = logs.shape
    items = pd.DataFrame({
        "household_id": np.repeat(fit.household_ids, j),
        "upc": np.tile(fit.upcs, n),
        "control": logs.ravel(),
    })
    outside = outside_good_controls(fit, item_category, len(categories))
    outside_rows = pd.DataFrame({
        "household_id": np.repeat(fit.household_ids, len(categories)),
        "upc": np.tile([f"{cat}{OUTSIDE_SUFFIX}" for cat in categories], n),
        "control": outside.ravel(),
    })
    return pd.concat([items, outside_rows], ignore_index=True)


def save_control_table(table: pd.DataFrame, path: Path, separator: str = ",") -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    table.to_csv(path, sep=separator, index=False, float_format="%.10g")


def load_control_table(path: Path, separator: str = ",") -> pd.DataFrame:
    """
    Read a table written by ``save_control_table``.

    Raises:
        MissingArtifactError: If the file does not exist
    """
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(path, "fit-hpf")
    return pd.read_csv(path, sep=separator, dtype={"household_id": str, "upc": str})


class HpfDemandModel:
    """
    HPF predictions used directly as a demand model.

    Within a category, items get utility log(mu_ij) and the outside good
    gets its control; prices and calendar play no role.
    """

    name = "hpf"

    def __init__(self, fit: HpfFit, item_category: np.ndarray, layouts: Sequence[CategoryLayout]):
        self.fit = fit
        self.item_category = np.asarray(item_category)
        self.layouts = list(layouts)
        self.controls = control_matrix(fit)
        self.outside = outside_good_controls(fit, self.item_category, len(self.layouts))
        self.available = None

    @classmethod
    def from_dataset(cls, fit: HpfFit, dataset: ChoiceDataset) -> "HpfDemandModel":
        model = cls(fit, dataset.item_category, dataset.layouts)
        model.available = dataset.available
        return model

    def item_probabilities(
        self,
        category: int,
        households: np.ndarray,
        weeks: np.ndarray,
        days: np.ndarray,
        log_price: Optional[np.ndarray] = None,
        available: Optional[np.ndarray] = None
    ) -> np.ndarray:
        items = np.flatnonzero(self.item_category == category)
        households = np.asarray(households)
        if available is None:
            if self.available is None:
                available = np.ones((len(households), len(items)), dtype=bool)
            else:
                available = self.available[items][:, weeks, days].T
        u = np.column_stack([self.controls[households][:, items], self.outside[households, category]])
        mask = np.column_stack([available, np.ones(len(households), dtype=bool)])
        return conditional_choice_probs(u, mask)

    def alternative_probabilities(
        self,
        category: int,
        households: np.ndarray,
        weeks: np.ndarray,
        days: np.ndarray,
        log_price: Optional[np.ndarray] = None,
        available: Optional[np.ndarray] = None
    ) -> np.ndarray:
        probs = self.item_probabilities(category, households, weeks, days, log_price, available)
        return self.layouts[category].aggregate(probs)

    def save(self, path: Path) -> None:
        save_model(self, path)

    @classmethod
    def load(cls, path: Path) -> "HpfDemandModel":
        return load_model(path, "fit-hpf")
