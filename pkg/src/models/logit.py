"""
Per-category logit baselines estimated by maximum likelihood.

Alternatives are a category's top items, an optional pooled alternative and
the outside good (last column). Inside utilities are

    alpha_a + eta * log p_a + B_a . D_i + omega * Wed + week offset + kappa * control_ia

and the outside good gets kappa0 * outside control. The nested logit puts the
inside alternatives in one nest with coefficient lambda; the mixed logit
draws eta (and optionally the intercepts) per household from a normal
mixture evaluated on fixed Halton draws.
"""

from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from scipy import optimize
from scipy.special import logsumexp
from scipy.stats import norm, qmc

from src.data.dataset import CategoryLayout, ChoiceDataset
from src.data.schemas import LogitConfig, LogitSpec
from src.models.base import load_model, save_model
from src.models.hpf import OUTSIDE_SUFFIX
from src.utils.errors import DataError
from src.utils.logger import get_logger

logger = get_logger(__name__)

RATE_CLIP = 1e-4
NESTING_BOUNDS = (0.01, 1.0)
DRAW_CHUNK = 64
HESSIAN_STEP = 1e-5
NEWTON_STEPS = 25
VARIATION_EPS = 1e-14


@dataclass(frozen=True)
class CategoryLogitData:
    """Observations of one category in its alternative space."""

    category: int
    labels: List[str]
    households: np.ndarray
    weeks: np.ndarray
    days: np.ndarray
    log_price: np.ndarray
    available: np.ndarray
    choice: np.ndarray
    D: np.ndarray
    covariate_names: List[str]
    week_offset: np.ndarray
    control: np.ndarray
    outside_control: np.ndarray
    has_controls: bool = False
    focal: Optional[int] = None

    @property
    def n(self) -> int:
        return len(self.households)

    @property
    def n_alternatives(self) -> int:
        return len(self.labels)

    def with_focal(self, alternative: Optional[int]) -> "CategoryLogitData":
        return replace(self, focal=alternative)

    def subset(self, rows: np.ndarray) -> "CategoryLogitData":
        rows = np.asarray(rows)
        return replace(
            self,
            households=self.households[rows], weeks=self.weeks[rows], days=self.days[rows],
            log_price=self.log_price[rows], available=self.available[rows], choice=self.choice[rows],
            D=self.D[rows], week_offset=self.week_offset[rows], control=self.control[rows],
            outside_control=self.outside_control[rows],
        )


def alternative_controls(layout: CategoryLayout, item_controls: np.ndarray) -> np.ndarray:
    """Per-alternative controls [n, A]; a pooled alternative gets log(sum of its mu)."""
    out = np.empty((item_controls.shape[0], layout.n_alternatives))
    for a in range(layout.n_alternatives):
        out[:, a] = logsumexp(item_controls[:, layout.item_alternative == a], axis=1)
    return out


@dataclass(frozen=True)
class LogitInputs:
    """Everything needed to build category data for arbitrary sessions."""

    W: np.ndarray
    covariate_names: List[str]
    log_price: np.ndarray
    available: np.ndarray
    item_category: np.ndarray
    week_offset: np.ndarray
    layouts: List[CategoryLayout]
    controls: Optional[np.ndarray] = None
    outside_controls: Optional[np.ndarray] = None

    @classmethod
    def from_dataset(cls, dataset: ChoiceDataset) -> "LogitInputs":
        rates = np.clip(dataset.week_rates, RATE_CLIP, 1.0 - RATE_CLIP)
        return cls(
            W=dataset.W,
            covariate_names=list(dataset.covariate_names),
            log_price=dataset.log_price,
            available=dataset.available,
            item_category=dataset.item_category,
            week_offset=np.log(rates) - np.log1p(-rates),
            layouts=dataset.layouts,
        )

    def with_controls(self, controls: np.ndarray, outside_controls: np.ndarray) -> "LogitInputs":
        return replace(self, controls=controls, outside_controls=outside_controls)

    def context(
        self,
        category: int,
        households: np.ndarray,
        weeks: np.ndarray,
        days: np.ndarray,
        log_price: Optional[np.ndarray] = None,
        available: Optional[np.ndarray] = None,
        choice: Optional[np.ndarray] = None
    ) -> CategoryLogitData:
        """
        Category data at the given sessions.

        ``log_price`` and ``available`` are item-level [n, J_c] in grid order
        and default to the session grid.
        """
        layout = self.layouts[category]
        households, weeks, days = (np.asarray(x, dtype=int) for x in (households, weeks, days))
        if households.size and households.max() >= self.W.shape[0]:
            raise DataError(f"Unknown household index {int(households.max())}")
        items = layout.items
        if log_price is None:
            log_price = self.log_price[items][:, weeks, days].T
        if available is None:
            available = self.available[items][:, weeks, days].T
        available = np.asarray(available, dtype=bool)
        alt_lp, alt_av = layout.alternative_prices(np.where(available, log_price, 0.0), available)

        n = len(households)
        if self.controls is not None:
            control = alternative_controls(layout, self.controls[households][:, items])
            outside = self.outside_controls[households, category]
        else:
            control, outside = np.zeros((n, layout.n_alternatives)), np.zeros(n)
        return CategoryLogitData(
            category=category,
            labels=list(layout.labels),
            households=households,
            weeks=weeks,
            days=days,
            log_price=alt_lp,
            available=alt_av,
            choice=np.full(n, -1) if choice is None else np.asarray(choice, dtype=int),
            D=self.W[households, 1:],
            covariate_names=self.covariate_names[1:],
            week_offset=self.week_offset[category, weeks],
            control=control,
            outside_control=outside,
            has_controls=self.controls is not None,
        )


def build_category_data(
    dataset: ChoiceDataset,
    category: int,
    label: str = "train",
    inputs: Optional[LogitInputs] = None,
    log_price_override: Optional[np.ndarray] = None
) -> CategoryLogitData:
    """
    Observations of one category and split in alternative space.

    Args:
        dataset: Dense choice dataset
        category: Category index
        label: Split label
        inputs: Prebuilt inputs (carries HPF controls when attached)
        log_price_override: Replacement item log prices [J, T, 2] (placebo shifts)
    """
    inputs = inputs or LogitInputs.from_dataset(dataset)
    if log_price_override is not None:
        inputs = replace(inputs, log_price=log_price_override)
    trips = np.flatnonzero(dataset.split_mask(label) & dataset.valid[:, category])
    return inputs.context(
        category,
        dataset.trip_household[trips],
        dataset.trip_week[trips],
        dataset.trip_day[trips],
        choice=dataset.observed_alternative(category, trips),
    )


def controls_from_table(
    table: pd.DataFrame, dataset: ChoiceDataset, categories: Optional[Sequence[int]] = None
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Control matrices from a (household_id, upc, control) table.

    Returns:
        Tuple of (item controls [N, J], outside controls [N, C]); entries of
        categories not requested are NaN

    Raises:
        DataError: Listing (household, upc) pairs without a control
    """
    categories = list(range(dataset.n_categories)) if categories is None else list(categories)
    wide = table.pivot_table(index="household_id", columns="upc", values="control", aggfunc="first")
    wanted_items = [dataset.upcs[j] for c in categories for j in dataset.category_items(c)]
    wanted_outside = [f"{dataset.categories[c]}{OUTSIDE_SUFFIX}" for c in categories]
    block = wide.reindex(index=dataset.household_ids, columns=wanted_items + wanted_outside)
    missing = block.isna().stack()
    missing = missing[missing]
    if len(missing):
        pairs = [f"({h}, {u})" for h, u in missing.index[:10]]
        raise DataError(f"Missing HPF controls for {len(missing)} pairs: {', '.join(pairs)}")

    controls = np.full((dataset.n_households, dataset.n_items), np.nan)
    outside = np.full((dataset.n_households, dataset.n_categories), np.nan)
    for c, name in zip(categories, wanted_outside):
        items = dataset.category_items(c)
        controls[:, items] = block[[dataset.upcs[j] for j in items]].to_numpy(dtype=float)
        outside[:, c] = block[name].to_numpy(dtype=float)
    return controls, outside


def attach_hpf_controls(
    data: CategoryLogitData, table: pd.DataFrame, dataset: ChoiceDataset
) -> CategoryLogitData:
    """Add HPF controls of the data's households as alternative-specific covariates."""
    controls, outside = controls_from_table(table, dataset, [data.category])
    layout = dataset.layouts[data.category]
    return replace(
        data,
        control=alternative_controls(layout, controls[data.households][:, layout.items]),
        outside_control=outside[data.households, data.category],
        has_controls=True,
    )


@dataclass(frozen=True)
class ParamLayout:
    """Named blocks of the flat parameter vector."""

    blocks: Dict[str, Tuple[int, ...]]

    @property
    def size(self) -> int:
        return int(sum(np.prod(shape) for shape in self.blocks.values()))

    def slices(self) -> Dict[str, slice]:
        out, start = {}, 0
        for name, shape in self.blocks.items():
            stop = start + int(np.prod(shape))
            out[name] = slice(start, stop)
            start = stop
        return out

    def unpack(self, vector: np.ndarray) -> Dict[str, np.ndarray]:
        return {name: vector[s].reshape(self.blocks[name]) for name, s in self.slices().items()}

    def pack(self, values: Dict[str, np.ndarray]) -> np.ndarray:
        return np.concatenate([np.asarray(values[name], dtype=float).ravel() for name in self.blocks])

    def names(self, labels: List[str], covariates: List[str]) -> List[str]:
        out: List[str] = []
        for name, shape in self.blocks.items():
            if name == "alpha":
                out.extend(f"alpha[{label}]" for label in labels)
            elif name == "B":
                out.extend(f"B[{label}|{cov}]" for label in labels for cov in covariates)
            else:
                out.append(name)
        return out


def parameter_layout(spec: LogitSpec, data: CategoryLogitData) -> ParamLayout:
    A, D = data.n_alternatives, data.D.shape[1]
    blocks: Dict[str, Tuple[int, ...]] = {"alpha": (A,), "eta": (1,)}
    if data.focal is not None:
        blocks["eta_focal"] = (1,)
    if spec.controls == "demographics" and D:
        blocks["B"] = (A, D)
    if spec.weekday:
        blocks["omega"] = (1,)
    if spec.controls == "hpf":
        blocks["kappa"] = (1,)
        blocks["kappa0"] = (1,)
    if spec.variant == "nested":
        blocks["lambda"] = (1,)
    if spec.random_price:
        blocks["sd_eta"] = (1,)
    if spec.random_intercept:
        blocks["sd_alpha"] = (1,)
    return ParamLayout(blocks)


def halton_draws(n_households: int, draws: int, dim: int, seed: int) -> np.ndarray:
    """Standard normal scrambled-Halton draws [N, R, dim], fixed per seed."""
    sampler = qmc.Halton(d=dim, scramble=True, seed=seed)
    u = sampler.random(n_households * draws).reshape(n_households, draws, dim)
    return norm.ppf(np.clip(u, 1e-10, 1.0 - 1e-10))


def _nonfocal_mask(data: CategoryLogitData) -> np.ndarray:
    mask = np.ones(data.n_alternatives)
    if data.focal is not None:
        mask[data.focal] = 0.0
    return mask


def _inside_utilities(
    p: Dict[str, np.ndarray],
    data: CategoryLogitData,
    spec: LogitSpec,
    eta_z: Optional[np.ndarray] = None,
    alpha_z: Optional[np.ndarray] = None
) -> np.ndarray:
    """Inside utilities [n, A], or [R, n, A] when draws are given."""
    nonfocal = _nonfocal_mask(data)
    V = p["alpha"][None, :] + p["eta"][0] * data.log_price * nonfocal
    if data.focal is not None:
        V[:, data.focal] += p["eta_focal"][0] * data.log_price[:, data.focal]
    if "B" in p:
        V = V + data.D @ p["B"].T
    if "omega" in p:
        V = V + p["omega"][0] * data.days[:, None]
    if spec.week_effects:
        V = V + data.week_offset[:, None]
    if "kappa" in p:
        V = V + p["kappa"][0] * data.control
    if eta_z is not None and "sd_eta" in p:
        V = V[None] + (p["sd_eta"][0] * eta_z)[..., None] * data.log_price * nonfocal
    if alpha_z is not None and "sd_alpha" in p:
        V = V + p["sd_alpha"][0] * alpha_z
    return V


def _outside_utility(p: Dict[str, np.ndarray], data: CategoryLogitData) -> np.ndarray:
    if "kappa0" in p:
        return p["kappa0"][0] * data.outside_control
    return np.zeros(data.n)


def _nest_terms(V: np.ndarray, available: np.ndarray, V0: np.ndarray, lam: float):
    """Within-nest shares q, inclusive value I, log nest and outside probabilities."""
    with np.errstate(invalid="ignore", over="ignore"):
        scaled = np.where(available, V / lam, -np.inf)
    any_av = available.any(axis=-1)
    top = np.where(any_av, scaled.max(axis=-1), 0.0)
    ex = np.where(available, np.exp(scaled - top[..., None]), 0.0)
    total = ex.sum(axis=-1)
    I = np.where(any_av, top + np.log(np.where(any_av, total, 1.0)), 0.0)
    q = ex / np.where(any_av, total, 1.0)[..., None]
    VN = np.where(any_av, lam * I, -np.inf)
    denom = np.logaddexp(V0, VN)
    log_PN = np.where(any_av, VN - denom, -np.inf)
    log_P0 = V0 - denom
    return q, I, log_PN, log_P0


def _choice_terms(V: np.ndarray, available: np.ndarray, V0: np.ndarray, y: np.ndarray, lam: float):
    """Log-likelihood per observation and its derivatives w.r.t. V, V0 and lambda."""
    A = V.shape[-1]
    q, I, log_PN, log_P0 = _nest_terms(V, available, V0, lam)
    PN, P0 = np.exp(log_PN), np.exp(log_P0)
    inside = y < A
    yy = np.where(inside, y, 0)
    Vsafe = np.where(available, V, 0.0)
    Vy = np.take_along_axis(Vsafe, np.broadcast_to(yy, Vsafe.shape[:-1])[..., None], axis=-1)[..., 0]
    ll = np.where(inside, Vy / lam - I + np.where(inside, log_PN, 0.0), log_P0)

    onehot = (np.arange(A) == yy[..., None]) & inside[..., None]
    Vbar = (q * Vsafe).sum(axis=-1)
    dV = np.where(inside[..., None], (onehot - q) / lam + q * P0[..., None], -PN[..., None] * q)
    dV0 = np.where(inside, -P0, PN)
    dlam = np.where(inside, (Vbar - Vy) / lam ** 2 + P0 * (I - Vbar / lam), -PN * (I - Vbar / lam))
    return ll, dV, dV0, dlam


def _accumulate(
    grads: Dict[str, np.ndarray],
    dV: np.ndarray,
    dV0: np.ndarray,
    data: CategoryLogitData,
    eta_z: Optional[np.ndarray] = None,
    alpha_z: Optional[np.ndarray] = None
) -> None:
    """Chain rule from utility derivatives to parameter blocks (sums over draws)."""
    nonfocal = _nonfocal_mask(data)
    dV_sum = dV.sum(axis=0) if dV.ndim == 3 else dV
    dV0_sum = dV0.sum(axis=0) if dV0.ndim == 2 else dV0
    grads["alpha"] += dV_sum.sum(axis=0)
    grads["eta"] += np.sum(dV_sum * data.log_price * nonfocal)
    if "eta_focal" in grads:
        grads["eta_focal"] += np.sum(dV_sum[:, data.focal] * data.log_price[:, data.focal])
    if "B" in grads:
        grads["B"] += dV_sum.T @ data.D
    if "omega" in grads:
        grads["omega"] += np.sum(dV_sum.sum(axis=1) * data.days)
    if "kappa" in grads:
        grads["kappa"] += np.sum(dV_sum * data.control)
    if "kappa0" in grads:
        grads["kappa0"] += np.sum(dV0_sum * data.outside_control)
    if "sd_eta" in grads and eta_z is not None:
        grads["sd_eta"] += np.sum(dV * (eta_z[..., None] * data.log_price * nonfocal))
    if "sd_alpha" in grads and alpha_z is not None:
        grads["sd_alpha"] += np.sum(dV * alpha_z)


class LogitObjective:
    """Negative (simulated) log-likelihood and gradient over the full parameter vector."""

    def __init__(
        self,
        data: CategoryLogitData,
        spec: LogitSpec,
        layout: ParamLayout,
        draws: Optional[np.ndarray] = None,
        ridge: float = 0.0
    ):
        if spec.controls == "hpf" and not data.has_controls:
            raise DataError("HPF-control specification needs attach_hpf_controls first")
        self.data = data
        self.spec = spec
        self.layout = layout
        self.ridge = ridge
        self.mixed = spec.variant == "mixed"
        if self.mixed:
            if draws is None:
                raise DataError("Mixed logit needs simulation draws")
            self.local_households, self.obs_household = np.unique(data.households, return_inverse=True)
            self.draws = draws

    def draw_chunks(self):
        R = self.draws.shape[1]
        for start in range(0, R, DRAW_CHUNK):
            chunk = self.draws[self.data.households, start:start + DRAW_CHUNK]
            eta_z = chunk[..., 0].T if self.spec.random_price else None
            offset = 1 if self.spec.random_price else 0
            alpha_z = (
                np.transpose(chunk[..., offset:offset + self.data.n_alternatives], (1, 0, 2))
                if self.spec.random_intercept else None
            )
            yield start, eta_z, alpha_z

    def _lambda(self, p: Dict[str, np.ndarray]) -> float:
        return float(p["lambda"][0]) if "lambda" in p else 1.0

    def _simulated(self, p: Dict[str, np.ndarray], gradient: bool):
        data = self.data
        V0 = _outside_utility(p, data)
        H, R = len(self.local_households), self.draws.shape[1]
        S = np.zeros((H, R))
        for start, eta_z, alpha_z in self.draw_chunks():
            V = _inside_utilities(p, data, self.spec, eta_z, alpha_z)
            ll, _, _, _ = _choice_terms(V, data.available, V0, data.choice, 1.0)
            np.add.at(S[:, start:start + ll.shape[0]], self.obs_household, ll.T)
        log_lik = logsumexp(S, axis=1) - np.log(R)
        if not gradient:
            return float(log_lik.sum()), None

        weights = np.exp(S - logsumexp(S, axis=1, keepdims=True))
        grads = {name: np.zeros(shape) for name, shape in self.layout.blocks.items()}
        for start, eta_z, alpha_z in self.draw_chunks():
            V = _inside_utilities(p, data, self.spec, eta_z, alpha_z)
            rc = V.shape[0]
            _, dV, dV0, _ = _choice_terms(V, data.available, V0, data.choice, 1.0)
            w = weights[self.obs_household, start:start + rc].T
            _accumulate(grads, dV * w[..., None], dV0 * w, data, eta_z, alpha_z)
        return float(log_lik.sum()), grads

    def log_likelihood(self, vector: np.ndarray, gradient: bool = False):
        """Log-likelihood (and gradient dict) without the ridge penalty."""
        p = self.layout.unpack(vector)
        if self.mixed:
            return self._simulated(p, gradient)
        V = _inside_utilities(p, self.data, self.spec)
        V0 = _outside_utility(p, self.data)
        lam = self._lambda(p)
        ll, dV, dV0, dlam = _choice_terms(V, self.data.available, V0, self.data.choice, lam)
        if not gradient:
            return float(ll.sum()), None
        grads = {name: np.zeros(shape) for name, shape in self.layout.blocks.items()}
        _accumulate(grads, dV, dV0, self.data)
        if "lambda" in grads:
            grads["lambda"] += dlam.sum()
        return float(ll.sum()), grads

    def __call__(self, vector: np.ndarray) -> Tuple[float, np.ndarray]:
        ll, grads = self.log_likelihood(vector, gradient=True)
        value = -ll
        grad = -self.layout.pack(grads)
        if self.ridge:
            alpha = self.layout.slices()["alpha"]
            value += 0.5 * self.ridge * float(np.sum(vector[alpha] ** 2))
            grad[alpha] += self.ridge * vector[alpha]
        return value, grad


@dataclass
class MleFit:
    """Estimates and diagnostics of one category's logit fit."""

    category: int
    spec: LogitSpec
    layout: ParamLayout
    names: List[str]
    estimates: np.ndarray
    standard_errors: np.ndarray
    p_values: np.ndarray
    log_likelihood: float
    n_obs: int
    converged: bool
    gradient_norm: float
    iterations: int
    boundary: bool = False
    inestimable: List[str] = field(default_factory=list)
    ridge: bool = False
    message: str = ""
    draws: Optional[np.ndarray] = None

    def params(self) -> Dict[str, np.ndarray]:
        return self.layout.unpack(self.estimates)

    def coefficient(self, name: str) -> Tuple[float, float, float]:
        """(estimate, standard error, p-value) of a named coefficient."""
        k = self.names.index(name)
        return float(self.estimates[k]), float(self.standard_errors[k]), float(self.p_values[k])

    def summary(self) -> Dict:
        return {
            "category": self.category,
            "spec": self.spec.name,
            "log_likelihood": self.log_likelihood,
            "n_obs": self.n_obs,
            "converged": self.converged,
            "gradient_norm": self.gradient_norm,
            "iterations": self.iterations,
            "boundary": self.boundary,
            "inestimable": self.inestimable,
            "ridge": self.ridge,
            "message": self.message,
            "coefficients": [
                {"name": n, "estimate": float(e), "se": _finite_or_none(s), "p_value": _finite_or_none(pv)}
                for n, e, s, pv in zip(self.names, self.estimates, self.standard_errors, self.p_values)
            ],
        }


def _finite_or_none(x: float) -> Optional[float]:
    return float(x) if np.isfinite(x) else None


def _within_variation(values: np.ndarray, available: np.ndarray) -> float:
    """Largest within-alternative variance of a covariate over available rows."""
    worst = 0.0
    for a in range(values.shape[1]):
        col = values[available[:, a], a]
        if col.size > 1:
            worst = max(worst, float(np.var(col)))
    return worst


def _inestimable_parameters(spec: LogitSpec, data: CategoryLogitData, layout: ParamLayout) -> List[str]:
    """Names of parameter blocks (or entries) the data cannot identify."""
    out: List[str] = []
    nonfocal_av = data.available.copy()
    if data.focal is not None:
        nonfocal_av[:, data.focal] = False
    if _within_variation(data.log_price, nonfocal_av) < VARIATION_EPS:
        out.append("eta")
    if data.focal is not None:
        focal = data.log_price[data.available[:, data.focal], data.focal]
        if focal.size < 2 or np.var(focal) < VARIATION_EPS:
            out.append("eta_focal")
    if "omega" in layout.blocks and np.var(data.days) < VARIATION_EPS:
        out.append("omega")
    if "kappa" in layout.blocks and _within_variation(data.control, data.available) < VARIATION_EPS:
        out.append("kappa")
    if "kappa0" in layout.blocks and np.var(data.outside_control) < VARIATION_EPS:
        out.append("kappa0")
    if "B" in layout.blocks:
        for d, name in enumerate(data.covariate_names):
            if np.var(data.D[:, d]) < VARIATION_EPS:
                out.append(f"B[*|{name}]")
    for a, label in enumerate(data.labels):
        if not data.available[:, a].any():
            out.append(f"alpha[{label}]")
    return out


def _fixed_mask(
    spec: LogitSpec, data: CategoryLogitData, layout: ParamLayout, inestimable: List[str]
) -> Tuple[np.ndarray, np.ndarray]:
    """Boolean mask of fixed entries and their values."""
    fixed = np.zeros(layout.size, dtype=bool)
    values = np.zeros(layout.size)
    slices = layout.slices()
    for name in inestimable:
        if name in slices:
            fixed[slices[name]] = True
        elif name.startswith("alpha["):
            fixed[slices["alpha"].start + data.labels.index(name[6:-1])] = True
        elif name.startswith("B[*|"):
            d = data.covariate_names.index(name[4:-1])
            D = data.D.shape[1]
            fixed[slices["B"].start + d: slices["B"].stop: D] = True
    if spec.fix_mixing_scale is not None:
        for name in ("sd_eta", "sd_alpha"):
            if name in slices:
                fixed[slices[name]] = True
                values[slices[name]] = spec.fix_mixing_scale
    if spec.fixed_nesting is not None and "lambda" in slices:
        fixed[slices["lambda"]] = True
        values[slices["lambda"]] = spec.fixed_nesting
    return fixed, values


def _bounds(layout: ParamLayout) -> List[Tuple[Optional[float], Optional[float]]]:
    bounds: List[Tuple[Optional[float], Optional[float]]] = [(None, None)] * layout.size
    slices = layout.slices()
    if "lambda" in slices:
        bounds[slices["lambda"].start] = NESTING_BOUNDS
    for name in ("sd_eta", "sd_alpha"):
        if name in slices:
            bounds[slices[name].start] = (0.0, None)
    return bounds


def _start_values(data: CategoryLogitData, layout: ParamLayout) -> np.ndarray:
    values = {name: np.zeros(shape) for name, shape in layout.blocks.items()}
    A = data.n_alternatives
    counts = np.bincount(data.choice[data.choice >= 0], minlength=A + 1).astype(float) + 0.5
    values["alpha"] = np.log(counts[:A] / counts[A])
    if "lambda" in values:
        values["lambda"] = np.array([0.8])
    for name in ("sd_eta", "sd_alpha"):
        if name in values:
            values[name] = np.array([0.1])
    return layout.pack(values)


class _FreeProblem:
    """Objective restricted to the free coordinates."""

    def __init__(self, objective: LogitObjective, fixed: np.ndarray, values: np.ndarray):
        self.objective = objective
        self.free = ~fixed
        self.values = values

    def full(self, x_free: np.ndarray) -> np.ndarray:
        x = self.values.copy()
        x[self.free] = x_free
        return x

    def __call__(self, x_free: np.ndarray) -> Tuple[float, np.ndarray]:
        value, grad = self.objective(self.full(x_free))
        return value, grad[self.free]


def _fd_hessian(problem: _FreeProblem, x: np.ndarray, rows: np.ndarray) -> np.ndarray:
    """Central-difference Hessian of the analytic gradient on the ``rows`` coordinates."""
    idx = np.flatnonzero(rows)
    H = np.zeros((idx.size, idx.size))
    for col, k in enumerate(idx):
        h = HESSIAN_STEP * max(1.0, abs(x[k]))
        up, down = x.copy(), x.copy()
        up[k] += h
        down[k] -= h
        H[:, col] = (problem(up)[1][idx] - problem(down)[1][idx]) / (2 * h)
    return 0.5 * (H + H.T)


def _active_set(x: np.ndarray, g: np.ndarray, bounds) -> np.ndarray:
    """Coordinates pinned at a bound with the gradient pushing outward."""
    active = np.zeros(x.size, dtype=bool)
    for k, (lo, hi) in enumerate(bounds):
        if lo is not None and x[k] <= lo + 1e-10 and g[k] > 0:
            active[k] = True
        if hi is not None and x[k] >= hi - 1e-10 and g[k] < 0:
            active[k] = True
    return active


def _newton_polish(problem: _FreeProblem, x: np.ndarray, bounds, tolerance: float) -> Tuple[np.ndarray, int]:
    steps = 0
    for steps in range(1, NEWTON_STEPS + 1):
        f, g = problem(x)
        interior = ~_active_set(x, g, bounds)
        if np.linalg.norm(g[interior]) < tolerance:
            break
        H = _fd_hessian(problem, x, interior)
        try:
            direction = np.linalg.solve(H, g[interior])
        except np.linalg.LinAlgError:
            break
        t, accepted = 1.0, False
        while t > 1e-8:
            trial = x.copy()
            trial[interior] -= t * direction
            for k, (lo, hi) in enumerate(bounds):
                trial[k] = np.clip(trial[k], -np.inf if lo is None else lo, np.inf if hi is None else hi)
            if problem(trial)[0] <= f:
                x, accepted = trial, True
                break
            t /= 2
        if not accepted:
            break
    return x, steps


def _estimate(
    data: CategoryLogitData,
    spec: LogitSpec,
    config: LogitConfig,
    draws: Optional[np.ndarray] = None,
    start: Optional[np.ndarray] = None,
    polish: bool = True
) -> MleFit:
    if data.n == 0:
        raise DataError(f"No observations for category {data.category}")
    layout = parameter_layout(spec, data)
    names = layout.names(data.labels, data.covariate_names)
    inestimable = _inestimable_parameters(spec, data, layout)
    for name in inestimable:
        logger.warning(f"Category {data.category} {spec.name}: {name} is not identified; fixed at 0")

    chosen = np.bincount(data.choice[data.choice >= 0], minlength=data.n_alternatives + 1)
    never = [label for a, label in enumerate(data.labels) if chosen[a] == 0 and data.available[:, a].any()]
    ridge = bool(never) and config.ridge > 0
    if never:
        logger.warning(
            f"Category {data.category} {spec.name}: alternatives never chosen {never}; "
            f"ridge penalty {config.ridge} on intercepts"
        )

    objective = LogitObjective(data, spec, layout, draws, config.ridge if ridge else 0.0)
    fixed, values = _fixed_mask(spec, data, layout, inestimable)
    problem = _FreeProblem(objective, fixed, values)
    all_bounds = _bounds(layout)
    bounds = [b for b, f in zip(all_bounds, fixed) if not f]
    x0 = (start if start is not None else _start_values(data, layout))[~fixed]

    result = optimize.minimize(
        problem, x0, jac=True, method="L-BFGS-B", bounds=bounds,
        options={"maxiter": config.max_iter, "gtol": config.gradient_tolerance * 1e-2, "ftol": 1e-15},
    )
    x, iterations = result.x, int(result.nit)
    if polish:
        x, newton = _newton_polish(problem, x, bounds, config.gradient_tolerance)
        iterations += newton

    _, g = problem(x)
    interior = ~_active_set(x, g, bounds)
    gradient_norm = float(np.linalg.norm(g[interior]))
    converged = gradient_norm < config.gradient_tolerance or (not polish and bool(result.success))
    if not converged:
        logger.warning(
            f"Category {data.category} {spec.name}: gradient norm {gradient_norm:.2e} after "
            f"{iterations} iterations ({result.message})"
        )

    se_free = np.full(x.size, np.nan)
    H = _fd_hessian(problem, x, interior)
    try:
        cov = np.linalg.inv(H)
        se_free[interior] = np.sqrt(np.clip(np.diag(cov), 0.0, None))
    except np.linalg.LinAlgError:
        logger.warning(f"Category {data.category} {spec.name}: singular information matrix")

    estimates = problem.full(x)
    standard_errors = np.full(layout.size, np.nan)
    standard_errors[~fixed] = se_free
    with np.errstate(divide="ignore", invalid="ignore"):
        z = estimates / standard_errors
    p_values = np.where(np.isfinite(z), 2 * norm.sf(np.abs(z)), np.nan)

    boundary = False
    if "lambda" in layout.blocks and spec.fixed_nesting is None:
        lam = estimates[layout.slices()["lambda"].start]
        boundary = lam <= NESTING_BOUNDS[0] + 1e-6 or lam >= NESTING_BOUNDS[1] - 1e-6
        if boundary:
            logger.warning(f"Category {data.category} {spec.name}: nesting coefficient at bound ({lam:.4f})")

    ll, _ = objective.log_likelihood(estimates)
    return MleFit(
        category=data.category,
        spec=spec,
        layout=layout,
        names=names,
        estimates=estimates,
        standard_errors=standard_errors,
        p_values=p_values,
        log_likelihood=ll,
        n_obs=data.n,
        converged=converged,
        gradient_norm=gradient_norm,
        iterations=iterations,
        boundary=bool(boundary),
        inestimable=inestimable,
        ridge=ridge,
        message=str(result.message),
        draws=draws,
    )


def fit_mnl(data: CategoryLogitData, spec: LogitSpec, config: Optional[LogitConfig] = None) -> MleFit:
    """Multinomial logit MLE (quasi-Newton, then Newton polishing)."""
    return _estimate(data, spec.model_copy(update={"variant": "mnl"}), config or LogitConfig())


def fit_nested_logit(data: CategoryLogitData, spec: LogitSpec, config: Optional[LogitConfig] = None) -> MleFit:
    """Nested logit with the inside alternatives in one nest, lambda in [0.01, 1]."""
    return _estimate(data, spec.model_copy(update={"variant": "nested"}), config or LogitConfig())


def _mnl_counterpart(spec: LogitSpec) -> LogitSpec:
    return spec.model_copy(update={
        "name": f"{spec.name}__mnl", "variant": "mnl", "random_price": False,
        "random_intercept": False, "fix_mixing_scale": None,
    })


def fit_mixed_logit(
    data: CategoryLogitData,
    spec: LogitSpec,
    config: Optional[LogitConfig] = None,
    seed: int = 0,
    n_households: Optional[int] = None
) -> MleFit:
    """
    Maximum simulated likelihood with normal mixing on eta (and intercepts).

    Draws are scrambled Halton points per household, fixed for the fit and
    kept for prediction. Estimation starts from the MNL estimates; the
    MNL point (zero mixing) is returned if the search ends below it.
    """
    config = config or LogitConfig()
    n_households = n_households or int(data.households.max()) + 1
    dim = int(spec.random_price) + (data.n_alternatives if spec.random_intercept else 0)
    draws = halton_draws(n_households, spec.draws, dim, seed)

    base = fit_mnl(data, _mnl_counterpart(spec), config)
    layout = parameter_layout(spec, data)
    start_values = {name: np.zeros(shape) for name, shape in layout.blocks.items()}
    start_values.update({k: v for k, v in base.params().items() if k in start_values})
    for name in ("sd_eta", "sd_alpha"):
        if name in start_values:
            start_values[name] = np.array([0.1])
    fit = _estimate(data, spec, config, draws, start=layout.pack(start_values), polish=False)
    if spec.fix_mixing_scale is not None:
        return fit

    at_zero = dict(start_values)
    for name in ("sd_eta", "sd_alpha"):
        if name in at_zero:
            at_zero[name] = np.array([0.0])
    zero_vector = layout.pack(at_zero)
    zero_ll, _ = LogitObjective(data, spec, layout, draws).log_likelihood(zero_vector)
    if zero_ll > fit.log_likelihood:
        logger.info(f"Category {data.category} {spec.name}: search ended below the zero-mixing point; using it")
        fit.estimates = zero_vector
        fit.log_likelihood = zero_ll
        fit.message = "zero-mixing point"
    return fit


def fit_logit(
    data: CategoryLogitData,
    spec: LogitSpec,
    config: Optional[LogitConfig] = None,
    seed: int = 0,
    n_households: Optional[int] = None
) -> MleFit:
    """Dispatch on the specification variant."""
    if spec.variant == "mixed":
        return fit_mixed_logit(data, spec, config, seed, n_households)
    if spec.variant == "nested":
        return fit_nested_logit(data, spec, config)
    return fit_mnl(data, spec, config)


def predict_probs(fit: MleFit, data: CategoryLogitData) -> np.ndarray:
    """
    Alternative probabilities [n, A + 1] (outside good last).

    Mixed logit integrates over the fitted household draws.

    Raises:
        DataError: If the covariates do not match the fitted specification
    """
    p = fit.params()
    if "B" in p and p["B"].shape[1] != data.D.shape[1]:
        raise DataError(
            f"Covariate width {data.D.shape[1]} does not match the fitted {p['B'].shape[1]} levels"
        )
    if len(p["alpha"]) != data.n_alternatives:
        raise DataError("Alternative layout does not match the fitted model")
    V0 = _outside_utility(p, data)
    lam = float(p["lambda"][0]) if "lambda" in p else 1.0

    def probs(V):
        q, _, log_PN, log_P0 = _nest_terms(V, data.available, V0, lam)
        return np.concatenate([np.exp(log_PN)[..., None] * q, np.exp(log_P0)[..., None]], axis=-1)

    if fit.spec.variant != "mixed":
        return probs(_inside_utilities(p, data, fit.spec))
    objective = LogitObjective(data, fit.spec, fit.layout, fit.draws)
    total = np.zeros((data.n, data.n_alternatives + 1))
    for _, eta_z, alpha_z in objective.draw_chunks():
        total += probs(_inside_utilities(p, data, fit.spec, eta_z, alpha_z)).sum(axis=0)
    return total / fit.draws.shape[1]


def log_likelihood(fit: MleFit, data: CategoryLogitData) -> float:
    """Log-likelihood of ``data`` at the fitted estimates (simulated for mixed logit)."""
    return LogitObjective(data, fit.spec, fit.layout, fit.draws).log_likelihood(fit.estimates)[0]


class LogitDemandModel:
    """One specification fitted category by category."""

    def __init__(self, spec: LogitSpec, fits: Dict[int, MleFit], inputs: LogitInputs):
        self.spec = spec
        self.name = spec.name
        self.fits = fits
        self.inputs = inputs
        self.layouts = inputs.layouts

    def alternative_probabilities(
        self,
        category: int,
        households: np.ndarray,
        weeks: np.ndarray,
        days: np.ndarray,
        log_price: Optional[np.ndarray] = None,
        available: Optional[np.ndarray] = None
    ) -> np.ndarray:
        if category not in self.fits:
            raise DataError(f"{self.name} was not fitted for category {category}")
        data = self.inputs.context(category, households, weeks, days, log_price, available)
        return predict_probs(self.fits[category], data)

    def summaries(self) -> List[Dict]:
        return [self.fits[c].summary() for c in sorted(self.fits)]

    def save(self, path) -> None:
        save_model(self, path)

    @staticmethod
    def load(path) -> "LogitDemandModel":
        return load_model(path, "fit-logit")


def _fit_category(data, spec, config, seed, n_households) -> Tuple[int, MleFit]:
    return data.category, fit_logit(data, spec, config, seed, n_households)


def fit_logit_models(
    dataset: ChoiceDataset,
    spec: LogitSpec,
    config: Optional[LogitConfig] = None,
    inputs: Optional[LogitInputs] = None,
    categories: Optional[Sequence[int]] = None,
    seed: int = 0,
    n_jobs: int = 1
) -> LogitDemandModel:
    """
    Fit one specification on every category's training data in parallel.

    HPF-control specifications need ``inputs`` carrying the controls.
    """
    config = config or LogitConfig()
    inputs = inputs or LogitInputs.from_dataset(dataset)
    if spec.controls == "hpf" and inputs.controls is None:
        raise DataError(f"{spec.name} needs HPF controls")
    categories = list(range(dataset.n_categories)) if categories is None else list(categories)
    datasets = [build_category_data(dataset, c, "train", inputs) for c in categories]
    results = Parallel(n_jobs=n_jobs)(
        delayed(_fit_category)(data, spec, config, seed, dataset.n_households)
        for data in datasets
    )
    fits = dict(results)
    logger.info(
        f"{spec.name}: fitted {len(fits)} categories, total train LL "
        f"{sum(f.log_likelihood for f in fits.values()):.3f}"
    )
    return LogitDemandModel(spec, fits, inputs)
