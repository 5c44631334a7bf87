"""
Utilities and choice probabilities of the two-stage Nested Factorization model.

Stage 1 (items within a category):
    u_ij = theta_i . beta_j + W_i . rho_j + sigma_i . X_j - (gamma_i . lambda_j) log p_jt
Stage 2 (buy in the category or not):
    u_ic = theta_i . beta_c + W_i . rho_c + sigma_i . X_c + (gamma_i . lambda_c) IV_ict
           + mu_c . delta_t + w_c,day

All functions are pure. Vectorized variants take household-aligned arrays.
"""

from dataclasses import dataclass, fields
from typing import Dict, Optional

import numpy as np
from scipy.special import expit

from src.utils.errors import ConfigError, DataError

NEG_INF = -np.inf


@dataclass(frozen=True)
class LatentParams:
    """
    Point values of every Nested Factorization parameter.

    Shapes: theta [N, K], beta [J, K], gamma [N, M], lam [J, M], rho [J, D],
    sigma [N, P], beta_c [C, K], lam_c [C, M], rho_c [C, D], mu_c [C, L],
    delta [T, L], w [C, 2].
    """

    theta: np.ndarray
    beta: np.ndarray
    gamma: np.ndarray
    lam: np.ndarray
    rho: np.ndarray
    sigma: np.ndarray
    beta_c: np.ndarray
    lam_c: np.ndarray
    rho_c: np.ndarray
    mu_c: np.ndarray
    delta: np.ndarray
    w: np.ndarray

    @property
    def K(self) -> int:
        return self.theta.shape[1]

    @property
    def M(self) -> int:
        return self.gamma.shape[1]

    def validate(self) -> "LatentParams":
        """Check dimension consistency and finiteness."""
        pairs = [
            ("theta", "beta", 1), ("theta", "beta_c", 1),
            ("gamma", "lam", 1), ("gamma", "lam_c", 1),
            ("rho", "rho_c", 1), ("mu_c", "delta", 1),
            ("theta", "gamma", 0), ("theta", "sigma", 0),
            ("beta", "lam", 0), ("beta", "rho", 0),
            ("beta_c", "lam_c", 0), ("beta_c", "rho_c", 0), ("beta_c", "mu_c", 0), ("beta_c", "w", 0),
        ]
        for a, b, axis in pairs:
            if getattr(self, a).shape[axis] != getattr(self, b).shape[axis]:
                raise ConfigError(
                    f"Dimension mismatch: {a}{getattr(self, a).shape} vs {b}{getattr(self, b).shape}"
                )
        if self.w.shape[1] != 2:
            raise ConfigError(f"w must have two day columns, got {self.w.shape}")
        for f in fields(self):
            if not np.all(np.isfinite(getattr(self, f.name))):
                raise DataError(f"Parameter {f.name} has non-finite entries")
        return self

    def to_dict(self) -> Dict[str, np.ndarray]:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, values: Dict[str, np.ndarray]) -> "LatentParams":
        return cls(**{f.name: np.asarray(values[f.name], dtype=float) for f in fields(cls)})


def _check_log_price(log_price, available=None) -> None:
    lp = np.asarray(log_price, dtype=float)
    missing = ~np.isfinite(lp)
    if available is not None:
        missing &= np.asarray(available, dtype=bool)
    if np.any(missing):
        raise DataError("Missing price for an available item")


def upc_utility(
    params: LatentParams,
    household: int,
    upc: int,
    price: float,
    W: np.ndarray,
    X: Optional[np.ndarray] = None
) -> float:
    """
    Deterministic utility of one item for one household (price entered in logs).

    Args:
        params: Model parameters
        household: Household row of theta/gamma/sigma
        upc: Item row of beta/lam/rho
        price: Session price (must be positive)
        W: Covariates of the household [D]
        X: Item observables [P] (defaults to none)

    Raises:
        DataError: If the price is missing or not positive
    """
    if price is None or not np.isfinite(price) or price <= 0:
        raise DataError(f"Missing price for item {upc}")
    X = np.zeros(params.sigma.shape[1]) if X is None else np.asarray(X, dtype=float)
    return float(
        params.theta[household] @ params.beta[upc]
        + np.asarray(W, dtype=float) @ params.rho[upc]
        + params.sigma[household] @ X
        - (params.gamma[household] @ params.lam[upc]) * np.log(price)
    )


def upc_utilities(
    params: LatentParams,
    households: np.ndarray,
    items: np.ndarray,
    log_price: np.ndarray,
    W: np.ndarray,
    X: np.ndarray
) -> np.ndarray:
    """
    Utilities [n, J] of ``items`` for each household row.

    Args:
        households: Household indices [n]
        items: Item indices [J]
        log_price: Log prices [n, J] (or [J], broadcast)
        W: Covariate matrix of all households [N, D]
        X: Observables of all items [J_all, P]
    """
    theta = params.theta[households]
    gamma = params.gamma[households]
    u = theta @ params.beta[items].T + W[households] @ params.rho[items].T
    if X.shape[1]:
        u = u + params.sigma[households] @ X[items].T
    return u - (gamma @ params.lam[items].T) * np.broadcast_to(log_price, u.shape)


def conditional_choice_probs(utilities: np.ndarray, available: np.ndarray) -> np.ndarray:
    """
    Softmax over available items along the last axis.

    Unavailable items get exactly zero.

    Raises:
        DataError: If some row has no available item ("empty choice set")
    """
    u = np.asarray(utilities, dtype=float)
    mask = np.broadcast_to(np.asarray(available, dtype=bool), u.shape)
    if not np.all(mask.any(axis=-1)):
        raise DataError("empty choice set")
    masked = np.where(mask, u, NEG_INF)
    top = masked.max(axis=-1, keepdims=True)
    expu = np.where(mask, np.exp(masked - top), 0.0)
    return expu / expu.sum(axis=-1, keepdims=True)


def inclusive_value(utilities: np.ndarray, available: np.ndarray) -> np.ndarray:
    """
    Log-sum-exp over available items along the last axis.

    Returns ``-inf`` where nothing is available.
    """
    u = np.asarray(utilities, dtype=float)
    mask = np.broadcast_to(np.asarray(available, dtype=bool), u.shape)
    masked = np.where(mask, u, NEG_INF)
    top = masked.max(axis=-1)
    any_available = mask.any(axis=-1)
    safe_top = np.where(any_available, top, 0.0)
    total = np.where(mask, np.exp(masked - safe_top[..., None]), 0.0).sum(axis=-1)
    with np.errstate(divide="ignore"):
        iv = safe_top + np.log(total)
    iv = np.where(any_available, iv, NEG_INF)
    return iv if iv.ndim else float(iv)


def category_utility(
    params: LatentParams,
    household: int,
    category: int,
    iv: float,
    week: int,
    weekday: int,
    W: np.ndarray,
    X_c: Optional[np.ndarray] = None
) -> float:
    """
    Category-stage utility of one household; ``-inf`` when the IV is the sentinel.

    Args:
        weekday: 0 for Tuesday, 1 for Wednesday
    """
    W = np.asarray(W, dtype=float)
    if W.shape[0] != params.rho_c.shape[1]:
        raise ConfigError(f"Covariate length {W.shape[0]} does not match rho_c {params.rho_c.shape}")
    if not np.isfinite(iv):
        return NEG_INF
    X_c = np.zeros(params.sigma.shape[1]) if X_c is None else np.asarray(X_c, dtype=float)
    return float(
        params.theta[household] @ params.beta_c[category]
        + W @ params.rho_c[category]
        + params.sigma[household] @ X_c
        + (params.gamma[household] @ params.lam_c[category]) * iv
        + params.mu_c[category] @ params.delta[week]
        + params.w[category, weekday]
    )


def category_utilities(
    params: LatentParams,
    households: np.ndarray,
    category: int,
    iv: np.ndarray,
    weeks: np.ndarray,
    days: np.ndarray,
    W: np.ndarray,
    X_c: np.ndarray
) -> np.ndarray:
    """Vectorized ``category_utility`` over household rows [n]."""
    iv = np.asarray(iv, dtype=float)
    finite = np.isfinite(iv)
    u = (
        params.theta[households] @ params.beta_c[category]
        + W[households] @ params.rho_c[category]
        + (params.gamma[households] @ params.lam_c[category]) * np.where(finite, iv, 0.0)
        + params.delta[weeks] @ params.mu_c[category]
        + params.w[category, days]
    )
    if X_c.shape[1]:
        u = u + params.sigma[households] @ X_c[category]
    return np.where(finite, u, NEG_INF)


def category_purchase_prob(u):
    """Logistic purchase probability, stable for large |u|; 0 for the sentinel."""
    return expit(u)


def combine_stages(purchase_prob: np.ndarray, conditional: np.ndarray) -> np.ndarray:
    """Unconditional probabilities [n, J + 1]; last column is the outside good."""
    s = np.asarray(purchase_prob, dtype=float)[..., None]
    return np.concatenate([s * conditional, 1.0 - s], axis=-1)


def unconditional_item_prob(
    params: LatentParams,
    household: int,
    items: np.ndarray,
    category: int,
    prices: np.ndarray,
    available: np.ndarray,
    week: int,
    weekday: int,
    W: np.ndarray,
    X: Optional[np.ndarray] = None,
    X_c: Optional[np.ndarray] = None
) -> np.ndarray:
    """
    Unconditional purchase probabilities of one household on one trip.

    Args:
        items: Item indices of the category
        prices: Session prices of those items (NaN allowed where unavailable)
        available: Availability of those items
        W: The household's covariates [D]
        X: Observables of ``items`` [J_c, P]
        X_c: Category observables [P]

    Returns:
        Vector [J_c + 1] with the outside good last
    """
    available = np.asarray(available, dtype=bool)
    prices = np.asarray(prices, dtype=float)
    _check_log_price(np.log(np.where(available, prices, 1.0)), available)
    P = params.sigma.shape[1]
    X = np.zeros((len(items), P)) if X is None else np.asarray(X, dtype=float)
    X_c = np.zeros(P) if X_c is None else np.asarray(X_c, dtype=float)
    u = np.array([
        upc_utility(params, household, int(j), float(p) if a else 1.0, W, X[k])
        for k, (j, p, a) in enumerate(zip(items, prices, available))
    ])
    iv = inclusive_value(u, available)
    s = category_purchase_prob(
        category_utility(params, household, category, iv, week, weekday, W, X_c)
    )
    if not available.any():
        return np.concatenate([np.zeros(len(items)), [1.0]])
    return combine_stages(s, conditional_choice_probs(u, available))


def unconditional_item_probs(
    params: LatentParams,
    households: np.ndarray,
    category: int,
    items: np.ndarray,
    log_price: np.ndarray,
    available: np.ndarray,
    weeks: np.ndarray,
    days: np.ndarray,
    W: np.ndarray,
    X: np.ndarray,
    X_c: np.ndarray
) -> np.ndarray:
    """
    Vectorized unconditional probabilities [n, J_c + 1] for household-session rows.

    Rows without any available item put all mass on the outside good.
    """
    available = np.broadcast_to(np.asarray(available, dtype=bool), (len(households), len(items)))
    u = upc_utilities(params, households, items, log_price, W, X)
    iv = inclusive_value(u, available)
    s = category_purchase_prob(category_utilities(params, households, category, iv, weeks, days, W, X_c))
    out = np.zeros((len(households), len(items) + 1))
    out[:, -1] = 1.0
    rows = available.any(axis=1)
    if rows.any():
        out[rows] = combine_stages(s[rows], conditional_choice_probs(u[rows], available[rows]))
    return out
