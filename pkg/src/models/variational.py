"""
Mean-field Gaussian variational inference with reparameterized gradients.

A likelihood object supplies per-observation log-likelihoods and their
analytic gradients with respect to point parameter values; this module turns
them into Monte Carlo ELBO estimates, reparameterization gradients and an
Adam-driven stochastic optimizer with checkpointing.
"""

import copy
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Protocol, Sequence, Tuple, Union

import joblib
import numpy as np

from src.config import CHECKPOINT_VERSION
from src.data.schemas import TrainingConfig
from src.utils.errors import ConfigError, DataError, NumericalError
from src.utils.logger import close_json_file_logger, get_json_file_logger, get_logger

logger = get_logger(__name__)

Seed = Union[int, Sequence[int]]
Blocks = Dict[str, np.ndarray]

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8
MONITOR_STREAM = 7919


class Likelihood(Protocol):
    """Observation model over named parameter blocks."""

    n_observations: int
    weights: np.ndarray

    def block_shapes(self) -> Dict[str, Tuple[int, ...]]:
        ...

    def evaluate(
        self, params: Blocks, idx: np.ndarray, weights: np.ndarray, gradient: bool
    ) -> Tuple[np.ndarray, Optional[Blocks]]:
        """Return per-observation log-likelihoods and (optionally) the weighted gradient sum."""
        ...


@dataclass
class VariationalState:
    """Means and log-scales of independent Gaussian factors, plus optimizer state."""

    means: Blocks
    log_scales: Blocks
    iteration: int = 0
    adam: Dict[str, Blocks] = field(default_factory=dict)
    trace: List[Tuple[int, float]] = field(default_factory=list)
    converged: bool = False
    version: int = CHECKPOINT_VERSION

    @property
    def names(self) -> List[str]:
        return sorted(self.means)

    def scales(self) -> Blocks:
        return {name: np.exp(ls) for name, ls in self.log_scales.items()}

    def copy(self) -> "VariationalState":
        return copy.deepcopy(self)

    def equals(self, other: "VariationalState") -> bool:
        """Bit-exact comparison of all arrays and counters."""
        if self.names != other.names or self.iteration != other.iteration:
            return False
        return all(
            np.array_equal(self.means[n], other.means[n])
            and np.array_equal(self.log_scales[n], other.log_scales[n])
            for n in self.names
        )


def init_state(config: TrainingConfig, dims: Dict[str, Tuple[int, ...]], seed: Seed) -> VariationalState:
    """
    Initialize means ~ N(0, init_scale^2) and log-scales at log(init_scale).

    Raises:
        ConfigError: If a block has a zero-sized dimension
    """
    for name, shape in dims.items():
        if any(int(d) < 1 for d in shape):
            raise ConfigError(f"Parameter block '{name}' has an empty dimension {tuple(shape)}")
    rng = np.random.default_rng(seed)
    means, log_scales = {}, {}
    for name in sorted(dims):
        shape = tuple(int(d) for d in dims[name])
        means[name] = rng.normal(0.0, config.init_scale, size=shape)
        log_scales[name] = np.full(shape, np.log(config.init_scale))
    return VariationalState(means=means, log_scales=log_scales)


def kl_divergence(state: VariationalState, prior_scale: float = 1.0) -> float:
    """Closed-form KL(q || N(0, prior_scale^2)) summed over all entries."""
    total = 0.0
    var_p = prior_scale ** 2
    for name in state.names:
        mu, ls = state.means[name], state.log_scales[name]
        total += float(np.sum(
            np.log(prior_scale) - ls + (np.exp(2 * ls) + mu ** 2) / (2 * var_p) - 0.5
        ))
    return total


def kl_gradient(state: VariationalState, prior_scale: float = 1.0) -> Tuple[Blocks, Blocks]:
    """Gradient of the KL term with respect to means and log-scales."""
    var_p = prior_scale ** 2
    d_mu = {n: state.means[n] / var_p for n in state.names}
    d_ls = {n: np.exp(2 * state.log_scales[n]) / var_p - 1.0 for n in state.names}
    return d_mu, d_ls


def draw_noise(state: VariationalState, draws: int, seed: Seed) -> List[Blocks]:
    """Standard normal noise per draw and block, in sorted block order."""
    rng = np.random.default_rng(seed)
    return [
        {name: rng.standard_normal(state.means[name].shape) for name in state.names}
        for _ in range(draws)
    ]


def _sample(state: VariationalState, eps: Blocks) -> Blocks:
    return {n: state.means[n] + np.exp(state.log_scales[n]) * eps[n] for n in state.names}


def _check_finite(ll: np.ndarray, idx: np.ndarray) -> None:
    bad = ~np.isfinite(ll)
    if bad.any():
        raise NumericalError(f"Non-finite log-likelihood at observation {int(idx[np.flatnonzero(bad)[0]])}")


def elbo_estimate(
    state: VariationalState,
    likelihood: Likelihood,
    idx: np.ndarray,
    draws: int,
    seed: Seed,
    scale: float = 1.0,
    weights: Optional[np.ndarray] = None,
    prior_scale: float = 1.0
) -> float:
    """
    Monte Carlo ELBO: scaled expected log-likelihood of ``idx`` minus the KL.

    Raises:
        DataError: If the observation slice is empty
        NumericalError: If a sampled log-likelihood is not finite
    """
    idx = np.asarray(idx, dtype=int)
    if idx.size == 0:
        raise DataError("ELBO requested on an empty observation slice")
    weights = np.ones(idx.size) if weights is None else np.asarray(weights, dtype=float)
    expected = 0.0
    for eps in draw_noise(state, draws, seed):
        ll, _ = likelihood.evaluate(_sample(state, eps), idx, weights, gradient=False)
        _check_finite(ll, idx)
        expected += scale * float(np.dot(weights, ll))
    return expected / draws - kl_divergence(state, prior_scale)


def elbo_gradient(
    state: VariationalState,
    likelihood: Likelihood,
    idx: np.ndarray,
    draws: int,
    seed: Seed,
    scale: float = 1.0,
    weights: Optional[np.ndarray] = None,
    prior_scale: float = 1.0
) -> Tuple[Blocks, Blocks]:
    """
    Reparameterization gradient of ``elbo_estimate`` (same noise for the same seed).

    Returns:
        Tuple of (gradient w.r.t. means, gradient w.r.t. log-scales)
    """
    idx = np.asarray(idx, dtype=int)
    weights = np.ones(idx.size) if weights is None else np.asarray(weights, dtype=float)
    g_mu = {n: np.zeros_like(state.means[n]) for n in state.names}
    g_ls = {n: np.zeros_like(state.means[n]) for n in state.names}
    if idx.size:
        for eps in draw_noise(state, draws, seed):
            ll, grads = likelihood.evaluate(_sample(state, eps), idx, weights, gradient=True)
            _check_finite(ll, idx)
            for n in state.names:
                g = grads.get(n)
                if g is None:
                    continue
                g_mu[n] += scale * g / draws
                g_ls[n] += scale * g * eps[n] * np.exp(state.log_scales[n]) / draws
    k_mu, k_ls = kl_gradient(state, prior_scale)
    for n in state.names:
        g_mu[n] -= k_mu[n]
        g_ls[n] -= k_ls[n]
    return g_mu, g_ls


def adam_step(state: VariationalState, g_mu: Blocks, g_ls: Blocks, step_size: float) -> None:
    """One Adam ascent step on means and log-scales, in place."""
    if not state.adam:
        zeros = lambda: {n: np.zeros_like(state.means[n]) for n in state.names}  # noqa: E731
        state.adam = {"m_mu": zeros(), "v_mu": zeros(), "m_ls": zeros(), "v_ls": zeros()}
    t = state.iteration + 1
    for target, grads, m_key, v_key in (
        (state.means, g_mu, "m_mu", "v_mu"), (state.log_scales, g_ls, "m_ls", "v_ls")
    ):
        for n in state.names:
            m = state.adam[m_key][n] = ADAM_BETA1 * state.adam[m_key][n] + (1 - ADAM_BETA1) * grads[n]
            v = state.adam[v_key][n] = ADAM_BETA2 * state.adam[v_key][n] + (1 - ADAM_BETA2) * grads[n] ** 2
            m_hat = m / (1 - ADAM_BETA1 ** t)
            v_hat = v / (1 - ADAM_BETA2 ** t)
            target[n] = target[n] + step_size * m_hat / (np.sqrt(v_hat) + ADAM_EPS)


def save_state(state: VariationalState, path: Path) -> None:
    """Write a versioned checkpoint."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    joblib.dump({"version": CHECKPOINT_VERSION, "state": state}, path)


def load_state(path: Path) -> VariationalState:
    """Read a checkpoint written by ``save_state``."""
    payload = joblib.load(path)
    if payload.get("version") != CHECKPOINT_VERSION:
        raise DataError(
            f"Checkpoint {path} has layout version {payload.get('version')}, expected {CHECKPOINT_VERSION}"
        )
    return payload["state"]


def monitor_indices(n_observations: int, size: int, seed: int) -> np.ndarray:
    """Fixed subsample on which ELBO convergence is monitored."""
    rng = np.random.default_rng([seed, MONITOR_STREAM])
    if n_observations <= size:
        return np.arange(n_observations)
    return np.sort(rng.choice(n_observations, size=size, replace=False))


def has_converged(trace: List[Tuple[int, float]], window: int, tolerance: float) -> bool:
    """Relative ELBO change over the last ``window`` evaluations below ``tolerance``."""
    if len(trace) <= window:
        return False
    old, new = trace[-window - 1][1], trace[-1][1]
    return abs(new - old) / max(abs(old), 1e-12) < tolerance


def fit_svi(
    likelihood: Likelihood,
    config: TrainingConfig,
    state: VariationalState,
    stage: str,
    log_path: Optional[Path] = None,
    checkpoint_path: Optional[Path] = None,
    stop_after: Optional[int] = None
) -> VariationalState:
    """
    Run stochastic variational inference from ``state`` (fresh or resumed).

    Minibatches are drawn with replacement from a generator seeded by
    (seed, iteration), so a resumed run repeats the uninterrupted one.

    Args:
        likelihood: Observation model
        config: Training settings
        state: Starting state; its iteration counter is honored
        stage: Label written to the training log
        log_path: Line-delimited JSON training log
        checkpoint_path: Checkpoint written at every ELBO evaluation
        stop_after: Return once this many total iterations have run

    Raises:
        NumericalError: On a non-finite gradient or ELBO; carries the last good state
    """
    n = likelihood.n_observations
    if n == 0:
        raise DataError(f"No training observations for {stage}")
    state = state.copy()
    batch = min(config.batch_size, n)
    per_epoch = int(np.ceil(n / batch))
    total = config.max_epochs * per_epoch
    if stop_after is not None:
        total = min(total, stop_after)
    monitor = monitor_indices(n, config.monitor_size, config.seed)
    monitor_scale = n / monitor.size
    json_log = get_json_file_logger(f"{stage}-{id(state)}", Path(log_path)) if log_path else None
    last_good = state.copy()

    try:
        while state.iteration < total and not state.converged:
            it = state.iteration
            rng = np.random.default_rng([config.seed, it])
            idx = rng.integers(0, n, size=batch)
            step = config.learning_rate / (1.0 + config.lr_decay * it)
            try:
                g_mu, g_ls = elbo_gradient(
                    state, likelihood, idx, config.draws, [config.seed, it, 1],
                    scale=n / batch, weights=likelihood.weights[idx], prior_scale=config.prior_scale,
                )
            except NumericalError as e:
                raise NumericalError(f"{stage}: {e} at iteration {it}", state=last_good) from e
            if not all(np.all(np.isfinite(g)) for g in list(g_mu.values()) + list(g_ls.values())):
                raise NumericalError(f"{stage}: non-finite gradient at iteration {it}", state=last_good)
            adam_step(state, g_mu, g_ls, step)
            state.iteration += 1

            if state.iteration % config.eval_every == 0 or state.iteration == total:
                try:
                    elbo = elbo_estimate(
                        state, likelihood, monitor, config.draws, [config.seed, MONITOR_STREAM],
                        scale=monitor_scale, weights=likelihood.weights[monitor],
                        prior_scale=config.prior_scale,
                    )
                except NumericalError as e:
                    raise NumericalError(f"{stage}: {e} at iteration {state.iteration}", state=last_good) from e
                if not np.isfinite(elbo):
                    raise NumericalError(f"{stage}: ELBO diverged at iteration {state.iteration}", state=last_good)
                state.trace.append((state.iteration, float(elbo)))
                state.converged = has_converged(state.trace, config.window, config.tolerance)
                if json_log is not None:
                    json_log.info("elbo", extra={
                        "stage": stage, "iteration": state.iteration,
                        "elbo": float(elbo), "step_size": float(step),
                    })
                logger.debug(f"{stage} iteration {state.iteration}: ELBO {elbo:.4f}")
                last_good = state.copy()
                if checkpoint_path is not None:
                    save_state(state, checkpoint_path)
    except NumericalError:
        if checkpoint_path is not None:
            save_state(last_good, checkpoint_path)
        raise
    finally:
        if json_log is not None:
            close_json_file_logger(json_log)

    if state.converged:
        logger.info(f"{stage} converged after {state.iteration} iterations")
    elif state.iteration >= config.max_epochs * per_epoch:
        logger.info(f"{stage} stopped at the epoch limit ({state.iteration} iterations)")
    return state
