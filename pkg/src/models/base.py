"""
Interface shared by every demand model that evaluation and targeting consume.
"""

from pathlib import Path
from typing import List, Optional, Protocol, Sequence, runtime_checkable

import joblib
import numpy as np

from src.config import CHECKPOINT_VERSION
from src.utils.errors import DataError, MissingArtifactError


@runtime_checkable
class DemandModel(Protocol):
    """
    Purchase probabilities in a category's alternative space.

    ``alternative_probabilities`` returns [n, A + 1] with the outside good
    last, where A is the number of alternatives of ``layouts[category]``.
    ``log_price`` and ``available`` are item-level [n, J_c] in grid order and
    replace the session grid when given.
    """

    name: str
    layouts: List

    def alternative_probabilities(
        self,
        category: int,
        households: np.ndarray,
        weeks: np.ndarray,
        days: np.ndarray,
        log_price: Optional[np.ndarray] = None,
        available: Optional[np.ndarray] = None
    ) -> np.ndarray:
        ...


def item_columns(
    model: DemandModel,
    category: int,
    items: Sequence[int],
    households: np.ndarray,
    weeks: np.ndarray,
    days: np.ndarray,
    log_price: Optional[np.ndarray] = None,
    available: Optional[np.ndarray] = None
) -> np.ndarray:
    """
    Unconditional purchase probabilities [n, len(items)] of several items.

    Models with item-level predictions answer exactly; the others answer for
    each item's alternative.

    Raises:
        DataError: If an item is not in the category
    """
    layout = model.layouts[category]
    positions = []
    for item in items:
        pos = np.flatnonzero(layout.items == item)
        if not pos.size:
            raise DataError(f"Item {item} is not in category {category}")
        positions.append(int(pos[0]))
    positions = np.asarray(positions, dtype=int)
    if hasattr(model, "item_probabilities"):
        probs = model.item_probabilities(category, households, weeks, days, log_price, available)
        return probs[:, positions]
    probs = model.alternative_probabilities(category, households, weeks, days, log_price, available)
    return probs[:, layout.item_alternative[positions]]


def focal_probabilities(
    model: DemandModel,
    category: int,
    item: int,
    households: np.ndarray,
    weeks: np.ndarray,
    days: np.ndarray,
    log_price: Optional[np.ndarray] = None,
    available: Optional[np.ndarray] = None
) -> np.ndarray:
    """Unconditional purchase probability [n] of one item."""
    return item_columns(model, category, [item], households, weeks, days, log_price, available)[:, 0]


def save_model(model: DemandModel, path: Path) -> None:
    """Persist any demand model with the layout version."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    joblib.dump({"version": CHECKPOINT_VERSION, "model": model}, path)


def load_model(path: Path, command: str = "fit-nf") -> DemandModel:
    """
    Load a model written by ``save_model``.

    Raises:
        MissingArtifactError: If the file does not exist
        DataError: On a layout version mismatch
    """
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(path, command)
    payload = joblib.load(path)
    if payload.get("version") != CHECKPOINT_VERSION:
        raise DataError(f"Model file {path} has an unsupported layout version")
    return payload["model"]
