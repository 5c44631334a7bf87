"""Static figures for the report command."""

from pathlib import Path
from typing import Dict

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import pandas as pd  # noqa: E402
import seaborn as sns  # noqa: E402

from src.utils.logger import get_logger  # noqa: E402

logger = get_logger(__name__)

DPI = 150


def _save(fig, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    sns.despine(fig=fig)
    fig.savefig(path, dpi=DPI, bbox_inches="tight", metadata={"Software": None})
    plt.close(fig)
    return path


def plot_never_buyer_deciles(table: pd.DataFrame, path: Path) -> Path:
    """Test purchase rate by predicted-rate decile, one line per model, one panel per level."""
    sns.set_style("whitegrid")
    levels = sorted(table["level"].unique())
    fig, axes = plt.subplots(1, len(levels), figsize=(6 * len(levels), 4), squeeze=False)
    for ax, level in zip(axes[0], levels):
        sns.lineplot(
            data=table[table["level"] == level], x="decile", y="purchase_rate",
            hue="model", marker="o", ax=ax,
        )
        ax.set_title(f"Never-buyers by {level}")
        ax.set_xlabel("Predicted decile")
        ax.set_ylabel("Test purchase rate")
    return _save(fig, path)


def plot_tercile_curves(buckets: pd.DataFrame, path: Path) -> Path:
    """Wednesday-minus-Tuesday demand change against log price change per tercile."""
    sns.set_style("whitegrid")
    models = sorted(buckets["model"].unique()) if "model" in buckets else [None]
    fig, axes = plt.subplots(1, len(models), figsize=(6 * len(models), 4), squeeze=False)
    for ax, model in zip(axes[0], models):
        part = buckets if model is None else buckets[buckets["model"] == model]
        part = part[~part["sparse"]]
        sns.lineplot(data=part, x="d_log_price", y="d_rate", hue="tercile_label", marker="o", ax=ax)
        ax.axhline(0.0, color="grey", lw=0.8)
        ax.set_title(model or "")
        ax.set_xlabel("Log price change")
        ax.set_ylabel("Purchase rate change")
    return _save(fig, path)


def plot_placebo_pvalues(results: pd.DataFrame, path: Path, alpha: float) -> Path:
    """Histogram of placebo p-values per mode and scope."""
    sns.set_style("whitegrid")
    results = results.dropna(subset=["p_value"]).assign(shift=lambda f: f["mode"] + "/" + f["scope"])
    fig, ax = plt.subplots(figsize=(7, 4))
    sns.histplot(data=results, x="p_value", hue="shift", bins=np.linspace(0, 1, 21), element="step", ax=ax)
    ax.axvline(alpha, color="red", lw=1, ls="--")
    ax.set_xlabel("Placebo p-value")
    return _save(fig, path)


def plot_reports(reports_dir: Path, out_dir: Path) -> Dict[str, Path]:
    """Render every figure whose source table exists."""
    from src.evaluation import reports

    written: Dict[str, Path] = {}
    never = reports_dir / reports.NEVER_BUYER_FILE
    if never.exists():
        written["never_buyers.png"] = plot_never_buyer_deciles(pd.read_csv(never), out_dir / "never_buyers.png")
    terciles = reports_dir / reports.TERCILE_FILE
    if terciles.exists():
        frame = pd.read_csv(terciles)
        if len(frame):
            written["terciles.png"] = plot_tercile_curves(frame, out_dir / "terciles.png")
    placebo = reports_dir / reports.PLACEBO_FILE
    if placebo.exists():
        report = reports.read_json(placebo)
        written["placebo_pvalues.png"] = plot_placebo_pvalues(
            pd.DataFrame(report["results"]), out_dir / "placebo_pvalues.png", report["alpha"]
        )
    logger.info(f"Wrote {len(written)} figures to {out_dir}")
    return written
