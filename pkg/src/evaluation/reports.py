"""
Deterministic report files and summary tables.

Every command writes its raw results under ``reports/``; ``assemble_report``
turns them into flat comparison tables. JSON is written with sorted keys and
CSV with a fixed float format so reruns are byte-identical.
"""

import json
from pathlib import Path
from typing import Any, Dict, Iterable, Optional, Tuple

import numpy as np
import pandas as pd
from pydantic import BaseModel

from src.evaluation.predictive import rank_models_by_category
from src.utils.errors import MissingArtifactError
from src.utils.logger import get_logger

logger = get_logger(__name__)

FLOAT_FORMAT = "%.10g"

# Raw result files and the command that writes them
FIT_FILE = "fit.csv"
SEGMENT_FILE = "fit_segments.csv"
PERSONALIZATION_FILE = "personalization.json"
NEVER_BUYER_FILE = "never_buyers.csv"
EVENTS_FILE = "events.csv"
EVENT_LIKELIHOOD_FILE = "event_likelihoods.json"
PLACEBO_FILE = "placebo.json"
ELASTICITY_FILE = "elasticity.json"
TERCILE_FILE = "terciles.csv"
TERCILE_RESPONSE_FILE = "tercile_response.csv"
COUPON_FILE = "coupons.json"
TWO_PRICE_FILE = "two_price.json"
ASSIGNMENT_FILE = "two_price_assignments.csv"
SELECTION_FILE = "nf_selection.csv"

PRODUCERS = {
    FIT_FILE: "evaluate",
    SEGMENT_FILE: "evaluate",
    PERSONALIZATION_FILE: "evaluate",
    NEVER_BUYER_FILE: "evaluate",
    EVENTS_FILE: "events",
    EVENT_LIKELIHOOD_FILE: "events",
    PLACEBO_FILE: "placebo",
    ELASTICITY_FILE: "elasticity",
    TERCILE_FILE: "elasticity",
    TERCILE_RESPONSE_FILE: "elasticity",
    COUPON_FILE: "target",
    TWO_PRICE_FILE: "target",
    ASSIGNMENT_FILE: "target",
    SELECTION_FILE: "fit-nf",
}


def _jsonable(value: Any) -> Any:
    if isinstance(value, BaseModel):
        return _jsonable(value.model_dump())
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, np.generic):
        return _jsonable(value.item())
    if isinstance(value, float) and not np.isfinite(value):
        return None
    if isinstance(value, Path):
        return str(value)
    return value


def write_json(payload: Any, path: Path) -> Path:
    """Write JSON with sorted keys; NaN and infinities become null."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        json.dump(_jsonable(payload), f, indent=2, sort_keys=True)
        f.write("\n")
    return path


def read_json(path: Path, command: Optional[str] = None) -> Any:
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(path, command or PRODUCERS.get(path.name, "evaluate"))
    with open(path) as f:
        return json.load(f)


def write_csv(frame: pd.DataFrame, path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")
    return path


def read_csv(path: Path, command: Optional[str] = None) -> pd.DataFrame:
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(path, command or PRODUCERS.get(path.name, "evaluate"))
    return pd.read_csv(path)


def predictive_fit_table(fit: pd.DataFrame) -> pd.DataFrame:
    """Pooled log-likelihood and squared error per model, one column pair per split."""
    pooled = fit[fit["category"].astype(str) == "all"]
    table = pooled.pivot(index="model", columns="split", values=["mean_log_likelihood", "mean_squared_error"])
    table.columns = [f"{metric}_{split}" for metric, split in table.columns]
    return table.reset_index().sort_values("model").reset_index(drop=True)


def category_rank_table(fit: pd.DataFrame, split: str = "test") -> pd.DataFrame:
    return rank_models_by_category(fit, split)


def event_likelihood_table(reports: Iterable[Dict]) -> pd.DataFrame:
    """Individual and aggregate event likelihoods, one row per model and event type."""
    rows = []
    for report in reports:
        for event_type in sorted(report["by_type"]):
            rows.append({"model": report["model"], **report["by_type"][event_type]})
    return pd.DataFrame(rows)


def selection_table(scored: Iterable[Tuple[Any, Any]], chosen: Any, event_type: str) -> pd.DataFrame:
    """Validation event likelihoods of every (K, M) candidate, the chosen one flagged."""
    rows = []
    for config, report in scored:
        r = report.by_type.get(event_type)
        rows.append({
            "K": config.K,
            "M": config.M,
            "event_type": event_type,
            "n_events": r.n_events if r else 0,
            "individual_mean_ll": r.individual_mean_ll if r else None,
            "aggregate_mean_ll": r.aggregate_mean_ll if r else None,
            "selected": (config.K, config.M) == (chosen.K, chosen.M),
        })
    return pd.DataFrame(rows, columns=[
        "K", "M", "event_type", "n_events", "individual_mean_ll", "aggregate_mean_ll", "selected",
    ])


def personalization_table(records: Iterable[Dict]) -> pd.DataFrame:
    """Coefficient of variation and fixed-effects slope per model and level."""
    frame = pd.DataFrame(list(records))
    if frame.empty:
        return frame
    return frame.sort_values(["model", "level"]).reset_index(drop=True)


def elasticity_table(summaries: Iterable[Dict]) -> pd.DataFrame:
    frame = pd.DataFrame(list(summaries))
    if frame.empty:
        return frame
    return frame.sort_values("model").reset_index(drop=True)


def coupon_table(reports: Iterable[Dict]) -> pd.DataFrame:
    """Percent gain over uniform allocation per candidate model, category and regime."""
    rows = []
    for report in reports:
        for regime in sorted(report["regimes"]):
            gain = report["regimes"][regime]
            rows.append({
                "candidate": report["candidate"],
                "category": report["category"],
                "upc": report["upc"],
                "regime": regime,
                "expected_gain": gain["expected_gain"],
                "pct_vs_uniform": gain["pct_vs_uniform"],
            })
    frame = pd.DataFrame(rows)
    if frame.empty:
        return frame
    summary = frame.groupby(["candidate", "regime"], sort=True)["pct_vs_uniform"].mean().unstack("regime")
    return summary.reset_index()


def placebo_table(report: Dict) -> pd.DataFrame:
    """Failure counts at the report's level per mode and scope."""
    rows = []
    for key in sorted(report["fitted"]):
        mode, scope = key.split("/")
        fitted, failures = report["fitted"][key], report["failures"].get(key, 0)
        rows.append({
            "mode": mode, "scope": scope, "fitted": fitted, "significant": failures,
            "failure_rate": failures / fitted if fitted else np.nan, "alpha": report["alpha"],
        })
    return pd.DataFrame(rows)


def two_price_table(reports: Iterable[Dict]) -> pd.DataFrame:
    rows = [
        {k: r[k] for k in (
            "upc", "model", "preferred_price", "preferred_fraction",
            "targeted_profit", "alternative_profit", "pct_gain",
        )}
        for r in reports
    ]
    return pd.DataFrame(rows)


def assemble_report(reports_dir: Path, plots: bool = False) -> Dict[str, Path]:
    """
    Build comparison tables from whatever raw results exist.

    Raises:
        MissingArtifactError: If no raw result exists at all
    """
    reports_dir = Path(reports_dir)
    builders = [
        ("predictive_fit.csv", FIT_FILE, lambda p: predictive_fit_table(read_csv(p))),
        ("category_ranks.csv", FIT_FILE, lambda p: category_rank_table(read_csv(p))),
        ("event_likelihoods.csv", EVENT_LIKELIHOOD_FILE, lambda p: event_likelihood_table(read_json(p))),
        ("personalization.csv", PERSONALIZATION_FILE, lambda p: personalization_table(read_json(p))),
        ("elasticities.csv", ELASTICITY_FILE, lambda p: elasticity_table(read_json(p))),
        ("coupon_targeting.csv", COUPON_FILE, lambda p: coupon_table(read_json(p))),
        ("placebo_summary.csv", PLACEBO_FILE, lambda p: placebo_table(read_json(p))),
        ("two_price.csv", TWO_PRICE_FILE, lambda p: two_price_table(read_json(p))),
    ]
    tables_dir = reports_dir / "tables"
    written: Dict[str, Path] = {}
    for name, source, build in builders:
        path = reports_dir / source
        if not path.exists():
            logger.info(f"Skipping {name}: {source} not found (run '{PRODUCERS[source]}')")
            continue
        written[name] = write_csv(build(path), tables_dir / name)
    if not written:
        raise MissingArtifactError(reports_dir / FIT_FILE, "evaluate")

    if plots:
        from src.evaluation import plots as plotting

        written.update(plotting.plot_reports(reports_dir, tables_dir))
    write_json({name: str(path.relative_to(reports_dir)) for name, path in written.items()},
               reports_dir / "report_index.json")
    logger.info(f"Assembled {len(written)} report files in {tables_dir}")
    return written
