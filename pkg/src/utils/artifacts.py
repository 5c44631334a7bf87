"""
Run directories addressed by configuration hash, and their manifests.
"""

import hashlib
import json
import platform
from importlib import metadata
from pathlib import Path
from typing import Dict, Iterable, Optional

from src import __version__
from src.data.schemas import Manifest, RunConfig
from src.utils.logger import get_logger

logger = get_logger(__name__)

HASH_LENGTH = 12
MANIFEST_DIR = "manifests"
CONFIG_FILE = "config.json"
TRACKED_PACKAGES = ("numpy", "pandas", "scipy", "scikit-learn", "joblib", "pydantic")


def canonical_config(config: RunConfig, seed: Optional[int] = None) -> str:
    """Canonical JSON of a config with the effective seed."""
    payload = config.model_dump(mode="json")
    payload["seed"] = config.seed if seed is None else int(seed)
    return json.dumps(payload, sort_keys=True, separators=(",", ":"))


def config_hash(config: RunConfig, seed: Optional[int] = None) -> str:
    """SHA-256 of the canonical config."""
    return hashlib.sha256(canonical_config(config, seed).encode("utf-8")).hexdigest()


def run_directory(out: Path, config: RunConfig, seed: Optional[int] = None) -> Path:
    """``<out>/<hash prefix>/``, created with the config written next to it."""
    run_dir = Path(out) / config_hash(config, seed)[:HASH_LENGTH]
    run_dir.mkdir(parents=True, exist_ok=True)
    config_path = run_dir / CONFIG_FILE
    text = json.dumps(json.loads(canonical_config(config, seed)), indent=2, sort_keys=True) + "\n"
    if not config_path.exists() or config_path.read_text() != text:
        config_path.write_text(text)
    return run_dir


def package_versions() -> Dict[str, str]:
    versions = {"python": platform.python_version(), "nfdemand": __version__}
    for name in TRACKED_PACKAGES:
        try:
            versions[name] = metadata.version(name)
        except metadata.PackageNotFoundError:
            versions[name] = "not installed"
    return versions


def write_manifest(
    run_dir: Path,
    command: str,
    config: RunConfig,
    seed: int,
    outputs: Iterable[Path]
) -> Path:
    """
    Record which command produced which files.

    One manifest per command; a rerun of the same command replaces it.
    """
    run_dir = Path(run_dir)
    manifest = Manifest(
        command=command,
        config_hash=config_hash(config, seed),
        seed=seed,
        versions=package_versions(),
        outputs=sorted(str(Path(p).resolve().relative_to(run_dir.resolve())) for p in outputs),
    )
    path = run_dir / MANIFEST_DIR / f"{command}.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(manifest.model_dump(), indent=2, sort_keys=True) + "\n")
    logger.info(f"{command}: {len(manifest.outputs)} outputs recorded in {path}")
    return path


def read_manifest(run_dir: Path, command: str) -> Optional[Manifest]:
    path = Path(run_dir) / MANIFEST_DIR / f"{command}.json"
    if not path.exists():
        return None
    return Manifest.model_validate_json(path.read_text())
