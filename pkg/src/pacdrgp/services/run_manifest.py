from __future__ import annotations

import logging
import platform
from collections.abc import Mapping, Sequence
from importlib import metadata
from pathlib import Path
from typing import Any

from pacdrgp.domain.errors import DomainError
from pacdrgp.domain.experiment_models import ExperimentConfig
from pacdrgp.ports.artifact_port import ArtifactPort

logger = logging.getLogger(__name__)

MANIFEST_FILENAMES = {
    "bound-curve": "manifest.json",
    "train": "train_manifest.json",
    "gen-data": "gen_data_manifest.json",
    "report": "report_manifest.json",
}


def package_versions() -> dict[str, str]:
    versions = {"python": platform.python_version()}
    for name, dist in (
        ("numpy", "numpy"),
        ("scipy", "scipy"),
        ("torch", "torch"),
        ("matplotlib", "matplotlib"),
        ("pacdrgp", "pac-drgp-bounds"),
    ):
        try:
            versions[name] = metadata.version(dist)
        except metadata.PackageNotFoundError:
            versions[name] = "unknown"
    return versions


def write_run_manifest(
    artifacts: ArtifactPort,
    config: ExperimentConfig,
    *,
    command: str,
    model_path: Path,
    model_trained_in_run: bool,
    outputs: Sequence[Path | str],
    extra: Mapping[str, Any] | None = None,
) -> Path:
    """Write the config, seed, versions and input digests of one subcommand run next to its outputs."""
    if command not in MANIFEST_FILENAMES:
        raise DomainError(f"no manifest name for command {command!r}")
    manifest: dict[str, Any] = {
        "command": command,
        "config": config.as_dict(),
        "seed": config.seed,
        "versions": package_versions(),
        "dataset_sha256": artifacts.file_digest(config.dataset_path),
        "model_sha256": artifacts.file_digest(model_path),
        "model_path": str(model_path),
        "model_trained_in_run": model_trained_in_run,
        "outputs": [Path(output).name if Path(output).parent == config.output_dir else str(output) for output in outputs],
    }
    manifest.update(extra or {})
    path = config.output_dir / MANIFEST_FILENAMES[command]
    artifacts.write_manifest(manifest, path)
    logger.info("wrote %s manifest to %s", command, path)
    return path
