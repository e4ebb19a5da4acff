from __future__ import annotations

from collections.abc import Sequence
from pathlib import Path
from typing import Any, Protocol, runtime_checkable

import numpy as np

from pacdrgp.domain.experiment_models import CurveRecord


@runtime_checkable
class ArtifactPort(Protocol):
    def write_curve_csv(self, records: Sequence[CurveRecord], path: Path) -> None:
        """Write one curve record per row, ordered by N."""

    def write_curve_svg(self, records: Sequence[CurveRecord], path: Path, title: str) -> None:
        """Render the curve on linear and log-log axes."""

    def write_manifest(self, manifest: dict[str, Any], path: Path) -> None:
        """Write the reproducibility manifest."""

    def write_samples(self, samples: np.ndarray, path: Path) -> None:
        """Write a K x N sample matrix, one state per row."""

    def write_text(self, content: str, path: Path) -> None:
        """Write a text artifact."""

    def file_digest(self, path: Path) -> str:
        """SHA-256 hex digest of a file."""
