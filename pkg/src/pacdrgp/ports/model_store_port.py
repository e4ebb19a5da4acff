from __future__ import annotations

from pathlib import Path
from typing import Protocol, runtime_checkable

from pacdrgp.domain.revarb_model import DeepModel


@runtime_checkable
class ModelStorePort(Protocol):
    def save_model(self, model: DeepModel, path: Path) -> None:
        """Persist a model document."""

    def load_model(self, path: Path) -> DeepModel:
        """Read a model document."""

    def exists(self, path: Path) -> bool:
        """Return True if a model document is present at path."""
