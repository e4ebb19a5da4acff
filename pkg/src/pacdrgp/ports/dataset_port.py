from __future__ import annotations

from pathlib import Path
from typing import Protocol, runtime_checkable

from pacdrgp.domain.revarb_model import Dataset


@runtime_checkable
class DatasetPort(Protocol):
    def load_dataset(self, path: Path) -> Dataset:
        """Parse a time-series file into a normalized Dataset."""

    def save_dataset(self, dataset: Dataset, path: Path) -> None:
        """Write a Dataset in original units."""
