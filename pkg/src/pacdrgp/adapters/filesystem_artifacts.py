from __future__ import annotations

import csv
import hashlib
import json
import logging
from collections.abc import Sequence
from pathlib import Path
from typing import Any

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from pacdrgp.domain.experiment_models import CurveRecord  # noqa: E402
from pacdrgp.domain.report_rendering import render_curve_csv  # noqa: E402

logger = logging.getLogger(__name__)

_SVG_PARAMS = {"svg.hashsalt": "pacdrgp", "svg.fonttype": "path"}


class FilesystemArtifacts:
    def write_curve_csv(self, records: Sequence[CurveRecord], path: Path) -> None:
        self.write_text(render_curve_csv(records), path)

    def write_curve_svg(self, records: Sequence[CurveRecord], path: Path, title: str) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        ordered = sorted(records, key=lambda record: record.N)
        sizes = np.array([record.N for record in ordered], dtype=np.float64)
        values = np.array([record.bound_value for record in ordered], dtype=np.float64)
        with plt.rc_context(_SVG_PARAMS):
            figure, (linear, loglog) = plt.subplots(1, 2, figsize=(10, 4))
            try:
                linear.plot(sizes, values, color="tab:blue")
                linear.set_xlabel("N")
                linear.set_ylabel("bound")
                linear.set_title("linear")
                positive = values > 0
                if positive.any():
                    loglog.loglog(sizes[positive], values[positive], color="tab:red")
                else:
                    loglog.set_xscale("log")
                loglog.set_xlabel("N")
                loglog.set_title("log-log")
                figure.suptitle(title)
                figure.tight_layout()
                figure.savefig(path, format="svg", metadata={"Date": None})
            finally:
                plt.close(figure)
        logger.info("wrote %s", path)

    def write_manifest(self, manifest: dict[str, Any], path: Path) -> None:
        self.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", path)

    def write_samples(self, samples: np.ndarray, path: Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        matrix = np.atleast_2d(np.asarray(samples, dtype=np.float64))
        with path.open("w", newline="", encoding="utf-8") as handle:
            writer = csv.writer(handle, lineterminator="\n")
            writer.writerow(["k", *(f"n_{j}" for j in range(1, matrix.shape[1] + 1))])
            for k, row in enumerate(matrix, start=1):
                writer.writerow([k, *(repr(float(v)) for v in row)])

    def write_text(self, content: str, path: Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(content, encoding="utf-8")

    def file_digest(self, path: Path) -> str:
        digest = hashlib.sha256()
        with Path(path).open("rb") as handle:
            for chunk in iter(lambda: handle.read(1 << 16), b""):
                digest.update(chunk)
        return digest.hexdigest()
