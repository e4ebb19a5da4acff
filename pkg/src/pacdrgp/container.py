from __future__ import annotations

from typing import Any

from pacdrgp.adapters.csv_dataset import CsvDatasetAdapter
from pacdrgp.adapters.filesystem_artifacts import FilesystemArtifacts
from pacdrgp.adapters.model_file_store import TextModelStore
from pacdrgp.services.bound_evolution_service import BoundEvolutionService
from pacdrgp.services.oracle_check_service import OracleCheckService
from pacdrgp.services.report_service import ReportService
from pacdrgp.services.training_service import TrainingService
from pacdrgp.settings import BOUND_WORKERS


def build_services(workers: int | None = None) -> dict[str, Any]:
    datasets = CsvDatasetAdapter()
    models = TextModelStore()
    artifacts = FilesystemArtifacts()
    training_service = TrainingService(datasets, models)
    return {
        "training_service": training_service,
        "bound_evolution_service": BoundEvolutionService(
            training_service, artifacts, workers=BOUND_WORKERS if workers is None else workers
        ),
        "oracle_check_service": OracleCheckService(),
        "report_service": ReportService(training_service, artifacts),
        "datasets": datasets,
        "models": models,
        "artifacts": artifacts,
    }
