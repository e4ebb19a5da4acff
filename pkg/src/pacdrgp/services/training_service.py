from __future__ import annotations

import logging
from collections.abc import Callable
from dataclasses import dataclass
from pathlib import Path

from pacdrgp.domain.errors import DatasetValidationError
from pacdrgp.domain.experiment_models import ExperimentConfig
from pacdrgp.domain.optimization import TrainingResult, train
from pacdrgp.domain.revarb_model import Dataset, DeepModel, denormalize, init_model, normalize_dataset
from pacdrgp.ports.dataset_port import DatasetPort
from pacdrgp.ports.model_store_port import ModelStorePort

logger = logging.getLogger(__name__)

MODEL_FILENAME = "model.txt"


@dataclass(frozen=True)
class PreparedModel:
    model: DeepModel
    dataset: Dataset
    model_path: Path
    trained: bool


class TrainingService:
    def __init__(self, datasets: DatasetPort, models: ModelStorePort) -> None:
        self._datasets = datasets
        self._models = models

    def load_dataset(self, config: ExperimentConfig) -> Dataset:
        dataset = self._datasets.load_dataset(config.dataset_path)
        if config.num_states is None:
            return dataset
        if config.num_states > dataset.num_states:
            raise DatasetValidationError(
                f"requested K={config.num_states} but {config.dataset_path} has {dataset.num_states} rows"
            )
        k = config.num_states
        # z-score the first K rows on their own statistics
        exogenous, outputs = denormalize(dataset)
        return normalize_dataset(dataset.times[:k], exogenous[:k], outputs[:k])

    def fit(
        self,
        dataset: Dataset,
        config: ExperimentConfig,
        progress_callback: Callable[[dict], None] | None = None,
    ) -> TrainingResult:
        model = init_model(
            dataset,
            num_hidden_layers=config.num_hidden_layers,
            num_features=config.num_features,
            horizon_x=config.horizon_x,
            horizon_h=config.horizon_h,
            mode=config.mode,
            seed=config.seed,
        )
        result = train(model, dataset, config.training, progress_callback)
        logger.info("trained %s model: bound %.4f -> %.4f", config.mode.value, result.initial_bound, result.final_bound)
        return result

    def train_and_save(
        self,
        config: ExperimentConfig,
        model_path: Path | None = None,
        progress_callback: Callable[[dict], None] | None = None,
    ) -> tuple[TrainingResult, Path]:
        dataset = self.load_dataset(config)
        result = self.fit(dataset, config, progress_callback)
        target = Path(model_path or config.model_path or config.output_dir / MODEL_FILENAME)
        self._models.save_model(result.model, target)
        return result, target

    def load_or_train(
        self,
        config: ExperimentConfig,
        progress_callback: Callable[[dict], None] | None = None,
    ) -> PreparedModel:
        dataset = self.load_dataset(config)
        if config.model_path is not None and self._models.exists(config.model_path):
            model = self._models.load_model(config.model_path)
            if model.num_states != dataset.num_states:
                raise DatasetValidationError(
                    f"model has K={model.num_states} states, dataset has {dataset.num_states}"
                )
            logger.info("loaded model from %s", config.model_path)
            return PreparedModel(model=model, dataset=dataset, model_path=config.model_path, trained=False)
        result = self.fit(dataset, config, progress_callback)
        target = Path(config.model_path or config.output_dir / MODEL_FILENAME)
        self._models.save_model(result.model, target)
        return PreparedModel(model=result.model, dataset=dataset, model_path=target, trained=True)
