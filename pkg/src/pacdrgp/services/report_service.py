from __future__ import annotations

import logging
from collections.abc import Callable
from pathlib import Path

from pacdrgp.domain.errors import DomainError
from pacdrgp.domain.experiment_models import ExperimentConfig
from pacdrgp.domain.pac_bounds import (
    BoundInputs,
    BoundVariant,
    bound_inputs_from_model,
    consistency_asymptote,
    evaluate_variant,
    oracle_risk,
)
from pacdrgp.domain.report_rendering import render_bound_report
from pacdrgp.ports.artifact_port import ArtifactPort
from pacdrgp.services.bound_evolution_service import empirical_risk_prefix_means
from pacdrgp.services.run_manifest import write_run_manifest
from pacdrgp.services.time_utils import now_local_iso
from pacdrgp.services.training_service import PreparedModel, TrainingService

logger = logging.getLogger(__name__)

REPORT_FILENAME = "report.txt"


class ReportService:
    def __init__(self, training: TrainingService, artifacts: ArtifactPort) -> None:
        self._training = training
        self._artifacts = artifacts

    def preview_report(
        self,
        config: ExperimentConfig,
        num_samples: int,
        progress_callback: Callable[[dict], None] | None = None,
    ) -> str:
        content, _ = self._prepare(config, num_samples, progress_callback)
        return content

    def write_report(
        self,
        config: ExperimentConfig,
        num_samples: int,
        progress_callback: Callable[[dict], None] | None = None,
    ) -> tuple[str, Path]:
        content, prepared = self._prepare(config, num_samples, progress_callback)
        path = config.output_dir / REPORT_FILENAME
        self._artifacts.write_text(content, path)
        write_run_manifest(
            self._artifacts,
            config,
            command="report",
            model_path=prepared.model_path,
            model_trained_in_run=prepared.trained,
            outputs=[path],
            extra={"num_samples": num_samples},
        )
        return content, path

    def _prepare(
        self,
        config: ExperimentConfig,
        num_samples: int,
        progress_callback: Callable[[dict], None] | None,
    ) -> tuple[str, PreparedModel]:
        if num_samples < 1:
            raise DomainError(f"N must be positive, got {num_samples}")
        prepared = self._training.load_or_train(config, progress_callback)
        inputs = bound_inputs_from_model(prepared.model, tau=config.tau)
        empirical = float(empirical_risk_prefix_means(prepared.model, num_samples, config.seed)[-1])
        return self.render(inputs, num_samples, config, empirical), prepared

    @staticmethod
    def render(inputs: BoundInputs, num_samples: int, config: ExperimentConfig, empirical_risk: float) -> str:
        rows = []
        for variant in BoundVariant:
            values = []
            for two_sided_bound in (False, True):
                try:
                    breakdown = evaluate_variant(
                        variant,
                        inputs,
                        num_samples,
                        lambda_rule=config.lambda_rule,
                        empirical_risk=empirical_risk,
                        two_sided_bound=two_sided_bound,
                    )
                    values.append(breakdown.value)
                except DomainError as exc:
                    logger.info("%s undefined at N=%d: %s", variant.value, num_samples, exc)
                    values.append(float("nan"))
            rows.append((variant.value, values[0], values[1]))
        return render_bound_report(
            num_samples=num_samples,
            tau=inputs.tau,
            generated_at_local_iso=now_local_iso(),
            rows=rows,
            kl=inputs.kl,
            oracle=oracle_risk(inputs),
            asymptote=consistency_asymptote(inputs),
            empirical_nll=empirical_risk,
        )
