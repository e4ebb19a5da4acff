from __future__ import annotations

import logging
import math
from collections.abc import Callable, Mapping, Sequence
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass
from pathlib import Path
from time import perf_counter
from typing import Any

import numpy as np
import torch

from pacdrgp.domain.errors import BoundEvaluationError, DomainError
from pacdrgp.domain.experiment_models import CurveRecord, ExperimentConfig
from pacdrgp.domain.pac_bounds import (
    BoundCurve,
    BoundInputs,
    BoundVariant,
    LambdaRule,
    bound_inputs_from_model,
    consistency_asymptote,
    evaluate_variant,
)
from pacdrgp.domain.report_rendering import sparkline
from pacdrgp.domain.revarb_model import DeepModel, per_sample_nll, predictive_moments
from pacdrgp.domain.tensors import to_numpy
from pacdrgp.ports.artifact_port import ArtifactPort
from pacdrgp.services.run_manifest import write_run_manifest
from pacdrgp.services.time_utils import elapsed_ms
from pacdrgp.services.training_service import TrainingService

logger = logging.getLogger(__name__)

_NLL_CHUNK = 4096


@dataclass(frozen=True)
class BoundEvolutionResult:
    curve: BoundCurve
    records: tuple[CurveRecord, ...]
    csv_path: Path
    svg_path: Path
    manifest_path: Path
    sparkline: str


def empirical_risk_prefix_means(model: DeepModel, num_samples: int, seed: int) -> np.ndarray:
    """Running mean of the expected NLL over the first n quasi-real samples, n = 1..num_samples.

    Draws the same stream as generate_quasi_real(model, num_samples, seed), chunk by chunk.
    """
    if num_samples < 1:
        raise DomainError(f"num_samples must be positive, got {num_samples}")
    with torch.no_grad():
        mean, variance = predictive_moments(model, model.num_hidden_layers)
    mean, scale = to_numpy(mean), np.sqrt(to_numpy(variance))
    rng = np.random.default_rng(seed)
    chunks = []
    for start in range(0, num_samples, _NLL_CHUNK):
        size = min(_NLL_CHUNK, num_samples - start)
        samples = (mean + rng.standard_normal((size, mean.shape[0])) * scale).T
        chunks.append(per_sample_nll(model, samples))
    losses = np.concatenate(chunks)
    return np.cumsum(losses) / np.arange(1, num_samples + 1)


class BoundEvolutionService:
    def __init__(self, training: TrainingService, artifacts: ArtifactPort, workers: int = 1) -> None:
        self._training = training
        self._artifacts = artifacts
        self._workers = max(int(workers), 1)

    def run(
        self,
        config: ExperimentConfig,
        progress_callback: Callable[[dict], None] | None = None,
    ) -> BoundEvolutionResult:
        prepared = self._training.load_or_train(config, progress_callback)
        model = prepared.model
        inputs = bound_inputs_from_model(model, tau=config.tau)
        sizes = config.sample_sizes()
        risks = empirical_risk_prefix_means(model, max(sizes), config.seed)
        empirical = {n: float(risks[n - 1]) for n in sizes}
        records = self.evaluate_curve(
            inputs,
            sizes,
            variant=config.variant,
            lambda_rule=config.lambda_rule,
            two_sided_bound=config.two_sided,
            empirical_risks=empirical,
            progress_callback=progress_callback,
        )

        output_dir = config.output_dir
        csv_path = output_dir / "bound_curve.csv"
        svg_path = output_dir / "bound_curve.svg"
        title = f"{config.variant.value} ({config.mode.value}, lambda={config.lambda_rule.value}, tau={config.tau})"
        self._artifacts.write_curve_csv(records, csv_path)
        self._artifacts.write_curve_svg(records, svg_path, title)
        asymptote = consistency_asymptote(inputs)
        manifest_path = write_run_manifest(
            self._artifacts,
            config,
            command="bound-curve",
            model_path=prepared.model_path,
            model_trained_in_run=prepared.trained,
            outputs=[csv_path, svg_path],
            extra={"kl": inputs.kl, "consistency_asymptote": asymptote},
        )
        logger.info("wrote %d curve points to %s", len(records), csv_path)
        curve = BoundCurve(
            lambda_rule=config.lambda_rule,
            points=tuple((record.N, record.bound_value) for record in records),
            metadata={
                "tau": config.tau,
                "variant": config.variant.value,
                "two_sided": config.two_sided,
                "lipschitz": [layer.lipschitz for layer in inputs.layers],
                "delta": [layer.delta for layer in inputs.layers],
                "consistency_asymptote": asymptote,
            },
        )
        return BoundEvolutionResult(
            curve=curve,
            records=tuple(records),
            csv_path=csv_path,
            svg_path=svg_path,
            manifest_path=manifest_path,
            sparkline=sparkline([record.bound_value for record in records]),
        )

    def evaluate_curve(
        self,
        inputs: BoundInputs,
        sizes: Sequence[int],
        *,
        variant: BoundVariant = BoundVariant.THEOREM3,
        lambda_rule: LambdaRule = LambdaRule.SQRT_N,
        two_sided_bound: bool = False,
        empirical_risks: Mapping[int, float] | None = None,
        progress_callback: Callable[[dict], None] | None = None,
    ) -> list[CurveRecord]:
        ordered = sorted(set(int(n) for n in sizes))
        total = len(ordered)
        run_mode = "serial" if self._workers <= 1 or total <= 1 else "parallel"
        self._emit_progress(progress_callback, stage="start", total=total, mode=run_mode, variant=BoundVariant(variant).value)
        records: list[CurveRecord] = []

        def evaluate(num_samples: int) -> CurveRecord:
            return self._evaluate_point(
                inputs,
                num_samples,
                variant=variant,
                lambda_rule=lambda_rule,
                two_sided_bound=two_sided_bound,
                empirical_risk=None if empirical_risks is None else empirical_risks.get(num_samples),
            )

        if run_mode == "serial":
            for position, num_samples in enumerate(ordered, start=1):
                record = evaluate(num_samples)
                records.append(record)
                self._emit_progress(
                    progress_callback, stage="point_done", N=num_samples, bound=record.bound_value, index=position, total=total
                )
        else:
            with ThreadPoolExecutor(max_workers=self._workers) as executor:
                future_map = {executor.submit(evaluate, num_samples): num_samples for num_samples in ordered}
                for position, future in enumerate(as_completed(future_map), start=1):
                    record = future.result()
                    records.append(record)
                    self._emit_progress(
                        progress_callback,
                        stage="point_done",
                        N=future_map[future],
                        bound=record.bound_value,
                        index=position,
                        total=total,
                    )
        records.sort(key=lambda record: record.N)
        self._emit_progress(progress_callback, stage="complete", total=total)
        return records

    @staticmethod
    def _evaluate_point(
        inputs: BoundInputs,
        num_samples: int,
        *,
        variant: BoundVariant,
        lambda_rule: LambdaRule,
        two_sided_bound: bool,
        empirical_risk: float | None,
    ) -> CurveRecord:
        started = perf_counter()
        try:
            breakdown = evaluate_variant(
                variant,
                inputs,
                num_samples,
                lambda_rule=lambda_rule,
                empirical_risk=empirical_risk,
                two_sided_bound=two_sided_bound,
            )
        except DomainError as exc:
            raise BoundEvaluationError(f"bound undefined at N={num_samples}: {exc}") from exc
        values = (breakdown.value, breakdown.term1, breakdown.term2, breakdown.term3, breakdown.kl)
        if not all(math.isfinite(value) for value in values):
            raise BoundEvaluationError(
                f"non-finite bound at N={num_samples}: bound={breakdown.value}, term1={breakdown.term1}, "
                f"term2={breakdown.term2}, term3={breakdown.term3}, kl={breakdown.kl}"
            )
        return CurveRecord(
            N=num_samples,
            bound_value=breakdown.value,
            term1=breakdown.term1,
            term2=breakdown.term2,
            term3=breakdown.term3,
            kl=breakdown.kl,
            wall_ms=elapsed_ms(started),
            empirical_nll=float("nan") if empirical_risk is None else float(empirical_risk),
            layer_terms=breakdown.layer_terms,
        )

    def _emit_progress(self, callback: Callable[[dict], None] | None, **payload: Any) -> None:
        if callback is None:
            return
        callback(payload)
