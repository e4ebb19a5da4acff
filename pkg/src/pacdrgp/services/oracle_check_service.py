from __future__ import annotations

import logging
import math
from collections.abc import Callable
from dataclasses import dataclass
from typing import Any

import numpy as np
import torch
from scipy import linalg

from pacdrgp.domain.errors import DomainError
from pacdrgp.domain.pac_bounds import QuadraticForm, monte_carlo_log_mgf, qfg_mgf
from pacdrgp.domain.psi_statistics import (
    LayerInputs,
    VariationalParams,
    compute_psi_stats,
    monte_carlo_psi,
)
from pacdrgp.domain.spectral_features import TWO_PI, SpectralLayerHyper
from pacdrgp.domain.tensors import DTYPE, to_numpy

logger = logging.getLogger(__name__)

Z_LIMIT = 4.0
MGF_REL_TOL = 0.02


@dataclass(frozen=True)
class OracleReport:
    lines: tuple[str, ...]
    worst: float
    limit: float
    failures: int
    comparisons: int
    passed: bool
    metric: str = "|z|"

    def render(self) -> str:
        verdict = "PASS" if self.passed else "FAIL"
        summary = (
            f"{verdict} max {self.metric}={self.worst:.6g} limit={self.limit:g} "
            f"failures={self.failures}/{self.comparisons}"
        )
        return "\n".join([*self.lines, summary]) + "\n"


def _z_scores(analytic: np.ndarray, estimate: np.ndarray, se: np.ndarray) -> np.ndarray:
    gap = np.abs(analytic - estimate)
    # zero standard error: exact comparison
    return np.where(se > 0, gap / np.where(se > 0, se, 1.0), np.where(gap <= 1e-9, 0.0, np.inf))


def random_psi_instance(
    seed: int, num_states: int = 3, num_features: int = 4, input_dim: int = 2
) -> tuple[LayerInputs, SpectralLayerHyper, VariationalParams]:
    generator = torch.Generator().manual_seed(seed)

    def uniform(*shape: int, low: float, high: float) -> torch.Tensor:
        return low + (high - low) * torch.rand(*shape, generator=generator, dtype=DTYPE)

    hyper = SpectralLayerHyper(
        num_features=num_features,
        sigma_power=uniform(1, low=0.5, high=1.5)[0],
        lengthscales=uniform(input_dim, low=0.5, high=2.0),
        spectral_mean=uniform(input_dim, low=-0.2, high=0.2),
        shifts=uniform(num_features, input_dim, low=-0.5, high=0.5),
        phases=uniform(num_features, low=0.0, high=TWO_PI * 0.999),
        sigma_noise=0.1,
    )
    varparams = VariationalParams(
        weight_mean=torch.randn(num_features, generator=generator, dtype=DTYPE),
        weight_cov=torch.eye(num_features, dtype=DTYPE),
        spectral_means=torch.randn(num_features, input_dim, generator=generator, dtype=DTYPE),
        spectral_vars=uniform(num_features, input_dim, low=0.05, high=0.5),
    )
    inputs = LayerInputs(
        means=torch.randn(num_states, input_dim, generator=generator, dtype=DTYPE),
        variances=uniform(num_states, input_dim, low=0.05, high=0.5),
    )
    return inputs, hyper, varparams


def random_quadratic_form(seed: int, size: int = 2) -> tuple[QuadraticForm, float]:
    """A random Q with E and Sigma PSD and const >= 1, so the log MGF is at least lambda.

    The returned lambda keeps exp(lambda Q) at finite variance.
    """
    rng = np.random.default_rng(seed)
    factor = rng.standard_normal((size, size))
    sigma = factor @ factor.T / size + 0.1 * np.eye(size)
    shape = rng.standard_normal((size, size))
    E = shape @ shape.T / size
    e = rng.standard_normal(size)
    q = QuadraticForm(E=E, e=e, const=1.0 + abs(float(rng.standard_normal())), Sigma=sigma)
    weights, vectors = linalg.eigh(sigma)
    root = vectors * np.sqrt(np.clip(weights, 0.0, None))
    spread = float(np.abs(linalg.eigvalsh(root.T @ E @ root)).max())
    lam = 0.1 / max(spread, 1e-12)
    return q, min(lam, 0.5)


def _block_worst(scores: np.ndarray) -> float:
    return float(scores.max()) if bool(np.isfinite(scores).all()) else math.inf


class OracleCheckService:
    def psi_check(
        self,
        seed: int,
        num_samples: int,
        instances: int = 20,
        progress_callback: Callable[[dict], None] | None = None,
    ) -> OracleReport:
        """Analytic Psi1, Psi2 and cross-state matrices against Monte Carlo on random instances."""
        if instances < 1:
            raise DomainError("instances must be positive")
        lines = [f"PSI_CHECK seed={seed} samples={num_samples} instances={instances}"]
        worst, failures, count = 0.0, 0, 0
        self._emit_progress(progress_callback, stage="start", total=instances)
        for index in range(instances):
            inputs, hyper, varparams = random_psi_instance(seed + index)
            pair = ((0, 1),)
            with torch.no_grad():
                analytic = compute_psi_stats(inputs, hyper, None, varparams, cross_pairs=pair)
                estimate = monte_carlo_psi(inputs, hyper, None, varparams, num_samples, seed + index, cross_pairs=pair)
            blocks = {
                "psi1": _z_scores(to_numpy(analytic.psi1), to_numpy(estimate.psi1), to_numpy(estimate.psi1_se)),
                "psi2": _z_scores(to_numpy(analytic.psi2), to_numpy(estimate.psi2), to_numpy(estimate.psi2_se)),
                "cross": _z_scores(
                    to_numpy(analytic.psi_cross[(0, 1)]),
                    to_numpy(estimate.psi_cross[(0, 1)]),
                    to_numpy(estimate.psi_cross_se[(0, 1)]),
                ),
            }
            parts = []
            for name, scores in blocks.items():
                block_worst = _block_worst(scores)
                worst = max(worst, block_worst)
                failures += int((~(scores <= Z_LIMIT)).sum())
                count += scores.size
                parts.append(f"{name} max|z|={block_worst:.3f}")
            lines.append(f"instance {index:02d}: " + " ".join(parts))
            self._emit_progress(progress_callback, stage="point_done", index=index + 1, total=instances)
        report = self._finish(lines, worst, failures, count)
        self._emit_progress(progress_callback, stage="complete", passed=report.passed)
        return report

    def mgf_check(self, seed: int, num_samples: int, instances: int = 10) -> OracleReport:
        """Closed-form log MGF of 2x2 quadratic forms against the log of a Monte Carlo mean."""
        if instances < 1:
            raise DomainError("instances must be positive")
        lines = [f"MGF_CHECK seed={seed} samples={num_samples} instances={instances}"]
        worst, failures = 0.0, 0
        for index in range(instances):
            q, lam = random_quadratic_form(seed + index)
            analytic = qfg_mgf(q, lam)
            log_mean, _ = monte_carlo_log_mgf(q, lam, num_samples, seed + index)
            gap = abs(analytic - log_mean)
            if analytic != 0.0:
                rel = gap / abs(analytic)
            else:
                rel = 0.0 if gap <= 1e-12 else math.inf
            if not math.isfinite(rel):
                rel = math.inf
            worst = max(worst, rel)
            failures += int(not rel <= MGF_REL_TOL)
            lines.append(
                f"instance {index:02d}: lambda={lam:.6f} closed_form={analytic:.6f} "
                f"monte_carlo={log_mean:.6f} rel_err={rel:.6f}"
            )
        return self._finish(lines, worst, failures, instances, limit=MGF_REL_TOL, metric="rel_err")

    @staticmethod
    def _finish(
        lines: list[str],
        worst: float,
        failures: int,
        count: int,
        limit: float = Z_LIMIT,
        metric: str = "|z|",
    ) -> OracleReport:
        passed = failures == 0 and math.isfinite(worst) and worst <= limit
        if not passed:
            logger.warning("oracle check failed: max %s=%.6g, %d of %d beyond %g", metric, worst, failures, count, limit)
        return OracleReport(
            lines=tuple(lines),
            worst=worst,
            limit=limit,
            failures=failures,
            comparisons=count,
            passed=passed,
            metric=metric,
        )

    def _emit_progress(self, callback: Callable[[dict], None] | None, **payload: Any) -> None:
        if callback is None:
            return
        callback(payload)
