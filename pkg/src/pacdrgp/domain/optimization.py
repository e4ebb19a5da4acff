from __future__ import annotations

import logging
import math
from collections.abc import Callable
from dataclasses import dataclass, field, replace
from typing import Any

import torch

from pacdrgp.domain.errors import DomainError, TrainingDivergedError
from pacdrgp.domain.psi_statistics import VariationalParams
from pacdrgp.domain.revarb_model import (
    DeepModel,
    Dataset,
    GPLayer,
    SpectrumMode,
    refresh_weights,
    variational_bound,
)
from pacdrgp.domain.spectral_features import TWO_PI, SpectralLayerHyper, SpectralPoints
from pacdrgp.domain.tensors import DTYPE, as_tensor

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainingConfig:
    learning_rate: float = 1e-2
    iterations: int = 2000
    refresh_every: int = 10
    train_hyperparameters: bool = True
    train_variational: bool = True
    progress_every: int = 100

    def __post_init__(self) -> None:
        if self.learning_rate <= 0:
            raise DomainError("learning_rate must be positive")
        if self.iterations < 0 or self.refresh_every < 0:
            raise DomainError("iterations and refresh_every must be non-negative")


@dataclass
class TrainingResult:
    model: DeepModel
    initial_bound: float
    final_bound: float
    trace: list[float] = field(default_factory=list)


@dataclass(frozen=True)
class GradientCheck:
    autograd: torch.Tensor
    finite_difference: torch.Tensor
    max_relative_error: float


class ModelParameterization:
    """Unconstrained leaf tensors that rebuild a DeepModel.

    Positive quantities are stored as logs, phases are wrapped into [0, 2*pi) and weight
    covariances as a Cholesky factor with log diagonal.
    """

    def __init__(
        self,
        model: DeepModel,
        *,
        hyperparameters: bool = True,
        variational: bool = True,
        weights: bool = True,
    ) -> None:
        self._template = model
        self._values: list[dict[str, torch.Tensor]] = []
        self._trainable: list[dict[str, bool]] = []
        enabled = {
            "hyper": hyperparameters,
            "variational": variational,
            "weights": weights and variational,
        }
        for layer in model.layers:
            values, kinds = self._encode(layer, model.mode)
            flags = {name: enabled[kind] for name, kind in kinds.items()}
            for name, tensor in values.items():
                values[name] = tensor.detach().clone().requires_grad_(flags[name])
            self._values.append(values)
            self._trainable.append(flags)

    @staticmethod
    def _encode(layer: GPLayer, mode: SpectrumMode) -> tuple[dict[str, torch.Tensor], dict[str, str]]:
        hyper, varparams = layer.hyper, layer.varparams
        values = {
            "log_sigma_power": torch.log(hyper.sigma_power),
            "log_lengthscales": torch.log(hyper.lengthscales),
            "spectral_mean": hyper.spectral_mean,
            "shifts": hyper.shifts,
            "phases": hyper.phases,
            "log_sigma_noise": torch.log(hyper.sigma_noise),
        }
        kinds = {name: "hyper" for name in values}
        values.update(_encode_weights(varparams))
        kinds.update({"weight_mean": "weights", "weight_chol": "weights"})
        if mode is SpectrumMode.SS:
            values["points"] = layer.points.Z
            kinds["points"] = "hyper"
        else:
            values["spectral_means"] = varparams.spectral_means
            values["log_spectral_vars"] = torch.log(varparams.spectral_vars)
            kinds.update({"spectral_means": "variational", "log_spectral_vars": "variational"})
        if varparams.latent_means is not None:
            values["latent_means"] = varparams.latent_means
            values["log_latent_vars"] = torch.log(varparams.latent_vars)
            kinds.update({"latent_means": "variational", "log_latent_vars": "variational"})
        return values, kinds

    def leaves(self) -> list[torch.Tensor]:
        return [
            tensor
            for values, flags in zip(self._values, self._trainable)
            for name, tensor in values.items()
            if flags[name]
        ]

    def build(self) -> DeepModel:
        layers = []
        for layer, values in zip(self._template.layers, self._values):
            phases = torch.remainder(values["phases"], TWO_PI)
            phases = torch.where(phases >= TWO_PI, phases - TWO_PI, phases)
            hyper = SpectralLayerHyper(
                num_features=layer.hyper.num_features,
                sigma_power=torch.exp(values["log_sigma_power"]),
                lengthscales=torch.exp(values["log_lengthscales"]),
                spectral_mean=values["spectral_mean"],
                shifts=values["shifts"],
                phases=phases,
                sigma_noise=torch.exp(values["log_sigma_noise"]),
            )
            chol = _cholesky_from_raw(values["weight_chol"])
            spectral_means = values.get("spectral_means")
            log_latent = values.get("log_latent_vars")
            varparams = VariationalParams(
                weight_mean=values["weight_mean"],
                weight_cov=chol @ chol.T,
                spectral_means=spectral_means,
                spectral_vars=None if spectral_means is None else torch.exp(values["log_spectral_vars"]),
                latent_means=values.get("latent_means"),
                latent_vars=None if log_latent is None else torch.exp(log_latent),
            )
            points = SpectralPoints(Z=values["points"]) if "points" in values else None
            layers.append(GPLayer(hyper=hyper, points=points, varparams=varparams))
        return replace(self._template, layers=tuple(layers))

    def load_weights(self, model: DeepModel) -> None:
        with torch.no_grad():
            for values, layer in zip(self._values, model.layers):
                for name, tensor in _encode_weights(layer.varparams).items():
                    values[name].copy_(tensor)

    def snapshot(self) -> list[dict[str, torch.Tensor]]:
        return [{name: tensor.detach().clone() for name, tensor in values.items()} for values in self._values]

    def restore(self, snapshot: list[dict[str, torch.Tensor]]) -> None:
        with torch.no_grad():
            for values, saved in zip(self._values, snapshot):
                for name, tensor in saved.items():
                    values[name].copy_(tensor)

    def flat(self) -> torch.Tensor:
        return torch.cat([tensor.detach().reshape(-1) for tensor in self.leaves()])

    def assign_flat(self, vector: torch.Tensor) -> None:
        offset = 0
        with torch.no_grad():
            for tensor in self.leaves():
                size = tensor.numel()
                tensor.copy_(vector[offset : offset + size].reshape(tensor.shape))
                offset += size


def _encode_weights(varparams: VariationalParams) -> dict[str, torch.Tensor]:
    cov = varparams.weight_cov.detach()
    chol, info = torch.linalg.cholesky_ex(cov)
    if int(info) != 0:
        jitter = 1e-9 * max(float(torch.diagonal(cov).mean()), 1.0)
        chol = torch.linalg.cholesky(cov + jitter * torch.eye(cov.shape[0], dtype=DTYPE))
    raw = torch.tril(chol, diagonal=-1) + torch.diag(torch.log(torch.diagonal(chol)))
    return {"weight_mean": varparams.weight_mean.detach(), "weight_chol": raw}


def _cholesky_from_raw(raw: torch.Tensor) -> torch.Tensor:
    return torch.tril(raw, diagonal=-1) + torch.diag(torch.exp(torch.diagonal(raw)))


def _emit_progress(callback: Callable[[dict], None] | None, **payload: Any) -> None:
    if callback is None:
        return
    callback(payload)


def train(
    model: DeepModel,
    dataset: Dataset,
    config: TrainingConfig | None = None,
    progress_callback: Callable[[dict], None] | None = None,
) -> TrainingResult:
    """Maximise the REVARB bound with Adam; returns the best model seen, never worse than ``model``."""
    config = config or TrainingConfig()
    observations = as_tensor(dataset.outputs)
    if observations.shape[0] != model.num_states:
        raise DomainError(
            f"dataset has {observations.shape[0]} states, model has {model.num_states}"
        )
    with torch.no_grad():
        initial = float(variational_bound(model, observations))
    if not math.isfinite(initial):
        raise TrainingDivergedError(f"initial bound is not finite: {initial}")

    refresh = config.refresh_every > 0
    params = ModelParameterization(
        model,
        hyperparameters=config.train_hyperparameters,
        variational=config.train_variational,
        weights=not refresh,
    )
    leaves = params.leaves()
    optimizer = torch.optim.Adam(leaves, lr=config.learning_rate) if leaves else None
    best_bound, best_snapshot = initial, params.snapshot()
    trace = [initial]
    _emit_progress(progress_callback, stage="start", iterations=config.iterations, bound=initial)

    for iteration in range(1, config.iterations + 1):
        if refresh and (iteration - 1) % config.refresh_every == 0:
            with torch.no_grad():
                params.load_weights(refresh_weights(params.build(), observations))
            _emit_progress(progress_callback, stage="refresh", iteration=iteration)
        if optimizer is not None:
            optimizer.zero_grad()
        candidate = params.build()
        value = variational_bound(candidate, observations)
        current = float(value.detach())
        if not math.isfinite(current):
            raise TrainingDivergedError(
                f"bound became non-finite at iteration {iteration} (last finite {trace[-1]:.6g})"
            )
        trace.append(current)
        if current > best_bound:
            best_bound, best_snapshot = current, params.snapshot()
        if optimizer is not None:
            (-value).backward()
            optimizer.step()
        if config.progress_every and iteration % config.progress_every == 0:
            logger.debug("iteration %d bound %.6f", iteration, current)
            _emit_progress(progress_callback, stage="iteration", iteration=iteration, bound=current)

    with torch.no_grad():
        candidate = params.build()
        if refresh:
            candidate = refresh_weights(candidate, observations)
        final_value = float(variational_bound(candidate, observations))
        if math.isfinite(final_value) and final_value > best_bound:
            params.load_weights(candidate)
            best_bound, best_snapshot = final_value, params.snapshot()
        params.restore(best_snapshot)
        best_model = params.build()
    trace.append(best_bound)
    _emit_progress(progress_callback, stage="complete", bound=best_bound, initial=initial)
    return TrainingResult(model=best_model, initial_bound=initial, final_bound=best_bound, trace=trace)


def gradient_check(model: DeepModel, observations: Any, step: float = 1e-5) -> GradientCheck:
    """Autograd gradient of the bound against central finite differences over every parameter."""
    values = as_tensor(observations)
    params = ModelParameterization(model)
    leaves = params.leaves()
    bound = variational_bound(params.build(), values)
    autograd = torch.cat([g.reshape(-1) for g in torch.autograd.grad(bound, leaves)])

    origin = params.flat()
    finite = torch.zeros_like(origin)
    with torch.no_grad():
        for index in range(origin.numel()):
            shifted = origin.clone()
            shifted[index] += step
            params.assign_flat(shifted)
            upper = float(variational_bound(params.build(), values))
            shifted[index] -= 2.0 * step
            params.assign_flat(shifted)
            lower = float(variational_bound(params.build(), values))
            finite[index] = (upper - lower) / (2.0 * step)
        params.assign_flat(origin)
    scale = torch.maximum(torch.maximum(autograd.abs(), finite.abs()), torch.ones_like(finite))
    error = float(((autograd - finite).abs() / scale).max())
    return GradientCheck(autograd=autograd.detach(), finite_difference=finite, max_relative_error=error)
