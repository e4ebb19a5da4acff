from __future__ import annotations

import math
from dataclasses import dataclass, replace
from enum import Enum
from typing import Any, Sequence

import numpy as np
import torch

from pacdrgp.domain.errors import DatasetValidationError, DomainError, ShapeError
from pacdrgp.domain.psi_statistics import (
    LayerInputs,
    PsiStats,
    VariationalParams,
    compute_psi_stats,
)
from pacdrgp.domain.spectral_features import TWO_PI, SpectralLayerHyper, SpectralPoints
from pacdrgp.domain.tensors import DTYPE, as_matrix, as_tensor, to_numpy


class SpectrumMode(str, Enum):
    SS = "SS"
    VSS = "VSS"


def parse_mode(value: str) -> SpectrumMode:
    try:
        return SpectrumMode(value.strip().upper())
    except ValueError as exc:
        raise DomainError(f"Unknown spectrum mode: {value}") from exc


@dataclass(frozen=True)
class GPLayer:
    hyper: SpectralLayerHyper
    points: SpectralPoints | None
    varparams: VariationalParams


def layer_input_dim(index: int, num_hidden: int, horizon_x: int, horizon_h: int, exo_dim: int) -> int:
    if num_hidden == 0:
        return horizon_x * exo_dim
    if index == 0:
        return horizon_h + horizon_x * exo_dim
    if index == num_hidden:
        return horizon_h
    return 2 * horizon_h


@dataclass(frozen=True)
class DeepModel:
    """L hidden recurrent layers plus one output layer over K fixed design states."""

    layers: tuple[GPLayer, ...]
    design: Any
    horizon_x: int
    horizon_h: int
    mode: SpectrumMode = SpectrumMode.SS

    def __post_init__(self) -> None:
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "design", as_matrix(self.design, "design"))
        object.__setattr__(self, "mode", SpectrumMode(self.mode))
        if not self.layers:
            raise ShapeError("a model needs at least the output layer")
        if self.horizon_x < 1 or self.horizon_h < 1:
            raise DomainError("time horizons must be positive")
        num_states = self.num_states
        for index, layer in enumerate(self.layers):
            expected = layer_input_dim(
                index, self.num_hidden_layers, self.horizon_x, self.horizon_h, self.exo_dim
            )
            if expected < 1:
                raise ShapeError(f"layer {index} would have an empty input")
            if layer.hyper.input_dim != expected:
                raise ShapeError(
                    f"layer {index} input dim {layer.hyper.input_dim} does not match "
                    f"recurrent structure ({expected})"
                )
            variational = layer.varparams.is_variational_spectrum
            if self.mode is SpectrumMode.VSS and not variational:
                raise DomainError(f"layer {index} lacks variational spectral moments in VSS mode")
            if self.mode is SpectrumMode.SS and (variational or layer.points is None):
                raise DomainError(f"layer {index} needs fixed spectral points in SS mode")
            is_hidden = index < self.num_hidden_layers
            latent = layer.varparams.latent_means
            if is_hidden and (latent is None or latent.numel() != num_states):
                raise ShapeError(f"hidden layer {index} needs {num_states} latent states")
            if not is_hidden and latent is not None:
                raise ShapeError("the output layer carries no latent states")

    @property
    def num_states(self) -> int:
        return int(self.design.shape[0])

    @property
    def exo_dim(self) -> int:
        return int(self.design.shape[1])

    @property
    def num_hidden_layers(self) -> int:
        return len(self.layers) - 1

    @property
    def output_layer(self) -> GPLayer:
        return self.layers[-1]

    def with_layer(self, index: int, **changes: Any) -> DeepModel:
        layers = list(self.layers)
        layers[index] = replace(layers[index], **changes)
        return replace(self, layers=tuple(layers))


@dataclass(frozen=True)
class Normalization:
    input_mean: np.ndarray
    input_std: np.ndarray
    output_mean: np.ndarray
    output_std: np.ndarray


@dataclass(frozen=True)
class Dataset:
    times: np.ndarray
    exogenous: np.ndarray
    outputs: np.ndarray
    normalization: Normalization | None = None

    def __post_init__(self) -> None:
        times = np.asarray(self.times, dtype=np.float64).reshape(-1)
        exogenous = np.asarray(self.exogenous, dtype=np.float64)
        outputs = np.asarray(self.outputs, dtype=np.float64)
        if exogenous.ndim == 1:
            exogenous = exogenous.reshape(-1, 1)
        if outputs.ndim == 1:
            outputs = outputs.reshape(-1, 1)
        num_states = times.shape[0]
        if exogenous.shape[0] != num_states or outputs.shape[0] != num_states:
            raise DatasetValidationError(
                f"row counts differ: times {num_states}, exogenous {exogenous.shape[0]}, "
                f"outputs {outputs.shape[0]}"
            )
        for name, values in (("times", times), ("exogenous", exogenous), ("outputs", outputs)):
            if not np.all(np.isfinite(values)):
                raise DatasetValidationError(f"{name} contain NaN or infinite values")
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "exogenous", exogenous)
        object.__setattr__(self, "outputs", outputs)

    @property
    def num_states(self) -> int:
        return int(self.times.shape[0])

    @property
    def exo_dim(self) -> int:
        return int(self.exogenous.shape[1])

    @property
    def num_observations(self) -> int:
        return int(self.outputs.shape[1])


def normalize_dataset(times: Any, exogenous: Any, outputs: Any) -> Dataset:
    """z-score every exogenous and output channel; constant channels keep unit scale."""
    exo = np.asarray(exogenous, dtype=np.float64)
    out = np.asarray(outputs, dtype=np.float64)
    if exo.ndim == 1:
        exo = exo.reshape(-1, 1)
    if out.ndim == 1:
        out = out.reshape(-1, 1)
    exo_mean, exo_std = _channel_stats(exo)
    out_mean, out_std = _channel_stats(out)
    return Dataset(
        times=times,
        exogenous=(exo - exo_mean) / exo_std,
        outputs=(out - out_mean) / out_std,
        normalization=Normalization(exo_mean, exo_std, out_mean, out_std),
    )


def denormalize(dataset: Dataset) -> tuple[np.ndarray, np.ndarray]:
    stats = dataset.normalization
    if stats is None:
        return dataset.exogenous.copy(), dataset.outputs.copy()
    return (
        dataset.exogenous * stats.input_std + stats.input_mean,
        dataset.outputs * stats.output_std + stats.output_mean,
    )


def _channel_stats(values: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    if values.shape[1] == 0:
        return np.zeros(0), np.ones(0)
    mean = values.mean(axis=0)
    std = values.std(axis=0)
    std = np.where(std > 0, std, 1.0)
    return mean, std


def _lagged(sequence: torch.Tensor, lags: Sequence[int]) -> torch.Tensor:
    columns = sequence.reshape(sequence.shape[0], -1)
    num_states, width = columns.shape
    blocks = []
    for lag in lags:
        if lag == 0:
            blocks.append(columns)
        elif lag >= num_states:
            blocks.append(torch.zeros(num_states, width, dtype=DTYPE))
        else:
            pad = torch.zeros(lag, width, dtype=DTYPE)
            blocks.append(torch.cat([pad, columns[:-lag]], dim=0))
    return torch.cat(blocks, dim=1)


def build_inputs(
    model: DeepModel,
    layer: int,
    latent_means: Sequence[torch.Tensor] | None = None,
    latent_vars: Sequence[torch.Tensor] | None = None,
) -> LayerInputs:
    """Recurrent input moments of ``layer`` (0-based; the last index is the output layer).

    Lags that reach before the first state are zero with zero variance.
    """
    num_hidden = model.num_hidden_layers
    if not 0 <= layer <= num_hidden:
        raise DomainError(f"layer {layer} out of range [0, {num_hidden}]")
    if latent_means is None:
        latent_means = [model.layers[j].varparams.latent_means for j in range(num_hidden)]
    if latent_vars is None:
        latent_vars = [model.layers[j].varparams.latent_vars for j in range(num_hidden)]
    if len(latent_means) != num_hidden or len(latent_vars) != num_hidden:
        raise ShapeError(f"expected latent sequences for {num_hidden} hidden layers")

    h_h, h_x = model.horizon_h, model.horizon_x
    own = range(1, h_h + 1)
    below = range(0, h_h)
    mean_blocks: list[torch.Tensor] = []
    var_blocks: list[torch.Tensor] = []

    def add_latent(index: int, lags: Sequence[int]) -> None:
        mean_blocks.append(_lagged(as_tensor(latent_means[index]), lags))
        var_blocks.append(_lagged(as_tensor(latent_vars[index]), lags))

    def add_exogenous() -> None:
        block = _lagged(model.design, range(1, h_x + 1))
        mean_blocks.append(block)
        var_blocks.append(torch.zeros_like(block))

    if num_hidden == 0:
        add_exogenous()
    elif layer == 0:
        add_latent(0, own)
        add_exogenous()
    elif layer == num_hidden:
        add_latent(num_hidden - 1, below)
    else:
        add_latent(layer, own)
        add_latent(layer - 1, below)
    return LayerInputs(means=torch.cat(mean_blocks, dim=1), variances=torch.cat(var_blocks, dim=1))


def layer_statistics(model: DeepModel, layer: int) -> PsiStats:
    entry = model.layers[layer]
    return compute_psi_stats(build_inputs(model, layer), entry.hyper, entry.points, entry.varparams)


def all_layer_statistics(model: DeepModel) -> list[PsiStats]:
    return [layer_statistics(model, index) for index in range(len(model.layers))]


def noise_free_variances(stats: PsiStats, varparams: VariationalParams) -> torch.Tensor:
    """Per-state m'(psi2_k - psi1_k'psi1_k)m + tr(psi2_k s)."""
    m, s = varparams.weight_mean, varparams.weight_cov
    quadratic = torch.einsum("m,kmn,n->k", m, stats.psi2_rows, m) - (stats.psi1 @ m) ** 2
    trace = torch.einsum("kmn,nm->k", stats.psi2_rows, s)
    return quadratic + trace


def predictive_moments(
    model: DeepModel, layer: int, stats: PsiStats | None = None
) -> tuple[torch.Tensor, torch.Tensor]:
    entry = model.layers[layer]
    stats = stats if stats is not None else layer_statistics(model, layer)
    mean = stats.psi1 @ entry.varparams.weight_mean
    variance = entry.hyper.sigma_noise**2 + noise_free_variances(stats, entry.varparams)
    return mean, variance


def predictive_posterior(model: DeepModel, layer: int, state: int) -> tuple[float, float]:
    if not 0 <= layer < len(model.layers):
        raise DomainError(f"layer {layer} out of range [0, {len(model.layers)})")
    if not 0 <= state < model.num_states:
        raise DomainError(f"state {state} out of range [0, {model.num_states})")
    entry = model.layers[layer]
    m, s = entry.varparams.weight_mean, entry.varparams.weight_cov
    with torch.no_grad():
        first, second = layer_statistics(model, layer).row(state)
        mean = first @ m
        variance = entry.hyper.sigma_noise**2 + m @ second @ m - mean**2 + torch.trace(second @ s)
    return float(mean), float(variance)


def _observations(model: DeepModel, observations: Any) -> torch.Tensor:
    values = as_tensor(observations)
    if values.ndim == 1:
        values = values.reshape(-1, 1)
    if values.ndim != 2 or values.shape[0] != model.num_states:
        raise ShapeError(
            f"observations must have {model.num_states} rows, got shape {tuple(values.shape)}"
        )
    return values


def _nll_from_stats(model: DeepModel, stats: Sequence[PsiStats], observations: torch.Tensor) -> torch.Tensor:
    """Expected NLL summed over the columns of ``observations``."""
    count = observations.shape[1]
    num_states = model.num_states
    total = torch.zeros((), dtype=DTYPE)
    for index, (layer, layer_stats) in enumerate(zip(model.layers, stats)):
        varparams = layer.varparams
        noise_var = layer.hyper.sigma_noise**2
        prediction = layer_stats.psi1 @ varparams.weight_mean
        spread = noise_free_variances(layer_stats, varparams).sum()
        if index == model.num_hidden_layers:
            fit = ((observations - prediction[:, None]) ** 2).sum()
        else:
            residual = ((varparams.latent_means - prediction) ** 2).sum()
            fit = count * (residual + varparams.latent_vars.sum())
        total = total + (count * spread + fit) / (2.0 * noise_var)
        total = total + count * 0.5 * num_states * torch.log(TWO_PI * noise_var)
    return total


def expected_nll(model: DeepModel, observations: Any) -> torch.Tensor:
    values = _observations(model, observations)
    if values.shape[1] != 1:
        raise ShapeError("expected_nll takes a single observation vector")
    return _nll_from_stats(model, all_layer_statistics(model), values)


def per_sample_nll(model: DeepModel, samples: Any) -> np.ndarray:
    """expected_nll of every column of a K x N sample matrix, without recomputing statistics."""
    values = np.asarray(samples, dtype=np.float64)
    if values.ndim == 1:
        values = values.reshape(-1, 1)
    if values.shape[0] != model.num_states:
        raise ShapeError(f"samples must have {model.num_states} rows, got {values.shape[0]}")
    with torch.no_grad():
        stats = all_layer_statistics(model)
        prediction, _ = predictive_moments(model, model.num_hidden_layers, stats[-1])
        base = float(_nll_from_stats(model, stats, prediction.reshape(-1, 1)))
        noise_var = float(model.output_layer.hyper.sigma_noise**2)
    residual = values - to_numpy(prediction)[:, None]
    return base + (residual**2).sum(axis=0) / (2.0 * noise_var)


def _weight_kl(varparams: VariationalParams) -> torch.Tensor:
    m, s = varparams.weight_mean, varparams.weight_cov
    chol, info = torch.linalg.cholesky_ex(s)
    if int(info) != 0:
        raise DomainError("weight_cov must be positive definite for the KL divergence")
    log_det = 2.0 * torch.log(torch.diagonal(chol)).sum()
    return 0.5 * (torch.trace(s) + m @ m - m.numel() - log_det)


def _diagonal_kl(means: torch.Tensor, variances: torch.Tensor) -> torch.Tensor:
    return 0.5 * (variances + means**2 - 1.0 - torch.log(variances)).sum()


def kl_q_p(model: DeepModel) -> torch.Tensor:
    total = torch.zeros((), dtype=DTYPE)
    for layer in model.layers:
        varparams = layer.varparams
        total = total + _weight_kl(varparams)
        if model.mode is SpectrumMode.VSS:
            total = total + _diagonal_kl(varparams.spectral_means, varparams.spectral_vars)
        if varparams.latent_means is not None:
            total = total + _diagonal_kl(varparams.latent_means, varparams.latent_vars)
    return total


def variational_bound(model: DeepModel, observations: Any) -> torch.Tensor:
    """REVARB lower bound -(N * E_Q[nll] + KL) for K x N observations."""
    values = _observations(model, observations)
    data_term = _nll_from_stats(model, all_layer_statistics(model), values)
    return -(data_term + kl_q_p(model))


def optimal_weight_posterior(
    model: DeepModel, layer: int, targets: Any, stats: PsiStats | None = None
) -> tuple[torch.Tensor, torch.Tensor]:
    """Closed-form optimum of the bound in (m, s) for one layer.

    With N targets: A = N psi2 + sigma^2 I, m* = A^{-1} psi1' sum(targets), s* = sigma^2 A^{-1}.
    """
    values = _observations(model, targets)
    entry = model.layers[layer]
    stats = stats if stats is not None else layer_statistics(model, layer)
    noise_var = entry.hyper.sigma_noise**2
    count = values.shape[1]
    eye = torch.eye(entry.hyper.num_features, dtype=DTYPE)
    system = count * stats.psi2 + noise_var * eye
    chol = torch.linalg.cholesky(0.5 * (system + system.T))
    rhs = stats.psi1.T @ values.sum(dim=1)
    weight_mean = torch.cholesky_solve(rhs.reshape(-1, 1), chol).reshape(-1)
    inverse = torch.cholesky_inverse(chol)
    weight_cov = noise_var * 0.5 * (inverse + inverse.T)
    return weight_mean, weight_cov


def refresh_weights(model: DeepModel, observations: Any) -> DeepModel:
    values = _observations(model, observations)
    count = values.shape[1]
    refreshed = model
    for index, layer in enumerate(model.layers):
        if index == model.num_hidden_layers:
            targets = values
        else:
            targets = layer.varparams.latent_means.reshape(-1, 1).expand(-1, count)
        weight_mean, weight_cov = optimal_weight_posterior(model, index, targets)
        varparams = replace(layer.varparams, weight_mean=weight_mean, weight_cov=weight_cov)
        refreshed = refreshed.with_layer(index, varparams=varparams)
    return refreshed


def init_model(
    dataset: Dataset,
    num_hidden_layers: int,
    num_features: int,
    horizon_x: int,
    horizon_h: int,
    mode: SpectrumMode = SpectrumMode.SS,
    seed: int = 0,
) -> DeepModel:
    if num_hidden_layers < 0:
        raise DomainError("num_hidden_layers must be >= 0")
    generator = torch.Generator().manual_seed(seed)
    num_states = dataset.num_states
    output_std = float(np.std(dataset.outputs))
    sigma_noise = 0.1 * output_std if output_std > 0 else 0.1
    layers = []
    for index in range(num_hidden_layers + 1):
        q = layer_input_dim(index, num_hidden_layers, horizon_x, horizon_h, dataset.exo_dim)
        if q < 1:
            raise ShapeError(f"layer {index} would have an empty input")
        phases = torch.remainder(TWO_PI * torch.rand(num_features, generator=generator, dtype=DTYPE), TWO_PI)
        hyper = SpectralLayerHyper(
            num_features=num_features,
            sigma_power=1.0,
            lengthscales=torch.ones(q, dtype=DTYPE),
            spectral_mean=torch.zeros(q, dtype=DTYPE),
            shifts=torch.zeros(num_features, q, dtype=DTYPE),
            phases=phases,
            sigma_noise=sigma_noise,
        )
        draws = torch.randn(num_features, q, generator=generator, dtype=DTYPE)
        hidden = index < num_hidden_layers
        latent_means = torch.randn(num_states, generator=generator, dtype=DTYPE) if hidden else None
        latent_vars = torch.ones(num_states, dtype=DTYPE) if hidden else None
        varparams = VariationalParams(
            weight_mean=torch.randn(num_features, generator=generator, dtype=DTYPE),
            weight_cov=torch.eye(num_features, dtype=DTYPE),
            spectral_means=draws if mode is SpectrumMode.VSS else None,
            spectral_vars=torch.ones(num_features, q, dtype=DTYPE) if mode is SpectrumMode.VSS else None,
            latent_means=latent_means,
            latent_vars=latent_vars,
        )
        points = SpectralPoints(Z=draws) if mode is SpectrumMode.SS else None
        layers.append(GPLayer(hyper=hyper, points=points, varparams=varparams))
    return DeepModel(
        layers=tuple(layers),
        design=dataset.exogenous,
        horizon_x=horizon_x,
        horizon_h=horizon_h,
        mode=mode,
    )


def sample_from_moments(means: Any, variances: Any, num_samples: int, seed: int) -> np.ndarray:
    """K x N matrix whose columns are independent draws of N(means, diag(variances))."""
    if num_samples < 1:
        raise DomainError(f"num_samples must be positive, got {num_samples}")
    mean = np.asarray(means, dtype=np.float64).reshape(-1)
    variance = np.asarray(variances, dtype=np.float64).reshape(-1)
    if bool((variance < 0).any()):
        raise DomainError("variances must be non-negative")
    rng = np.random.default_rng(seed)
    noise = rng.standard_normal((num_samples, mean.shape[0]))
    return (mean + noise * np.sqrt(variance)).T


def generate_quasi_real(model: DeepModel, num_samples: int, seed: int) -> np.ndarray:
    """Quasi-real observations: predictive mean plus noise at the predictive variance."""
    with torch.no_grad():
        mean, variance = predictive_moments(model, model.num_hidden_layers)
    return sample_from_moments(to_numpy(mean), to_numpy(variance), num_samples, seed)
