from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Sequence

import torch

from pacdrgp.domain.errors import DomainError, ShapeError
from pacdrgp.domain.spectral_features import (
    TWO_PI,
    SpectralLayerHyper,
    SpectralPoints,
    frequencies,
)
from pacdrgp.domain.tensors import DTYPE, as_matrix, as_tensor, as_vector

_MC_CHUNK = 8192


def psd_tolerance(matrix: torch.Tensor) -> float:
    trace = float(torch.diagonal(matrix.detach(), dim1=-2, dim2=-1).abs().sum())
    return 1e-10 * max(trace, 1.0)


@dataclass(frozen=True)
class LayerInputs:
    """Diagonal Gaussian over the K input vectors of one layer.

    Zero variances are allowed: exogenous columns and zero-padded lags are deterministic.
    """

    means: Any
    variances: Any

    def __post_init__(self) -> None:
        object.__setattr__(self, "means", as_matrix(self.means, "means"))
        object.__setattr__(self, "variances", as_matrix(self.variances, "variances"))
        if self.means.shape != self.variances.shape:
            raise ShapeError(
                f"input means {tuple(self.means.shape)} and variances "
                f"{tuple(self.variances.shape)} differ in shape"
            )
        if bool((self.variances.detach() < 0).any()):
            raise DomainError("input variances must be non-negative")

    @property
    def num_states(self) -> int:
        return int(self.means.shape[0])

    @property
    def input_dim(self) -> int:
        return int(self.means.shape[1])


@dataclass(frozen=True)
class VariationalParams:
    weight_mean: Any
    weight_cov: Any
    spectral_means: Any = None
    spectral_vars: Any = None
    latent_means: Any = None
    latent_vars: Any = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "weight_mean", as_vector(self.weight_mean, "weight_mean"))
        cov = as_tensor(self.weight_cov)
        if cov.ndim == 1:
            cov = torch.diag(cov)
        object.__setattr__(self, "weight_cov", cov)
        m = self.weight_mean.numel()
        if tuple(cov.shape) != (m, m):
            raise ShapeError(f"weight_cov must be {m}x{m}, got {tuple(cov.shape)}")
        detached = cov.detach()
        tol = psd_tolerance(detached)
        if float((detached - detached.T).abs().max()) > tol:
            raise DomainError("weight_cov must be symmetric")
        if float(torch.linalg.eigvalsh(detached).min()) < -tol:
            raise DomainError("weight_cov must be positive semidefinite")

        if (self.spectral_means is None) != (self.spectral_vars is None):
            raise ShapeError("spectral_means and spectral_vars must be given together")
        if self.spectral_means is not None:
            alpha = as_matrix(self.spectral_means, "spectral_means")
            beta = as_matrix(self.spectral_vars, "spectral_vars")
            if alpha.shape != beta.shape or alpha.shape[0] != m:
                raise ShapeError(
                    f"spectral moments must both be {m}xQ, got {tuple(alpha.shape)} "
                    f"and {tuple(beta.shape)}"
                )
            if bool((beta.detach() <= 0).any()):
                raise DomainError("spectral variances must be strictly positive")
            object.__setattr__(self, "spectral_means", alpha)
            object.__setattr__(self, "spectral_vars", beta)

        if (self.latent_means is None) != (self.latent_vars is None):
            raise ShapeError("latent_means and latent_vars must be given together")
        if self.latent_means is not None:
            mu = as_vector(self.latent_means, "latent_means")
            lam = as_vector(self.latent_vars, "latent_vars")
            if mu.shape != lam.shape:
                raise ShapeError("latent_means and latent_vars differ in length")
            if bool((lam.detach() <= 0).any()):
                raise DomainError("latent variances must be strictly positive")
            object.__setattr__(self, "latent_means", mu)
            object.__setattr__(self, "latent_vars", lam)

    @property
    def num_features(self) -> int:
        return int(self.weight_mean.numel())

    @property
    def is_variational_spectrum(self) -> bool:
        return self.spectral_means is not None


@dataclass(frozen=True)
class PsiStats:
    psi1: torch.Tensor
    psi2: torch.Tensor
    psi2_rows: torch.Tensor
    psi_cross: dict[tuple[int, int], torch.Tensor] = field(default_factory=dict)

    def row(self, k: int) -> tuple[torch.Tensor, torch.Tensor]:
        return self.psi1[k], self.psi2_rows[k]


@dataclass(frozen=True)
class MonteCarloPsi:
    psi1: torch.Tensor
    psi2: torch.Tensor
    psi1_se: torch.Tensor
    psi2_se: torch.Tensor
    num_samples: int
    psi_cross: dict[tuple[int, int], torch.Tensor] = field(default_factory=dict)
    psi_cross_se: dict[tuple[int, int], torch.Tensor] = field(default_factory=dict)


def frequency_moments(
    hyper: SpectralLayerHyper,
    points: SpectralPoints | None,
    varparams: VariationalParams,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Mean and variance of the effective frequencies z / l + 2*pi*p."""
    if varparams.is_variational_spectrum:
        alpha, beta = varparams.spectral_means, varparams.spectral_vars
        if tuple(alpha.shape) != (hyper.num_features, hyper.input_dim):
            raise ShapeError(
                f"spectral moments must be {hyper.num_features}x{hyper.input_dim}, "
                f"got {tuple(alpha.shape)}"
            )
        return frequencies(alpha, hyper), beta / hyper.lengthscales**2
    if points is None:
        raise DomainError("fixed spectral points are required when the spectrum is not variational")
    points.check(hyper)
    mean = frequencies(points.Z, hyper)
    return mean, torch.zeros_like(mean)


def _damped_cosine_pair(
    in_mean: torch.Tensor,
    in_var: torch.Tensor,
    w1_mean: torch.Tensor,
    w1_var: torch.Tensor,
    u1: torch.Tensor,
    w2_mean: torch.Tensor,
    w2_var: torch.Tensor,
    u2: torch.Tensor,
    phase: torch.Tensor,
) -> torch.Tensor:
    """E[cos(w1'(x - u1) + w2'(x - u2) + phase)] for independent diagonal Gaussians x, w1, w2.

    Integrates the frequencies first, which leaves a Gaussian integral over x with a
    quadratic exponent per input dimension. The last axis is the input dimension.
    """
    d1 = in_mean - u1
    d2 = in_mean - u2
    a = w1_var + w2_var
    c = w1_var * d1 + w2_var * d2
    bi = w1_mean + w2_mean
    denom = 1.0 + in_var * a
    log_mag = (
        in_var * (c**2 - bi**2) / (2.0 * denom)
        - 0.5 * (w1_var * d1**2 + w2_var * d2**2)
        - 0.5 * torch.log(denom)
    )
    angle = -in_var * c * bi / denom + w1_mean * d1 + w2_mean * d2
    return torch.exp(log_mag.sum(dim=-1)) * torch.cos(phase + angle.sum(dim=-1))


def _damped_cosine(
    in_mean: torch.Tensor,
    in_var: torch.Tensor,
    w_mean: torch.Tensor,
    w_var: torch.Tensor,
    shift: torch.Tensor,
    phase: torch.Tensor,
) -> torch.Tensor:
    zero = torch.zeros((), dtype=DTYPE)
    return _damped_cosine_pair(in_mean, in_var, w_mean, w_var, shift, zero, zero, zero, phase)


def _check_inputs(inputs: LayerInputs, hyper: SpectralLayerHyper, varparams: VariationalParams) -> None:
    if inputs.input_dim != hyper.input_dim:
        raise ShapeError(f"layer inputs have {inputs.input_dim} columns, layer expects {hyper.input_dim}")
    if varparams.num_features != hyper.num_features:
        raise ShapeError(
            f"variational weights have {varparams.num_features} entries, layer has "
            f"{hyper.num_features} features"
        )


def psi1(
    inputs: LayerInputs,
    hyper: SpectralLayerHyper,
    points: SpectralPoints | None,
    varparams: VariationalParams,
) -> torch.Tensor:
    _check_inputs(inputs, hyper, varparams)
    w_mean, w_var = frequency_moments(hyper, points, varparams)
    expected = _damped_cosine(
        inputs.means[:, None, :],
        inputs.variances[:, None, :],
        w_mean[None],
        w_var[None],
        hyper.shifts[None],
        hyper.phases[None],
    )
    return hyper.amplitude * expected


def psi2_rows(
    inputs: LayerInputs,
    hyper: SpectralLayerHyper,
    points: SpectralPoints | None,
    varparams: VariationalParams,
) -> torch.Tensor:
    """Per-state second moments E[phi(x_k) phi(x_k)'] stacked as K x M x M."""
    _check_inputs(inputs, hyper, varparams)
    w_mean, w_var = frequency_moments(hyper, points, varparams)
    mu = inputs.means[:, None, None, :]
    nu = inputs.variances[:, None, None, :]
    w1_mean, w1_var, u1 = w_mean[None, :, None, :], w_var[None, :, None, :], hyper.shifts[None, :, None, :]
    w2_mean, w2_var, u2 = w_mean[None, None, :, :], w_var[None, None, :, :], hyper.shifts[None, None, :, :]
    b = hyper.phases
    difference = _damped_cosine_pair(mu, nu, w1_mean, w1_var, u1, -w2_mean, w2_var, u2, b[:, None] - b[None, :])
    total = _damped_cosine_pair(mu, nu, w1_mean, w1_var, u1, w2_mean, w2_var, u2, b[:, None] + b[None, :])
    scale = hyper.amplitude**2 / 2.0
    off_diagonal = scale * (difference + total)
    # same frequency on both factors: cos^2 A = (1 + cos 2A) / 2
    doubled = _damped_cosine(
        inputs.means[:, None, :],
        inputs.variances[:, None, :],
        2.0 * w_mean[None],
        4.0 * w_var[None],
        hyper.shifts[None],
        2.0 * b[None],
    )
    diagonal = scale * (1.0 + doubled)
    eye = torch.eye(hyper.num_features, dtype=DTYPE)
    return off_diagonal * (1.0 - eye) + torch.diag_embed(diagonal)


def psi2(
    inputs: LayerInputs,
    hyper: SpectralLayerHyper,
    points: SpectralPoints | None,
    varparams: VariationalParams,
) -> torch.Tensor:
    return psi2_rows(inputs, hyper, points, varparams).sum(dim=0)


def cross_state_diagonals(
    inputs: LayerInputs,
    hyper: SpectralLayerHyper,
    points: SpectralPoints | None,
    varparams: VariationalParams,
    rows: Sequence[int] | None = None,
) -> torch.Tensor:
    """Diagonal D of the cross-state second moment, for states ``rows`` against all states.

    Entry [r, j, m] is E[phi_m(x_{rows[r]}) phi_m(x_j)] with x_{rows[r]} and x_j independent and
    a shared frequency w_m. Returns len(rows) x K x M.
    """
    _check_inputs(inputs, hyper, varparams)
    index = torch.arange(inputs.num_states) if rows is None else torch.as_tensor(list(rows))
    w_mean, w_var = frequency_moments(hyper, points, varparams)
    mu_k = inputs.means[index][:, None, None, :]
    nu_k = inputs.variances[index][:, None, None, :]
    mu_j = inputs.means[None, :, None, :]
    nu_j = inputs.variances[None, :, None, :]
    spread = nu_k + nu_j
    w_m, w_v = w_mean[None, None], w_var[None, None]
    zero = torch.zeros((), dtype=DTYPE)
    difference = _damped_cosine(mu_k - mu_j, spread, w_m, w_v, zero, zero)
    total = _damped_cosine(
        mu_k + mu_j, spread, w_m, w_v, 2.0 * hyper.shifts[None, None], 2.0 * hyper.phases[None, None]
    )
    return hyper.amplitude**2 / 2.0 * (difference + total)


def psi_cross_vss(
    inputs: LayerInputs,
    hyper: SpectralLayerHyper,
    points: SpectralPoints | None,
    varparams: VariationalParams,
    k: int,
    k_hat: int,
) -> torch.Tensor:
    """E[phi(x_k) phi(x_k_hat)'] for two distinct, independent states sharing the spectral points."""
    num_states = inputs.num_states
    for index in (k, k_hat):
        if not 0 <= index < num_states:
            raise DomainError(f"state index {index} out of range [0, {num_states})")
    if k == k_hat:
        raise DomainError("k equals k_hat; use the per-state rows of psi2 instead")
    first = psi1(inputs, hyper, points, varparams)
    left, right = first[k], first[k_hat]
    d = cross_state_diagonals(inputs, hyper, points, varparams, rows=[k])[0, k_hat]
    return torch.outer(left, right) - torch.diag(left * right) + torch.diag(d)


def compute_psi_stats(
    inputs: LayerInputs,
    hyper: SpectralLayerHyper,
    points: SpectralPoints | None,
    varparams: VariationalParams,
    cross_pairs: Sequence[tuple[int, int]] = (),
) -> PsiStats:
    rows = psi2_rows(inputs, hyper, points, varparams)
    cross = {
        (k, k_hat): psi_cross_vss(inputs, hyper, points, varparams, k, k_hat)
        for k, k_hat in cross_pairs
    }
    return PsiStats(
        psi1=psi1(inputs, hyper, points, varparams),
        psi2=rows.sum(dim=0),
        psi2_rows=rows,
        psi_cross=cross,
    )


class _RunningMoments:
    def __init__(self) -> None:
        self.count = 0
        self.total: torch.Tensor | None = None
        self.total_sq: torch.Tensor | None = None

    def add(self, samples: torch.Tensor) -> None:
        chunk_sum = samples.sum(dim=0)
        chunk_sq = (samples**2).sum(dim=0)
        if self.total is None:
            self.total, self.total_sq = chunk_sum, chunk_sq
        else:
            self.total = self.total + chunk_sum
            self.total_sq = self.total_sq + chunk_sq
        self.count += samples.shape[0]

    def mean_and_se(self) -> tuple[torch.Tensor, torch.Tensor]:
        n = self.count
        mean = self.total / n
        variance = torch.clamp((self.total_sq - n * mean**2) / (n - 1), min=0.0)
        return mean, torch.sqrt(variance / n)


def monte_carlo_psi(
    inputs: LayerInputs,
    hyper: SpectralLayerHyper,
    points: SpectralPoints | None,
    varparams: VariationalParams,
    num_samples: int,
    seed: int,
    cross_pairs: Sequence[tuple[int, int]] = (),
) -> MonteCarloPsi:
    """Sample means of Phi, Phi'Phi and the requested cross products with standard errors."""
    if num_samples < 1000:
        raise DomainError(f"num_samples must be >= 1000, got {num_samples}")
    _check_inputs(inputs, hyper, varparams)
    generator = torch.Generator().manual_seed(seed)
    num_states, q = inputs.num_states, inputs.input_dim
    m = hyper.num_features
    means, stds = inputs.means.detach(), torch.sqrt(inputs.variances.detach())
    if varparams.is_variational_spectrum:
        z_mean = varparams.spectral_means.detach()
        z_std = torch.sqrt(varparams.spectral_vars.detach())
    else:
        if points is None:
            raise DomainError("fixed spectral points are required when the spectrum is not variational")
        z_mean, z_std = points.Z.detach(), torch.zeros(m, q, dtype=DTYPE)
    lengthscales = hyper.lengthscales.detach()
    p = hyper.spectral_mean.detach()
    shifts, phases = hyper.shifts.detach(), hyper.phases.detach()
    amplitude = hyper.amplitude.detach()

    first, second = _RunningMoments(), _RunningMoments()
    cross = {pair: _RunningMoments() for pair in cross_pairs}
    remaining = num_samples
    while remaining > 0:
        size = min(_MC_CHUNK, remaining)
        remaining -= size
        z = z_mean + z_std * torch.randn(size, m, q, generator=generator, dtype=DTYPE)
        x = means + stds * torch.randn(size, num_states, q, generator=generator, dtype=DTYPE)
        omega = z / lengthscales + TWO_PI * p
        argument = ((x[:, :, None, :] - shifts) * omega[:, None, :, :]).sum(dim=-1) + phases
        phi = amplitude * torch.cos(argument)
        first.add(phi)
        second.add(torch.einsum("skm,skn->smn", phi, phi))
        for (k, k_hat), moments in cross.items():
            moments.add(phi[:, k, :, None] * phi[:, k_hat, None, :])

    psi1_mean, psi1_se = first.mean_and_se()
    psi2_mean, psi2_se = second.mean_and_se()
    cross_means: dict[tuple[int, int], torch.Tensor] = {}
    cross_se: dict[tuple[int, int], torch.Tensor] = {}
    for pair, moments in cross.items():
        cross_means[pair], cross_se[pair] = moments.mean_and_se()
    return MonteCarloPsi(
        psi1=psi1_mean,
        psi2=psi2_mean,
        psi1_se=psi1_se,
        psi2_se=psi2_se,
        num_samples=num_samples,
        psi_cross=cross_means,
        psi_cross_se=cross_se,
    )
