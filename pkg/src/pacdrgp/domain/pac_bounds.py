from __future__ import annotations

import math
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field
from enum import Enum
from typing import Any

import numpy as np
import torch
from scipy import linalg

from pacdrgp.domain.errors import DomainError, MGFUndefinedError, ShapeError
from pacdrgp.domain.psi_statistics import PsiStats, cross_state_diagonals
from pacdrgp.domain.revarb_model import (
    DeepModel,
    SpectrumMode,
    all_layer_statistics,
    build_inputs,
    kl_q_p,
    noise_free_variances,
)
from pacdrgp.domain.tensors import to_numpy

_CROSS_CHUNK = 32


class LambdaRule(str, Enum):
    N = "N"
    SQRT_N = "sqrtN"

    def value_at(self, num_samples: int) -> float:
        return float(num_samples) if self is LambdaRule.N else math.sqrt(num_samples)


class BoundVariant(str, Enum):
    THEOREM2 = "theorem2"
    THEOREM3 = "theorem3"
    THEOREM5 = "theorem5"
    COVERING = "covering"


def _check_tau(tau: float) -> None:
    if not 0.0 < tau <= 1.0:
        raise DomainError(f"tau must lie in (0, 1], got {tau}")


def _check_samples(num_samples: int) -> None:
    if num_samples < 1:
        raise DomainError(f"N must be a positive integer, got {num_samples}")


def _psd_floor(matrix: np.ndarray) -> float:
    return -1e-10 * max(float(np.abs(np.trace(matrix))), 1.0)


@dataclass(frozen=True)
class QuadraticForm:
    """Q(I) = I'EI + e'I + e0 for a centred Gaussian I ~ N(0, Sigma)."""

    E: Any
    e: Any
    const: float
    Sigma: Any

    def __post_init__(self) -> None:
        E = np.atleast_2d(np.asarray(self.E, dtype=np.float64))
        e = np.atleast_1d(np.asarray(self.e, dtype=np.float64))
        sigma = np.atleast_2d(np.asarray(self.Sigma, dtype=np.float64))
        size = e.shape[0]
        if E.shape != (size, size) or sigma.shape != (size, size):
            raise ShapeError(f"E and Sigma must be {size}x{size}")
        if not np.allclose(E, E.T, atol=1e-12):
            raise DomainError("E must be symmetric")
        if not np.allclose(sigma, sigma.T, atol=1e-12):
            raise DomainError("Sigma must be symmetric")
        if float(linalg.eigvalsh(sigma).min()) < _psd_floor(sigma):
            raise DomainError("Sigma must be positive semidefinite")
        object.__setattr__(self, "E", E)
        object.__setattr__(self, "e", e)
        object.__setattr__(self, "Sigma", sigma)
        object.__setattr__(self, "const", float(self.const))

    def evaluate(self, samples: np.ndarray) -> np.ndarray:
        """Q at each row of an (n, K) sample matrix."""
        return np.einsum("nk,kj,nj->n", samples, self.E, samples) + samples @ self.e + self.const


def qfg_mgf(q: QuadraticForm, lam: float) -> float:
    """log E[exp(lam * Q(I))] in closed form.

    Evaluated through a symmetric square root of Sigma, so singular covariances are fine and
    the existence condition becomes positivity of I - 2*lam*R'ER with Sigma = RR'.
    """
    if lam <= 0:
        raise DomainError(f"lambda must be positive, got {lam}")
    weights, vectors = linalg.eigh(q.Sigma)
    root = vectors * np.sqrt(np.clip(weights, 0.0, None))
    inner = root.T @ q.E @ root
    eig_inner, basis = linalg.eigh(0.5 * (inner + inner.T))
    shrink = 1.0 - 2.0 * lam * eig_inner
    if float(shrink.min()) <= 0.0:
        raise MGFUndefinedError(
            f"I - 2*lambda*E*Sigma is not positive definite at lambda={lam} "
            f"(smallest eigenvalue {float(shrink.min()):.3g})"
        )
    projected = basis.T @ (root.T @ (lam * q.e))
    log_det = float(np.log(shrink).sum())
    quadratic = float((projected**2 / shrink).sum())
    return -0.5 * log_det + 0.5 * quadratic + lam * q.const


def monte_carlo_log_mgf(q: QuadraticForm, lam: float, num_samples: int, seed: int) -> tuple[float, float]:
    """Monte Carlo log E[exp(lam * Q)] and the standard error of the underlying mean."""
    if num_samples < 2:
        raise DomainError("num_samples must be at least 2")
    rng = np.random.default_rng(seed)
    weights, vectors = linalg.eigh(q.Sigma)
    root = vectors * np.sqrt(np.clip(weights, 0.0, None))
    total, total_sq, drawn = 0.0, 0.0, 0
    while drawn < num_samples:
        size = min(1_000_000, num_samples - drawn)
        samples = rng.standard_normal((size, q.e.shape[0])) @ root.T
        values = np.exp(lam * q.evaluate(samples))
        total += float(values.sum())
        total_sq += float((values**2).sum())
        drawn += size
    mean = total / num_samples
    variance = max(total_sq / num_samples - mean**2, 0.0)
    return math.log(mean), math.sqrt(variance / num_samples)


@dataclass(frozen=True)
class LayerBoundInputs:
    """Variance, covariance and Lipschitz inputs of one layer."""

    state_vars: Any
    cov: Any
    sigma_noise: float
    lipschitz: float
    delta: float
    noise_free_var_sum: float = 0.0
    latent_var_sum: float = 0.0

    def __post_init__(self) -> None:
        state_vars = np.atleast_1d(np.asarray(self.state_vars, dtype=np.float64))
        cov = np.atleast_2d(np.asarray(self.cov, dtype=np.float64))
        size = state_vars.shape[0]
        if cov.shape != (size, size):
            raise ShapeError(f"cov must be {size}x{size}, got {cov.shape}")
        if bool((state_vars < 0).any()):
            raise DomainError("variances must be non-negative")
        if not np.allclose(cov, cov.T, atol=1e-10 * max(float(np.abs(cov).max(initial=0.0)), 1.0)):
            raise DomainError("cov must be symmetric")
        if size and float(linalg.eigvalsh(cov).min()) < _psd_floor(cov):
            raise DomainError("cov must be positive semidefinite")
        if self.sigma_noise <= 0:
            raise DomainError("sigma_noise must be positive")
        if self.lipschitz < 0:
            raise DomainError("lipschitz must be non-negative")
        if self.delta <= 0:
            raise DomainError("delta must be positive")
        object.__setattr__(self, "state_vars", state_vars)
        object.__setattr__(self, "cov", 0.5 * (cov + cov.T))

    @property
    def num_states(self) -> int:
        return int(self.state_vars.shape[0])

    @property
    def sum_var(self) -> float:
        return float(self.state_vars.sum())

    def single_state(self, k: int) -> LayerBoundInputs:
        return LayerBoundInputs(
            state_vars=self.state_vars[k : k + 1],
            cov=self.cov[k : k + 1, k : k + 1],
            sigma_noise=self.sigma_noise,
            lipschitz=self.lipschitz,
            delta=self.delta,
        )


@dataclass(frozen=True)
class BoundInputs:
    layers: tuple[LayerBoundInputs, ...]
    kl: float
    tau: float = 0.5
    big_lipschitz: float = 1.0
    input_dim: int = 1

    def __post_init__(self) -> None:
        object.__setattr__(self, "layers", tuple(self.layers))
        _check_tau(self.tau)
        if self.kl < 0:
            raise DomainError(f"kl must be non-negative, got {self.kl}")
        if not self.layers:
            raise ShapeError("at least one layer is required")

    def with_state(self, k: int) -> BoundInputs:
        return BoundInputs(
            layers=tuple(layer.single_state(k) for layer in self.layers),
            kl=self.kl,
            tau=self.tau,
            big_lipschitz=self.big_lipschitz,
            input_dim=self.input_dim,
        )


@dataclass(frozen=True)
class LayerTerms:
    first: float
    second: float
    third: float

    @property
    def total(self) -> float:
        return self.first + self.second + self.third


@dataclass(frozen=True)
class BoundBreakdown:
    value: float
    term1: float
    term2: float
    term3: float
    kl: float
    layer_terms: tuple[LayerTerms, ...] = ()


@dataclass(frozen=True)
class BoundCurve:
    lambda_rule: LambdaRule
    points: tuple[tuple[int, float], ...]
    metadata: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        points = tuple((int(n), float(v)) for n, v in self.points)
        sizes = [n for n, _ in points]
        if any(b <= a for a, b in zip(sizes, sizes[1:])):
            raise DomainError("curve N values must be strictly increasing")
        if not all(math.isfinite(v) for _, v in points):
            raise DomainError("curve values must be finite")
        object.__setattr__(self, "points", points)
        object.__setattr__(self, "lambda_rule", LambdaRule(self.lambda_rule))


def capital_L_terms(inputs: BoundInputs, lam: float, num_samples: int) -> tuple[LayerTerms, ...]:
    """Per-layer rows of L(lambda): variance, log-determinant and Lipschitz terms."""
    if lam <= 0:
        raise DomainError(f"lambda must be positive, got {lam}")
    _check_samples(num_samples)
    n = float(num_samples)
    terms = []
    for layer in inputs.layers:
        noise_var = layer.sigma_noise**2
        scale = lam / (n * noise_var)
        weights, vectors = linalg.eigh(layer.cov)
        weights = np.clip(weights, 0.0, None)
        first = lam * layer.sum_var / (2.0 * noise_var)
        second = -0.5 * n * float(np.log1p(scale * weights).sum())
        level = (layer.lipschitz / layer.delta) * lam / (n * noise_var)
        projected = vectors.T @ np.ones(layer.num_states)
        third = 0.5 * n * level**2 * float((weights * projected**2 / (1.0 + scale * weights)).sum())
        terms.append(LayerTerms(first=first, second=second, third=third))
    return tuple(terms)


def capital_L(inputs: BoundInputs, lam: float, num_samples: int) -> float:
    return float(sum(term.total for term in capital_L_terms(inputs, lam, num_samples)))


def consistency_asymptote(inputs: BoundInputs) -> float:
    """Limit of L(sqrt N)/sqrt N as N grows: sum over layers of (1'Var - tr Cov)/(2 sigma^2)."""
    return float(
        sum((layer.sum_var - float(np.trace(layer.cov))) / (2.0 * layer.sigma_noise**2) for layer in inputs.layers)
    )


def lipschitz_estimate(sequence: Any) -> float:
    values = np.asarray(sequence, dtype=np.float64).reshape(-1)
    if values.shape[0] < 2:
        raise DomainError("a Lipschitz estimate needs at least two states")
    return float(np.abs(np.diff(values)).max())


@dataclass(frozen=True)
class LayerMoments:
    state_vars: np.ndarray
    cov: np.ndarray
    noise_free_vars: np.ndarray
    predicted_means: np.ndarray
    latent_var_sum: float
    sigma_noise: float
    input_dim: int

    @property
    def sum_var(self) -> float:
        return float(self.state_vars.sum())


def variance_cov_inputs(model: DeepModel) -> list[LayerMoments]:
    """Var[h] and Cov[h] of every layer under the variational distribution."""
    moments = []
    with torch.no_grad():
        stats = all_layer_statistics(model)
        for index, (layer, layer_stats) in enumerate(zip(model.layers, stats)):
            varparams = layer.varparams
            noise_var = float(layer.hyper.sigma_noise**2)
            noise_free = noise_free_variances(layer_stats, varparams)
            psi1 = layer_stats.psi1
            cov = psi1 @ varparams.weight_cov @ psi1.T
            if model.mode is SpectrumMode.VSS:
                cov = _vss_covariance(model, index, layer_stats, cov, noise_free)
            latent = varparams.latent_vars
            moments.append(
                LayerMoments(
                    state_vars=to_numpy(noise_free) + noise_var,
                    cov=to_numpy(0.5 * (cov + cov.T)),
                    noise_free_vars=to_numpy(noise_free),
                    predicted_means=to_numpy(psi1 @ varparams.weight_mean),
                    latent_var_sum=0.0 if latent is None else float(latent.sum()),
                    sigma_noise=math.sqrt(noise_var),
                    input_dim=layer.hyper.input_dim,
                )
            )
    return moments


def _vss_covariance(
    model: DeepModel,
    index: int,
    stats: PsiStats,
    base: torch.Tensor,
    noise_free: torch.Tensor,
) -> torch.Tensor:
    # off the diagonal the shared spectral points add sum_m (D - psi1_k psi1_j)_m (m_m^2 + s_mm)
    layer = model.layers[index]
    inputs = build_inputs(model, index)
    varparams = layer.varparams
    features = stats.psi1
    weight = varparams.weight_mean**2 + torch.diagonal(varparams.weight_cov)
    cov = base.clone()
    num_states = model.num_states
    for start in range(0, num_states, _CROSS_CHUNK):
        rows = list(range(start, min(start + _CROSS_CHUNK, num_states)))
        diagonal = cross_state_diagonals(inputs, layer.hyper, layer.points, varparams, rows=rows)
        excess = diagonal - features[rows][:, None, :] * features[None, :, :]
        cov[rows] = cov[rows] + excess @ weight
    cov = cov - torch.diag(torch.diagonal(cov)) + torch.diag(noise_free)
    return cov


def bound_inputs_from_model(
    model: DeepModel,
    tau: float = 0.5,
    delta: Sequence[float] | None = None,
    big_lipschitz: float | None = None,
    moments: Sequence[LayerMoments] | None = None,
) -> BoundInputs:
    """Collect the bound inputs of a trained model: S from consecutive differences, delta = dim(x)."""
    moments = list(moments) if moments is not None else variance_cov_inputs(model)
    if delta is not None and len(delta) != len(moments):
        raise ShapeError(f"delta needs {len(moments)} entries, got {len(delta)}")
    layers = []
    lipschitz_product = 1.0
    for index, entry in enumerate(moments):
        lipschitz = lipschitz_estimate(entry.predicted_means)
        lipschitz_product *= lipschitz
        layers.append(
            LayerBoundInputs(
                state_vars=entry.state_vars,
                cov=entry.cov,
                sigma_noise=entry.sigma_noise,
                lipschitz=lipschitz,
                delta=float(delta[index]) if delta is not None else float(entry.input_dim),
                noise_free_var_sum=float(entry.noise_free_vars.sum()),
                latent_var_sum=entry.latent_var_sum,
            )
        )
    with torch.no_grad():
        kl = float(kl_q_p(model))
    return BoundInputs(
        layers=tuple(layers),
        kl=max(kl, 0.0),
        tau=tau,
        big_lipschitz=big_lipschitz if big_lipschitz is not None else lipschitz_product,
        input_dim=model.layers[0].hyper.input_dim,
    )


def revarb_from_risk(empirical_risk: float, kl: float, num_samples: int) -> float:
    """L_REV = -(N * E_Q[nll] + KL)."""
    return -(num_samples * empirical_risk + kl)


def theorem2_bound(inputs: BoundInputs, num_samples: int, revarb_bound: float, tau: float | None = None) -> float:
    """Empirical bound on E_Q[nll risk] with lambda = N."""
    tau = inputs.tau if tau is None else tau
    _check_tau(tau)
    n = float(num_samples)
    return capital_L(inputs, n, num_samples) / n - revarb_bound / n + math.log(1.0 / tau) / n


def theorem3_gap_bound(
    inputs: BoundInputs, num_samples: int, tau: float | None = None, lam: float | None = None
) -> float:
    """Generalization-gap bound (KL + log(1/tau) + L(lambda)) / lambda, lambda = sqrt(N) by default."""
    tau = inputs.tau if tau is None else tau
    _check_tau(tau)
    _check_samples(num_samples)
    lam = math.sqrt(num_samples) if lam is None else lam
    return (inputs.kl + math.log(1.0 / tau) + capital_L(inputs, lam, num_samples)) / lam


def oracle_risk(inputs: BoundInputs) -> float:
    """sum_l 1'(lambda*_l + Var f_l) / (2 sigma_l^2); the output layer has no latent variance."""
    return float(
        sum(
            (layer.latent_var_sum + layer.noise_free_var_sum) / (2.0 * layer.sigma_noise**2)
            for layer in inputs.layers
        )
    )


def theorem5_oracle_bound(inputs: BoundInputs, num_samples: int, tau: float | None = None) -> float:
    return oracle_risk(inputs) + theorem3_gap_bound(inputs, num_samples, tau=tau)


def covering_number_bound(epsilon_prime: float, big_lipschitz: float, input_dim: int) -> float:
    if big_lipschitz <= 0 or epsilon_prime <= 0:
        raise DomainError("covering radius and Lipschitz constant must be positive")
    return (epsilon_prime / big_lipschitz) ** (-input_dim)


def covering_extension(
    inputs: BoundInputs,
    num_samples: int,
    *,
    lam: float | None = None,
    epsilon_prime: float | None = None,
    tau_prime: float | None = None,
    big_lipschitz: float | None = None,
    input_dim: int | None = None,
    state: int | None = None,
) -> float:
    """Input-dimension refined gap bound built from a covering of the input space.

    Defaults: lambda = sqrt(N), epsilon' = 1/N. Without ``state`` the per-state term uses the
    state with the smallest L_k, which gives the largest value.
    """
    _check_samples(num_samples)
    lam = math.sqrt(num_samples) if lam is None else lam
    epsilon_prime = 1.0 / num_samples if epsilon_prime is None else epsilon_prime
    tau_prime = inputs.tau if tau_prime is None else tau_prime
    big_lipschitz = inputs.big_lipschitz if big_lipschitz is None else big_lipschitz
    input_dim = inputs.input_dim if input_dim is None else input_dim
    _check_tau(tau_prime)
    if not 0.0 < epsilon_prime <= 1.0:
        raise DomainError(f"epsilon' must lie in (0, 1], got {epsilon_prime}")
    if big_lipschitz <= 0:
        raise DomainError(f"covering needs a positive Lipschitz constant, got {big_lipschitz}")
    if input_dim < 0:
        raise DomainError(f"input dimension must be non-negative, got {input_dim}")

    num_states = inputs.layers[0].num_states
    lam_prime = lam * num_states
    pooled = capital_L(inputs, lam_prime / num_states, num_samples)
    candidates = range(num_states) if state is None else [state]
    per_state = min(capital_L(inputs.with_state(k), lam_prime, num_samples) for k in candidates)
    if pooled <= 0 or per_state <= 0:
        raise DomainError(
            f"log-ratio undefined: L(lambda'/K)={pooled:.6g}, L_k(lambda')={per_state:.6g}"
        )
    numerator = (
        inputs.kl
        + input_dim * math.log(big_lipschitz / epsilon_prime)
        + math.log(1.0 / tau_prime)
        + math.log(pooled / per_state)
        + capital_L(inputs, lam, num_samples)
    )
    return numerator / lam


def two_sided(bound: Callable[[float], float], tau: float) -> float:
    """Bound on the absolute deviation: the one-sided bound at confidence 1 - tau/2."""
    _check_tau(tau)
    return bound(tau / 2.0)


def intersection_lower_bound(probabilities: Sequence[float]) -> float:
    """P(all events) >= sum P(event_i) - (n - 1)."""
    values = [float(p) for p in probabilities]
    if not values:
        raise DomainError("at least one event probability is required")
    if any(not 0.0 <= p <= 1.0 for p in values):
        raise DomainError("probabilities must lie in [0, 1]")
    return sum(values) - (len(values) - 1)


def evaluate_variant(
    variant: BoundVariant,
    inputs: BoundInputs,
    num_samples: int,
    *,
    lambda_rule: LambdaRule = LambdaRule.SQRT_N,
    empirical_risk: float | None = None,
    two_sided_bound: bool = False,
) -> BoundBreakdown:
    """Evaluate one bound variant together with its L(lambda) term breakdown."""
    variant = BoundVariant(variant)
    lam = float(num_samples) if variant is BoundVariant.THEOREM2 else LambdaRule(lambda_rule).value_at(num_samples)

    def at(tau: float) -> float:
        if variant is BoundVariant.THEOREM2:
            if empirical_risk is None:
                raise DomainError("the empirical bound needs the empirical risk")
            revarb = revarb_from_risk(empirical_risk, inputs.kl, num_samples)
            return theorem2_bound(inputs, num_samples, revarb, tau=tau)
        if variant is BoundVariant.THEOREM3:
            return theorem3_gap_bound(inputs, num_samples, tau=tau, lam=lam)
        if variant is BoundVariant.THEOREM5:
            return oracle_risk(inputs) + theorem3_gap_bound(inputs, num_samples, tau=tau, lam=lam)
        return covering_extension(inputs, num_samples, lam=lam, tau_prime=tau)

    value = two_sided(at, inputs.tau) if two_sided_bound else at(inputs.tau)
    terms = capital_L_terms(inputs, lam, num_samples)
    return BoundBreakdown(
        value=value,
        term1=sum(t.first for t in terms),
        term2=sum(t.second for t in terms),
        term3=sum(t.third for t in terms),
        kl=inputs.kl,
        layer_terms=terms,
    )
