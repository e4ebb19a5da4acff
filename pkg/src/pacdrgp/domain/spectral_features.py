from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Any

import torch

from pacdrgp.domain.errors import DomainError, ShapeError
from pacdrgp.domain.tensors import as_matrix, as_tensor, as_vector

TWO_PI = 2.0 * math.pi


@dataclass(frozen=True)
class SpectralLayerHyper:
    """Kernel and noise hyperparameters of one sparse-spectrum GP layer.

    ``spectral_mean`` is the vector p exactly as it enters the cosine argument; files that
    store the reciprocal convention must be inverted before construction.
    """

    num_features: int
    sigma_power: Any
    lengthscales: Any
    spectral_mean: Any
    shifts: Any
    phases: Any
    sigma_noise: Any

    def __post_init__(self) -> None:
        object.__setattr__(self, "sigma_power", as_tensor(self.sigma_power).reshape(()))
        object.__setattr__(self, "sigma_noise", as_tensor(self.sigma_noise).reshape(()))
        object.__setattr__(self, "lengthscales", as_vector(self.lengthscales, "lengthscales"))
        object.__setattr__(self, "spectral_mean", as_vector(self.spectral_mean, "spectral_mean"))
        object.__setattr__(self, "shifts", as_matrix(self.shifts, "shifts"))
        object.__setattr__(self, "phases", as_vector(self.phases, "phases"))
        if self.num_features < 1:
            raise DomainError(f"num_features must be >= 1, got {self.num_features}")
        q = self.lengthscales.numel()
        if self.spectral_mean.numel() != q:
            raise ShapeError(f"spectral_mean has {self.spectral_mean.numel()} entries, expected {q}")
        if tuple(self.shifts.shape) != (self.num_features, q):
            raise ShapeError(
                f"shifts must be {self.num_features}x{q}, got {tuple(self.shifts.shape)}"
            )
        if self.phases.numel() != self.num_features:
            raise ShapeError(f"phases has {self.phases.numel()} entries, expected {self.num_features}")
        if bool((self.lengthscales.detach() <= 0).any()):
            raise DomainError("lengthscales must be positive")
        if float(self.sigma_power.detach()) <= 0 or float(self.sigma_noise.detach()) <= 0:
            raise DomainError("sigma_power and sigma_noise must be positive")
        phases = self.phases.detach()
        if bool(((phases < 0) | (phases >= TWO_PI)).any()):
            raise DomainError("phases must lie in [0, 2*pi)")

    @property
    def input_dim(self) -> int:
        return int(self.lengthscales.numel())

    @property
    def amplitude(self) -> torch.Tensor:
        return self.sigma_power * math.sqrt(2.0 / self.num_features)


@dataclass(frozen=True)
class SpectralPoints:
    Z: Any

    def __post_init__(self) -> None:
        object.__setattr__(self, "Z", as_matrix(self.Z, "Z"))

    def check(self, hyper: SpectralLayerHyper) -> None:
        expected = (hyper.num_features, hyper.input_dim)
        if tuple(self.Z.shape) != expected:
            raise ShapeError(f"spectral points must be {expected[0]}x{expected[1]}, got {tuple(self.Z.shape)}")


def frequencies(Z: torch.Tensor, hyper: SpectralLayerHyper) -> torch.Tensor:
    # 2*pi*(diag(2*pi*l)^{-1} z + p) simplifies to z / l + 2*pi*p
    return Z / hyper.lengthscales + TWO_PI * hyper.spectral_mean


def feature_matrix(X: Any, points: SpectralPoints, hyper: SpectralLayerHyper) -> torch.Tensor:
    inputs = as_matrix(X, "X")
    points.check(hyper)
    if inputs.shape[0] < 1:
        raise ShapeError("X must contain at least one row")
    if inputs.shape[1] != hyper.input_dim:
        raise ShapeError(f"X has {inputs.shape[1]} columns, layer expects {hyper.input_dim}")
    omega = frequencies(points.Z, hyper)
    # (K, 1, Q) - (M, Q) -> (K, M, Q)
    centered = inputs[:, None, :] - hyper.shifts[None, :, :]
    argument = (centered * omega[None, :, :]).sum(dim=-1) + hyper.phases
    return hyper.amplitude * torch.cos(argument)


def feature_vector(x: Any, points: SpectralPoints, hyper: SpectralLayerHyper) -> torch.Tensor:
    vector = as_vector(x, "x")
    if vector.numel() != hyper.input_dim:
        raise ShapeError(f"x has {vector.numel()} entries, layer expects {hyper.input_dim}")
    return feature_matrix(vector.reshape(1, -1), points, hyper)[0]


def kernel_approx(X: Any, points: SpectralPoints, hyper: SpectralLayerHyper) -> torch.Tensor:
    phi = feature_matrix(X, points, hyper)
    return phi @ phi.T
