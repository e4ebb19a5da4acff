from __future__ import annotations

from typing import Any

import numpy as np
import torch

from pacdrgp.domain.errors import ShapeError

DTYPE = torch.float64


def as_tensor(value: Any) -> torch.Tensor:
    if isinstance(value, torch.Tensor):
        return value.to(DTYPE)
    return torch.as_tensor(np.asarray(value, dtype=np.float64), dtype=DTYPE)


def as_matrix(value: Any, name: str) -> torch.Tensor:
    tensor = as_tensor(value)
    if tensor.ndim == 1:
        tensor = tensor.reshape(-1, 1)
    if tensor.ndim != 2:
        raise ShapeError(f"{name} must be a matrix, got shape {tuple(tensor.shape)}")
    return tensor


def as_vector(value: Any, name: str) -> torch.Tensor:
    tensor = as_tensor(value)
    if tensor.ndim == 0:
        tensor = tensor.reshape(1)
    if tensor.ndim != 1:
        raise ShapeError(f"{name} must be a vector, got shape {tuple(tensor.shape)}")
    return tensor


def to_numpy(tensor: torch.Tensor) -> np.ndarray:
    return tensor.detach().cpu().numpy().astype(np.float64, copy=True)
