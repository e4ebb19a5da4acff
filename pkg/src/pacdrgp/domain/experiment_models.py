from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from pacdrgp.domain.errors import DomainError
from pacdrgp.domain.optimization import TrainingConfig
from pacdrgp.domain.pac_bounds import BoundVariant, LambdaRule, LayerTerms
from pacdrgp.domain.revarb_model import SpectrumMode

CSV_COLUMNS = ("N", "bound", "term1", "term2", "term3", "kl", "wall_ms", "empirical_nll")


@dataclass(frozen=True)
class ExperimentConfig:
    dataset_path: Path
    output_dir: Path
    mode: SpectrumMode = SpectrumMode.SS
    num_hidden_layers: int = 1
    num_features: int = 16
    horizon_x: int = 1
    horizon_h: int = 1
    num_states: int | None = None
    training: TrainingConfig = field(default_factory=TrainingConfig)
    tau: float = 0.5
    lambda_rule: LambdaRule = LambdaRule.SQRT_N
    variant: BoundVariant = BoundVariant.THEOREM3
    two_sided: bool = False
    n_max: int = 50000
    grid_points: int = 60
    grid: tuple[int, ...] | None = None
    seed: int = 0
    model_path: Path | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "dataset_path", Path(self.dataset_path))
        object.__setattr__(self, "output_dir", Path(self.output_dir))
        object.__setattr__(self, "mode", SpectrumMode(self.mode))
        object.__setattr__(self, "lambda_rule", LambdaRule(self.lambda_rule))
        object.__setattr__(self, "variant", BoundVariant(self.variant))
        if self.model_path is not None:
            object.__setattr__(self, "model_path", Path(self.model_path))
        if not 0.0 < self.tau <= 1.0:
            raise DomainError(f"tau must lie in (0, 1], got {self.tau}")
        if self.num_hidden_layers < 0:
            raise DomainError("the number of hidden layers must be non-negative")
        for name in ("num_features", "horizon_x", "horizon_h", "n_max", "grid_points"):
            if getattr(self, name) < 1:
                raise DomainError(f"{name} must be positive")
        if self.num_states is not None and self.num_states < 2:
            raise DomainError("at least two states are required")
        if self.grid is not None:
            grid = tuple(int(n) for n in self.grid)
            if not grid or any(n < 1 for n in grid):
                raise DomainError("grid sizes must be positive integers")
            object.__setattr__(self, "grid", tuple(sorted(set(grid))))

    def sample_sizes(self) -> tuple[int, ...]:
        if self.grid is not None:
            return self.grid
        return log_grid(self.n_max, self.grid_points)

    def as_dict(self) -> dict:
        return {
            "dataset_path": str(self.dataset_path),
            "output_dir": str(self.output_dir),
            "mode": self.mode.value,
            "num_hidden_layers": self.num_hidden_layers,
            "num_features": self.num_features,
            "horizon_x": self.horizon_x,
            "horizon_h": self.horizon_h,
            "num_states": self.num_states,
            "training": {
                "learning_rate": self.training.learning_rate,
                "iterations": self.training.iterations,
                "refresh_every": self.training.refresh_every,
                "train_hyperparameters": self.training.train_hyperparameters,
                "train_variational": self.training.train_variational,
            },
            "tau": self.tau,
            "lambda_rule": self.lambda_rule.value,
            "variant": self.variant.value,
            "two_sided": self.two_sided,
            "n_max": self.n_max,
            "grid": list(self.sample_sizes()),
            "seed": self.seed,
            "model_path": None if self.model_path is None else str(self.model_path),
        }


def log_grid(n_max: int, count: int) -> tuple[int, ...]:
    """``count`` strictly increasing, roughly log-spaced integers from 1 to n_max.

    Each point takes the geometric step towards n_max over the points still to place, and at least
    one more than the previous point, so rounding never merges neighbours. Capped at n_max points.
    """
    if n_max < 1 or count < 1:
        raise DomainError("grid bounds must be positive")
    if count == 1:
        return (int(n_max),)
    count = min(count, n_max)
    values = [1]
    for placed in range(1, count):
        remaining = count - placed
        previous = values[-1]
        step = round(previous * (n_max / previous) ** (1.0 / remaining))
        values.append(min(max(step, previous + 1), n_max - remaining + 1))
    return tuple(values)


@dataclass(frozen=True)
class CurveRecord:
    N: int
    bound_value: float
    term1: float
    term2: float
    term3: float
    kl: float
    wall_ms: int
    empirical_nll: float = float("nan")
    layer_terms: tuple[LayerTerms, ...] = ()

    def __post_init__(self) -> None:
        for name in ("bound_value", "term1", "term2", "term3", "kl"):
            if not math.isfinite(getattr(self, name)):
                raise DomainError(f"curve record at N={self.N} has non-finite {name}")

    def csv_values(self) -> tuple[str, ...]:
        return (
            str(self.N),
            repr(self.bound_value),
            repr(self.term1),
            repr(self.term2),
            repr(self.term3),
            repr(self.kl),
            str(self.wall_ms),
            repr(self.empirical_nll),
        )


@dataclass(frozen=True)
class SyntheticSeries:
    times: np.ndarray
    inputs: np.ndarray
    outputs: np.ndarray


def make_synthetic_series(num_states: int = 512, seed: int = 0, noise_std: float = 0.0) -> SyntheticSeries:
    """Actuator-like series: a valve opening u and a saturating, pressure-like response y.

    With ``noise_std`` 0 the series is deterministic and ``seed`` is unused.
    """
    if num_states < 2:
        raise DomainError("at least two states are required")
    if noise_std < 0:
        raise DomainError("noise_std must be non-negative")
    k = np.arange(num_states, dtype=np.float64)
    u = (
        0.6 * np.sin(2.0 * np.pi * k / 50.0)
        + 0.3 * np.sin(2.0 * np.pi * k / 17.0 + 1.0)
        + 0.1 * np.cos(2.0 * np.pi * k / 7.0)
    )
    noise = np.random.default_rng(seed).standard_normal(num_states) * noise_std
    y = np.zeros(num_states)
    for step in range(2, num_states):
        y[step] = (
            0.75 * y[step - 1]
            - 0.2 * y[step - 2]
            + 0.5 * np.tanh(1.5 * u[step - 1])
            + 0.1 * u[step - 1] * y[step - 1]
            + noise[step]
        )
    return SyntheticSeries(times=k, inputs=u.reshape(-1, 1), outputs=y)
