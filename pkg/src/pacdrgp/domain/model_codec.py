from __future__ import annotations

from typing import Any

import numpy as np
import torch

from pacdrgp.domain.errors import ModelFormatError
from pacdrgp.domain.psi_statistics import VariationalParams
from pacdrgp.domain.revarb_model import DeepModel, GPLayer, parse_mode
from pacdrgp.domain.spectral_features import SpectralLayerHyper, SpectralPoints
from pacdrgp.domain.tensors import DTYPE, to_numpy

MODEL_VERSION = 1
_LAYER_START = "--- LAYER START ---"
_LAYER_END = "--- LAYER END ---"


def _array_line(name: str, value: Any) -> str:
    array = to_numpy(value) if isinstance(value, torch.Tensor) else np.asarray(value, dtype=np.float64)
    shape = "x".join(str(dim) for dim in array.shape) if array.ndim else "1"
    numbers = " ".join(repr(float(v)) for v in array.reshape(-1))
    return f"{name} SHAPE {shape}: {numbers}".rstrip()


def _scalar(value: Any) -> str:
    return repr(float(value.detach()) if isinstance(value, torch.Tensor) else float(value))


def render_model(model: DeepModel) -> str:
    lines = [
        f"MODEL_VERSION: {MODEL_VERSION}",
        f"MODE: {model.mode.value}",
        f"NUM_STATES: {model.num_states}",
        f"EXO_DIM: {model.exo_dim}",
        f"H_X: {model.horizon_x}",
        f"H_H: {model.horizon_h}",
        f"NUM_LAYERS: {len(model.layers)}",
        _array_line("DESIGN", model.design),
    ]
    for index, layer in enumerate(model.layers):
        hyper, varparams = layer.hyper, layer.varparams
        lines.extend(
            [
                _LAYER_START,
                f"INDEX: {index}",
                f"NUM_FEATURES: {hyper.num_features}",
                f"SIGMA_POWER: {_scalar(hyper.sigma_power)}",
                f"SIGMA_NOISE: {_scalar(hyper.sigma_noise)}",
                _array_line("LENGTHSCALES", hyper.lengthscales),
                _array_line("SPECTRAL_MEAN", hyper.spectral_mean),
                _array_line("SHIFTS", hyper.shifts),
                _array_line("PHASES", hyper.phases),
                _array_line("WEIGHT_MEAN", varparams.weight_mean),
                _array_line("WEIGHT_COV", varparams.weight_cov),
            ]
        )
        if layer.points is not None:
            lines.append(_array_line("POINTS", layer.points.Z))
        if varparams.spectral_means is not None:
            lines.append(_array_line("SPECTRAL_MEANS", varparams.spectral_means))
            lines.append(_array_line("SPECTRAL_VARS", varparams.spectral_vars))
        if varparams.latent_means is not None:
            lines.append(_array_line("LATENT_MEANS", varparams.latent_means))
            lines.append(_array_line("LATENT_VARS", varparams.latent_vars))
        lines.append(_LAYER_END)
    return "\n".join(lines) + "\n"


def _parse_array(line_no: int, key: str, payload: str) -> np.ndarray:
    parts = key.split(" SHAPE ")
    if len(parts) != 2:
        raise ModelFormatError(f"line {line_no}: array key without shape: {key}")
    try:
        shape = tuple(int(dim) for dim in parts[1].split("x"))
        values = [float(token) for token in payload.split()]
    except ValueError as exc:
        raise ModelFormatError(f"line {line_no}: unreadable array {parts[0]}") from exc
    if int(np.prod(shape)) != len(values):
        raise ModelFormatError(
            f"line {line_no}: {parts[0]} declares shape {shape} but has {len(values)} values"
        )
    return np.asarray(values, dtype=np.float64).reshape(shape)


def _split(line_no: int, line: str) -> tuple[str, str]:
    if ":" not in line:
        raise ModelFormatError(f"line {line_no}: expected 'KEY: value', got {line!r}")
    key, _, value = line.partition(":")
    return key.strip(), value.strip()


def parse_model(text: str) -> DeepModel:
    header: dict[str, str] = {}
    arrays: dict[str, np.ndarray] = {}
    layers: list[dict[str, Any]] = []
    current: dict[str, Any] | None = None
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        if line == _LAYER_START:
            current = {}
            continue
        if line == _LAYER_END:
            if current is None:
                raise ModelFormatError(f"line {line_no}: layer end without start")
            layers.append(current)
            current = None
            continue
        key, value = _split(line_no, line)
        target = current
        if " SHAPE " in key:
            name = key.split(" SHAPE ")[0]
            array = _parse_array(line_no, key, value)
            if target is None:
                arrays[name] = array
            else:
                target[name] = array
        elif target is None:
            header[key] = value
        else:
            target[key] = value
    if current is not None:
        raise ModelFormatError("unterminated layer block")

    try:
        version = int(header["MODEL_VERSION"])
    except (KeyError, ValueError) as exc:
        raise ModelFormatError("missing or invalid MODEL_VERSION header") from exc
    if version != MODEL_VERSION:
        raise ModelFormatError(f"unsupported model version {version}")
    try:
        mode = parse_mode(header["MODE"])
        num_layers = int(header["NUM_LAYERS"])
        horizon_x = int(header["H_X"])
        horizon_h = int(header["H_H"])
        num_states = int(header["NUM_STATES"])
        exo_dim = int(header["EXO_DIM"])
        design = arrays["DESIGN"]
    except (KeyError, ValueError) as exc:
        raise ModelFormatError(f"incomplete model header: {exc}") from exc
    if design.ndim != 2 or design.shape != (num_states, exo_dim):
        raise ModelFormatError(
            f"DESIGN has shape {design.shape}, header declares {num_states}x{exo_dim}"
        )
    if len(layers) != num_layers:
        raise ModelFormatError(f"NUM_LAYERS is {num_layers} but {len(layers)} layer blocks found")
    try:
        built = tuple(_build_layer(entry) for entry in layers)
        return DeepModel(layers=built, design=design, horizon_x=horizon_x, horizon_h=horizon_h, mode=mode)
    except KeyError as exc:
        raise ModelFormatError(f"layer block misses {exc}") from exc
    except ModelFormatError:
        raise
    except ValueError as exc:
        raise ModelFormatError(f"inconsistent model document: {exc}") from exc


def _tensor(value: np.ndarray) -> torch.Tensor:
    return torch.as_tensor(value, dtype=DTYPE)


def _build_layer(entry: dict[str, Any]) -> GPLayer:
    spectral_mean = entry.get("SPECTRAL_MEAN")
    if spectral_mean is None:
        # reciprocal storage p = [p_1^{-1}, ...]; invert into the vector used in the cosine
        reciprocal = entry["SPECTRAL_MEAN_RECIPROCAL"]
        if np.any(reciprocal == 0):
            raise ModelFormatError("SPECTRAL_MEAN_RECIPROCAL contains zeros")
        spectral_mean = 1.0 / reciprocal
    hyper = SpectralLayerHyper(
        num_features=int(entry["NUM_FEATURES"]),
        sigma_power=float(entry["SIGMA_POWER"]),
        lengthscales=_tensor(entry["LENGTHSCALES"]),
        spectral_mean=_tensor(spectral_mean),
        shifts=_tensor(entry["SHIFTS"]),
        phases=_tensor(entry["PHASES"]),
        sigma_noise=float(entry["SIGMA_NOISE"]),
    )
    has_spectrum = "SPECTRAL_MEANS" in entry
    has_latent = "LATENT_MEANS" in entry
    varparams = VariationalParams(
        weight_mean=_tensor(entry["WEIGHT_MEAN"]),
        weight_cov=_tensor(entry["WEIGHT_COV"]),
        spectral_means=_tensor(entry["SPECTRAL_MEANS"]) if has_spectrum else None,
        spectral_vars=_tensor(entry["SPECTRAL_VARS"]) if has_spectrum else None,
        latent_means=_tensor(entry["LATENT_MEANS"]) if has_latent else None,
        latent_vars=_tensor(entry["LATENT_VARS"]) if has_latent else None,
    )
    points = SpectralPoints(Z=_tensor(entry["POINTS"])) if "POINTS" in entry else None
    return GPLayer(hyper=hyper, points=points, varparams=varparams)
