"""Run configuration: strict JSON schema with unknown keys rejected.

A config fully determines a run given a seed; the CLI's --seed flag
overrides the file value.  Referenced paths must exist at parse time so
bad configs fail before any work happens.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from .analytic import LinearGaussianSpec
from .data import GaussianMixture, ring_mixture
from .errors import ConfigError
from .fdiv import KERNELS
from .trainer import TrainConfig

_TRAIN_KEYS = {
    "iterations": int,
    "batch_size": int,
    "lr_theta_phi": float,
    "lr_eta": float,
    "beta1": float,
    "beta2": float,
    "eps": float,
    "eta_steps_per_iter": int,
    "eval_every": int,
    "holdout_fraction": float,
    "clip_norm": float,
    "timing": str,
}

_MODEL_KEYS = {
    "latent_dim": int,
    "hidden_width": int,
    "hidden_layers": int,
    "flow_layers": int,
    "flow_hidden_width": int,
    "mixture_components": int,
}

_CHECK_KEYS = {
    "n": int,
    "n_bound": int,
    "n_kl": int,
    "n_adversarial": int,
    "n_triples": int,
    "n_configs": int,
    "stationarity_batch": int,
    "precision_cap": float,
}

_DATA_KEYS = {
    "ring": {"n_modes": int, "radius": float, "std": float, "n": int},
    "csv": {"path": str},
    "linear_gaussian": {"A": list, "b": list, "sigma": float, "n": int},
}


@dataclass
class ModelConfig:
    latent_dim: int = 2
    hidden_width: int = 64
    hidden_layers: int = 2
    flow_layers: int = 6
    flow_hidden_width: int = 32
    mixture_components: int = 8  # 1-D density estimator only


@dataclass
class CheckConfig:
    n_bound: int = 100_000
    n_kl: int = 200_000
    n_adversarial: int = 200_000
    n_triples: int = 50
    n_configs: int = 20
    stationarity_batch: int = 4096
    precision_cap: float = 0.2


@dataclass
class RunConfig:
    kernel: str
    data: dict
    out_dir: str
    seed: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    check: CheckConfig = field(default_factory=CheckConfig)
    figures: bool = True


def _reject_unknown(section: dict, allowed, where: str):
    unknown = set(section) - set(allowed)
    if unknown:
        raise ConfigError(
            f"{where}: unknown key(s) {sorted(unknown)}; allowed: {sorted(allowed)}"
        )


_NULLABLE = {"clip_norm"}


def _typed(section: dict, key: str, expected, where: str, default=None):
    if key not in section:
        return default
    value = section[key]
    if value is None and key in _NULLABLE:
        return None
    if expected is float and isinstance(value, int) and not isinstance(value, bool):
        value = float(value)
    if isinstance(value, bool) or not isinstance(value, expected):
        raise ConfigError(f"{where}.{key}: expected {expected.__name__}, got {value!r}")
    return value


def _parse_data_section(section: Any, base_dir: str) -> dict:
    if not isinstance(section, dict):
        raise ConfigError("data: expected an object")
    dtype = section.get("type")
    if dtype not in _DATA_KEYS:
        raise ConfigError(
            f"data.type: expected one of {sorted(_DATA_KEYS)}, got {dtype!r}"
        )
    _reject_unknown(section, {"type", *_DATA_KEYS[dtype]}, "data")
    out = {"type": dtype}
    for key, expected in _DATA_KEYS[dtype].items():
        if key not in section:
            raise ConfigError(f"data.{key}: required for type {dtype!r}")
        out[key] = _typed(section, key, expected, "data")
    if dtype == "csv":
        path = out["path"]
        if not os.path.isabs(path):
            path = os.path.join(base_dir, path)
        if not os.path.exists(path):
            raise ConfigError(f"data.path: {path} does not exist")
        out["path"] = path
        sidecar = _pstar_sidecar_path(path)
        out["pstar_path"] = sidecar if os.path.exists(sidecar) else None
    if dtype == "ring" and section["n_modes"] < 2:
        raise ConfigError("data.n_modes: ring needs at least 2 modes")
    if dtype in ("ring", "linear_gaussian") and out["n"] < 1:
        raise ConfigError("data.n: need at least one sample")
    return out


def _pstar_sidecar_path(dataset_path: str) -> str:
    root, _ = os.path.splitext(dataset_path)
    return root + ".pstar.json"


def parse_config(payload: dict, base_dir: str = ".") -> RunConfig:
    if not isinstance(payload, dict):
        raise ConfigError("config root: expected a JSON object")
    _reject_unknown(
        payload,
        {"kernel", "data", "model", "train", "check", "out_dir", "seed", "figures"},
        "config root",
    )
    kernel = payload.get("kernel", "kl")
    if not isinstance(kernel, str) or kernel.strip().lower() not in KERNELS:
        raise ConfigError(
            f"kernel: expected one of {sorted(KERNELS)} (case-insensitive), got {kernel!r}"
        )
    kernel = kernel.strip().lower()
    if "data" not in payload:
        raise ConfigError("data: section is required")
    data_section = _parse_data_section(payload["data"], base_dir)
    out_dir = payload.get("out_dir", "out")
    if not isinstance(out_dir, str):
        raise ConfigError(f"out_dir: expected string, got {out_dir!r}")
    seed = payload.get("seed", 0)
    if not isinstance(seed, int) or isinstance(seed, bool) or seed < 0:
        raise ConfigError(f"seed: expected a nonnegative integer, got {seed!r}")
    figures = payload.get("figures", True)
    if not isinstance(figures, bool):
        raise ConfigError(f"figures: expected true/false, got {figures!r}")

    model_section = payload.get("model", {})
    if not isinstance(model_section, dict):
        raise ConfigError("model: expected an object")
    _reject_unknown(model_section, _MODEL_KEYS, "model")
    model_kwargs = {
        k: _typed(model_section, k, t, "model")
        for k, t in _MODEL_KEYS.items()
        if k in model_section
    }
    model = ModelConfig(**model_kwargs)
    if model.latent_dim < 1 or model.hidden_width < 1 or model.flow_layers < 1:
        raise ConfigError("model: dims, widths and layer counts must be positive")

    train_section = payload.get("train", {})
    if not isinstance(train_section, dict):
        raise ConfigError("train: expected an object")
    _reject_unknown(train_section, _TRAIN_KEYS, "train")
    train_kwargs = {
        k: _typed(train_section, k, t, "train")
        for k, t in _TRAIN_KEYS.items()
        if k in train_section
    }
    try:
        train = TrainConfig(kernel=kernel, seed=seed, **train_kwargs)
    except ValueError as err:
        raise ConfigError(f"train: {err}") from err

    check_section = payload.get("check", {})
    if not isinstance(check_section, dict):
        raise ConfigError("check: expected an object")
    _reject_unknown(check_section, _CHECK_KEYS, "check")
    check_kwargs = {
        k: _typed(check_section, k, t, "check")
        for k, t in _CHECK_KEYS.items()
        if k in check_section
    }
    shared_n = check_kwargs.pop("n", None)
    check = CheckConfig(**check_kwargs)
    if shared_n is not None:
        check.n_bound = check.n_kl = check.n_adversarial = shared_n
    for name in ("n_bound", "n_kl", "n_adversarial", "n_triples", "n_configs"):
        if getattr(check, name) < 1:
            raise ConfigError(f"check.{name}: must be positive")

    return RunConfig(
        kernel=kernel,
        data=data_section,
        out_dir=out_dir,
        seed=seed,
        model=model,
        train=train,
        check=check,
        figures=figures,
    )


def load_config(path) -> RunConfig:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            payload = json.load(fh)
    except FileNotFoundError as err:
        raise ConfigError(f"config file not found: {path}") from err
    except json.JSONDecodeError as err:
        raise ConfigError(f"{path}: invalid JSON: {err}") from err
    return parse_config(payload, base_dir=os.path.dirname(os.fspath(path)) or ".")


def linear_gaussian_from_config(data_section: dict) -> LinearGaussianSpec:
    try:
        return LinearGaussianSpec(
            np.asarray(data_section["A"], dtype=float),
            np.asarray(data_section["b"], dtype=float),
            float(data_section["sigma"]),
        )
    except (ValueError, TypeError) as err:
        raise ConfigError(f"data: bad linear_gaussian spec: {err}") from err


def mixture_from_config(data_section: dict) -> GaussianMixture:
    return ring_mixture(
        data_section["n_modes"], data_section["radius"], data_section["std"]
    )
