"""Synthetic data distributions with exact densities, plus mode-coverage metrics.

The ring of isotropic Gaussians is the standard mode-collapse benchmark;
its exact log-density doubles as the known true distribution for the
verification estimators.  Coverage thresholds (20 samples minimum, 3-sigma
membership) quantify collapse, which the underlying phenomenon only shows
qualitatively.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .autodiff import atomic_write_bytes
from .errors import ShapeError

LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class GaussianMixture:
    """Isotropic Gaussian mixture: weights, component means, per-component std."""

    weights: np.ndarray
    means: np.ndarray
    stds: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "weights", np.asarray(self.weights, float).reshape(-1))
        object.__setattr__(self, "means", np.atleast_2d(np.asarray(self.means, float)))
        object.__setattr__(self, "stds", np.asarray(self.stds, float).reshape(-1))
        k = self.weights.shape[0]
        if self.means.shape[0] != k or self.stds.shape[0] != k:
            raise ShapeError(
                f"component counts differ: {k} weights, {self.means.shape[0]} means, "
                f"{self.stds.shape[0]} stds"
            )
        if abs(self.weights.sum() - 1.0) > 1e-12:
            raise ValueError(f"weights sum to {self.weights.sum()!r}, expected 1")
        if np.any(self.weights < 0):
            raise ValueError("weights must be nonnegative")
        if np.any(self.stds <= 0):
            raise ValueError("stds must be positive")

    @property
    def n_components(self):
        return self.weights.shape[0]

    @property
    def dim(self):
        return self.means.shape[1]

    # --- estimator-style interface -------------------------------------

    def log_prob(self, x, tape=None):
        """(n, d) -> (n, 1) via stable log-sum-exp over components."""
        x = np.atleast_2d(np.asarray(x, float))
        if x.shape[1] != self.dim:
            raise ShapeError(f"expected (*, {self.dim}) points, got {x.shape}")
        diff = x[:, None, :] - self.means[None, :, :]  # (n, k, d)
        sq = np.sum(diff * diff, axis=2) / self.stds**2
        comp = -0.5 * sq - self.dim * (np.log(self.stds) + 0.5 * LOG_2PI)
        logw = np.log(self.weights + np.finfo(float).tiny)
        a = comp + logw
        m = np.max(a, axis=1, keepdims=True)
        return (m + np.log(np.sum(np.exp(a - m), axis=1, keepdims=True)))

    def sample(self, n, rng):
        idx = rng.choice(self.n_components, size=n, p=self.weights)
        eps = rng.standard_normal((n, self.dim))
        return self.means[idx] + self.stds[idx, None] * eps

    # --- (de)serialization ----------------------------------------------

    def to_dict(self):
        return {
            "type": "gaussian_mixture",
            "weights": self.weights.tolist(),
            "means": self.means.tolist(),
            "stds": self.stds.tolist(),
        }

    @classmethod
    def from_dict(cls, d):
        if d.get("type") != "gaussian_mixture":
            raise ValueError(f"not a gaussian_mixture payload: {d.get('type')!r}")
        return cls(d["weights"], d["means"], d["stds"])


def mixture_sample(mix: GaussianMixture, n, rng):
    return mix.sample(n, rng)


def mixture_log_prob(mix: GaussianMixture, x):
    x = np.asarray(x, float)
    single = x.ndim == 1
    out = mix.log_prob(np.atleast_2d(x))
    return out.item() if single else out[:, 0]


def ring_mixture(n_modes=8, radius=2.0, std=0.05) -> GaussianMixture:
    """Equal-weight isotropic modes on a circle in 2-D."""
    if n_modes < 2:
        raise ValueError("ring needs at least 2 modes")
    if radius <= 0 or std <= 0:
        raise ValueError("radius and std must be positive")
    angles = 2.0 * math.pi * np.arange(n_modes) / n_modes
    means = radius * np.column_stack([np.cos(angles), np.sin(angles)])
    return GaussianMixture(np.full(n_modes, 1.0 / n_modes), means, np.full(n_modes, std))


@dataclass
class ModeCoverage:
    covered: int
    per_mode_fraction: np.ndarray
    high_quality_fraction: float


def mode_coverage(mix: GaussianMixture, samples) -> ModeCoverage:
    """Assign samples to nearest mode and count well-populated, on-mode modes.

    A mode counts as covered when at least max(20, 0.2 * n / n_modes)
    samples sit within 3 of its std from its mean.
    """
    samples = np.atleast_2d(np.asarray(samples, float))
    if samples.shape[0] == 0:
        raise ValueError("mode_coverage requires at least one sample")
    n = samples.shape[0]
    d2 = np.sum((samples[:, None, :] - mix.means[None, :, :]) ** 2, axis=2)
    assigned = np.argmin(d2, axis=1)
    dist = np.sqrt(d2[np.arange(n), assigned])
    close = dist <= 3.0 * mix.stds[assigned]
    threshold = max(20, 0.2 * n / mix.n_components)
    per_mode = np.bincount(assigned, minlength=mix.n_components) / n
    close_counts = np.bincount(
        assigned[close], minlength=mix.n_components
    )
    covered = int(np.sum(close_counts >= threshold))
    return ModeCoverage(covered, per_mode, float(np.mean(close)))


# ---------------------------------------------------------------------------
# CSV import/export
# ---------------------------------------------------------------------------


def _format_value(v: float) -> str:
    return np.format_float_positional(v, unique=True, trim="0")


def samples_to_csv(samples) -> str:
    samples = np.atleast_2d(np.asarray(samples, float))
    header = ",".join(f"x{i}" for i in range(samples.shape[1]))
    lines = [header]
    for row in samples:
        lines.append(",".join(_format_value(v) for v in row))
    return "\n".join(lines) + "\n"


def write_samples_csv(path, samples) -> None:
    atomic_write_bytes(path, samples_to_csv(samples).encode("ascii"))


def read_samples_csv(path) -> np.ndarray:
    with open(path, "r", encoding="ascii") as fh:
        header = fh.readline().strip().split(",")
        data = np.loadtxt(fh, delimiter=",", ndmin=2)
    if data.size == 0:
        data = data.reshape(0, len(header))
    if data.shape[1] != len(header):
        raise ValueError(f"{path}: {data.shape[1]} columns but {len(header)} header fields")
    return data


def write_pstar_json(path, payload: dict) -> None:
    atomic_write_bytes(path, (json.dumps(payload, indent=2) + "\n").encode("ascii"))


def read_pstar_json(path) -> dict:
    with open(path, "r", encoding="ascii") as fh:
        return json.load(fh)
