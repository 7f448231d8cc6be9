"""Closed-form linear-Gaussian oracle.

For the model z ~ N(0, I), x | z ~ N(A z + b, sigma^2 I) everything is
conjugate: the marginal over x is N(b, A A^T + sigma^2 I) and the
posterior over z given x is Gaussian with an x-independent covariance.
These exact quantities let tests place the whole system at its known
optimum; the same spec also constructs a trainable generator whose
conditional is frozen-affine so the oracle and the learned models share
one joint-density code path.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import NumericalError, ShapeError
from .models import AffineConditional, GenerativeModel

LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class LinearGaussianSpec:
    """x = A z + b + sigma * eps with standard normal z and eps."""

    A: np.ndarray
    b: np.ndarray
    sigma: float

    def __post_init__(self):
        object.__setattr__(self, "A", np.atleast_2d(np.asarray(self.A, float)))
        object.__setattr__(self, "b", np.asarray(self.b, float).reshape(-1))
        if self.b.shape[0] != self.A.shape[0]:
            raise ShapeError(f"b has dim {self.b.shape[0]}, A maps to dim {self.A.shape[0]}")
        if not np.all(np.isfinite(self.A)) or not np.all(np.isfinite(self.b)):
            raise NumericalError("linear-Gaussian spec contains non-finite entries")
        if not self.sigma > 0:
            raise ValueError(f"sigma must be positive, got {self.sigma}")

    @property
    def obs_dim(self):
        return self.A.shape[0]

    @property
    def latent_dim(self):
        return self.A.shape[1]

    def marginal_cov(self):
        return self.A @ self.A.T + self.sigma**2 * np.eye(self.obs_dim)


class GaussianDensity:
    """Full-covariance Gaussian with exact log-density and sampling."""

    def __init__(self, mean, cov):
        self.mean = np.asarray(mean, float).reshape(-1)
        self.cov = np.atleast_2d(np.asarray(cov, float))
        try:
            self.chol = np.linalg.cholesky(self.cov)
        except np.linalg.LinAlgError as err:
            raise NumericalError(f"covariance is not positive definite: {err}") from err
        self.dim = self.mean.shape[0]
        self._log_norm = -0.5 * self.dim * LOG_2PI - np.sum(np.log(np.diag(self.chol)))

    def log_prob(self, x, tape=None):
        """(n, d) -> (n, 1), matching the estimator interface (evaluation only)."""
        x = np.atleast_2d(np.asarray(x, float))
        diff = x - self.mean
        y = np.linalg.solve(self.chol, diff.T)
        quad = np.sum(y * y, axis=0)
        return (self._log_norm - 0.5 * quad).reshape(-1, 1)

    def sample(self, n, rng):
        eps = rng.standard_normal((n, self.dim))
        return self.mean + eps @ self.chol.T


class AffineGaussianConditional:
    """z | x ~ N(W x + c, cov) with a fixed full covariance.

    Serves both as the exact posterior of a LinearGaussianSpec and as a
    random closed-form inference model in verification runs.  Evaluation
    only; it owns no trainable parameters.
    """

    def __init__(self, weight, offset, cov):
        self.weight = np.atleast_2d(np.asarray(weight, float))  # (d_z, d_x)
        self.offset = np.asarray(offset, float).reshape(-1)
        self.cov = np.atleast_2d(np.asarray(cov, float))
        self.chol = np.linalg.cholesky(self.cov)
        self.latent_dim = self.weight.shape[0]
        self._log_norm = -0.5 * self.latent_dim * LOG_2PI - np.sum(
            np.log(np.diag(self.chol))
        )

    def mean(self, x):
        return np.atleast_2d(x) @ self.weight.T + self.offset

    def log_prob(self, z, x, tape=None):
        diff = np.asarray(z, float) - self.mean(x)
        y = np.linalg.solve(self.chol, diff.T)
        quad = np.sum(y * y, axis=0)
        return (self._log_norm - 0.5 * quad).reshape(-1, 1)

    def rsample(self, x, noise, tape=None):
        return self.mean(x) + np.asarray(noise) @ self.chol.T


def marginal_log_prob(spec: LinearGaussianSpec, x):
    """Log-density of the x-marginal N(b, A A^T + sigma^2 I)."""
    x = np.asarray(x, float)
    single = x.ndim == 1
    density = GaussianDensity(spec.b, spec.marginal_cov())
    out = density.log_prob(np.atleast_2d(x))
    return out.item() if single else out[:, 0]


def marginal_density(spec: LinearGaussianSpec) -> GaussianDensity:
    return GaussianDensity(spec.b, spec.marginal_cov())


def posterior_params(spec: LinearGaussianSpec):
    """Posterior covariance (x-independent) and the affine mean map.

    Returns (weight, offset, cov) with mean(x) = weight @ (x) + offset,
    cov = (I + A^T A / sigma^2)^{-1}.
    """
    d_z = spec.latent_dim
    prec = np.eye(d_z) + spec.A.T @ spec.A / spec.sigma**2
    cov = np.linalg.inv(prec)
    cov = 0.5 * (cov + cov.T)
    weight = cov @ spec.A.T / spec.sigma**2  # (d_z, d_x)
    offset = -weight @ spec.b
    return weight, offset, cov


def posterior(spec: LinearGaussianSpec) -> AffineGaussianConditional:
    """Exact posterior z | x as a full-covariance affine Gaussian."""
    weight, offset, cov = posterior_params(spec)
    return AffineGaussianConditional(weight, offset, cov)


def make_generative_model(spec: LinearGaussianSpec) -> GenerativeModel:
    """Trainable-form generator whose conditional is the frozen affine map."""
    cond = AffineConditional(
        "gen.cond", "theta", spec.A.T, spec.b.reshape(1, -1), [[math.log(spec.sigma)]]
    )
    return GenerativeModel(spec.latent_dim, spec.obs_dim, cond)


def sample_joint(spec: LinearGaussianSpec, n, rng):
    """Ancestral (x, z) draws from the linear-Gaussian joint."""
    z = rng.standard_normal((n, spec.latent_dim))
    eps = rng.standard_normal((n, spec.obs_dim))
    x = z @ spec.A.T + spec.b + spec.sigma * eps
    return x, z
