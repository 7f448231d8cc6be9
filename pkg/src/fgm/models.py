"""The three trainable networks: generator, inference model, density estimator.

Generator: fixed standard-normal prior over the latent space plus a
conditional diagonal Gaussian over observations, so the joint density is
exact and sampling is reparameterized.  Inference model: conditional
diagonal Gaussian over latents.  Density estimator: an affine coupling
flow with exact normalized log-density (a learnable scalar Gaussian
mixture stands in for it when the observation space is 1-D, where
coupling layers degenerate).

All batched methods take (n, d) arrays (or autodiff Nodes) and return
per-row results of shape (n, 1) for log-densities.  Passing a Tape makes
the outputs differentiable w.r.t. the models' parameters.
"""

from __future__ import annotations

import math

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter
from .errors import NumericalError, ShapeError

LOG_2PI = math.log(2.0 * math.pi)

LOG_STD_CLAMP = 7.0
FLOW_SCALE_CLAMP = 4.0


class DiagonalGaussianParams:
    """Mean and log-std rows of a diagonal Gaussian; log_std is clamped at build."""

    __slots__ = ("mean", "log_std")

    def __init__(self, mean, log_std):
        if ad._shape(mean) != ad._shape(log_std):
            raise ShapeError(
                f"mean/log_std shapes differ: {ad._shape(mean)} vs {ad._shape(log_std)}"
            )
        if not np.all(np.isfinite(ad.value_of(mean))):
            raise NumericalError("gaussian mean contains non-finite entries")
        self.mean = mean
        self.log_std = ad.clip(log_std, -LOG_STD_CLAMP, LOG_STD_CLAMP)

    @property
    def dim(self):
        return ad._shape(self.mean)[1]


def gaussian_log_prob(params: DiagonalGaussianParams, v):
    """Row-wise diagonal Gaussian log-density: (n, d) -> (n, 1)."""
    if ad._shape(v) != ad._shape(params.mean):
        raise ShapeError(
            f"value shape {ad._shape(v)} does not match params {ad._shape(params.mean)}"
        )
    d = params.dim
    z = ad.mul(ad.sub(v, params.mean), ad.exp(ad.neg(params.log_std)))
    quad = ad.reduce_sum(ad.mul(z, z), axis=1)
    logdet = ad.reduce_sum(params.log_std, axis=1)
    out = ad.sub(ad.scale(quad, -0.5), logdet)
    return ad.sub(out, np.full(ad._shape(out), 0.5 * d * LOG_2PI))


def gaussian_rsample(params: DiagonalGaussianParams, noise):
    """mean + exp(log_std) * noise, differentiable through both heads."""
    if ad._shape(noise) != ad._shape(params.mean):
        raise ShapeError(
            f"noise shape {ad._shape(noise)} does not match params {ad._shape(params.mean)}"
        )
    return ad.add(params.mean, ad.mul(ad.exp(params.log_std), noise))


def standard_normal_log_prob(v):
    """Row-wise standard normal log-density: (n, d) -> (n, 1)."""
    d = ad._shape(v)[1]
    quad = ad.reduce_sum(ad.mul(v, v), axis=1)
    return ad.sub(ad.scale(quad, -0.5), np.full(ad._shape(quad), 0.5 * d * LOG_2PI))


# ---------------------------------------------------------------------------
# networks
# ---------------------------------------------------------------------------


def _glorot(rng, fan_in, fan_out):
    a = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=(fan_in, fan_out))


class MLP:
    """Fully connected tanh network over row batches."""

    def __init__(self, name, group, in_dim, out_dim, hidden, rng, zero_init_last=False):
        self.name = name
        self.in_dim = in_dim
        self.out_dim = out_dim
        dims = [in_dim, *hidden, out_dim]
        self._weights = []
        self._biases = []
        for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
            last = i == len(dims) - 2
            w0 = np.zeros((a, b)) if (zero_init_last and last) else _glorot(rng, a, b)
            self._weights.append(Parameter(f"{name}.w{i}", group, w0))
            self._biases.append(Parameter(f"{name}.b{i}", group, np.zeros((1, b))))

    def parameters(self):
        out = []
        for w, b in zip(self._weights, self._biases):
            out.extend((w, b))
        return out

    def __call__(self, x, tape=None):
        get = (lambda p: tape.leaf(p)) if tape is not None else (lambda p: p.value)
        n = ad._shape(x)[0]
        h = x
        last = len(self._weights) - 1
        for i, (w, b) in enumerate(zip(self._weights, self._biases)):
            h = ad.add(ad.matmul(h, get(w)), ad.tile_rows(get(b), n))
            if i != last:
                h = ad.tanh(h)
        return h


class MLPConditional:
    """MLP head producing DiagonalGaussianParams (mean and log-std halves)."""

    def __init__(self, name, group, in_dim, out_dim, hidden, rng):
        self.out_dim = out_dim
        self.net = MLP(name, group, in_dim, 2 * out_dim, hidden, rng)

    def parameters(self):
        return self.net.parameters()

    def __call__(self, v, tape=None):
        raw = self.net(v, tape)
        d = self.out_dim
        return DiagonalGaussianParams(
            ad.slice_cols(raw, 0, d), ad.slice_cols(raw, d, 2 * d)
        )


class AffineConditional:
    """Exact affine Gaussian conditional: mean = v W + b, diagonal scale.

    log_sigma may be a scalar (isotropic) or a (1, out_dim) row.  Same
    parameter groups and call surface as MLPConditional, so closed-form
    model instances share the code paths of the trainable ones.
    """

    def __init__(self, name, group, weight, bias, log_sigma):
        weight = ad.as_matrix(weight)
        bias = ad.as_matrix(bias)
        self.out_dim = weight.shape[1]
        ls = ad.as_matrix(log_sigma)
        if ls.shape == (1, 1):
            ls = np.full((1, self.out_dim), ls[0, 0])
        elif ls.shape != (1, self.out_dim):
            raise ShapeError(f"log_sigma must be scalar or (1, {self.out_dim}), got {ls.shape}")
        self.weight = Parameter(f"{name}.w", group, weight)
        self.bias = Parameter(f"{name}.b", group, bias)
        self.log_sigma = Parameter(f"{name}.log_sigma", group, ls)

    def parameters(self):
        return [self.weight, self.bias, self.log_sigma]

    def __call__(self, v, tape=None):
        get = (lambda p: tape.leaf(p)) if tape is not None else (lambda p: p.value)
        n = ad._shape(v)[0]
        mean = ad.add(ad.matmul(v, get(self.weight)), ad.tile_rows(get(self.bias), n))
        log_std = ad.tile_rows(get(self.log_sigma), n)
        return DiagonalGaussianParams(mean, log_std)


class GenerativeModel:
    """Standard-normal prior over latents plus a conditional Gaussian decoder."""

    def __init__(self, latent_dim, obs_dim, conditional):
        self.latent_dim = latent_dim
        self.obs_dim = obs_dim
        self.conditional = conditional

    @classmethod
    def mlp(cls, latent_dim, obs_dim, hidden, rng, name="gen"):
        cond = MLPConditional(f"{name}.cond", "theta", latent_dim, obs_dim, hidden, rng)
        return cls(latent_dim, obs_dim, cond)

    def parameters(self):
        return self.conditional.parameters()

    def conditional_params(self, z, tape=None) -> DiagonalGaussianParams:
        return self.conditional(z, tape)

    def joint_log_prob(self, x, z, tape=None):
        """log p(z) + log p(x | z), row-wise."""
        if ad._shape(x)[1] != self.obs_dim or ad._shape(z)[1] != self.latent_dim:
            raise ShapeError(
                f"joint_log_prob: got x {ad._shape(x)}, z {ad._shape(z)} for dims "
                f"({self.obs_dim}, {self.latent_dim})"
            )
        prior = standard_normal_log_prob(z)
        cond = gaussian_log_prob(self.conditional_params(z, tape), x)
        return ad.add(prior, cond)

    def rsample_x(self, z, noise, tape=None):
        return gaussian_rsample(self.conditional_params(z, tape), noise)

    def sample(self, n, rng):
        """Ancestral sampling; returns (x, z) as plain arrays."""
        z = rng.standard_normal((n, self.latent_dim))
        noise = rng.standard_normal((n, self.obs_dim))
        params = self.conditional_params(z)
        x = params.mean + np.exp(ad.value_of(params.log_std)) * noise
        return x, z


class InferenceModel:
    """Conditional diagonal Gaussian over latents given observations."""

    def __init__(self, obs_dim, latent_dim, conditional):
        self.obs_dim = obs_dim
        self.latent_dim = latent_dim
        self.conditional = conditional

    @classmethod
    def mlp(cls, obs_dim, latent_dim, hidden, rng, name="inf"):
        cond = MLPConditional(f"{name}.cond", "phi", obs_dim, latent_dim, hidden, rng)
        return cls(obs_dim, latent_dim, cond)

    def parameters(self):
        return self.conditional.parameters()

    def conditional_params(self, x, tape=None) -> DiagonalGaussianParams:
        return self.conditional(x, tape)

    def log_prob(self, z, x, tape=None):
        return gaussian_log_prob(self.conditional_params(x, tape), z)

    def rsample(self, x, noise, tape=None):
        return gaussian_rsample(self.conditional_params(x, tape), noise)


class AffineCouplingFlow:
    """Exact-density model over observations built from affine coupling layers.

    Each layer rescales and shifts one half of the coordinates as a function
    of the other half; halves alternate per layer.  Scale outputs are clamped
    to +-FLOW_SCALE_CLAMP so the map stays numerically invertible.
    """

    def __init__(self, dim, n_layers, hidden, rng, name="est"):
        if dim < 2:
            raise ShapeError("coupling flow needs dim >= 2; use ScalarMixtureDensity in 1-D")
        self.dim = dim
        self.split = dim // 2
        self.layers = []
        for i in range(n_layers):
            passive = self.split if i % 2 == 0 else dim - self.split
            active = dim - passive
            self.layers.append(
                MLP(f"{name}.layer{i}", "eta", passive, 2 * active, hidden, rng,
                    zero_init_last=True)
            )

    def parameters(self):
        out = []
        for net in self.layers:
            out.extend(net.parameters())
        return out

    def _halves(self, i, v):
        # even layers: left half passive; odd layers: right half passive
        k = self.split
        left = ad.slice_cols(v, 0, k)
        right = ad.slice_cols(v, k, self.dim)
        return (left, right) if i % 2 == 0 else (right, left)

    def _join(self, i, passive, active):
        return ad.concat_cols([passive, active] if i % 2 == 0 else [active, passive])

    def _scale_shift(self, i, passive, tape):
        raw = self.layers[i](passive, tape)
        active_dim = self.dim - ad._shape(passive)[1]
        s = ad.clip(ad.slice_cols(raw, 0, active_dim), -FLOW_SCALE_CLAMP, FLOW_SCALE_CLAMP)
        t = ad.slice_cols(raw, active_dim, 2 * active_dim)
        return s, t

    def _check_finite(self, i, v):
        if not np.all(np.isfinite(ad.value_of(v))):
            raise NumericalError(f"flow layer {i} produced non-finite values", index=i)

    def forward(self, u, tape=None):
        """Map base-space points to observation space."""
        v = u
        for i in range(len(self.layers)):
            passive, active = self._halves(i, v)
            s, t = self._scale_shift(i, passive, tape)
            active = ad.add(ad.mul(active, ad.exp(s)), t)
            v = self._join(i, passive, active)
            self._check_finite(i, v)
        return v

    def inverse(self, x, tape=None):
        """Map observations back to base space; also returns log|det d(inverse)/dx|."""
        v = x
        logdet = np.zeros((ad._shape(x)[0], 1))
        for i in reversed(range(len(self.layers))):
            passive, active = self._halves(i, v)
            s, t = self._scale_shift(i, passive, tape)
            active = ad.mul(ad.sub(active, t), ad.exp(ad.neg(s)))
            logdet = ad.sub(logdet, ad.reduce_sum(s, axis=1))
            v = self._join(i, passive, active)
            self._check_finite(i, v)
        return v, logdet

    def log_prob(self, x, tape=None):
        if ad._shape(x)[1] != self.dim:
            raise ShapeError(f"flow log_prob: expected (*, {self.dim}), got {ad._shape(x)}")
        u, logdet = self.inverse(x, tape)
        return ad.add(standard_normal_log_prob(u), logdet)


class DiagonalGaussianDensity:
    """Trainable diagonal Gaussian density over observations (group eta).

    The minimal exact-density estimator; enough to represent the data
    density whenever that density is itself axis-aligned Gaussian.
    """

    def __init__(self, dim, name="est", mean=None, log_std=None):
        self.dim = dim
        mean0 = np.zeros((1, dim)) if mean is None else np.asarray(mean, float).reshape(1, dim)
        ls0 = np.zeros((1, dim)) if log_std is None else np.asarray(log_std, float).reshape(1, dim)
        self.mean = Parameter(f"{name}.mean", "eta", mean0)
        self.log_std = Parameter(f"{name}.log_std", "eta", ls0)

    def parameters(self):
        return [self.mean, self.log_std]

    def log_prob(self, x, tape=None):
        get = (lambda p: tape.leaf(p)) if tape is not None else (lambda p: p.value)
        n = ad._shape(x)[0]
        params = DiagonalGaussianParams(
            ad.tile_rows(get(self.mean), n), ad.tile_rows(get(self.log_std), n)
        )
        return gaussian_log_prob(params, x)


class ScalarMixtureDensity:
    """Learnable 1-D Gaussian mixture density (softmax weights), group eta."""

    def __init__(self, n_components, rng, name="est", spread=2.0):
        self.n_components = n_components
        self.dim = 1
        m = n_components
        means0 = np.linspace(-spread, spread, m).reshape(1, m)
        self.logits = Parameter(f"{name}.logits", "eta", np.zeros((1, m)))
        self.means = Parameter(f"{name}.means", "eta", means0 + 0.01 * rng.standard_normal((1, m)))
        self.log_stds = Parameter(f"{name}.log_stds", "eta", np.zeros((1, m)))

    def parameters(self):
        return [self.logits, self.means, self.log_stds]

    def log_prob(self, x, tape=None):
        if ad._shape(x)[1] != 1:
            raise ShapeError(f"ScalarMixtureDensity expects (*, 1) input, got {ad._shape(x)}")
        get = (lambda p: tape.leaf(p)) if tape is not None else (lambda p: p.value)
        n = ad._shape(x)[0]
        m = self.n_components
        logits = get(self.logits)
        log_w = ad.sub(logits, ad.tile_cols(ad.logsumexp_cols(logits), m))
        log_std = ad.clip(get(self.log_stds), -LOG_STD_CLAMP, LOG_STD_CLAMP)
        xs = ad.tile_cols(x, m)
        mu = ad.tile_rows(get(self.means), n)
        z = ad.mul(ad.sub(xs, mu), ad.exp(ad.neg(ad.tile_rows(log_std, n))))
        comp = ad.sub(
            ad.scale(ad.mul(z, z), -0.5),
            ad.add(ad.tile_rows(log_std, n), 0.5 * LOG_2PI * np.ones((n, m))),
        )
        return ad.logsumexp_cols(ad.add(comp, ad.tile_rows(log_w, n)))


# ---------------------------------------------------------------------------
# vector-convenience wrappers over the batched core
# ---------------------------------------------------------------------------


def _as_row(v):
    a = np.asarray(v, dtype=np.float64)
    if a.ndim == 1:
        return a.reshape(1, -1), True
    return a, False


def joint_log_prob_gen(gen: GenerativeModel, x, z):
    """Joint generator log-density; accepts single vectors or row batches."""
    xb, single = _as_row(x)
    zb, _ = _as_row(z)
    out = gen.joint_log_prob(xb, zb)
    return out.item() if single else out[:, 0]


def inference_log_prob(inf: InferenceModel, z, x):
    zb, single = _as_row(z)
    xb, _ = _as_row(x)
    out = inf.log_prob(zb, xb)
    return out.item() if single else out[:, 0]


def inference_sample(inf: InferenceModel, x, noise):
    xb, single = _as_row(x)
    nb, _ = _as_row(noise)
    out = inf.rsample(xb, nb)
    return out[0] if single else out


def flow_log_prob(est, x):
    xb, single = _as_row(x)
    out = est.log_prob(xb)
    return out.item() if single else out[:, 0]


def flow_forward(est: AffineCouplingFlow, u):
    ub, single = _as_row(u)
    out = est.forward(ub)
    return out[0] if single else out


def flow_inverse(est: AffineCouplingFlow, x):
    xb, single = _as_row(x)
    out, _ = est.inverse(xb)
    return out[0] if single else out
