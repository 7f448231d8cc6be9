"""Monte Carlo estimators of the minimax objective and its exact-density oracles.

The training objective is

    mean over data pairs   of  f'(p_est(x) q(z|x) / p_gen(x, z))
  - mean over model pairs  of  f*(f'(p_est(x) q(z|x) / p_gen(x, z)))

with both expectations over the same batch size and all samples
reparameterized, so one backward pass yields gradients for every group.
The oracle estimators (joint f-divergence and the marginal adversarial
form) need the true data density and exist for verification and
diagnostics only; training never evaluates the data density.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import autodiff as ad
from .analytic import LinearGaussianSpec, marginal_density
from .errors import NumericalError
from .fdiv import KERNELS, FDivergenceKernel
from .models import gaussian_log_prob, gaussian_rsample, standard_normal_log_prob


@dataclass
class ObjectiveEstimate:
    """Value of the minimax objective with per-term standard errors."""

    term1: float
    term2: float
    total: float
    n_samples: int
    se_term1: float
    se_term2: float
    node: ad.Node | None = None  # scalar tape node when built differentiably

    @property
    def se_total(self) -> float:
        return float(np.hypot(self.se_term1, self.se_term2))


class MeanEstimate(NamedTuple):
    value: float
    se: float
    n: int


def _mean_and_se(values: np.ndarray, what: str) -> MeanEstimate:
    values = values.reshape(-1)
    bad = ~np.isfinite(values)
    if np.any(bad):
        i = int(np.nonzero(bad)[0][0])
        raise NumericalError(
            f"{what}: non-finite value at sample {i}", index=i, value=values[i]
        )
    n = values.size
    se = float(values.std(ddof=1) / np.sqrt(n)) if n > 1 else 0.0
    return MeanEstimate(float(values.mean()), se, n)


def log_ratio(gen, inf, est, x, z, tape=None):
    """Row-wise log of p_est(x) q(z|x) / p_gen(x, z); differentiable on a tape."""
    num = ad.add(est.log_prob(x, tape), inf.log_prob(z, x, tape))
    return ad.sub(num, gen.joint_log_prob(x, z, tape))


def _composite(kernel, r, side):
    try:
        return kernel.composite_from_logratio(r)
    except NumericalError as err:
        raise NumericalError(
            f"{side} expectation: {err} (sample {err.index})",
            index=err.index,
            value=err.value,
        ) from err


def estimate_minimax(
    kernel: FDivergenceKernel,
    gen,
    inf,
    est,
    data_batch: np.ndarray,
    rng: np.random.Generator,
    tape: ad.Tape | None = None,
) -> ObjectiveEstimate:
    """One two-sided Monte Carlo evaluation of the minimax objective.

    Uses the same batch size K for the data-side and model-side means.  With
    a tape, the returned .node is differentiable w.r.t. all three groups
    (latent draws enter only through reparameterized samples).
    """
    x_data = np.atleast_2d(np.asarray(data_batch, dtype=np.float64))
    k = x_data.shape[0]
    if k == 0:
        raise ValueError("estimate_minimax requires a nonempty data batch")
    d_z, d_x = gen.latent_dim, gen.obs_dim
    # diagonal-head models expose their conditional parameters, letting the
    # sampling and density evaluations share one network pass
    inf_params = getattr(inf, "conditional_params", None)

    eps_z = rng.standard_normal((k, d_z))
    if inf_params is not None:
        q_data = inf_params(x_data, tape)
        z_data = gaussian_rsample(q_data, eps_z)
        log_q_data = gaussian_log_prob(q_data, z_data)
    else:
        z_data = inf.rsample(x_data, eps_z, tape)
        log_q_data = inf.log_prob(z_data, x_data, tape)
    r_data = ad.sub(
        ad.add(est.log_prob(x_data, tape), log_q_data),
        gen.joint_log_prob(x_data, z_data, tape),
    )
    t1, _ = _composite(kernel, r_data, "data-side")

    z_gen = rng.standard_normal((k, d_z))
    eps_x = rng.standard_normal((k, d_x))
    gen_params = getattr(gen, "conditional_params", None)
    if gen_params is not None:
        p_gen = gen_params(z_gen, tape)
        x_gen = gaussian_rsample(p_gen, eps_x)
        log_joint_gen = ad.add(
            standard_normal_log_prob(z_gen), gaussian_log_prob(p_gen, x_gen)
        )
    else:
        x_gen = gen.rsample_x(z_gen, eps_x, tape)
        log_joint_gen = gen.joint_log_prob(x_gen, z_gen, tape)
    r_gen = ad.sub(
        ad.add(est.log_prob(x_gen, tape), inf.log_prob(z_gen, x_gen, tape)),
        log_joint_gen,
    )
    _, t2 = _composite(kernel, r_gen, "model-side")

    m1 = _mean_and_se(ad.value_of(t1), "data-side term")
    m2 = _mean_and_se(ad.value_of(t2), "model-side term")
    node = None
    if tape is not None:
        node = ad.sub(ad.reduce_mean(t1), ad.reduce_mean(t2))
    return ObjectiveEstimate(
        term1=m1.value,
        term2=m2.value,
        total=m1.value - m2.value,
        n_samples=k,
        se_term1=m1.se,
        se_term2=m2.se,
        node=node,
    )


def estimate_joint_divergence(
    kernel: FDivergenceKernel,
    gen,
    inf,
    pstar,
    n: int,
    rng: np.random.Generator,
) -> MeanEstimate:
    """f-divergence between data x inference joint and the generator joint.

    Monte Carlo over generator pairs of f(p*(x) q(z|x) / p_gen(x, z)).
    Needs the exact data density; verification/diagnostic use only.
    """
    z = rng.standard_normal((n, gen.latent_dim))
    eps = rng.standard_normal((n, gen.obs_dim))
    x = gen.rsample_x(z, eps)
    r = (
        ad.value_of(pstar.log_prob(x))
        + ad.value_of(inf.log_prob(z, x))
        - ad.value_of(gen.joint_log_prob(x, z))
    )
    with np.errstate(over="ignore"):
        vals = kernel.f_from_logratio(r)
    return _mean_and_se(vals, "joint-divergence integrand")


def estimate_adversarial(
    kernel: FDivergenceKernel,
    spec: LinearGaussianSpec,
    est,
    pstar,
    n: int,
    rng: np.random.Generator,
) -> MeanEstimate:
    """Marginal adversarial objective with the induced critic.

    The critic role is played by T(x) = f'(p_est(x) / p_gen_marginal(x)),
    so the generator must be a linear-Gaussian instance whose x-marginal is
    available in closed form.  Returns mean_data[T] - mean_model[f*(T)] with
    the combined standard error.
    """
    marginal = marginal_density(spec)

    x_real = pstar.sample(n, rng)
    rho_real = ad.value_of(est.log_prob(x_real)) - marginal.log_prob(x_real)
    t1, _ = _composite(kernel, rho_real, "data-side")

    x_model = marginal.sample(n, rng)
    rho_model = ad.value_of(est.log_prob(x_model)) - marginal.log_prob(x_model)
    _, t2 = _composite(kernel, rho_model, "model-side")

    m1 = _mean_and_se(t1, "adversarial data term")
    m2 = _mean_and_se(t2, "adversarial model term")
    return MeanEstimate(m1.value - m2.value, float(np.hypot(m1.se, m2.se)), n)


class DecouplingCheck(NamedTuple):
    lhs: float
    rhs: float
    se: float


def kl_decoupling_check(gen, inf, est, pstar, n, rng) -> DecouplingCheck:
    """Identity specific to the KL kernel: the minimax objective equals the
    joint KL divergence minus KL(data || density estimator).

    lhs and rhs are estimated from independent sample sets; se combines all
    three Monte Carlo errors.
    """
    kernel = KERNELS["kl"]
    data_batch = pstar.sample(n, rng)
    lm = estimate_minimax(kernel, gen, inf, est, data_batch, rng)
    lv = estimate_joint_divergence(kernel, gen, inf, pstar, n, rng)
    x = pstar.sample(n, rng)
    kl_vals = ad.value_of(pstar.log_prob(x)).reshape(-1) - ad.value_of(
        est.log_prob(x)
    ).reshape(-1)
    kl = _mean_and_se(kl_vals, "KL(data || estimator) integrand")
    se = float(np.sqrt(lm.se_total**2 + lv.se**2 + kl.se**2))
    return DecouplingCheck(lm.total, lv.value - kl.value, se)
