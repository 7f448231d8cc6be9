"""Closed-form f-divergence kernels.

Each kernel bundles a convex generator f with f(1) = 0, its derivative f',
the Fenchel conjugate f*(u) = sup_{x >= 0} {ux - f(x)}, and a numerically
stable composite that evaluates (f'(x), f*(f'(x))) directly from a
log-ratio r = log x.  The composites never form e^r unless the closed form
genuinely needs it, so joint densities that underflow as raw ratios stay
usable.

f and its derivative/conjugate operate on floats or ndarrays; the
composites additionally accept autodiff Nodes so they can sit inside a
differentiable objective.
"""

from __future__ import annotations

import math

import numpy as np

from . import autodiff as ad
from .errors import DomainError, NumericalError

LOG2 = math.log(2.0)


def _check_positive(x):
    a = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(a)) or np.any(a <= 0.0):
        raise DomainError("f-divergence generator requires finite x > 0")
    return a


def _check_logratio(r):
    v = ad.value_of(r)
    if not np.all(np.isfinite(v)):
        raise DomainError("composite_from_logratio requires finite log-ratio")
    return r


def _check_composite_finite(kernel_name, r, t1, t2):
    rv = ad.value_of(r)
    for label, t in (("f'", t1), ("f*(f')", t2)):
        tv = ad.value_of(t)
        bad = ~np.isfinite(tv)
        if np.any(bad):
            idx = tuple(int(i[0]) for i in np.nonzero(bad))
            raise NumericalError(
                f"{kernel_name}: {label} overflowed at log-ratio r={rv[bad][0]:g}",
                index=idx[0] if idx else None,
                value=float(rv[bad][0]),
            )


class FDivergenceKernel:
    """One named f-divergence; subclasses supply the closed forms.

    `conj_domain_sup` is the supremum of the conjugate's domain (+inf when
    the conjugate is finite on all of R).
    """

    name: str = ""
    conj_domain_sup: float = math.inf

    def f(self, x):
        raise NotImplementedError

    def f_prime(self, x):
        raise NotImplementedError

    def f_conj(self, u):
        raise NotImplementedError

    def _conj_domain_check(self, u):
        a = np.asarray(u, dtype=np.float64)
        if not np.all(np.isfinite(a)):
            raise DomainError(f"{self.name}: conjugate argument must be finite")
        if np.any(a >= self.conj_domain_sup):
            raise DomainError(
                f"{self.name}: conjugate requires u < {self.conj_domain_sup:g}; "
                f"got u = {float(np.max(a)):g}"
            )
        return a

    def composite_from_logratio(self, r):
        """(f'(e^r), f*(f'(e^r))) evaluated stably from the log-ratio r."""
        raise NotImplementedError

    def f_from_logratio(self, r):
        """f(e^r) for plain arrays, stable down to r -> -inf (limit conventions)."""
        raise NotImplementedError

    def __repr__(self):
        return f"<{type(self).__name__} {self.name}>"


class KL(FDivergenceKernel):
    """f(x) = x log x."""

    name = "KL"
    conj_domain_sup = math.inf

    def f(self, x):
        x = _check_positive(x)
        return x * np.log(x)

    def f_prime(self, x):
        x = _check_positive(x)
        return np.log(x) + 1.0

    def f_conj(self, u):
        u = self._conj_domain_check(u)
        return np.exp(u - 1.0)

    def composite_from_logratio(self, r):
        _check_logratio(r)
        t1 = ad.add(r, np.full(ad.value_of(r).shape, 1.0))
        with np.errstate(over="ignore"):
            t2 = ad.exp(r)
        _check_composite_finite(self.name, r, t1, t2)
        return t1, t2

    def f_from_logratio(self, r):
        r = np.asarray(r, dtype=np.float64)
        return r * np.exp(r)


class ReverseKL(FDivergenceKernel):
    """f(x) = -log x."""

    name = "ReverseKL"
    conj_domain_sup = 0.0

    def f(self, x):
        x = _check_positive(x)
        return -np.log(x)

    def f_prime(self, x):
        x = _check_positive(x)
        return -1.0 / x

    def f_conj(self, u):
        u = self._conj_domain_check(u)
        return -1.0 - np.log(-u)

    def composite_from_logratio(self, r):
        _check_logratio(r)
        with np.errstate(over="ignore"):
            t1 = ad.neg(ad.exp(ad.neg(r)))
        t2 = ad.sub(r, np.full(ad.value_of(r).shape, 1.0))
        _check_composite_finite(self.name, r, t1, t2)
        return t1, t2

    def f_from_logratio(self, r):
        return -np.asarray(r, dtype=np.float64)


class JensenShannon(FDivergenceKernel):
    """f(x) = x log x - (x + 1) log((x + 1) / 2)."""

    name = "JensenShannon"
    conj_domain_sup = LOG2

    def f(self, x):
        x = _check_positive(x)
        return x * np.log(x) - (x + 1.0) * np.log((x + 1.0) / 2.0)

    def f_prime(self, x):
        x = _check_positive(x)
        return np.log(2.0 * x / (x + 1.0))

    def f_conj(self, u):
        # -log(2 - e^u) = -log2 - log(-expm1(u - log2)), stable near u -> log2
        u = self._conj_domain_check(u)
        return -LOG2 - np.log(-np.expm1(u - LOG2))

    def composite_from_logratio(self, r):
        # f'(e^r) = log 2 + r - softplus(r); f*(f'(e^r)) = softplus(r) - log 2
        _check_logratio(r)
        sp = ad.softplus(r)
        log2 = np.full(ad.value_of(r).shape, LOG2)
        t1 = ad.sub(ad.add(r, log2), sp)
        t2 = ad.sub(sp, log2)
        _check_composite_finite(self.name, r, t1, t2)
        return t1, t2

    def f_from_logratio(self, r):
        # x log x - (x + 1) log((x + 1)/2) = x (r + log2 - softplus(r))
        #                                    - (softplus(r) - log2)
        r = np.asarray(r, dtype=np.float64)
        sp = ad._softplus(r)
        return np.exp(r) * (r + LOG2 - sp) - (sp - LOG2)


class PearsonChi2(FDivergenceKernel):
    """f(x) = (x - 1)^2."""

    name = "PearsonChi2"
    conj_domain_sup = math.inf

    def f(self, x):
        x = _check_positive(x)
        return (x - 1.0) ** 2

    def f_prime(self, x):
        x = _check_positive(x)
        return 2.0 * (x - 1.0)

    def f_conj(self, u):
        u = self._conj_domain_check(u)
        return u * u / 4.0 + u

    def composite_from_logratio(self, r):
        _check_logratio(r)
        ones = np.full(ad.value_of(r).shape, 1.0)
        with np.errstate(over="ignore"):
            t1 = ad.scale(ad.sub(ad.exp(r), ones), 2.0)
            t2 = ad.sub(ad.exp(ad.scale(r, 2.0)), ones)
        _check_composite_finite(self.name, r, t1, t2)
        return t1, t2

    def f_from_logratio(self, r):
        return np.expm1(np.asarray(r, dtype=np.float64)) ** 2


class SquaredHellinger(FDivergenceKernel):
    """f(x) = (sqrt(x) - 1)^2."""

    name = "SquaredHellinger"
    conj_domain_sup = 1.0

    def f(self, x):
        x = _check_positive(x)
        return (np.sqrt(x) - 1.0) ** 2

    def f_prime(self, x):
        x = _check_positive(x)
        return 1.0 - 1.0 / np.sqrt(x)

    def f_conj(self, u):
        u = self._conj_domain_check(u)
        return u / (1.0 - u)

    def composite_from_logratio(self, r):
        _check_logratio(r)
        ones = np.full(ad.value_of(r).shape, 1.0)
        with np.errstate(over="ignore"):
            t1 = ad.sub(ones, ad.exp(ad.scale(r, -0.5)))
            t2 = ad.sub(ad.exp(ad.scale(r, 0.5)), ones)
        _check_composite_finite(self.name, r, t1, t2)
        return t1, t2

    def f_from_logratio(self, r):
        return np.expm1(0.5 * np.asarray(r, dtype=np.float64)) ** 2


KERNELS: dict[str, FDivergenceKernel] = {
    "kl": KL(),
    "reverse_kl": ReverseKL(),
    "js": JensenShannon(),
    "chi2": PearsonChi2(),
    "hellinger2": SquaredHellinger(),
}

KERNEL_NAMES = tuple(KERNELS)


def kernel_by_name(name: str) -> FDivergenceKernel:
    """Look up a kernel by its config name (case-insensitive)."""
    key = name.strip().lower()
    if key not in KERNELS:
        raise DomainError(
            f"unknown f-divergence kernel {name!r}; valid names: {', '.join(KERNELS)}"
        )
    return KERNELS[key]


def f_value(kernel: FDivergenceKernel, x):
    return kernel.f(x)


def f_prime(kernel: FDivergenceKernel, x):
    return kernel.f_prime(x)


def f_conj(kernel: FDivergenceKernel, u):
    return kernel.f_conj(u)


def composite_from_logratio(kernel: FDivergenceKernel, r):
    return kernel.composite_from_logratio(r)
