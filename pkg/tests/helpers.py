"""Shared independent oracles: finite differences, quadrature, grid maximization."""

from __future__ import annotations

import numpy as np

from fgm import autodiff as ad


def central_diff(fn, x: float, step: float) -> float:
    return (fn(x + step) - fn(x - step)) / (2.0 * step)


def grad_by_finite_diff(loss_fn, params, step=1e-4):
    """Central-difference gradient of loss_fn() w.r.t. each Parameter in params.

    loss_fn must be a deterministic function of the current parameter values.
    Returns a dict name -> gradient array.
    """
    grads = {}
    for p in params:
        g = np.zeros_like(p.value)
        flat = p.value.ravel()
        gf = g.ravel()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = loss_fn()
            flat[i] = orig - step
            down = loss_fn()
            flat[i] = orig
            gf[i] = (up - down) / (2.0 * step)
        grads[p.name] = g
    return grads


def rel_group_error(grads_a: dict, grads_b: dict) -> float:
    """Norm-relative error between two gradient dicts over the same names."""
    va = np.concatenate([grads_a[k].ravel() for k in sorted(grads_a)])
    vb = np.concatenate([grads_b[k].ravel() for k in sorted(grads_b)])
    denom = max(np.linalg.norm(vb), 1e-12)
    return float(np.linalg.norm(va - vb) / denom)


def tape_grads(root, tape, params) -> dict:
    ad.backward(root)
    return {p.name: tape.grad(p).copy() for p in params}


def gauss_legendre_grid(lo: float, hi: float, n: int):
    """Nodes and weights for Gauss-Legendre quadrature on [lo, hi]."""
    x, w = np.polynomial.legendre.leggauss(n)
    x = 0.5 * (hi - lo) * x + 0.5 * (hi + lo)
    w = 0.5 * (hi - lo) * w
    return x, w


def quad_1d(fn, lo: float, hi: float, n: int = 400) -> float:
    x, w = gauss_legendre_grid(lo, hi, n)
    return float(np.sum(w * fn(x)))


def quad_2d(fn, lo: float, hi: float, n: int = 160) -> float:
    """Integrate fn over [lo, hi]^2; fn takes an (m, 2) array of points."""
    x, w = gauss_legendre_grid(lo, hi, n)
    xx, yy = np.meshgrid(x, x, indexing="ij")
    pts = np.column_stack([xx.ravel(), yy.ravel()])
    ww = np.outer(w, w).ravel()
    return float(np.sum(ww * fn(pts)))


def conjugate_by_grid(f, u: float, x_lo=1e-6, x_hi=1e8, n=400001) -> float:
    """sup_{x > 0} {u x - f(x)} by log-grid search plus parabolic refinement."""
    xs = np.exp(np.linspace(np.log(x_lo), np.log(x_hi), n))
    vals = u * xs - f(xs)
    i = int(np.argmax(vals))
    if 0 < i < n - 1:
        # vertex of the parabola through the three best log-spaced points
        t0, t1, t2 = np.log(xs[i - 1 : i + 2])
        v0, v1, v2 = vals[i - 1 : i + 2]
        num = (t1 - t0) ** 2 * (v1 - v2) - (t1 - t2) ** 2 * (v1 - v0)
        den = (t1 - t0) * (v1 - v2) - (t1 - t2) * (v1 - v0)
        if den != 0.0:
            x_star = np.exp(t1 - 0.5 * num / den)
            return float(max(vals[i], u * x_star - f(np.asarray(x_star))))
    return float(vals[i])


def gaussian_kl(mean1, cov1, mean2, cov2) -> float:
    """KL(N1 || N2) between full-covariance Gaussians."""
    mean1 = np.atleast_1d(np.asarray(mean1, float))
    mean2 = np.atleast_1d(np.asarray(mean2, float))
    cov1 = np.atleast_2d(np.asarray(cov1, float))
    cov2 = np.atleast_2d(np.asarray(cov2, float))
    d = mean1.size
    c2_inv_c1 = np.linalg.solve(cov2, cov1)
    diff = mean2 - mean1
    quad = diff @ np.linalg.solve(cov2, diff)
    _, logdet1 = np.linalg.slogdet(cov1)
    _, logdet2 = np.linalg.slogdet(cov2)
    return 0.5 * (np.trace(c2_inv_c1) + quad - d + logdet2 - logdet1)
