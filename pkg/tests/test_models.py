import math

import numpy as np
import pytest

from fgm import autodiff as ad
from fgm import models
from fgm.errors import ShapeError

from helpers import grad_by_finite_diff, quad_1d, quad_2d, rel_group_error, tape_grads

LOG_2PI = math.log(2.0 * math.pi)


def diag_params(mean, log_std):
    return models.DiagonalGaussianParams(
        np.atleast_2d(np.asarray(mean, float)), np.atleast_2d(np.asarray(log_std, float))
    )


class TestDiagonalGaussian:
    def test_standard_normal_peak_2d(self):
        p = diag_params([0.0, 0.0], [0.0, 0.0])
        got = models.gaussian_log_prob(p, np.zeros((1, 2)))
        np.testing.assert_allclose(got, [[-LOG_2PI]])

    def test_1d_unit_point(self):
        p = diag_params([0.0], [0.0])
        got = models.gaussian_log_prob(p, np.array([[1.0]]))
        np.testing.assert_allclose(got, [[-0.5 * LOG_2PI - 0.5]])

    def test_normalizes_by_quadrature_3d(self):
        rng = np.random.default_rng(4)
        mean = rng.uniform(-1, 1, size=3)
        log_std = rng.uniform(-0.7, 0.4, size=3)
        p = diag_params(mean, log_std)

        # product quadrature: each axis integrates to one independently
        total = 1.0
        for i in range(3):
            def axis_pdf(t, i=i):
                pts = np.tile(mean, (t.size, 1))
                pts[:, i] = t
                lp = models.gaussian_log_prob(p_of(pts), pts)
                # strip the other two axes' density at their means
                other = sum(
                    -log_std[j] - 0.5 * LOG_2PI for j in range(3) if j != i
                )
                return np.exp(lp[:, 0] - other)

            def p_of(pts):
                return diag_params(
                    np.tile(mean, (pts.shape[0], 1)), np.tile(log_std, (pts.shape[0], 1))
                )

            total *= quad_1d(axis_pdf, mean[i] - 9 * math.exp(log_std[i]),
                             mean[i] + 9 * math.exp(log_std[i]), n=300)
        np.testing.assert_allclose(total, 1.0, atol=1e-6)

    def test_log_std_clamped_at_construction(self):
        p = diag_params([0.0], [12.0])
        np.testing.assert_allclose(ad.value_of(p.log_std), [[7.0]])

    def test_dimension_mismatch_raises(self):
        p = diag_params([0.0, 0.0], [0.0, 0.0])
        with pytest.raises(ShapeError):
            models.gaussian_log_prob(p, np.zeros((1, 3)))
        with pytest.raises(ShapeError):
            models.gaussian_rsample(p, np.zeros((1, 3)))

    def test_rsample_values(self):
        p = diag_params([1.0, 2.0], [0.0, 0.0])
        out = models.gaussian_rsample(p, np.zeros((1, 2)))
        np.testing.assert_allclose(out, [[1.0, 2.0]])
        p = diag_params([0.0], [math.log(2.0)])
        out = models.gaussian_rsample(p, np.ones((1, 1)))
        np.testing.assert_allclose(out, [[2.0]])

    def test_rsample_gradient_wrt_log_std(self):
        ls = ad.Parameter("ls", "phi", np.zeros((1, 1)))
        tape = ad.Tape()
        p = models.DiagonalGaussianParams(np.zeros((1, 1)), tape.leaf(ls))
        out = models.gaussian_rsample(p, np.ones((1, 1)))
        ad.backward(out)
        np.testing.assert_allclose(tape.grad(ls), [[1.0]])  # d/ds e^s at s=0


class TestGenerativeModel:
    def test_identity_conditional_joint_peak(self):
        cond = models.AffineConditional("gen.cond", "theta", [[1.0]], [[0.0]], [[0.0]])
        gen = models.GenerativeModel(1, 1, cond)
        got = models.joint_log_prob_gen(gen, np.zeros(1), np.zeros(1))
        np.testing.assert_allclose(got, -LOG_2PI)

    def test_joint_is_prior_plus_conditional_termwise(self):
        rng = np.random.default_rng(9)
        gen = models.GenerativeModel.mlp(2, 3, (8,), rng)
        x = rng.standard_normal((5, 3))
        z = rng.standard_normal((5, 2))
        joint = gen.joint_log_prob(x, z)
        prior = models.standard_normal_log_prob(z)
        cond = models.gaussian_log_prob(gen.conditional_params(z), x)
        np.testing.assert_allclose(joint, prior + cond, rtol=1e-12)

    def test_sampling_moments(self):
        cond = models.AffineConditional("gen.cond", "theta", [[1.0], [0.5]], [[0.3]], [[math.log(0.2)]])
        gen = models.GenerativeModel(2, 1, cond)
        x, z = gen.sample(200_000, np.random.default_rng(0))
        # x = z1 + 0.5 z2 + 0.3 + 0.2 eps -> var 1.29, mean 0.3
        assert abs(x.mean() - 0.3) < 3 * math.sqrt(1.29 / 200_000)
        np.testing.assert_allclose(x.var(), 1.0 + 0.25 + 0.04, rtol=0.02)


class TestInferenceModel:
    def test_constant_conditional_log_prob(self):
        cond = models.AffineConditional("inf.cond", "phi", np.zeros((1, 1)), [[0.0]], [[0.0]])
        inf = models.InferenceModel(1, 1, cond)
        got = models.inference_log_prob(inf, np.zeros(1), np.zeros(1))
        np.testing.assert_allclose(got, -0.5 * LOG_2PI)

    def test_sample_with_zero_noise_is_mean(self):
        rng = np.random.default_rng(2)
        inf = models.InferenceModel.mlp(2, 3, (8, 8), rng)
        x = rng.standard_normal((4, 2))
        z = models.inference_sample(inf, x, np.zeros((4, 3)))
        np.testing.assert_allclose(z, ad.value_of(inf.conditional_params(x).mean))

    def test_log_prob_of_own_rsample_differentiable(self):
        rng = np.random.default_rng(7)
        inf = models.InferenceModel.mlp(2, 2, (8,), rng)
        x = rng.standard_normal((6, 2))
        noise = rng.standard_normal((6, 2))
        params = inf.parameters()

        def loss(tape=None):
            z = inf.rsample(x, noise, tape)
            lp = inf.log_prob(z, x, tape)
            return ad.reduce_mean(lp)

        assert np.isfinite(ad.value_of(loss()).item())
        fd = grad_by_finite_diff(lambda: ad.value_of(loss()).item(), params, step=1e-4)
        tape = ad.Tape()
        got = tape_grads(loss(tape), tape, params)
        assert rel_group_error(got, fd) <= 1e-5


class TestCouplingFlow:
    def test_zero_initialized_flow_is_identity(self):
        rng = np.random.default_rng(1)
        est = models.AffineCouplingFlow(2, 4, (16,), rng)
        u = rng.standard_normal((8, 2))
        np.testing.assert_allclose(models.flow_forward(est, u), u)
        got = models.flow_log_prob(est, np.zeros((1, 2)))
        np.testing.assert_allclose(got, [-LOG_2PI])

    def test_single_layer_hand_values(self):
        # one layer, s = log 2 and t = 1 on the active coordinate at u = 0
        rng = np.random.default_rng(0)
        est = models.AffineCouplingFlow(2, 1, (4,), rng)
        net = est.layers[0]
        for p in net.parameters():
            p.value[...] = 0.0
        net._biases[-1].value[...] = np.array([[math.log(2.0), 1.0]])
        out = models.flow_forward(est, np.zeros((1, 2)))
        np.testing.assert_allclose(out, [[0.0, 1.0]])  # 0 * 2 + 1

    def _random_flow(self, rng, dim=2, n_layers=4, scale=0.1):
        # hidden layers keep their init; only the zero-initialized heads move,
        # so the pushforward stays concentrated (a "small" random flow)
        est = models.AffineCouplingFlow(dim, n_layers, (16,), rng)
        for net in est.layers:
            for p in (net._weights[-1], net._biases[-1]):
                p.value[...] = scale * rng.standard_normal(p.value.shape)
        return est

    def test_inverse_forward_roundtrip(self):
        rng = np.random.default_rng(5)
        est = self._random_flow(rng)
        u = rng.standard_normal((50, 2))
        x = models.flow_forward(est, u)
        back = models.flow_inverse(est, x)
        assert np.max(np.abs(back - u)) <= 1e-9
        x0 = rng.standard_normal((50, 2))
        again = models.flow_forward(est, models.flow_inverse(est, x0))
        assert np.max(np.abs(again - x0)) <= 1e-9

    def test_roundtrip_with_clamped_scales(self):
        # large weights drive scale outputs into the +-4 clamp; the map must
        # still invert because forward and inverse see the same clipped s
        rng = np.random.default_rng(17)
        est = models.AffineCouplingFlow(2, 4, (16,), rng)
        for p in est.parameters():
            p.value[...] = 1.5 * rng.standard_normal(p.value.shape)
        u = rng.standard_normal((100, 2))
        x = models.flow_forward(est, u)
        back = models.flow_inverse(est, x)
        assert np.max(np.abs(back - u)) <= 1e-9

    def test_log_prob_normalizes_by_quadrature(self):
        rng = np.random.default_rng(6)
        for _ in range(5):
            est = self._random_flow(rng)
            mass = quad_2d(lambda pts: np.exp(est.log_prob(pts)[:, 0]), -8.0, 8.0, n=160)
            np.testing.assert_allclose(mass, 1.0, atol=1e-3)

    def test_density_change_matches_finite_difference_jacobian(self):
        # log p(x) = log p_base(u(x)) + log|det J_inv|; check J_inv numerically
        rng = np.random.default_rng(8)
        est = self._random_flow(rng)
        x0 = rng.standard_normal((1, 2))

        def inv(x):
            u, _ = est.inverse(x)
            return u[0]

        eps = 1e-6
        jac = np.zeros((2, 2))
        for j in range(2):
            dx = np.zeros((1, 2))
            dx[0, j] = eps
            jac[:, j] = (inv(x0 + dx) - inv(x0 - dx)) / (2 * eps)
        _, logdet_fd = np.linalg.slogdet(jac)
        _, logdet = est.inverse(x0)
        np.testing.assert_allclose(logdet.item(), logdet_fd, atol=1e-6)

    def test_log_prob_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(12)
        est = self._random_flow(rng, n_layers=2)
        x = rng.standard_normal((5, 2))
        params = est.parameters()

        def loss(tape=None):
            return ad.reduce_mean(est.log_prob(x, tape))

        fd = grad_by_finite_diff(lambda: ad.value_of(loss()).item(), params, step=1e-4)
        tape = ad.Tape()
        got = tape_grads(loss(tape), tape, params)
        assert rel_group_error(got, fd) <= 1e-5

    def test_rejects_1d(self):
        with pytest.raises(ShapeError):
            models.AffineCouplingFlow(1, 2, (8,), np.random.default_rng(0))


class TestScalarMixtureDensity:
    def test_normalizes_by_quadrature(self):
        rng = np.random.default_rng(3)
        est = models.ScalarMixtureDensity(4, rng)
        est.logits.value[...] = rng.standard_normal((1, 4))
        est.means.value[...] = np.array([[-2.0, -0.5, 0.7, 2.5]])
        est.log_stds.value[...] = rng.uniform(-0.8, 0.3, (1, 4))
        mass = quad_1d(
            lambda t: np.exp(est.log_prob(t.reshape(-1, 1))[:, 0]), -15.0, 15.0, n=600
        )
        np.testing.assert_allclose(mass, 1.0, atol=1e-9)

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(13)
        est = models.ScalarMixtureDensity(3, rng)
        x = rng.standard_normal((7, 1))
        params = est.parameters()

        def loss(tape=None):
            return ad.reduce_mean(est.log_prob(x, tape))

        fd = grad_by_finite_diff(lambda: ad.value_of(loss()).item(), params, step=1e-4)
        tape = ad.Tape()
        got = tape_grads(loss(tape), tape, params)
        assert rel_group_error(got, fd) <= 1e-5


def test_mlp_head_log_densities_always_finite():
    rng = np.random.default_rng(21)
    gen = models.GenerativeModel.mlp(2, 2, (16,), rng)
    # blow up the last-layer weights so raw log-std would leave [-7, 7]
    for p in gen.parameters():
        p.value *= 40.0
    z = 100.0 * rng.standard_normal((20, 2))
    x = 100.0 * rng.standard_normal((20, 2))
    lp = gen.joint_log_prob(x, z)
    assert np.all(np.isfinite(lp))
