import math

import numpy as np
import pytest

from fgm import analytic, data, models, objective, trainer
from fgm.autodiff import load_checkpoint
from fgm.errors import NumericalError
from fgm.fdiv import KERNELS


def diag_spec():
    # diagonal map keeps posterior and marginal axis-aligned, so the optimum
    # triple is exactly representable by the trainable diagonal models
    return analytic.LinearGaussianSpec([[0.8, 0.0], [0.0, 1.3]], [0.1, -0.2], 0.9)


def optimum_triple(spec):
    gen = analytic.make_generative_model(spec)
    weight, offset, cov = analytic.posterior_params(spec)
    inf = models.InferenceModel(
        spec.obs_dim,
        spec.latent_dim,
        models.AffineConditional(
            "inf.cond", "phi", weight.T, offset.reshape(1, -1),
            (0.5 * np.log(np.diag(cov))).reshape(1, -1),
        ),
    )
    marg_cov = spec.marginal_cov()
    est = models.DiagonalGaussianDensity(
        spec.obs_dim, mean=spec.b, log_std=0.5 * np.log(np.diag(marg_cov))
    )
    return gen, inf, est


def fresh_models(seed, d_x=2, d_z=2, hidden=(16,), flow_layers=4):
    rng = np.random.default_rng(seed)
    gen = models.GenerativeModel.mlp(d_z, d_x, hidden, rng)
    inf = models.InferenceModel.mlp(d_x, d_z, hidden, rng)
    est = models.AffineCouplingFlow(d_x, flow_layers, hidden, rng)
    return gen, inf, est


class TestAdam:
    def test_zero_gradient_leaves_parameters_unchanged(self):
        p = models.MLP("m", "theta", 2, 2, (4,), np.random.default_rng(0)).parameters()
        before = [q.value.copy() for q in p]
        state = trainer.AdamState(p)
        trainer.adam_step(state, p, {q.name: np.zeros_like(q.value) for q in p},
                          1e-3, 0.5, 0.999, 1e-8)
        for q, b in zip(p, before):
            np.testing.assert_array_equal(q.value, b)

    def test_first_step_magnitude_is_lr_times_sign(self):
        # bias correction makes m_hat = g and v_hat = g^2 at t = 1, so the
        # update is lr * g / (|g| + eps) ~ lr * sign(g)
        from fgm.autodiff import Parameter

        p = Parameter("w", "theta", np.array([[1.0, -2.0]]))
        g = np.array([[0.3, -0.7]])
        state = trainer.AdamState([p])
        trainer.adam_step(state, [p], {"w": g}, 1e-3, 0.5, 0.999, 1e-8)
        np.testing.assert_allclose(
            p.value, [[1.0 - 1e-3, -2.0 + 1e-3]], atol=1e-9
        )

    def test_identical_seeds_identical_trajectories(self):
        mix = data.ring_mixture(4, 1.5, 0.2)
        dataset = mix.sample(1024, np.random.default_rng(0))
        cfg = trainer.TrainConfig(kernel="js", iterations=20, batch_size=64,
                                  eval_every=5, seed=7)
        runs = []
        for _ in range(2):
            gen, inf, est = fresh_models(seed=1)
            trainer.train(cfg, dataset, gen, inf, est)
            runs.append(np.concatenate([p.value.ravel() for p in gen.parameters()]))
        assert np.array_equal(runs[0], runs[1])


class TestTrainLoop:
    def test_zero_iterations_returns_models_unchanged(self):
        gen, inf, est = fresh_models(seed=2)
        before = {
            p.name: p.value.copy()
            for m in (gen, inf, est)
            for p in m.parameters()
        }
        dataset = np.random.default_rng(3).standard_normal((300, 2))
        cfg = trainer.TrainConfig(iterations=0, batch_size=300, eval_every=10)
        result = trainer.train(cfg, dataset, gen, inf, est)
        assert result.metrics == []
        for m in (gen, inf, est):
            for p in m.parameters():
                np.testing.assert_array_equal(p.value, before[p.name])

    def test_one_iteration_one_adam_application_per_group(self):
        gen, inf, est = fresh_models(seed=4)
        dataset = np.random.default_rng(5).standard_normal((300, 2))
        cfg = trainer.TrainConfig(iterations=1, batch_size=64, eval_every=1)
        result = trainer.train(cfg, dataset, gen, inf, est)
        assert result.adam_applications == {"theta": 1, "phi": 1, "eta": 1}

    def test_eta_refresh_steps_are_counted(self):
        gen, inf, est = fresh_models(seed=6)
        dataset = np.random.default_rng(7).standard_normal((500, 2))
        cfg = trainer.TrainConfig(iterations=3, batch_size=64, eval_every=3,
                                  eta_steps_per_iter=3)
        result = trainer.train(cfg, dataset, gen, inf, est)
        assert result.adam_applications == {"theta": 3, "phi": 3, "eta": 9}

    def test_metrics_csv_is_byte_identical_across_runs(self):
        mix = data.ring_mixture(4, 1.5, 0.2)
        dataset = mix.sample(1024, np.random.default_rng(8))
        cfg = trainer.TrainConfig(kernel="kl", iterations=12, batch_size=64,
                                  eval_every=4, seed=3)
        outputs = []
        for _ in range(2):
            gen, inf, est = fresh_models(seed=9)
            result = trainer.train(cfg, dataset, gen, inf, est, pstar=mix)
            outputs.append(trainer.metrics_to_csv(result.metrics))
        assert outputs[0] == outputs[1]
        header = outputs[0].splitlines()[0]
        assert header == (
            "iter,lm_total,term1,term2,logp_eta_holdout,mode_coverage,"
            "gnorm_theta,gnorm_phi,gnorm_eta,wall_ms"
        )
        assert len(outputs[0].splitlines()) == 1 + 3  # evals at 4, 8, 12

    def test_holdout_split_is_deterministic_and_disjoint(self):
        dataset = np.arange(200, dtype=float).reshape(100, 2)
        a_train, a_hold = trainer.holdout_split(dataset, 0.1, seed=5)
        b_train, b_hold = trainer.holdout_split(dataset, 0.1, seed=5)
        np.testing.assert_array_equal(a_hold, b_hold)
        np.testing.assert_array_equal(a_train, b_train)
        assert a_hold.shape[0] == 10
        both = {tuple(r) for r in a_hold} & {tuple(r) for r in a_train}
        assert not both

    def test_stationary_at_analytic_optimum(self):
        # initialized at the known optimum with a small lr, the objective
        # stays at zero and parameters drift no faster than the step size
        spec = diag_spec()
        gen, inf, est = optimum_triple(spec)
        before = {
            p.name: p.value.copy()
            for m in (gen, inf, est)
            for p in m.parameters()
        }
        pstar = analytic.marginal_density(spec)
        dataset = pstar.sample(4096, np.random.default_rng(10))
        lr = 1e-4
        iters = 100
        cfg = trainer.TrainConfig(kernel="kl", iterations=iters, batch_size=256,
                                  lr_theta_phi=lr, lr_eta=lr, eval_every=10, seed=11)
        result = trainer.train(cfg, dataset, gen, inf, est)
        for row in result.metrics:
            assert abs(row.lm_total) <= 0.05
        drift = max(
            np.max(np.abs(p.value - before[p.name]))
            for m in (gen, inf, est)
            for p in m.parameters()
        )
        assert drift <= 3.0 * lr * iters

    def test_eta_only_ascent_increases_objective(self):
        # frozen generator and inference (negligible lr), trainable estimator:
        # 2000 eta ascents must raise a large-sample objective estimate by
        # far more than its Monte Carlo error
        spec = diag_spec()
        gen, inf, _ = optimum_triple(spec)
        est = models.AffineCouplingFlow(2, 4, (16,), np.random.default_rng(12))
        pstar = analytic.marginal_density(spec)
        rng = np.random.default_rng(13)
        dataset = pstar.sample(8000, rng)

        def big_estimate():
            eval_rng = np.random.default_rng(14)
            batch = pstar.sample(50_000, eval_rng)
            return objective.estimate_minimax(
                KERNELS["kl"], gen, inf, est, batch, eval_rng
            )

        before = big_estimate()
        cfg = trainer.TrainConfig(kernel="kl", iterations=2000, batch_size=128,
                                  lr_theta_phi=1e-12, lr_eta=1e-3,
                                  eval_every=2000, holdout_fraction=0.0, seed=15)
        trainer.train(cfg, dataset, gen, inf, est)
        after = big_estimate()
        gain = after.total - before.total
        assert gain > 3.0 * math.hypot(before.se_total, after.se_total)

    def test_divergence_aborts_with_checkpoint_and_iteration(self, tmp_path):
        # a clamped-sharp generator far from the data forces the data-side
        # ratio past the overflow point of the KL conjugate composite
        gen = models.GenerativeModel(
            2, 2,
            models.AffineConditional("gen.cond", "theta", np.zeros((2, 2)),
                                     np.zeros((1, 2)), [[-7.0]]),
        )
        inf = models.InferenceModel.mlp(2, 2, (8,), np.random.default_rng(16))
        est = models.AffineCouplingFlow(2, 2, (8,), np.random.default_rng(17))
        dataset = np.full((64, 2), 3.0)
        ckpt = tmp_path / "abort.fgm"
        cfg = trainer.TrainConfig(kernel="kl", iterations=5, batch_size=32,
                                  eval_every=5, holdout_fraction=0.0)
        with pytest.raises(NumericalError) as err:
            trainer.train(cfg, dataset, gen, inf, est, checkpoint_path=ckpt)
        assert "iteration 1" in str(err.value)
        assert err.value.index == 1
        restored = load_checkpoint(ckpt)
        np.testing.assert_array_equal(
            restored["gen.cond.log_sigma"].value, [[-7.0, -7.0]]
        )

    def test_wall_timing_opt_in(self):
        gen, inf, est = fresh_models(seed=18)
        dataset = np.random.default_rng(19).standard_normal((300, 2))
        ticks = iter(np.arange(100.0))
        cfg = trainer.TrainConfig(iterations=4, batch_size=64, eval_every=2,
                                  timing="wall")
        result = trainer.train(cfg, dataset, gen, inf, est, clock=lambda: next(ticks))
        assert [r.wall_ms for r in result.metrics] == [1000.0, 1000.0]
        cfg = trainer.TrainConfig(iterations=4, batch_size=64, eval_every=2)
        gen, inf, est = fresh_models(seed=18)
        result = trainer.train(cfg, dataset, gen, inf, est)
        assert [r.wall_ms for r in result.metrics] == [0.0, 0.0]


def make_rows(logps, term2s):
    return [
        trainer.MetricsRow(
            iteration=100 * (i + 1), lm_total=0.0, term1=0.0, term2=t2,
            logp_eta_holdout=lp, mode_coverage=math.nan, gnorm_theta=0.0,
            gnorm_phi=0.0, gnorm_eta=0.0, wall_ms=0.0,
        )
        for i, (lp, t2) in enumerate(zip(logps, term2s))
    ]


class TestDiagnoseCollapse:
    def test_monotone_improvement_is_not_flagged(self):
        rows = make_rows(np.linspace(-3.0, 0.0, 12), np.ones(12))
        report = trainer.diagnose_collapse(rows, window=3)
        assert not report.flagged

    def test_constant_metrics_not_flagged(self):
        rows = make_rows(np.zeros(10), np.ones(10))
        assert not trainer.diagnose_collapse(rows, window=3).flagged

    def test_injected_drop_flagged_at_correct_iteration(self):
        logps = np.zeros(12)
        logps[8:] = -2.0  # 2-nat holdout drop at the ninth eval
        rows = make_rows(logps, np.ones(12))
        report = trainer.diagnose_collapse(rows, window=3, threshold=1.0)
        assert report.flagged
        assert report.events[0].iteration == rows[8].iteration
        assert report.events[0].holdout_drop == pytest.approx(2.0)

    def test_drop_with_matching_generator_degradation_not_flagged(self):
        # both signals fell: that is generic divergence, not collapse
        logps = np.zeros(12)
        logps[8:] = -2.0
        term2s = np.ones(12)
        term2s[8:] = 4.0
        rows = make_rows(logps, term2s)
        assert not trainer.diagnose_collapse(rows, window=3).flagged

    def test_window_validation(self):
        with pytest.raises(ValueError):
            trainer.diagnose_collapse([], window=1)
