"""Minimax training loop: simultaneous descent on generator and inference
parameters and ascent on the density estimator, all from one backward pass.

Per iteration the loop draws one data batch (shuffled epochs), builds the
Monte Carlo objective, backpropagates once, and applies one Adam update
per group: descent for theta and phi, ascent for eta.  Extra eta-only
ascent refreshes (eta_steps_per_iter > 1) run on fresh batches before the
joint step.  Divergence aborts with a checkpoint rather than silently
clipping; norm clipping is opt-in config.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import ParameterStore
from .data import GaussianMixture, mode_coverage
from .errors import NumericalError
from .fdiv import kernel_by_name
from .objective import estimate_minimax

COVERAGE_SAMPLES = 2048


@dataclass
class TrainConfig:
    kernel: str = "kl"
    iterations: int = 20_000
    batch_size: int = 256
    lr_theta_phi: float = 1e-3
    lr_eta: float = 1e-3
    beta1: float = 0.5
    beta2: float = 0.999
    eps: float = 1e-8
    eta_steps_per_iter: int = 1
    seed: int = 0
    eval_every: int = 500
    holdout_fraction: float = 0.1
    clip_norm: float | None = None
    timing: str = "none"  # "none" writes wall_ms = 0 so outputs stay byte-stable

    def __post_init__(self):
        if self.iterations < 0 or self.batch_size < 1:
            raise ValueError("iterations must be >= 0 and batch_size >= 1")
        if self.lr_theta_phi <= 0 or self.lr_eta <= 0:
            raise ValueError("learning rates must be positive")
        if not 0.0 <= self.holdout_fraction < 1.0:
            raise ValueError("holdout_fraction must lie in [0, 1)")
        if self.eta_steps_per_iter < 1:
            raise ValueError("eta_steps_per_iter must be >= 1")
        if self.eval_every < 1:
            raise ValueError("eval_every must be >= 1")
        if self.timing not in ("none", "wall"):
            raise ValueError(f"timing must be 'none' or 'wall', got {self.timing!r}")


@dataclass
class MetricsRow:
    iteration: int
    lm_total: float
    term1: float
    term2: float
    logp_eta_holdout: float
    mode_coverage: float
    gnorm_theta: float
    gnorm_phi: float
    gnorm_eta: float
    wall_ms: float


METRICS_HEADER = (
    "iter,lm_total,term1,term2,logp_eta_holdout,mode_coverage,"
    "gnorm_theta,gnorm_phi,gnorm_eta,wall_ms"
)


def _fmt(v: float) -> str:
    return f"{v:.9g}"


def metrics_to_csv(rows) -> str:
    lines = [METRICS_HEADER]
    for r in rows:
        lines.append(
            ",".join(
                [
                    str(r.iteration),
                    _fmt(r.lm_total),
                    _fmt(r.term1),
                    _fmt(r.term2),
                    _fmt(r.logp_eta_holdout),
                    _fmt(r.mode_coverage),
                    _fmt(r.gnorm_theta),
                    _fmt(r.gnorm_phi),
                    _fmt(r.gnorm_eta),
                    _fmt(r.wall_ms),
                ]
            )
        )
    return "\n".join(lines) + "\n"


def write_metrics_csv(path, rows) -> None:
    ad.atomic_write_bytes(path, metrics_to_csv(rows).encode("ascii"))


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


class AdamState:
    """First/second moment accumulators for one parameter group."""

    def __init__(self, params):
        self.m = {p.name: np.zeros_like(p.value) for p in params}
        self.v = {p.name: np.zeros_like(p.value) for p in params}
        self.t = 0


def adam_step(state: AdamState, params, grads, lr, beta1, beta2, eps) -> AdamState:
    """One bias-corrected Adam descent step; pass negated grads to ascend."""
    state.t += 1
    bc1 = 1.0 - beta1**state.t
    bc2 = 1.0 - beta2**state.t
    for p in params:
        g = grads[p.name]
        if g.shape != p.value.shape:
            raise ValueError(f"gradient shape {g.shape} != param shape {p.value.shape}")
        m = state.m[p.name] = beta1 * state.m[p.name] + (1.0 - beta1) * g
        v = state.v[p.name] = beta2 * state.v[p.name] + (1.0 - beta2) * g * g
        p.value -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
    return state


def _group_norm(grads: dict) -> float:
    total = 0.0
    for g in grads.values():
        total += float(np.sum(g * g))
    return math.sqrt(total)


def _clip_group(grads: dict, clip: float) -> dict:
    norm = _group_norm(grads)
    if norm > clip:
        s = clip / norm
        return {k: g * s for k, g in grads.items()}
    return grads


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


class _EpochBatches:
    """Shuffled epochs, fixed batch size, partial tail dropped."""

    def __init__(self, data, batch_size, rng):
        self.data = data
        self.k = batch_size
        self.rng = rng
        self._order = None
        self._pos = 0

    def next(self):
        if self.data.shape[0] < self.k:
            raise ValueError(
                f"training split has {self.data.shape[0]} rows, "
                f"need at least batch_size={self.k}"
            )
        if self._order is None or self._pos + self.k > self.data.shape[0]:
            self._order = self.rng.permutation(self.data.shape[0])
            self._pos = 0
        idx = self._order[self._pos : self._pos + self.k]
        self._pos += self.k
        return self.data[idx]


@dataclass
class TrainResult:
    store: ParameterStore
    metrics: list[MetricsRow] = field(default_factory=list)
    holdout: np.ndarray | None = None
    adam_applications: dict = field(default_factory=dict)


def holdout_split(dataset: np.ndarray, holdout_fraction: float, seed: int):
    """Deterministic split; the holdout never enters the training batches."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5eed]))
    n = dataset.shape[0]
    n_hold = int(round(holdout_fraction * n))
    perm = rng.permutation(n)
    return dataset[perm[n_hold:]], dataset[perm[:n_hold]]


def train(
    config: TrainConfig,
    dataset: np.ndarray,
    gen,
    inf,
    est,
    pstar=None,
    checkpoint_path=None,
    clock=time.perf_counter,
) -> TrainResult:
    """Run the minimax loop; models are updated in place.

    pstar: optional known data distribution; a GaussianMixture enables the
    mode-coverage column.  checkpoint_path: written at every eval and on
    abort.  Raises NumericalError (after checkpointing) if the loss or any
    gradient goes non-finite.
    """
    kernel = kernel_by_name(config.kernel)
    dataset = np.atleast_2d(np.asarray(dataset, dtype=np.float64))
    store = ParameterStore.from_models(gen, inf, est)
    groups = {name: store.group(name) for name in ("theta", "phi", "eta")}
    adam = {name: AdamState(params) for name, params in groups.items()}
    applications = {name: 0 for name in groups}

    train_data, holdout = holdout_split(dataset, config.holdout_fraction, config.seed)
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0x7261]))
    batches = _EpochBatches(train_data, config.batch_size, rng)

    rows: list[MetricsRow] = []
    mix = pstar if isinstance(pstar, GaussianMixture) else None
    last_clock = clock() if config.timing == "wall" else 0.0

    def group_grads(tape):
        return {
            name: {p.name: tape.grad(p) for p in params}
            for name, params in groups.items()
        }

    def check_finite(iteration, total, grads):
        bad = None
        if not math.isfinite(total):
            bad = f"objective value {total!r}"
        else:
            for gname, gg in grads.items():
                for pname, g in gg.items():
                    if not np.all(np.isfinite(g)):
                        bad = f"gradient of {pname} ({gname} group)"
                        break
                if bad:
                    break
        if bad:
            if checkpoint_path is not None:
                store.save(checkpoint_path)
            raise NumericalError(
                f"training diverged at iteration {iteration}: non-finite {bad}",
                index=iteration,
            )

    def eta_ascent(grads):
        neg = {k: -g for k, g in grads["eta"].items()}
        if config.clip_norm is not None:
            neg = _clip_group(neg, config.clip_norm)
        adam_step(
            adam["eta"], groups["eta"], neg, config.lr_eta, config.beta1,
            config.beta2, config.eps,
        )
        applications["eta"] += 1

    def objective_and_grads(iteration):
        try:
            tape = ad.Tape()
            lm = estimate_minimax(kernel, gen, inf, est, batches.next(), rng, tape)
            ad.backward(lm.node)
        except NumericalError as err:
            # parameters still hold the last finite state: checkpoint and abort
            if checkpoint_path is not None:
                store.save(checkpoint_path)
            raise NumericalError(
                f"training diverged at iteration {iteration}: {err}", index=iteration
            ) from err
        grads = group_grads(tape)
        check_finite(iteration, lm.total, grads)
        return lm, grads

    for iteration in range(1, config.iterations + 1):
        # optional density-estimator refreshes on fresh batches
        for _ in range(config.eta_steps_per_iter - 1):
            _, grads = objective_and_grads(iteration)
            eta_ascent(grads)

        lm, grads = objective_and_grads(iteration)

        for name in ("theta", "phi"):
            g = grads[name]
            if config.clip_norm is not None:
                g = _clip_group(g, config.clip_norm)
            adam_step(
                adam[name], groups[name], g, config.lr_theta_phi, config.beta1,
                config.beta2, config.eps,
            )
            applications[name] += 1
        eta_ascent(grads)

        if iteration % config.eval_every == 0 or iteration == config.iterations:
            if config.timing == "wall":
                now = clock()
                wall_ms = (now - last_clock) * 1000.0
                last_clock = now
            else:
                wall_ms = 0.0
            if holdout.shape[0] > 0:
                logp_hold = float(np.mean(ad.value_of(est.log_prob(holdout))))
            else:
                logp_hold = math.nan
            if mix is not None:
                sample_x, _ = gen.sample(COVERAGE_SAMPLES, rng)
                coverage = float(mode_coverage(mix, sample_x).covered)
            else:
                coverage = math.nan
            rows.append(
                MetricsRow(
                    iteration=iteration,
                    lm_total=lm.total,
                    term1=lm.term1,
                    term2=lm.term2,
                    logp_eta_holdout=logp_hold,
                    mode_coverage=coverage,
                    gnorm_theta=_group_norm(grads["theta"]),
                    gnorm_phi=_group_norm(grads["phi"]),
                    gnorm_eta=_group_norm(grads["eta"]),
                    wall_ms=wall_ms,
                )
            )
            if checkpoint_path is not None:
                store.save(checkpoint_path)

    return TrainResult(
        store=store, metrics=rows, holdout=holdout, adam_applications=applications
    )


# ---------------------------------------------------------------------------
# collapse diagnostics
# ---------------------------------------------------------------------------


@dataclass
class CollapseEvent:
    iteration: int
    holdout_drop: float
    term2_change: float


@dataclass
class CollapseReport:
    flagged: bool
    events: list[CollapseEvent]
    coverage: list[float]


def diagnose_collapse(rows, window: int, threshold: float = 1.0) -> CollapseReport:
    """Flag evals where held-out estimator likelihood fell by more than
    `threshold` nats over `window` evals while the model-side term stayed put
    (the generator still scores itself well: the signature of collapse).
    """
    if window < 2:
        raise ValueError("window must be >= 2")
    rows = list(rows)
    events = []
    for i in range(window, len(rows)):
        past = rows[i - window : i]
        best_past = max(r.logp_eta_holdout for r in past)
        drop = best_past - rows[i].logp_eta_holdout
        term2_change = abs(rows[i].term2 - rows[i - window].term2)
        if drop > threshold and term2_change <= threshold:
            events.append(CollapseEvent(rows[i].iteration, drop, term2_change))
    return CollapseReport(
        flagged=bool(events),
        events=events,
        coverage=[r.mode_coverage for r in rows],
    )
