"""The four training drivers and the GAN-equivalence identity check.

Drivers are deterministic functions of (inputs, config, generator streams):
the batch driver refits its discriminator every iteration, the incremental
driver interleaves mini-batch discriminator updates with generator steps
over a cached input pool, the compressed driver periodically distills the
grown composition back into a fixed-size approximator, and the GAN driver
is the classical alternating baseline (with and without the log trick).
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Sequence

import numpy as np
from scipy.special import expit

from .discriminator import IdealDiscriminator, discriminator_update
from .distributions import GaussianMixture, Prior, RealDataset
from .generator import Approximator, GeneratorStack, GradStep, InputPool, approximator_distill
from .metrics import Grid, discriminator_gap, tabulate_pushforward
from .nets import MlpNet
from .optim import RmspropState, rmsprop_step


class DivergenceError(RuntimeError):
    """Generated points left the configured bounding box (step too large)."""


@dataclass(frozen=True)
class TrainConfig:
    """Shared driver meta-parameters."""

    T: int = 25
    batch_size: int = 64
    update_freq: int = 1
    pool_size: int = 640
    eta: float = 0.5
    beta: float = 1.0
    seed: int = 0
    outer_iterations: int = 1
    checkpoint_every: int = 1
    scaling: str = "unit"
    disc_budget: int = 2000
    divergence_box: float = 6.0
    early_exit_patience: int = 0

    def __post_init__(self):
        if self.T < 1:
            raise ValueError("T must be at least 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if self.update_freq < 1:
            raise ValueError("update_freq must be at least 1")
        if self.pool_size < self.batch_size:
            raise ValueError("pool_size must be at least batch_size")
        if self.eta <= 0.0:
            raise ValueError("eta must be positive")
        if not 0.5 < self.beta <= 1.0:
            raise ValueError("beta must lie in (0.5, 1]")
        if self.outer_iterations < 0:
            raise ValueError("outer_iterations must be non-negative")
        if self.checkpoint_every < 1:
            raise ValueError("checkpoint_every must be at least 1")
        if self.divergence_box <= 0.0:
            raise ValueError("divergence_box must be positive")


@dataclass
class MetricsRecord:
    """One checkpoint row; None marks a metric disabled for the task."""

    outer_iter: int
    kl: float | None = None
    l_beta: float | None = None
    delta_d: float | None = None
    mode_score: float | None = None
    epsilon_est: float | None = None
    wall_ms: float | None = None


def _check_box(points: np.ndarray, bound: float) -> None:
    worst = float(np.max(np.abs(points)))
    if worst > bound:
        raise DivergenceError(
            f"generated points reached |coordinate| = {worst:.3g}, outside the "
            f"[-{bound}, {bound}] box; reduce eta or the learning rates"
        )


def draw_real(source, rng: np.random.Generator, n: int) -> np.ndarray:
    """Sample a batch of real points from a mixture or a finite dataset."""
    if isinstance(source, GaussianMixture):
        return source.sample(rng, n)
    if isinstance(source, RealDataset):
        idx = rng.integers(0, len(source), size=n)
        return source.points[idx]
    raise TypeError(f"unsupported real-data source {type(source).__name__}")


# -- discriminator providers for the batch driver -----------------------------


class OracleDiscriminatorProvider:
    """Supplies the exact log-density-ratio discriminator each iteration.

    The generated density after t steps has no closed form, so it is frozen
    into a grid spline (via the pushforward oracle) before each refit; the
    step then carries an interpolated but effectively exact discriminator.
    """

    def __init__(self, p_star, p0, grid: Grid, beta: float = 1.0):
        self.p_star = p_star
        self.p0 = p0
        self.grid = grid
        self.beta = beta

    def fit(self, stack: GeneratorStack, pool: InputPool, rng: np.random.Generator):
        if stack.steps:
            current = tabulate_pushforward(self.p0, stack.steps, self.grid)
        else:
            current = self.p0
        return IdealDiscriminator(self.p_star, current, self.beta)


class TrainedDiscriminatorProvider:
    """Fits a fresh logistic-loss net against the current generated pool,
    using a fixed step budget as the stand-in for full convergence."""

    def __init__(
        self,
        template: MlpNet,
        learning_rate: float,
        budget: int,
        batch_size: int,
        beta: float = 1.0,
        decay: float = 0.9,
        epsilon: float = 1e-8,
        init_stddev: float = 0.01,
    ):
        self.template = template
        self.learning_rate = learning_rate
        self.budget = budget
        self.batch_size = batch_size
        self.beta = beta
        self.decay = decay
        self.epsilon = epsilon
        self.init_stddev = init_stddev

    def fit(self, stack: GeneratorStack, pool: InputPool, rng: np.random.Generator, real_source=None):
        net = MlpNet.initialize(self.template.layers, rng, self.init_stddev)
        opt = RmspropState.for_params(net.params, self.learning_rate, self.decay, self.epsilon)
        gen_x = pool.x
        for _ in range(self.budget):
            real_b = draw_real(real_source, rng, self.batch_size)
            sel = rng.integers(0, gen_x.shape[0], size=self.batch_size)
            discriminator_update(net, real_b, gen_x[sel], opt, self.beta)
        return net


# -- drivers ------------------------------------------------------------------


def cfg_run(
    real_source,
    prior: Prior,
    g0: GeneratorStack,
    cfg: TrainConfig,
    provider,
    rng: np.random.Generator,
    evaluator=None,
    step_window=None,
) -> tuple[GeneratorStack, list[MetricsRecord]]:
    """Batch driver: per iteration, (re)fit the discriminator against the
    current generated set, then append one functional-gradient step.

    ``step_window`` (a positive scaling, usually a smooth box) keeps the
    step maps bounded so the density-transport metrics stay well posed.
    """
    stack = GeneratorStack(g0.base, list(g0.steps))
    pool = InputPool.from_base(stack, prior.sample(rng, cfg.pool_size))
    records: list[MetricsRecord] = []
    started = time.perf_counter()
    for t in range(1, cfg.T + 1):
        if isinstance(provider, TrainedDiscriminatorProvider):
            disc = provider.fit(stack, pool, rng, real_source=real_source)
        else:
            disc = provider.fit(stack, pool, rng)
        stack.push(GradStep(disc, cfg.eta, cfg.scaling, window=step_window))
        pool.advance(stack)
        _check_box(pool.x, cfg.divergence_box)
        if t % cfg.checkpoint_every == 0 and evaluator is not None:
            wall_ms = (time.perf_counter() - started) * 1e3
            records.append(evaluator(t, stack, disc, pool, wall_ms))
    return stack, records


def icfg_run(
    real_source,
    pool: InputPool,
    stack: GeneratorStack,
    disc: MlpNet,
    disc_opt: RmspropState,
    cfg: TrainConfig,
    rng: np.random.Generator,
) -> list[float]:
    """Incremental driver: T rounds of U mini-batch discriminator updates
    followed by one generator step over the pool.

    Mutates stack, pool, and the discriminator in place; returns the
    per-iteration output-gap diagnostic harvested from the training batches.
    """
    base_stamp = len(stack.steps)
    gaps: list[float] = []
    for t in range(cfg.T):
        gap = 0.0
        for _ in range(cfg.update_freq):
            real_b = draw_real(real_source, rng, cfg.batch_size)
            sel = rng.integers(0, len(pool), size=cfg.batch_size)
            pool.advance(stack, indices=sel)
            stats = discriminator_update(disc, real_b, pool.x[sel], disc_opt, cfg.beta)
            gap = abs(stats.mean_real - stats.mean_gen)
        gaps.append(gap)
        stack.push(GradStep(disc.copy(), cfg.eta, cfg.scaling))
        pool.advance(stack)
        _check_box(pool.x, cfg.divergence_box)
    assert len(stack.steps) == base_stamp + cfg.T
    return gaps


class XicfgWarning(NamedTuple):
    outer_iter: int
    kind: str
    detail: str


def xicfg_run(
    real_source,
    prior: Prior,
    approx: Approximator,
    disc: MlpNet,
    cfg: TrainConfig,
    disc_opt: RmspropState,
    rng: np.random.Generator,
    evaluator=None,
    mode_score_fn: Callable[[Callable], float] | None = None,
) -> tuple[Approximator, MlpNet, list[MetricsRecord], list[XicfgWarning]]:
    """Compressed incremental driver.

    Each outer iteration draws a fresh input pool, runs the incremental
    driver starting from the approximator, then distills the grown
    composition back into the approximator.  A warning is recorded whenever
    compression costs more than half the mode score.
    """
    records: list[MetricsRecord] = []
    warnings: list[XicfgWarning] = []
    started = time.perf_counter()
    plateau_best = -np.inf
    plateau_age = 0
    for outer in range(1, cfg.outer_iterations + 1):
        z = prior.sample(rng, cfg.pool_size)
        stack = GeneratorStack(approx.net, [])
        pool = InputPool.from_base(stack, z)
        gaps = icfg_run(real_source, pool, stack, disc, disc_opt, cfg, rng)
        assert len(stack.steps) <= cfg.T

        checkpoint = outer % cfg.checkpoint_every == 0
        pre_score = None
        if checkpoint and mode_score_fn is not None:
            pre_score = mode_score_fn(stack.apply)

        targets = pool.x.copy()
        approximator_distill(approx, z, targets, rng, batch_size=cfg.batch_size)

        if checkpoint:
            post_score = None
            if mode_score_fn is not None:
                post_score = mode_score_fn(approx.net.forward)
                if pre_score is not None and post_score < 0.5 * pre_score:
                    warnings.append(
                        XicfgWarning(
                            outer,
                            "degradation",
                            f"mode score fell from {pre_score:.3f} to {post_score:.3f} "
                            "across distillation",
                        )
                    )
            if evaluator is not None:
                wall_ms = (time.perf_counter() - started) * 1e3
                records.append(
                    evaluator(outer, approx, disc, float(np.mean(gaps)), post_score, wall_ms)
                )
                if cfg.early_exit_patience > 0 and post_score is not None:
                    if post_score > plateau_best + 1e-9:
                        plateau_best = post_score
                        plateau_age = 0
                    else:
                        plateau_age += 1
                        if plateau_age >= cfg.early_exit_patience:
                            break
    return approx, disc, records, warnings


def gan_run(
    real_source,
    prior: Prior,
    disc: MlpNet,
    gen: MlpNet,
    cfg: TrainConfig,
    logd_trick: bool,
    disc_opt: RmspropState,
    gen_opt: RmspropState,
    rng: np.random.Generator,
    evaluator=None,
) -> tuple[MlpNet, MlpNet, list[MetricsRecord]]:
    """Classical alternating baseline.

    The generator descends ln(1 - sigmoid(D(G(z)))) without the trick and
    -ln sigmoid(D(G(z))) with it; both reduce to backpropagating a
    sigmoid-scaled discriminator input gradient.
    """
    records: list[MetricsRecord] = []
    started = time.perf_counter()
    for it in range(1, cfg.outer_iterations + 1):
        gap = 0.0
        for _ in range(cfg.update_freq):
            real_b = draw_real(real_source, rng, cfg.batch_size)
            z = prior.sample(rng, cfg.batch_size)
            stats = discriminator_update(disc, real_b, gen.forward(z), disc_opt, beta=1.0)
            gap = abs(stats.mean_real - stats.mean_gen)
        z = prior.sample(rng, cfg.batch_size)
        x = gen.forward(z)
        v = disc.value(x)
        coef = -expit(-v) if logd_trick else -expit(v)
        gx = disc.backward_input(x, weights=coef / cfg.batch_size)
        grads = gen.backward_params(z, gx)
        rmsprop_step(gen.params, grads, gen_opt)
        _check_box(gen.forward(z), cfg.divergence_box)
        if it % cfg.checkpoint_every == 0 and evaluator is not None:
            wall_ms = (time.perf_counter() - started) * 1e3
            records.append(evaluator(it, gen, disc, gap, wall_ms))
    return gen, disc, records


class EquivalenceReport(NamedTuple):
    no_trick: float
    logd_trick: float

    @property
    def max_discrepancy(self) -> float:
        return max(self.no_trick, self.logd_trick)


def _max_rel_diff(a: Sequence[np.ndarray], b: Sequence[np.ndarray]) -> float:
    worst = 0.0
    for ga, gb in zip(a, b):
        scale = max(float(np.max(np.abs(ga))), 1e-30)
        worst = max(worst, float(np.max(np.abs(ga - gb))) / scale)
    return worst


def gan_equivalence_check(gen: MlpNet, disc: MlpNet, z_batch, eta: float) -> EquivalenceReport:
    """Check that the GAN generator gradient equals the distillation
    gradient toward a one-step functional update with scaling s0/eta (plain
    objective) or s1/eta (log trick), with the step targets frozen."""
    z = np.asarray(z_batch, dtype=np.float64)
    if z.size == 0:
        raise ValueError("z_batch must be non-empty")
    x = gen.forward(z)
    v = disc.value(x)
    dgrad = disc.backward_input(x)

    results = []
    for trick in (False, True):
        sig = expit(-v) if trick else expit(v)
        # Route A: direct gradient of the GAN generator objective.
        gan_grads = gen.backward_params(z, -sig[:, None] * dgrad)
        # Route B: build the one-step targets with s(x) = sig/eta, then take
        # the gradient of the half squared distillation error at the current
        # generator.
        targets = x + eta * (sig / eta)[:, None] * dgrad
        distill_grads = gen.backward_params(z, -(targets - x))
        results.append(_max_rel_diff(gan_grads, distill_grads))
    return EquivalenceReport(results[0], results[1])
