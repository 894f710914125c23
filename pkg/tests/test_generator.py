import numpy as np
import pytest

from cfg_lab.discriminator import IdealDiscriminator
from cfg_lab.distributions import Prior, make_rng, single_gaussian
from cfg_lab.generator import (
    AffineBase,
    Approximator,
    GeneratorStack,
    GradStep,
    InputPool,
    PoolStampError,
    ProjectionBase,
    approximator_distill,
    approximator_init,
)
from cfg_lab.nets import MlpNet, LayerSpec, dense_spec


class LinearDisc:
    """D(x) = w . x as a bare value/grad object."""

    def __init__(self, w):
        self.w = np.asarray(w, dtype=np.float64)

    def value(self, x):
        return np.atleast_2d(x) @ self.w

    def grad(self, x):
        return np.broadcast_to(self.w, np.atleast_2d(x).shape).copy()


class ConstantDisc:
    def value(self, x):
        return np.zeros(np.atleast_2d(x).shape[0])

    def grad(self, x):
        return np.zeros_like(np.atleast_2d(x))


def scalar_mlp(rng, dim=2, hidden=(8,)):
    return MlpNet.initialize(dense_spec(dim, list(hidden), 1, activation="tanh"), rng, 0.5)


# -- gradient step ---------------------------------------------------------


def test_step_constant_discriminator_is_identity():
    step = GradStep(ConstantDisc(), eta=0.3)
    x = make_rng(50).normal(size=(6, 2))
    assert np.allclose(step.apply(x), x, atol=1e-15)


def test_step_linear_discriminator_unit_scaling():
    w = np.array([0.5, -1.0])
    step = GradStep(LinearDisc(w), eta=0.2, scaling="unit")
    x = np.array([1.0, 2.0])
    assert np.allclose(step.apply(x), x + 0.2 * w, atol=1e-15)


def test_step_increases_oracle_discriminator():
    # with the exact log-ratio discriminator, a small enough step raises D
    # at every point; find eta by halving
    p_star = single_gaussian([1.5, -0.5], 0.8)
    p_gen = single_gaussian([0.0, 0.0], 1.2)
    disc = IdealDiscriminator(p_star, p_gen, 1.0)
    x = p_gen.sample(make_rng(51), 1000)
    eta = 0.5
    for _ in range(20):
        moved = GradStep(disc, eta).apply(x)
        if np.all(disc.value(moved) >= disc.value(x)):
            break
        eta *= 0.5
    else:
        pytest.fail("no eta found that raises the discriminator everywhere")
    assert np.all(disc.value(GradStep(disc, eta).apply(x)) >= disc.value(x))


def test_step_validation():
    with pytest.raises(ValueError):
        GradStep(ConstantDisc(), eta=0.0)
    with pytest.raises(ValueError):
        GradStep(ConstantDisc(), eta=0.1, scaling="bogus")


# -- stack -----------------------------------------------------------------


def test_stack_empty_steps_is_base():
    base = AffineBase.for_gaussian([1.0, -1.0], 2.0)
    stack = GeneratorStack(base)
    z = make_rng(52).normal(size=(5, 2))
    assert np.allclose(stack.apply(z), base.apply(z), atol=1e-15)


def test_stack_one_linear_step():
    w = np.array([1.0, 0.5])
    base = AffineBase.for_gaussian([0.0, 0.0], 1.0)
    stack = GeneratorStack(base, [GradStep(LinearDisc(w), eta=0.1)])
    z = np.array([[0.2, 0.4]])
    assert np.allclose(stack.apply(z), z + 0.1 * w, atol=1e-15)


def test_stack_apply_is_pure():
    rng = make_rng(53)
    disc = scalar_mlp(rng)
    stack = GeneratorStack(AffineBase.for_gaussian([0.0, 0.0], 1.0), [GradStep(disc, 0.05)])
    z = rng.normal(size=(8, 2))
    assert np.array_equal(stack.apply(z), stack.apply(z))


# -- input pool ----------------------------------------------------------------


def build_stack_and_pool(rng, n_steps, pool_size=64):
    base = AffineBase.for_gaussian([0.0, 0.0], 1.0)
    stack = GeneratorStack(base)
    pool = InputPool.from_base(stack, rng.normal(size=(pool_size, 2)))
    for _ in range(n_steps):
        stack.push(GradStep(scalar_mlp(rng), eta=0.05))
    return stack, pool


def test_pool_no_steps_unchanged():
    rng = make_rng(54)
    stack, pool = build_stack_and_pool(rng, 0)
    before = pool.x.copy()
    pool.advance(stack)
    assert np.array_equal(pool.x, before)


def test_pool_advance_composes():
    rng = make_rng(55)
    stack, pool = build_stack_and_pool(rng, 2)
    stepwise = InputPool(pool.z.copy(), pool.x.copy(), pool.stamps.copy())
    stepwise.advance(stack, target=1)
    stepwise.advance(stack, target=2)
    pool.advance(stack, target=2)
    assert np.array_equal(stepwise.x, pool.x)


def test_pool_advance_matches_full_replay():
    rng = make_rng(56)
    stack, pool = build_stack_and_pool(rng, 25)
    # interleave partial advances over random subsets, then finish
    for target in range(1, 26):
        idx = rng.choice(len(pool), size=32, replace=False)
        pool.advance(stack, indices=idx, target=target)
    pool.advance(stack)
    replay = stack.apply(pool.z)
    assert np.max(np.abs(pool.x - replay)) <= 1e-12


def test_pool_rejects_gaps():
    rng = make_rng(57)
    stack, pool = build_stack_and_pool(rng, 3)
    pool.advance(stack)
    with pytest.raises(PoolStampError):
        pool.advance(stack, target=1)  # entries are already past stamp 1
    with pytest.raises(PoolStampError):
        pool.advance(stack, target=7)  # stack only has 3 steps


# -- approximator ---------------------------------------------------------------


def approx_net(rng, zdim=3, xdim=2):
    return MlpNet.initialize(dense_spec(zdim, [16], xdim, activation="relu"), rng, 0.1)


def test_distill_perfect_targets_is_fixed_point():
    rng = make_rng(58)
    approx = Approximator(approx_net(rng), learning_rate=1e-3)
    z = rng.normal(size=(128, 3))
    targets = approx.net.forward(z)
    params_before = [p.copy() for p in approx.net.params]
    loss = approximator_distill(approx, z, targets, make_rng(59))
    assert loss <= 1e-28
    for before, after in zip(params_before, approx.net.params):
        assert np.array_equal(before, after)


def test_distill_realizable_linear_map():
    rng = make_rng(60)
    linear = MlpNet([LayerSpec("linear", 3, 2)], [np.zeros((3, 2)), np.zeros(2)])
    approx = Approximator(linear, learning_rate=0.02)
    z = rng.normal(size=(1000, 3))
    w_true = rng.normal(size=(3, 2))
    targets = z @ w_true
    initial = float(0.5 * np.mean(np.sum(targets**2, axis=1)))
    final = approximator_distill(approx, z, targets, make_rng(61))
    assert final < 1e-3 * initial


def test_distill_epoch_cap_honored():
    rng = make_rng(62)

    class CountingNet:
        def __init__(self, net):
            self.net = net
            self.epoch_passes = 0

        def __getattr__(self, name):
            return getattr(self.net, name)

    net = approx_net(rng)
    approx = Approximator(net, distill_epochs_cap=10, learning_rate=1e-4)
    z = rng.normal(size=(100, 3))
    targets = rng.normal(size=(100, 2))

    calls = {"n": 0}
    original = net.forward

    def counting_forward(x):
        calls["n"] += 1
        return original(x)

    net.forward = counting_forward
    approximator_distill(approx, z, targets, make_rng(63), batch_size=50)
    # one upfront loss eval, then per epoch: 2 batches plus 1 loss eval
    assert calls["n"] == 1 + 10 * (2 + 1)


def test_distill_plateau_cuts_learning_rate():
    rng = make_rng(64)
    approx = Approximator(approx_net(rng), learning_rate=10.0)  # absurd lr forces plateau
    z = rng.normal(size=(64, 3))
    targets = rng.normal(size=(64, 2))
    final = approximator_distill(approx, z, targets, make_rng(65))
    assert np.isfinite(final)


def test_approximator_init_shapes_and_fit():
    rng = make_rng(66)
    prior = Prior(dim=4)
    net = MlpNet.initialize(dense_spec(4, [32], 2, activation="relu"), rng, 0.01)
    untrained = net.copy()
    approx, loss = approximator_init(prior, 2, net, rng, pool_size=512, learning_rate=1e-3)
    z = prior.sample(make_rng(67), 1000)
    out = approx.net.forward(z)
    assert out.shape == (1000, 2)

    # fit should beat the untrained net against the same random projection;
    # rebuild the projection from the same stream to compare
    rng2 = make_rng(66)
    net2 = MlpNet.initialize(dense_spec(4, [32], 2, activation="relu"), rng2, 0.01)
    g_rand = ProjectionBase.random(4, 2, rng2, 0.01)
    zs = prior.sample(rng2, 512)
    t = g_rand.apply(zs)
    mse_trained = np.mean(np.sum((approx.net.forward(zs) - t) ** 2, axis=1))
    mse_untrained = np.mean(np.sum((untrained.forward(zs) - t) ** 2, axis=1))
    assert mse_trained < mse_untrained


def test_approximator_init_seed_determinism():
    prior = Prior(dim=3)

    def build(seed):
        rng = make_rng(seed)
        net = MlpNet.initialize(dense_spec(3, [8], 2, activation="relu"), rng, 0.01)
        approx, _ = approximator_init(prior, 2, net, rng, pool_size=128)
        return approx.net.params

    a = build(68)
    b = build(68)
    assert all(np.array_equal(x, y) for x, y in zip(a, b))
