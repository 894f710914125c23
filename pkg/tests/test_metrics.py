import numpy as np
import pytest

from cfg_lab.discriminator import IdealDiscriminator
from cfg_lab.distributions import GaussianMixture, make_rng, single_gaussian
from cfg_lab.generator import GradStep
from cfg_lab.metrics import (
    DescentCheckConfig,
    Grid,
    PushforwardDensity,
    StepTooLargeError,
    contraction_bound,
    descent_check,
    discriminator_gap,
    extended_kl,
    kl_estimate,
    kl_knn,
    mode_score,
    pushforward_density,
    score_from_probs,
    softmax,
    tabulate_pushforward,
    train_softmax_classifier,
)
from cfg_lab.nets import MlpNet, dense_spec


class LinearDisc:
    def __init__(self, w, b=0.0):
        self.w = np.asarray(w, dtype=np.float64)
        self.b = b

    def value(self, x):
        return np.atleast_2d(x) @ self.w + self.b

    def grad(self, x):
        return np.broadcast_to(self.w, np.atleast_2d(x).shape).copy()


GRID_1D = Grid((-9.0,), (9.0,), 0.01)
GRID_2D = Grid((-7.0, -7.0), (7.0, 7.0), 0.05)


# -- grid ----------------------------------------------------------------------


def test_grid_nodes_and_volume():
    g = Grid((0.0, 0.0), (1.0, 2.0), 0.5)
    nodes = g.nodes()
    assert nodes.shape == (2 * 4, 2)
    assert np.isclose(g.cell_volume, 0.25)
    assert np.isclose(g.integrate(np.ones(8)), 2.0)


# -- pushforward ------------------------------------------------------------------


def test_pushforward_empty_steps_is_base():
    p0 = single_gaussian([0.3], 0.9)
    x = np.linspace(-2, 2, 11)[:, None]
    assert np.allclose(pushforward_density(p0, [], x), p0.pdf(x), rtol=1e-12)


def test_pushforward_translation_step():
    # constant gradient: pure shift, unit Jacobian
    p0 = single_gaussian([0.0, 0.0], 1.0)

    class ConstGrad:
        def value(self, x):
            return np.zeros(np.atleast_2d(x).shape[0])

        def grad(self, x):
            return np.broadcast_to(np.array([1.0, -2.0]), np.atleast_2d(x).shape).copy()

    step = GradStep(ConstGrad(), eta=0.25)
    x = make_rng(70).normal(size=(50, 2))
    shifted = x - 0.25 * np.array([1.0, -2.0])
    assert np.allclose(pushforward_density(p0, [step], x), p0.pdf(shifted), rtol=1e-8)


def test_pushforward_affine_contraction_jacobian():
    # f(x) = x + eta*(-x) shrinks toward 0: density is a rescaled Gaussian
    p0 = single_gaussian([0.0], 1.0)
    step = GradStep(LinearDisc([0.0]), eta=0.3)
    step.vector_field = lambda x: -np.atleast_2d(x)  # overwrite: g(x) = -x
    step.apply = lambda x: np.atleast_2d(x) + step.eta * step.vector_field(x)
    x = np.linspace(-2, 2, 21)[:, None]
    got = pushforward_density(p0, [step], x)
    scale = 1.0 - 0.3
    expected = p0.pdf(x / scale) / scale
    assert np.allclose(got, expected, rtol=1e-6)


def test_pushforward_mass_conservation_oracle_step():
    p0 = single_gaussian([0.0, 0.0], 1.0)
    p_star = single_gaussian([1.0, -0.5], 0.8)
    disc = IdealDiscriminator(p_star, p0, 1.0)
    step = GradStep(disc, eta=0.05)
    pf = pushforward_density(p0, [step], GRID_2D.nodes())
    assert abs(GRID_2D.integrate(pf) - 1.0) <= 1e-3


def test_pushforward_rejects_non_contraction():
    p0 = single_gaussian([0.0], 1.0)

    class Explosive:
        def value(self, x):
            return np.zeros(np.atleast_2d(x).shape[0])

        def grad(self, x):
            with np.errstate(over="ignore"):
                return 50.0 * np.atleast_2d(x)

    step = GradStep(Explosive(), eta=1.0)
    with pytest.raises(StepTooLargeError), np.errstate(over="ignore", invalid="ignore"):
        pushforward_density(p0, [step], np.array([[1.0]]))


def test_contraction_bound_flags_large_eta():
    p0 = single_gaussian([0.0], 1.0)
    p_star = single_gaussian([0.0], 0.5)
    disc = IdealDiscriminator(p_star, p0, 1.0)
    pts = np.linspace(-3, 3, 50)[:, None]
    small = contraction_bound(GradStep(disc, eta=0.05), pts)
    big = contraction_bound(GradStep(disc, eta=0.5), pts)
    assert small < 1.0 < big * 3  # the same field scaled by eta
    assert np.isclose(big, 10 * small, rtol=1e-6)


def test_tabulated_density_matches_source():
    p0 = single_gaussian([0.5], 1.1)
    tab = tabulate_pushforward(p0, [], GRID_1D)
    x = np.linspace(-3, 3, 40)[:, None]
    assert np.max(np.abs(tab.log_pdf(x) - p0.log_pdf(x))) < 1e-9
    assert np.max(np.abs(tab.grad_log_pdf(x) - p0.grad_log_pdf(x))) < 1e-6


# -- divergences -----------------------------------------------------------------


def test_kl_zero_for_identical():
    p = single_gaussian([0.4], 1.2)
    assert abs(kl_estimate(p, p, GRID_1D)) <= 1e-6


def test_kl_two_unit_gaussians_closed_form():
    p_star = single_gaussian([0.0], 1.0)
    p_gen = single_gaussian([1.0], 1.0)
    assert np.isclose(kl_estimate(p_star, p_gen, GRID_1D), 0.5, atol=1e-9)


def test_kl_asymmetry():
    a = single_gaussian([0.0], 1.0)
    b = single_gaussian([0.5], 2.0)
    assert kl_estimate(a, b, GRID_1D) != kl_estimate(b, a, GRID_1D)


def test_kl_non_negative_on_random_pairs():
    rng = make_rng(71)
    for _ in range(5):
        a = single_gaussian([rng.uniform(-1, 1)], rng.uniform(0.5, 1.5))
        b = single_gaussian([rng.uniform(-1, 1)], rng.uniform(0.5, 1.5))
        assert kl_estimate(a, b, GRID_1D) >= -1e-6


def test_extended_kl_reduces_to_kl_at_beta_one():
    a = single_gaussian([0.0], 1.0)
    b = single_gaussian([0.7], 1.3)
    assert np.isclose(extended_kl(a, b, 1.0, GRID_1D), kl_estimate(a, b, GRID_1D), atol=1e-12)


def test_extended_kl_zero_cases():
    a = single_gaussian([0.0], 1.0)
    b = single_gaussian([0.7], 1.3)
    assert abs(extended_kl(a, a, 0.8, GRID_1D)) <= 1e-9
    assert extended_kl(a, b, 0.5, GRID_1D) == 0.0


def test_kl_knn_against_closed_form():
    rng = make_rng(72)
    real = single_gaussian([0.0], 1.0).sample(rng, 5000)
    gen = single_gaussian([1.0], 1.0).sample(rng, 5000)
    est = kl_knn(real, gen, k=5)
    assert abs(est - 0.5) < 0.1


def test_kl_knn_near_zero_for_same_density():
    rng = make_rng(73)
    p = single_gaussian([0.0, 0.0], 1.0)
    est = kl_knn(p.sample(rng, 4000), p.sample(rng, 4000), k=5)
    assert abs(est) < 0.1


# -- descent check ----------------------------------------------------------------


SWEEP = DescentCheckConfig(eta_sweep=(1e-3, 3e-3, 1e-2, 3e-2), g_bound=10.0, jacobian_bound=10.0, h0=1.0)


def test_descent_constant_discriminator_no_change():
    p_star = single_gaussian([1.0], 0.9)
    p0 = single_gaussian([0.0], 1.0)
    report = descent_check(p_star, p0, LinearDisc([0.0], b=0.7), "unit", SWEEP, GRID_1D)
    for row in report.rows:
        assert row.converged
        assert abs(row.delta_l) <= 1e-9
        assert row.first_order == 0.0


def test_descent_oracle_1d():
    p_star = single_gaussian([1.0], 0.7)
    p0 = single_gaussian([0.0], 1.0)
    disc = IdealDiscriminator(p_star, p0, 1.0)
    report = descent_check(p_star, p0, disc, "unit", SWEEP, GRID_1D)
    assert report.all_descending
    assert 1.7 <= report.residual_slope <= 2.3


def test_descent_matches_forward_substitution_oracle():
    # independent route: evaluate the post-step divergence by substituting
    # x = f(y) in the integral, so no inversion is involved
    p_star = single_gaussian([1.0], 0.7)
    p0 = single_gaussian([0.0], 1.0)
    disc = IdealDiscriminator(p_star, p0, 1.0)
    eta = 1e-2
    cfgsingle = DescentCheckConfig(eta_sweep=(eta,), g_bound=10.0, jacobian_bound=10.0, h0=1.0)
    report = descent_check(p_star, p0, disc, "unit", cfgsingle, GRID_1D)
    delta_pipeline = report.rows[0].delta_l

    nodes = GRID_1D.nodes()
    h = 1e-6
    f = lambda y: y + eta * disc.grad(y)
    jac = (f(nodes + h) - f(nodes - h))[:, 0] / (2 * h)
    fy = f(nodes)
    p0_vals = p0.pdf(nodes)
    ps_fy = p_star.pdf(fy)
    l_after = GRID_1D.integrate(ps_fy * (p_star.log_pdf(fy) - np.log(p0_vals / np.abs(jac))) * np.abs(jac))
    l_before = kl_estimate(p_star, p0, GRID_1D)
    assert np.isclose(delta_pipeline, l_after - l_before, atol=1e-8)


def test_descent_beta_variant_descends():
    p_star = single_gaussian([1.0], 0.7)
    p0 = single_gaussian([0.0], 1.0)
    for beta in (0.75, 0.9):
        disc = IdealDiscriminator(p_star, p0, beta)
        report = descent_check(p_star, p0, disc, "unit", SWEEP, GRID_1D, beta=beta)
        assert report.all_descending


def test_descent_config_enforces_precondition():
    with pytest.raises(ValueError):
        DescentCheckConfig(eta_sweep=(0.2,), g_bound=10.0, jacobian_bound=10.0, h0=1.0)


# -- diagnostics --------------------------------------------------------------------


def test_gap_identical_batches():
    disc = LinearDisc([1.0, 2.0])
    x = make_rng(74).normal(size=(10, 2))
    assert discriminator_gap(disc, x, x) == 0.0


def test_gap_linear_hand_value():
    disc = LinearDisc([2.0])
    real = np.array([[1.0], [2.0]])
    gen = np.array([[0.0], [-1.0]])
    assert np.isclose(discriminator_gap(disc, real, gen), abs(2.0 * 1.5 - 2.0 * (-0.5)))


def test_gap_perfect_generator_statistics():
    # both batches from p*, discriminator = exact log ratio vs a slightly off
    # density: gap shrinks with batch size
    rng = make_rng(75)
    p_star = single_gaussian([0.0, 0.0], 1.0)
    p_gen = single_gaussian([0.1, 0.0], 1.0)
    disc = IdealDiscriminator(p_star, p_gen, 1.0)
    real = p_star.sample(rng, 10_000)
    gen = p_star.sample(rng, 10_000)
    assert discriminator_gap(disc, real, gen) < 0.1


# -- mode score -------------------------------------------------------------------


def test_mode_score_uniform_probs():
    probs = np.full((100, 8), 1.0 / 8.0)
    res = score_from_probs(probs)
    assert np.isclose(res.score, 1.0, atol=1e-12)


def test_mode_score_collapsed_one_class():
    probs = np.zeros((100, 8))
    probs[:, 3] = 1.0
    res = score_from_probs(probs)
    assert np.isclose(res.score, 1.0, atol=1e-12)
    assert res.mode_count == 1


def test_mode_score_balanced_one_hot():
    probs = np.kron(np.ones((10, 1)), np.eye(8))  # 80 rows, balanced classes
    res = score_from_probs(probs)
    assert np.isclose(res.score, 8.0, rtol=1e-12)
    assert res.mode_count == 8


def test_mode_score_bounds():
    rng = make_rng(76)
    probs = softmax(rng.normal(size=(200, 5)))
    res = score_from_probs(probs)
    assert 1.0 <= res.score <= 5.0


def test_classifier_separates_ring_components():
    from cfg_lab.distributions import ring_mixture

    rng = make_rng(77)
    ring = ring_mixture()
    pts, labels = ring.sample_with_components(rng, 4000)
    net = MlpNet.initialize(dense_spec(2, [32], 8, activation="tanh"), rng, 0.5)
    train_softmax_classifier(pts, labels, 8, net, rng, steps=1500, learning_rate=0.01)
    test_pts, test_labels = ring.sample_with_components(rng, 2000)
    pred = np.argmax(net.forward(test_pts), axis=1)
    assert np.mean(pred == test_labels) > 0.97
    res = mode_score(net, test_pts)
    assert res.score > 6.0
    assert res.mode_count == 8
