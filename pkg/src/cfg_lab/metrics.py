"""Divergence estimation and the numerical checks behind the theory.

Grid quadrature covers the 1D/2D analytic settings where exactness matters
(the descent bounds); the k-nearest-neighbor estimator covers sample-only
settings.  The pushforward density is the change-of-variables oracle: it
inverts each functional-gradient step by fixed-point iteration and
accumulates Jacobian determinants, giving the exact density of the
transformed variable up to finite-difference error.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np
from scipy.interpolate import CubicSpline, RectBivariateSpline
from scipy.spatial import cKDTree
from scipy.special import expit

from .generator import GradStep
from .nets import MlpNet
from .optim import RmspropState, rmsprop_step

_TINY_LOG = -745.0  # exp() underflows to 0 a little below this


@dataclass(frozen=True)
class Grid:
    """Uniform cell-centered grid over a 1D or 2D box.

    Quadrature is the midpoint rule: sum of values times cell volume.  For
    smooth light-tailed integrands on a box that contains the tails this is
    accurate far beyond the tolerances used here.
    """

    lows: tuple[float, ...]
    highs: tuple[float, ...]
    spacing: float

    def __post_init__(self):
        if len(self.lows) != len(self.highs) or not 1 <= len(self.lows) <= 2:
            raise ValueError("grid must be 1D or 2D with matching bounds")
        if self.spacing <= 0.0:
            raise ValueError("spacing must be positive")
        if any(h <= l for l, h in zip(self.lows, self.highs)):
            raise ValueError("each high bound must exceed its low bound")

    @property
    def dim(self) -> int:
        return len(self.lows)

    @property
    def cell_volume(self) -> float:
        return self.spacing**self.dim

    def axes(self) -> list[np.ndarray]:
        return [
            lo + self.spacing * (0.5 + np.arange(int(round((hi - lo) / self.spacing))))
            for lo, hi in zip(self.lows, self.highs)
        ]

    def nodes(self) -> np.ndarray:
        axes = self.axes()
        if self.dim == 1:
            return axes[0][:, None]
        xx, yy = np.meshgrid(axes[0], axes[1], indexing="ij")
        return np.column_stack([xx.ravel(), yy.ravel()])

    def integrate(self, values: np.ndarray) -> float:
        return float(np.sum(values) * self.cell_volume)


def _pdf_of(density, x) -> np.ndarray:
    if hasattr(density, "pdf"):
        return np.asarray(density.pdf(x), dtype=np.float64)
    return np.asarray(density(x), dtype=np.float64)


class StepTooLargeError(RuntimeError):
    """Fixed-point inversion of a step failed to contract."""


def invert_step(step: GradStep, x: np.ndarray, tol: float = 1e-12, max_iter: int = 200) -> np.ndarray:
    """Solve y + eta*g(y) = x by damped fixed-point iteration.

    Starts from the plain contraction map y <- x - eta*g(y) and halves the
    damping factor whenever the update size stalls, which rescues mildly
    non-contractive regions (eta * Lipschitz slightly above 1) without
    changing the fixed point.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    y = x.copy()
    alpha = 1.0
    prev_delta = np.inf
    stall = 0
    for _ in range(max_iter):
        target = x - step.eta * step.vector_field(y)
        y_next = y + alpha * (target - y)
        delta = float(np.max(np.abs(y_next - y)))
        y = y_next
        if delta < tol * alpha:
            return y
        if delta >= 0.9 * prev_delta:
            stall += 1
            if stall >= 3 and alpha > 0.0625:
                alpha *= 0.5
                stall = 0
        else:
            stall = 0
        prev_delta = delta
    raise StepTooLargeError(
        f"step inversion did not converge within {max_iter} iterations "
        f"(eta={step.eta}); the step is too large to be a contraction"
    )


def _step_jacobians(step: GradStep, y: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central-difference Jacobians of f(x) = x + eta*g(x) at each row of y.

    Returns (n, d, d) with J[:, :, j] = d f / d x_j.
    """
    n, d = y.shape
    jac = np.empty((n, d, d))
    for j in range(d):
        bump = np.zeros((1, d))
        bump[0, j] = h
        jac[:, :, j] = (step.apply(y + bump) - step.apply(y - bump)) / (2.0 * h)
    return jac


def _log_abs_det(jac: np.ndarray) -> np.ndarray:
    d = jac.shape[1]
    if d == 1:
        det = jac[:, 0, 0]
    else:
        det = jac[:, 0, 0] * jac[:, 1, 1] - jac[:, 0, 1] * jac[:, 1, 0]
    return np.log(np.abs(det))


def pushforward_log_density(
    p0,
    steps: Sequence[GradStep],
    x,
    jacobian_h: float = 1e-6,
    tol: float = 1e-12,
    max_iter: int = 200,
) -> np.ndarray:
    """Log density at x of p0 pushed through the given steps.

    Each step is inverted newest-first; the density follows the standard
    change-of-variables formula with the accumulated log |det| of the
    forward Jacobians evaluated at the preimages.
    """
    y = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if y.shape[1] > 2:
        raise ValueError("pushforward densities are only supported in 1D/2D")
    log_det = np.zeros(y.shape[0])
    for step in reversed(list(steps)):
        y = invert_step(step, y, tol=tol, max_iter=max_iter)
        log_det += _log_abs_det(_step_jacobians(step, y, h=jacobian_h))
    if hasattr(p0, "log_pdf"):
        base = np.asarray(p0.log_pdf(y), dtype=np.float64)
    else:
        base = np.log(np.maximum(_pdf_of(p0, y), np.exp(_TINY_LOG)))
    return base - log_det


def pushforward_density(p0, steps: Sequence[GradStep], x, **kwargs) -> np.ndarray:
    """Density of the transformed variable at x (see pushforward_log_density)."""
    single = np.asarray(x).ndim == 1
    out = np.exp(pushforward_log_density(p0, steps, x, **kwargs))
    return float(out[0]) if single else out


class PushforwardDensity:
    """Density handle for a base density pushed through gradient steps.

    ``grad_log_pdf`` uses central differences; the gradient is only needed
    where the ideal-discriminator machinery consumes this handle.
    """

    def __init__(self, p0, steps: Sequence[GradStep], grad_h: float = 1e-6):
        self.p0 = p0
        self.steps = list(steps)
        self.grad_h = grad_h

    def log_pdf(self, x):
        pts = np.asarray(x, dtype=np.float64)
        out = pushforward_log_density(self.p0, self.steps, pts)
        return float(out[0]) if pts.ndim == 1 else out

    def pdf(self, x):
        out = np.exp(self.log_pdf(x))
        return out

    def grad_log_pdf(self, x):
        pts = np.atleast_2d(np.asarray(x, dtype=np.float64))
        n, d = pts.shape
        grad = np.empty((n, d))
        for j in range(d):
            bump = np.zeros((1, d))
            bump[0, j] = self.grad_h
            hi = pushforward_log_density(self.p0, self.steps, pts + bump)
            lo = pushforward_log_density(self.p0, self.steps, pts - bump)
            grad[:, j] = (hi - lo) / (2.0 * self.grad_h)
        return grad[0] if np.asarray(x).ndim == 1 else grad


class TabulatedDensity:
    """Spline interpolant of a log density sampled on a grid.

    Outside the grid box the log density continues linearly from the nearest
    edge (value plus edge gradient times overshoot).  That keeps the
    log-gradient bounded everywhere, which the fixed-point step inversion
    needs, while staying faithful wherever the box covers the mass.
    """

    def __init__(self, grid: Grid, log_values: np.ndarray):
        axes = grid.axes()
        self.grid = grid
        self._lo = np.array([ax[0] for ax in axes])
        self._hi = np.array([ax[-1] for ax in axes])
        if grid.dim == 1:
            self._spline = CubicSpline(axes[0], np.asarray(log_values, dtype=np.float64))
            self._dspline = self._spline.derivative()
        else:
            vals = np.asarray(log_values, dtype=np.float64).reshape(len(axes[0]), len(axes[1]))
            self._spline = RectBivariateSpline(axes[0], axes[1], vals, kx=3, ky=3)

    def _split(self, x) -> tuple[np.ndarray, np.ndarray]:
        pts = np.atleast_2d(np.asarray(x, dtype=np.float64))
        inner = np.clip(pts, self._lo, self._hi)
        return inner, pts - inner

    def _eval_inner(self, inner: np.ndarray) -> np.ndarray:
        if self.grid.dim == 1:
            return self._spline(inner[:, 0])
        return self._spline.ev(inner[:, 0], inner[:, 1])

    def _grad_inner(self, inner: np.ndarray) -> np.ndarray:
        if self.grid.dim == 1:
            return self._dspline(inner[:, 0])[:, None]
        gx = self._spline.ev(inner[:, 0], inner[:, 1], dx=1)
        gy = self._spline.ev(inner[:, 0], inner[:, 1], dy=1)
        return np.column_stack([gx, gy])

    def log_pdf(self, x):
        inner, overshoot = self._split(x)
        out = self._eval_inner(inner)
        out = out + np.sum(self._grad_inner(inner) * overshoot, axis=1)
        return float(out[0]) if np.asarray(x).ndim == 1 else out

    def pdf(self, x):
        return np.exp(self.log_pdf(x))

    def grad_log_pdf(self, x):
        inner, _ = self._split(x)
        grad = self._grad_inner(inner)
        return grad[0] if np.asarray(x).ndim == 1 else grad


def tabulate_pushforward(p0, steps: Sequence[GradStep], grid: Grid) -> TabulatedDensity:
    """Freeze the pushforward of p0 through steps into a grid spline."""
    log_vals = pushforward_log_density(p0, steps, grid.nodes())
    return TabulatedDensity(grid, log_vals)


# -- divergences -------------------------------------------------------------


def kl_estimate(p_star, p_gen, grid: Grid) -> float:
    """Grid quadrature of KL(p* || p) in nats."""
    nodes = grid.nodes()
    ps = _pdf_of(p_star, nodes)
    pg = np.maximum(_pdf_of(p_gen, nodes), np.exp(_TINY_LOG))
    mask = ps > 0.0
    vals = np.zeros_like(ps)
    vals[mask] = ps[mask] * (np.log(ps[mask]) - np.log(pg[mask]))
    return grid.integrate(vals)


def extended_kl(p_star, p_gen, beta: float, grid: Grid) -> float:
    """Quadrature of the beta-mixture divergence

    integral (beta p* + (1-beta) p) ln[(beta p* + (1-beta) p) /
                                       ((1-beta) p* + beta p)],

    which equals plain KL(p* || p) at beta = 1 and vanishes at beta = 0.5.
    """
    if not 0.0 < beta <= 1.0:
        raise ValueError("beta must lie in (0, 1]")
    nodes = grid.nodes()
    ps = _pdf_of(p_star, nodes)
    pg = np.maximum(_pdf_of(p_gen, nodes), np.exp(_TINY_LOG))
    num = beta * ps + (1.0 - beta) * pg
    den = (1.0 - beta) * ps + beta * pg
    mask = num > 0.0
    vals = np.zeros_like(ps)
    vals[mask] = num[mask] * (np.log(num[mask]) - np.log(den[mask]))
    return grid.integrate(vals)


def kl_knn(real_points: np.ndarray, gen_points: np.ndarray, k: int = 5) -> float:
    """k-nearest-neighbor estimate of KL(p* || p) from two sample sets.

    Classic distance-ratio estimator: for each real point compare the k-th
    neighbor distance within the real sample to the k-th neighbor distance
    in the generated sample.
    """
    real_points = np.asarray(real_points, dtype=np.float64)
    gen_points = np.asarray(gen_points, dtype=np.float64)
    n, d = real_points.shape
    m = gen_points.shape[0]
    if k < 1 or n <= k or m < k:
        raise ValueError("need more samples than neighbors")
    rho = cKDTree(real_points).query(real_points, k=k + 1)[0][:, k]
    nu = cKDTree(gen_points).query(real_points, k=k)[0]
    if k > 1:
        nu = nu[:, k - 1]
    rho = np.maximum(rho, 1e-12)
    nu = np.maximum(nu, 1e-12)
    return float(d * np.mean(np.log(nu / rho)) + np.log(m / (n - 1.0)))


# -- descent verification ----------------------------------------------------


@dataclass(frozen=True)
class DescentCheckConfig:
    """Sweep and the theorem's preconditions.

    ``g_bound`` / ``jacobian_bound`` / ``h0`` are the boundedness knobs the
    one-step guarantee is stated with; every eta in the sweep must satisfy
    eta < min(1/jacobian_bound, h0/g_bound).  The curvature constant is
    never assumed -- it is estimated from the sweep itself.
    """

    eta_sweep: tuple[float, ...]
    g_bound: float = 10.0
    jacobian_bound: float = 10.0
    h0: float = 1.0
    epsilon_budget: float = 0.0

    def __post_init__(self):
        if not self.eta_sweep:
            raise ValueError("eta_sweep must be non-empty")
        limit = min(1.0 / self.jacobian_bound, self.h0 / self.g_bound)
        for eta in self.eta_sweep:
            if not 0.0 < eta < limit:
                raise ValueError(
                    f"eta={eta} violates the precondition eta < min(1/b, h0/a) = {limit}"
                )


class DescentRow(NamedTuple):
    eta: float
    delta_l: float
    first_order: float
    residual: float
    converged: bool


@dataclass
class DescentReport:
    beta: float
    scaling: str
    rows: list[DescentRow]
    residual_slope: float

    @property
    def all_descending(self) -> bool:
        return all(r.delta_l < 0.0 for r in self.rows if r.converged)


def descent_check(
    p_star,
    p0,
    disc,
    scaling: str,
    cfg: DescentCheckConfig,
    grid: Grid,
    beta: float = 1.0,
) -> DescentReport:
    """Verify the one-step divergence descent bound empirically.

    For each eta: push p0 through x + eta*s(x)*grad D(x), measure the
    divergence change via the pushforward density and quadrature, compare
    against the first-order term, and report the residual.  The log-log
    slope of |residual| against eta estimates the order of the remainder
    (the bound promises order two).
    """
    nodes = grid.nodes()
    ps = _pdf_of(p_star, nodes)
    dvals = np.asarray(disc.value(nodes), dtype=np.float64)
    dgrad = np.asarray(disc.grad(nodes), dtype=np.float64)
    grad_sq = np.sum(dgrad * dgrad, axis=1)
    if scaling == "unit":
        s = np.ones_like(dvals)
    elif scaling == "s0":
        s = expit(dvals)
    elif scaling == "s1":
        s = expit(-dvals)
    else:
        raise ValueError(f"unknown scaling {scaling!r}")
    if beta == 1.0:
        u = np.ones_like(dvals)
        l_before = kl_estimate(p_star, p0, grid)
    else:
        u = beta - (1.0 - beta) * np.exp(dvals)
        l_before = extended_kl(p_star, p0, beta, grid)
    first_order_rate = -grid.integrate(ps * u * s * grad_sq)

    rows = []
    for eta in cfg.eta_sweep:
        step = GradStep(disc, eta, scaling)
        try:
            pf = PushforwardDensity(p0, [step])
            if beta == 1.0:
                l_after = kl_estimate(p_star, pf, grid)
            else:
                l_after = extended_kl(p_star, pf, beta, grid)
        except StepTooLargeError:
            rows.append(DescentRow(eta, np.nan, eta * first_order_rate, np.nan, False))
            continue
        delta = l_after - l_before
        first = eta * first_order_rate
        rows.append(DescentRow(eta, delta, first, delta - first, True))

    good = [(r.eta, abs(r.residual)) for r in rows if r.converged and abs(r.residual) > 0.0]
    if len(good) >= 2:
        log_eta = np.log([g[0] for g in good])
        log_res = np.log([g[1] for g in good])
        slope = float(np.polyfit(log_eta, log_res, 1)[0])
    else:
        slope = float("nan")
    return DescentReport(beta, scaling, rows, slope)


def contraction_bound(step: GradStep, probe_points: np.ndarray, h: float = 1e-5) -> float:
    """Estimate eta * max ||grad g|| over probe points (spectral norm via
    finite-difference Jacobians); values below 1 admit fixed-point
    inversion."""
    pts = np.atleast_2d(np.asarray(probe_points, dtype=np.float64))
    n, d = pts.shape
    jac = np.empty((n, d, d))
    for j in range(d):
        bump = np.zeros((1, d))
        bump[0, j] = h
        jac[:, :, j] = (step.vector_field(pts + bump) - step.vector_field(pts - bump)) / (2.0 * h)
    norms = np.linalg.norm(jac, ord=2, axis=(1, 2))
    return float(step.eta * norms.max())


# -- training diagnostics -----------------------------------------------------


def discriminator_gap(disc, real_batch, gen_batch) -> float:
    """Absolute gap between mean discriminator outputs on real vs generated
    points; the cheap health indicator logged as delta_d."""
    vr = np.asarray(disc.value(real_batch), dtype=np.float64)
    vg = np.asarray(disc.value(gen_batch), dtype=np.float64)
    if vr.size == 0 or vg.size == 0:
        raise ValueError("batches must be non-empty")
    return float(abs(vr.mean() - vg.mean()))


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


class ModeScoreResult(NamedTuple):
    score: float
    class_freqs: np.ndarray
    mode_count: int


def score_from_probs(probs: np.ndarray, mass_threshold: float = 0.02) -> ModeScoreResult:
    """Inception-style score from per-sample class probabilities.

    score = exp(mean_x KL(p(y|x) || mean_x p(y|x))); the mode count is the
    number of classes receiving at least ``mass_threshold`` of the argmax
    assignments.
    """
    probs = np.asarray(probs, dtype=np.float64)
    marginal = probs.mean(axis=0)
    mask = probs > 0.0
    logs = np.zeros_like(probs)
    logs[mask] = np.log(probs[mask]) - np.log(marginal[None, :].repeat(probs.shape[0], 0)[mask])
    kl = np.sum(probs * logs, axis=1)
    freqs = np.bincount(np.argmax(probs, axis=1), minlength=probs.shape[1]) / probs.shape[0]
    return ModeScoreResult(float(np.exp(kl.mean())), freqs, int(np.sum(freqs >= mass_threshold)))


def mode_score(classifier: MlpNet, gen_samples, mass_threshold: float = 0.02) -> ModeScoreResult:
    """Mode score of generated samples under a softmax classifier."""
    logits = classifier.forward(np.asarray(gen_samples, dtype=np.float64))
    return score_from_probs(softmax(logits), mass_threshold)


def train_softmax_classifier(
    points: np.ndarray,
    labels: np.ndarray,
    n_classes: int,
    net: MlpNet,
    rng: np.random.Generator,
    steps: int = 2000,
    batch_size: int = 128,
    learning_rate: float = 1e-2,
) -> MlpNet:
    """Multinomial logistic fit by rmsprop; used to label generated samples
    for the mode score."""
    points = np.asarray(points, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if net.out_dim != n_classes:
        raise ValueError("classifier output dim must equal the class count")
    opt = RmspropState.for_params(net.params, learning_rate)
    n = points.shape[0]
    onehot = np.eye(n_classes)
    for _ in range(steps):
        sel = rng.integers(0, n, size=min(batch_size, n))
        xb, yb = points[sel], labels[sel]
        probs = softmax(net.forward(xb))
        upstream = (probs - onehot[yb]) / sel.size
        grads = net.backward_params(xb, upstream)
        rmsprop_step(net.params, grads, opt)
    return net
