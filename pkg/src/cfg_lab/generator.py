"""The composite generator: base map plus functional-gradient steps.

A generator is ``base(z)`` followed by an ordered list of steps
``x <- x + eta * s(x) * grad D(x)``, each holding a frozen discriminator
snapshot.  The input pool caches the latest outputs per latent draw so the
incremental driver never replays the whole composition, and the
approximator is the fixed-size net that the compression phase distills the
composition into.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .nets import MlpNet
from .optim import RmspropState, rmsprop_step

SCALINGS = ("unit", "s0", "s1")


def _smoothstep(u: np.ndarray) -> np.ndarray:
    t = np.clip(u, 0.0, 1.0)
    return t * t * (3.0 - 2.0 * t)


@dataclass(frozen=True)
class SmoothBoxWindow:
    """Positive scaling that is 1 well inside a box and decays smoothly to 0
    at its faces.

    The descent theory allows any positive data-dependent scaling; this one
    keeps step vector fields bounded (identity map outside the box), which
    the density-transport machinery relies on.
    """

    lows: tuple[float, ...]
    highs: tuple[float, ...]
    margin: float = 2.0

    def __call__(self, x) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(x, dtype=np.float64))
        w = np.ones(pts.shape[0])
        for d, (lo, hi) in enumerate(zip(self.lows, self.highs)):
            w = w * _smoothstep((pts[:, d] - lo) / self.margin)
            w = w * _smoothstep((hi - pts[:, d]) / self.margin)
        return w


class GradStep:
    """One frozen functional-gradient step.

    ``scaling`` selects s(x): 1 for "unit", the logistic sigmoid of the
    discriminator output for "s0", and the sigmoid of its negation for "s1"
    (the two scalings induced by the plain and log-trick GAN generator
    objectives).  An optional ``window`` multiplies the vector field by a
    further positive scaling.
    """

    def __init__(self, discriminator, eta: float, scaling: str = "unit", window=None):
        if eta <= 0.0:
            raise ValueError("eta must be positive")
        if scaling not in SCALINGS:
            raise ValueError(f"unknown scaling {scaling!r}")
        self.discriminator = discriminator
        self.eta = float(eta)
        self.scaling = scaling
        self.window = window

    def scale_values(self, x) -> np.ndarray:
        """s(x) for a batch of points."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if self.scaling == "unit":
            s = np.ones(x.shape[0])
        else:
            v = np.asarray(self.discriminator.value(x), dtype=np.float64)
            s = expit(v) if self.scaling == "s0" else expit(-v)
        if self.window is not None:
            s = s * self.window(x)
        return s

    def vector_field(self, x) -> np.ndarray:
        """g(x) = s(x) * grad D(x), the update direction before eta."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        g = np.asarray(self.discriminator.grad(x), dtype=np.float64)
        if self.scaling == "unit" and self.window is None:
            return g
        return self.scale_values(x)[:, None] * g

    def apply(self, x) -> np.ndarray:
        arr = np.asarray(x, dtype=np.float64)
        single = arr.ndim == 1
        batch = np.atleast_2d(arr)
        out = batch + self.eta * self.vector_field(batch)
        return out[0] if single else out


@dataclass(frozen=True)
class AffineBase:
    """Elementwise affine base map: z -> shift + scale * z.

    With a standard-Gaussian latent this makes the initial generated density
    an exactly known Gaussian, which the analytic tasks rely on.
    """

    shift: np.ndarray
    scale: np.ndarray

    @classmethod
    def for_gaussian(cls, mean, stddev) -> "AffineBase":
        mean = np.atleast_1d(np.asarray(mean, dtype=np.float64))
        stddev = np.broadcast_to(np.asarray(stddev, dtype=np.float64), mean.shape).copy()
        return cls(mean, stddev)

    @property
    def in_dim(self) -> int:
        return self.shift.shape[0]

    def apply(self, z) -> np.ndarray:
        z = np.asarray(z, dtype=np.float64)
        return self.shift + self.scale * z


@dataclass(frozen=True)
class ProjectionBase:
    """Bias-free random linear map from latent space to data space."""

    weight: np.ndarray

    @classmethod
    def random(cls, zdim: int, xdim: int, rng: np.random.Generator, stddev: float = 0.01):
        return cls(rng.normal(0.0, stddev, size=(zdim, xdim)))

    @property
    def in_dim(self) -> int:
        return self.weight.shape[0]

    def apply(self, z) -> np.ndarray:
        return np.asarray(z, dtype=np.float64) @ self.weight


@dataclass
class GeneratorStack:
    """Composed generator: base map plus ordered functional-gradient steps."""

    base: object
    steps: list[GradStep] = field(default_factory=list)

    def push(self, step: GradStep) -> None:
        self.steps.append(step)

    def apply_steps(self, x, start: int = 0, stop: int | None = None) -> np.ndarray:
        stop = len(self.steps) if stop is None else stop
        out = np.asarray(x, dtype=np.float64)
        for step in self.steps[start:stop]:
            out = step.apply(out)
        return out

    def apply(self, z) -> np.ndarray:
        return self.apply_steps(self.base.apply(z))

    def sample(self, rng: np.random.Generator, prior, n: int) -> np.ndarray:
        return self.apply(prior.sample(rng, n))


class PoolStampError(RuntimeError):
    """Cache stamps are inconsistent with the stack's step list."""


class InputPool:
    """Latent draws with cached generator outputs.

    ``stamps[i]`` records through how many steps ``x[i]`` has been advanced;
    advancing applies exactly the missing steps, so the cache always equals
    a from-scratch replay of the composition.
    """

    def __init__(self, z: np.ndarray, x: np.ndarray, stamps: np.ndarray):
        self.z = np.asarray(z, dtype=np.float64)
        self.x = np.asarray(x, dtype=np.float64)
        self.stamps = np.asarray(stamps, dtype=np.int64)
        if self.z.shape[0] != self.x.shape[0] or self.z.shape[0] != self.stamps.shape[0]:
            raise ValueError("z, x, stamps must have one row per entry")

    @classmethod
    def from_base(cls, stack: GeneratorStack, z) -> "InputPool":
        z = np.asarray(z, dtype=np.float64)
        x = stack.base.apply(z)
        return cls(z, x, np.zeros(z.shape[0], dtype=np.int64))

    def __len__(self) -> int:
        return self.z.shape[0]

    def advance(self, stack: GeneratorStack, indices=None, target: int | None = None) -> None:
        """Advance cached outputs to ``target`` (default: all steps in the
        stack), touching only the selected entries."""
        target = len(stack.steps) if target is None else target
        if target > len(stack.steps):
            raise PoolStampError(
                f"cannot advance to stamp {target}: stack has {len(stack.steps)} steps"
            )
        idx = np.arange(len(self)) if indices is None else np.asarray(indices)
        stamps = self.stamps[idx]
        if np.any(stamps > target):
            raise PoolStampError("pool entry is ahead of the requested stamp")
        for stamp in np.unique(stamps):
            if stamp == target:
                continue
            sel = idx[stamps == stamp]
            self.x[sel] = stack.apply_steps(self.x[sel], start=int(stamp), stop=target)
            self.stamps[sel] = target

    def pairs(self) -> tuple[np.ndarray, np.ndarray]:
        return self.z, self.x


@dataclass
class Approximator:
    """Fixed-size net distilled to mimic a composed generator."""

    net: MlpNet
    distill_epochs_cap: int = 10
    learning_rate: float = 1e-4
    decay: float = 0.9
    epsilon: float = 1e-8
    plateau_rtol: float = 1e-6

    def apply(self, z) -> np.ndarray:
        return self.net.forward(z)


def _mse_loss(net: MlpNet, z: np.ndarray, targets: np.ndarray) -> float:
    diff = net.forward(z) - targets
    return float(0.5 * np.mean(np.sum(diff * diff, axis=1)))


def approximator_distill(
    approx: Approximator,
    z,
    targets,
    rng: np.random.Generator,
    batch_size: int = 64,
) -> float:
    """Fit the approximator to (z, target) pairs by mini-batch rmsprop on
    half squared error.

    Runs at most ``distill_epochs_cap`` epochs; whenever an epoch fails to
    improve the training loss (relative tolerance ``plateau_rtol``) the
    learning rate is multiplied by 0.1.  Returns the final training loss.
    """
    z = np.asarray(z, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if z.shape[0] == 0:
        raise ValueError("distillation needs at least one pair")
    net = approx.net
    lr = approx.learning_rate
    opt = RmspropState.for_params(net.params, lr, approx.decay, approx.epsilon)
    n = z.shape[0]
    epoch_loss = _mse_loss(net, z, targets)
    for _ in range(approx.distill_epochs_cap):
        order = rng.permutation(n)
        for lo in range(0, n, batch_size):
            sel = order[lo : lo + batch_size]
            zb, tb = z[sel], targets[sel]
            out = net.forward(zb)
            upstream = (out - tb) / sel.size
            grads = net.backward_params(zb, upstream)
            rmsprop_step(net.params, grads, opt)
        prev, epoch_loss = epoch_loss, _mse_loss(net, z, targets)
        if epoch_loss > prev * (1.0 - approx.plateau_rtol):
            opt.learning_rate *= 0.1
    return epoch_loss


def approximator_init(
    prior,
    data_dim: int,
    net: MlpNet,
    rng: np.random.Generator,
    pool_size: int = 640,
    batch_size: int = 64,
    projection_stddev: float = 0.01,
    **approx_kwargs,
) -> tuple[Approximator, float]:
    """Build the starting approximator: create a random projection map to
    data space, then distill the fresh net onto it over one pool of prior
    draws.  Returns the approximator and its fit loss."""
    if net.in_dim != prior.dim:
        raise ValueError("approximator input dim must match the prior")
    if net.out_dim != data_dim:
        raise ValueError("approximator output dim must match the data")
    g_rand = ProjectionBase.random(prior.dim, data_dim, rng, projection_stddev)
    approx = Approximator(net, **approx_kwargs)
    z = prior.sample(rng, pool_size)
    targets = g_rand.apply(z)
    loss = approximator_distill(approx, z, targets, rng, batch_size=batch_size)
    return approx, loss
