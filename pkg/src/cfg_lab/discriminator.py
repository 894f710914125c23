"""Logistic-loss discriminators and the analytic ideal they approach.

A discriminator here is anything exposing ``value(x) -> (n,)`` and
``grad(x) -> (n, d)``: a scalar-output :class:`~cfg_lab.nets.MlpNet`, or the
closed-form log-density-ratio built from two analytic densities.  The
weighted loss covers the soft-label variant; ``beta = 1`` is the plain
real-vs-generated logistic regression used by the training drivers.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy.special import expit

from .nets import MlpNet
from .optim import RmspropState, rmsprop_step


def softplus(t):
    """Overflow-safe ln(1 + e^t)."""
    return np.logaddexp(0.0, t)


def logistic_pair_loss(d_real, d_gen, beta: float = 1.0) -> float:
    """Weighted logistic loss over discriminator outputs on real and
    generated batches.

    Real examples count as real with probability ``beta``, generated ones
    with probability ``1 - beta``; each side is averaged separately.
    """
    _check_beta(beta)
    d_real = np.asarray(d_real, dtype=np.float64).ravel()
    d_gen = np.asarray(d_gen, dtype=np.float64).ravel()
    if d_real.size == 0 or d_gen.size == 0:
        raise ValueError("both value lists must be non-empty")
    real_term = np.mean(beta * softplus(-d_real) + (1.0 - beta) * softplus(d_real))
    gen_term = np.mean(beta * softplus(d_gen) + (1.0 - beta) * softplus(-d_gen))
    return float(real_term + gen_term)


def logistic_pair_loss_grads(d_real, d_gen, beta: float = 1.0):
    """d loss / d value for each entry of the two batches."""
    d_real = np.asarray(d_real, dtype=np.float64).ravel()
    d_gen = np.asarray(d_gen, dtype=np.float64).ravel()
    g_real = (expit(d_real) - beta) / d_real.size
    g_gen = (expit(d_gen) - (1.0 - beta)) / d_gen.size
    return g_real, g_gen


def _check_beta(beta: float) -> None:
    if not 0.5 < beta <= 1.0:
        raise ValueError("beta must lie in (0.5, 1]")


@dataclass(frozen=True)
class DiscriminatorConfig:
    """Training-side knobs for a logistic discriminator."""

    beta: float = 1.0
    batch_size: int = 64
    update_freq: int = 1
    learning_rate: float = 1e-4
    decay: float = 0.9
    epsilon: float = 1e-8

    def __post_init__(self):
        _check_beta(self.beta)
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if self.update_freq < 1:
            raise ValueError("update_freq must be at least 1")


class UpdateStats(NamedTuple):
    loss: float
    mean_real: float
    mean_gen: float


def discriminator_update(
    net: MlpNet,
    real_batch,
    gen_batch,
    opt: RmspropState,
    beta: float = 1.0,
) -> UpdateStats:
    """One rmsprop step on the pair loss; mutates net and opt.

    Returns the pre-update batch loss and mean outputs (the by-products
    used for the real-vs-generated output gap diagnostic).
    """
    real_batch = np.asarray(real_batch, dtype=np.float64)
    gen_batch = np.asarray(gen_batch, dtype=np.float64)
    v_real = net.value(real_batch)
    v_gen = net.value(gen_batch)
    loss = logistic_pair_loss(v_real, v_gen, beta)
    g_real, g_gen = logistic_pair_loss_grads(v_real, v_gen, beta)
    batch = np.vstack([real_batch, gen_batch])
    upstream = np.concatenate([g_real, g_gen])[:, None]
    grads = net.backward_params(batch, upstream)
    rmsprop_step(net.params, grads, opt)
    return UpdateStats(loss, float(np.mean(v_real)), float(np.mean(v_gen)))


class IdealDiscriminator:
    """Closed-form discriminator built from two density handles.

    value(x) = ln[(beta p*(x) + (1-beta) p(x)) / ((1-beta) p*(x) + beta p(x))],
    which reduces to the log density ratio ln(p*/p) at beta = 1.  Density
    handles must expose ``log_pdf`` and ``grad_log_pdf``.
    """

    def __init__(self, p_star, p_gen, beta: float = 1.0):
        _check_beta(beta)
        self.p_star = p_star
        self.p_gen = p_gen
        self.beta = float(beta)

    def value(self, x):
        ls = self.p_star.log_pdf(x)
        lg = self.p_gen.log_pdf(x)
        if self.beta == 1.0:
            return ls - lg
        lb = np.log(self.beta)
        lc = np.log1p(-self.beta)
        num = np.logaddexp(lb + ls, lc + lg)
        den = np.logaddexp(lc + ls, lb + lg)
        return num - den

    def grad(self, x):
        gs = self.p_star.grad_log_pdf(x)
        gg = self.p_gen.grad_log_pdf(x)
        if self.beta == 1.0:
            return gs - gg
        ls = np.atleast_1d(self.p_star.log_pdf(x))
        lg = np.atleast_1d(self.p_gen.log_pdf(x))
        gs2 = np.atleast_2d(gs)
        gg2 = np.atleast_2d(gg)
        lb = np.log(self.beta)
        lc = np.log1p(-self.beta)
        num = np.logaddexp(lb + ls, lc + lg)
        den = np.logaddexp(lc + ls, lb + lg)
        # d/dx ln(a p* + b p) = (a p* dlp* + b p dlp) / (a p* + b p)
        w_num_s = np.exp(lb + ls - num)[:, None]
        w_num_g = np.exp(lc + lg - num)[:, None]
        w_den_s = np.exp(lc + ls - den)[:, None]
        w_den_g = np.exp(lb + lg - den)[:, None]
        out = (w_num_s - w_den_s) * gs2 + (w_num_g - w_den_g) * gg2
        return out[0] if np.asarray(gs).ndim == 1 else out


class EpsilonEstimate(NamedTuple):
    mean: float
    stderr: float


def epsilon_measure(
    disc,
    p_star,
    p_gen,
    beta: float,
    n_samples: int,
    rng: np.random.Generator,
) -> EpsilonEstimate:
    """Monte-Carlo measurement of how far a discriminator sits from the
    ideal one.

    Draws x ~ p* and averages
    max(1, ||grad ln p*(x)||) * (|D(x) - I(x)| + |e^D(x) - e^I(x)|)
    where I is the ideal discriminator for (p*, p_gen, beta).
    """
    if n_samples < 1000:
        raise ValueError("n_samples must be at least 1000")
    ideal = IdealDiscriminator(p_star, p_gen, beta)
    x = p_star.sample(rng, n_samples)
    weight = np.maximum(1.0, np.linalg.norm(p_star.grad_log_pdf(x), axis=1))
    dv = np.asarray(disc.value(x), dtype=np.float64)
    iv = np.asarray(ideal.value(x), dtype=np.float64)
    integrand = weight * (np.abs(dv - iv) + np.abs(np.exp(dv) - np.exp(iv)))
    mean = float(np.mean(integrand))
    stderr = float(np.std(integrand, ddof=1) / np.sqrt(n_samples))
    return EpsilonEstimate(mean, stderr)
