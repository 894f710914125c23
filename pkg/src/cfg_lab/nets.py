"""Small dense networks with exact reverse-mode gradients.

Every trainable function in this package -- discriminators, approximators,
classifiers, GAN generators -- is one of these fixed-layout MLPs.  The layer
set is deliberately tiny (linear / projection plus relu, leaky_relu, tanh) so
that backprop with respect to both parameters and inputs stays exact and easy
to audit against finite differences.  All math is float64.

Forward evaluation is pure; training code mutates ``params`` in place through
the optimizer (single writer per net).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

LAYER_KINDS = ("linear", "projection", "relu", "leaky_relu", "tanh")

DEFAULT_INIT_STDDEV = 0.01
DEFAULT_LEAKY_SLOPE = 0.2


class ConfigurationError(ValueError):
    """Inconsistent layer specs, parameter shapes, or batch dimensions."""


@dataclass(frozen=True)
class LayerSpec:
    """One layer of an MLP.

    ``linear`` is an affine map (weight + bias), ``projection`` is a bias-free
    linear map, and the remaining kinds are elementwise activations that must
    keep the dimension unchanged.  ``slope`` is only meaningful for
    ``leaky_relu``.
    """

    kind: str
    in_dim: int
    out_dim: int
    slope: float = DEFAULT_LEAKY_SLOPE

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ConfigurationError(f"unknown layer kind {self.kind!r}")
        if self.in_dim < 1 or self.out_dim < 1:
            raise ConfigurationError("layer dimensions must be positive")
        if self.kind in ("relu", "leaky_relu", "tanh") and self.in_dim != self.out_dim:
            raise ConfigurationError(f"{self.kind} layer cannot change dimension")
        if self.kind == "leaky_relu" and not 0.0 < self.slope < 1.0:
            raise ConfigurationError("leaky_relu slope must lie in (0, 1)")

    @property
    def has_weights(self) -> bool:
        return self.kind in ("linear", "projection")

    @property
    def has_bias(self) -> bool:
        return self.kind == "linear"


def dense_spec(
    in_dim: int,
    hidden: Sequence[int],
    out_dim: int,
    *,
    activation: str = "relu",
    out_activation: str | None = None,
    leaky_slope: float = DEFAULT_LEAKY_SLOPE,
) -> list[LayerSpec]:
    """Layer specs for the usual stack: linear + activation per hidden width,
    then a linear output layer and an optional output activation."""
    if activation not in ("relu", "leaky_relu", "tanh"):
        raise ConfigurationError(f"unsupported hidden activation {activation!r}")
    layers: list[LayerSpec] = []
    prev = in_dim
    for width in hidden:
        layers.append(LayerSpec("linear", prev, width))
        layers.append(LayerSpec(activation, width, width, slope=leaky_slope))
        prev = width
    layers.append(LayerSpec("linear", prev, out_dim))
    if out_activation is not None:
        if out_activation not in ("relu", "leaky_relu", "tanh"):
            raise ConfigurationError(f"unsupported output activation {out_activation!r}")
        layers.append(LayerSpec(out_activation, out_dim, out_dim, slope=leaky_slope))
    return layers


def _as_batch(x) -> tuple[np.ndarray, bool]:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 1:
        return arr[None, :], True
    if arr.ndim == 2:
        return arr, False
    raise ConfigurationError(f"expected a point or a batch of points, got ndim={arr.ndim}")


class MlpNet:
    """Ordered layer specs plus their parameter arrays.

    Parameters are stored in declaration order: weight then bias for each
    ``linear`` layer, weight only for ``projection``, nothing for activations.
    """

    def __init__(self, layers: Sequence[LayerSpec], params: Sequence[np.ndarray]):
        self.layers = tuple(layers)
        if not self.layers:
            raise ConfigurationError("a net needs at least one layer")
        for prev, cur in zip(self.layers, self.layers[1:]):
            if prev.out_dim != cur.in_dim:
                raise ConfigurationError(
                    f"layer dimension mismatch: {prev.kind}({prev.out_dim}) feeds "
                    f"{cur.kind}({cur.in_dim})"
                )
        # Map each layer to the indices of its weight / bias in `params`.
        slots: list[tuple[int, int | None] | None] = []
        idx = 0
        for spec in self.layers:
            if spec.has_weights:
                w_idx = idx
                idx += 1
                b_idx = None
                if spec.has_bias:
                    b_idx = idx
                    idx += 1
                slots.append((w_idx, b_idx))
            else:
                slots.append(None)
        self._slots = slots

        params = [np.ascontiguousarray(p, dtype=np.float64) for p in params]
        if len(params) != idx:
            raise ConfigurationError(f"expected {idx} parameter arrays, got {len(params)}")
        for spec, slot in zip(self.layers, slots):
            if slot is None:
                continue
            w_idx, b_idx = slot
            if params[w_idx].shape != (spec.in_dim, spec.out_dim):
                raise ConfigurationError(
                    f"weight shape {params[w_idx].shape} does not match "
                    f"{spec.kind}({spec.in_dim}, {spec.out_dim})"
                )
            if b_idx is not None and params[b_idx].shape != (spec.out_dim,):
                raise ConfigurationError(
                    f"bias shape {params[b_idx].shape} does not match out_dim {spec.out_dim}"
                )
        for p in params:
            if not np.all(np.isfinite(p)):
                raise ConfigurationError("parameters must be finite")
        self.params = params

    @classmethod
    def initialize(
        cls,
        layers: Sequence[LayerSpec],
        rng: np.random.Generator,
        init_stddev: float = DEFAULT_INIT_STDDEV,
    ) -> "MlpNet":
        """Gaussian(0, init_stddev) weights, zero biases."""
        params = []
        for spec in layers:
            if spec.has_weights:
                params.append(rng.normal(0.0, init_stddev, size=(spec.in_dim, spec.out_dim)))
                if spec.has_bias:
                    params.append(np.zeros(spec.out_dim))
        return cls(layers, params)

    @property
    def in_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def out_dim(self) -> int:
        return self.layers[-1].out_dim

    @property
    def n_params(self) -> int:
        return sum(p.size for p in self.params)

    def copy(self) -> "MlpNet":
        """Deep copy; used to freeze discriminator snapshots."""
        return MlpNet(self.layers, [p.copy() for p in self.params])

    # -- forward ---------------------------------------------------------

    def _trace(self, batch: np.ndarray) -> list[np.ndarray]:
        acts = [batch]
        h = batch
        for spec, slot in zip(self.layers, self._slots):
            if spec.kind in ("linear", "projection"):
                w_idx, b_idx = slot
                h = h @ self.params[w_idx]
                if b_idx is not None:
                    h = h + self.params[b_idx]
            elif spec.kind == "relu":
                h = np.maximum(h, 0.0)
            elif spec.kind == "leaky_relu":
                h = np.where(h > 0.0, h, spec.slope * h)
            elif spec.kind == "tanh":
                h = np.tanh(h)
            acts.append(h)
        return acts

    def forward(self, x) -> np.ndarray:
        """Evaluate the net on a point (in_dim,) or batch (n, in_dim)."""
        batch, single = _as_batch(x)
        if batch.shape[1] != self.in_dim:
            raise ConfigurationError(
                f"input has {batch.shape[1]} columns, net expects {self.in_dim}"
            )
        out = self._trace(batch)[-1]
        return out[0] if single else out

    def apply(self, z) -> np.ndarray:
        """Alias for forward; lets a net serve as a generator base map."""
        return self.forward(z)

    def value(self, x):
        """Scalar-output forward, squeezed to (n,) or a float."""
        if self.out_dim != 1:
            raise ConfigurationError("value() requires a scalar-output net")
        out = self.forward(x)
        return float(out[0]) if out.ndim == 1 else out[:, 0]

    # -- backward --------------------------------------------------------

    def _backward(
        self, acts: list[np.ndarray], upstream: np.ndarray
    ) -> tuple[list[np.ndarray], np.ndarray]:
        grads = [np.zeros_like(p) for p in self.params]
        g = upstream
        for i in range(len(self.layers) - 1, -1, -1):
            spec = self.layers[i]
            a_in = acts[i]
            if spec.kind in ("linear", "projection"):
                w_idx, b_idx = self._slots[i]
                grads[w_idx] = a_in.T @ g
                if b_idx is not None:
                    grads[b_idx] = g.sum(axis=0)
                g = g @ self.params[w_idx].T
            elif spec.kind == "relu":
                g = g * (a_in > 0.0)
            elif spec.kind == "leaky_relu":
                g = np.where(a_in > 0.0, g, spec.slope * g)
            elif spec.kind == "tanh":
                out = acts[i + 1]
                g = g * (1.0 - out * out)
        return grads, g

    def backward_params(self, batch, upstream) -> list[np.ndarray]:
        """Gradients of sum_i <upstream_i, output_i> with respect to params.

        Returned arrays match ``self.params`` in order and shape.
        """
        batch, _ = _as_batch(batch)
        upstream = np.asarray(upstream, dtype=np.float64)
        if upstream.ndim == 1:
            upstream = upstream[None, :]
        if upstream.shape != (batch.shape[0], self.out_dim):
            raise ConfigurationError(
                f"upstream shape {upstream.shape} does not match output "
                f"({batch.shape[0]}, {self.out_dim})"
            )
        acts = self._trace(batch)
        grads, _ = self._backward(acts, upstream)
        return grads

    def backward_input(self, x, weights=None):
        """Per-point input gradient of a scalar-output net.

        With ``weights`` (one scalar per point) the rows are the gradients of
        weights_i * output_i; rows stay independent because the net has no
        cross-batch coupling.
        """
        if self.out_dim != 1:
            raise ConfigurationError("backward_input requires a scalar-output net")
        batch, single = _as_batch(x)
        if weights is None:
            upstream = np.ones((batch.shape[0], 1))
        else:
            upstream = np.asarray(weights, dtype=np.float64).reshape(batch.shape[0], 1)
        acts = self._trace(batch)
        _, g = self._backward(acts, upstream)
        return g[0] if single else g

    def grad(self, x):
        """Gradient of the scalar output at x; the discriminator interface."""
        return self.backward_input(x)
