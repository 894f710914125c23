"""Analytic densities, the latent prior, and dataset ingestion.

Diagonal-covariance Gaussian mixtures play both the data density and the
initial generated density on the synthetic tasks; they are cheap to sample
and have exact pdf / log-pdf-gradient formulas, which is what makes every
theoretical quantity in this package independently computable.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import logsumexp

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801

_LOG_2PI = float(np.log(2.0 * np.pi))


def make_rng(seed: int, stream: int = 0) -> np.random.Generator:
    """Counter-based generator (Philox) keyed by an explicit 64-bit seed.

    ``stream`` separates independent substreams of the same run (training,
    evaluation, classifier fitting, ...) without coupling their draws.
    """
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(int(stream),))
    return np.random.Generator(np.random.Philox(seed=ss))


def _as_points(x, dim: int) -> tuple[np.ndarray, bool]:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[None, :]
        single = True
    else:
        single = False
    if arr.ndim != 2 or arr.shape[1] != dim:
        raise ValueError(f"expected points of dimension {dim}, got shape {arr.shape}")
    return arr, single


class GaussianMixture:
    """Mixture of axis-aligned Gaussians: weights, means, per-dim stddevs."""

    def __init__(self, weights, means, stddevs):
        self.weights = np.asarray(weights, dtype=np.float64)
        self.means = np.atleast_2d(np.asarray(means, dtype=np.float64))
        self.stddevs = np.atleast_2d(np.asarray(stddevs, dtype=np.float64))
        k = self.weights.shape[0]
        if self.means.shape[0] != k or self.stddevs.shape[0] != k:
            raise ValueError("weights, means, stddevs must have one row per component")
        if self.means.shape != self.stddevs.shape:
            raise ValueError("means and stddevs must have matching shapes")
        if abs(float(self.weights.sum()) - 1.0) > 1e-12:
            raise ValueError("component weights must sum to 1 (within 1e-12)")
        if np.any(self.weights < 0.0):
            raise ValueError("component weights must be non-negative")
        if np.any(self.stddevs <= 0.0):
            raise ValueError("stddevs must be positive")
        # Precomputed per-component log normalizers and log weights.
        self._log_norm = -np.sum(np.log(self.stddevs), axis=1) - 0.5 * self.dim * _LOG_2PI
        with np.errstate(divide="ignore"):
            self._log_w = np.log(self.weights)

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    @property
    def n_components(self) -> int:
        return self.weights.shape[0]

    def _component_log_pdfs(self, pts: np.ndarray) -> np.ndarray:
        # (n, k): log w_k + log N(x; mu_k, diag sigma_k^2)
        z = (pts[:, None, :] - self.means[None, :, :]) / self.stddevs[None, :, :]
        quad = -0.5 * np.sum(z * z, axis=2)
        return self._log_w[None, :] + self._log_norm[None, :] + quad

    def log_pdf(self, x):
        pts, single = _as_points(x, self.dim)
        out = logsumexp(self._component_log_pdfs(pts), axis=1)
        return float(out[0]) if single else out

    def pdf(self, x):
        out = np.exp(self.log_pdf(x))
        return out

    def grad_log_pdf(self, x):
        """Exact gradient of log pdf via component responsibilities."""
        pts, single = _as_points(x, self.dim)
        comp = self._component_log_pdfs(pts)
        comp -= logsumexp(comp, axis=1, keepdims=True)
        resp = np.exp(comp)  # (n, k)
        per_comp = -(pts[:, None, :] - self.means[None, :, :]) / (self.stddevs**2)[None, :, :]
        grad = np.einsum("nk,nkd->nd", resp, per_comp)
        return grad[0] if single else grad

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return self.sample_with_components(rng, n)[0]

    def sample_with_components(self, rng: np.random.Generator, n: int):
        """Draw n points; also return the index of the component each came
        from (the class label used by the mode-score classifier)."""
        if n < 1:
            raise ValueError("n must be at least 1")
        labels = rng.choice(self.n_components, size=n, p=self.weights)
        eps = rng.standard_normal((n, self.dim))
        points = self.means[labels] + eps * self.stddevs[labels]
        return points, labels


def single_gaussian(mean, stddev) -> GaussianMixture:
    mean = np.atleast_1d(np.asarray(mean, dtype=np.float64))
    stddev = np.broadcast_to(np.asarray(stddev, dtype=np.float64), mean.shape)
    return GaussianMixture([1.0], mean[None, :], stddev[None, :])


def ring_mixture(n_components: int = 8, radius: float = 2.0, stddev: float = 0.02) -> GaussianMixture:
    """Equal-weight 2D Gaussians on a circle; the standard mode-coverage
    benchmark."""
    angles = 2.0 * np.pi * np.arange(n_components) / n_components
    means = np.stack([radius * np.cos(angles), radius * np.sin(angles)], axis=1)
    stddevs = np.full_like(means, stddev)
    weights = np.full(n_components, 1.0 / n_components)
    return GaussianMixture(weights, means, stddevs)


@dataclass(frozen=True)
class Prior:
    """Standard Gaussian latent source (mean 0, stddev 1 per coordinate)."""

    dim: int

    def __post_init__(self):
        if self.dim < 1:
            raise ValueError("prior dimension must be positive")

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        if n < 1:
            raise ValueError("n must be at least 1")
        return rng.standard_normal((n, self.dim))


@dataclass
class RealDataset:
    """Finite set of real points in [-1, 1]^r, optionally labeled."""

    points: np.ndarray
    labels: np.ndarray | None = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        if self.points.ndim != 2:
            raise ValueError("points must be a (n, r) array")
        if np.any(np.abs(self.points) > 1.0 + 1e-12):
            raise ValueError("dataset coordinates must lie in [-1, 1]")
        if self.labels is not None:
            self.labels = np.asarray(self.labels)
            if self.labels.shape[0] != self.points.shape[0]:
                raise ValueError("label count does not match point count")

    def __len__(self) -> int:
        return self.points.shape[0]


class IdxError(ValueError):
    """Malformed IDX container; the message names the failing byte offset."""


def _read_be_u32(buf: bytes, offset: int, path) -> int:
    if offset + 4 > len(buf):
        raise IdxError(f"{path}: truncated header at byte offset {offset}")
    return int.from_bytes(buf[offset : offset + 4], "big")


def load_idx(images_path, labels_path=None) -> RealDataset:
    """Read big-endian IDX image (and optional label) files.

    Pixels are mapped linearly from [0, 255] to [-1, 1]; images are
    flattened row-major into vectors.
    """
    images_path = Path(images_path)
    buf = images_path.read_bytes()
    magic = _read_be_u32(buf, 0, images_path)
    if magic != IDX_IMAGE_MAGIC:
        raise IdxError(
            f"{images_path}: bad magic 0x{magic:08x} at byte offset 0 "
            f"(expected 0x{IDX_IMAGE_MAGIC:08x})"
        )
    count = _read_be_u32(buf, 4, images_path)
    rows = _read_be_u32(buf, 8, images_path)
    cols = _read_be_u32(buf, 12, images_path)
    need = 16 + count * rows * cols
    if need > len(buf):
        raise IdxError(
            f"{images_path}: {count}x{rows}x{cols} pixels overflow the file, "
            f"missing data from byte offset {len(buf)}"
        )
    raw = np.frombuffer(buf, dtype=np.uint8, count=count * rows * cols, offset=16)
    points = raw.astype(np.float64).reshape(count, rows * cols) / 127.5 - 1.0

    labels = None
    if labels_path is not None:
        labels_path = Path(labels_path)
        lbuf = labels_path.read_bytes()
        lmagic = _read_be_u32(lbuf, 0, labels_path)
        if lmagic != IDX_LABEL_MAGIC:
            raise IdxError(
                f"{labels_path}: bad magic 0x{lmagic:08x} at byte offset 0 "
                f"(expected 0x{IDX_LABEL_MAGIC:08x})"
            )
        lcount = _read_be_u32(lbuf, 4, labels_path)
        if 8 + lcount > len(lbuf):
            raise IdxError(
                f"{labels_path}: {lcount} labels overflow the file, "
                f"missing data from byte offset {len(lbuf)}"
            )
        if lcount != count:
            raise IdxError(
                f"{labels_path}: label count {lcount} does not match image count {count}"
            )
        labels = np.frombuffer(lbuf, dtype=np.uint8, count=lcount, offset=8).astype(np.int64)

    return RealDataset(points, labels)
