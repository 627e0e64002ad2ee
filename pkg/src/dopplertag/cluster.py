"""Spectral clustering of depth coordinates into photographic rows."""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class AffinitySet:
    W: np.ndarray
    D: np.ndarray
    Lap: np.ndarray


@dataclass(frozen=True)
class RowAssignment:
    labels: tuple[int, ...]  # row index per input, 0 = nearest row
    row_order: tuple[int, ...]
    row_means: tuple[float, ...]
    converged: bool = True

    @property
    def k(self) -> int:
        return len(self.row_means)

    def to_dict(self) -> dict:
        return {"labels": list(self.labels), "row_order": list(self.row_order), "row_means": list(self.row_means)}


def build_laplacian(ys, scale: float = 1.0) -> AffinitySet:
    """Gaussian affinity on depth differences and its unnormalised Laplacian."""
    y = np.asarray(ys, dtype=float).ravel()
    if y.size == 0:
        raise ConfigError("need at least one depth value")
    if not scale > 0:
        raise ConfigError("scale must be positive")
    W = np.exp(-(((y[:, None] - y[None, :]) / scale) ** 2))
    W = (W + W.T) / 2
    np.fill_diagonal(W, 1.0)
    D = np.diag(W.sum(axis=1))
    return AffinitySet(W, D, D - W)


def _spectrum(aff: AffinitySet):
    """Ascending Laplacian spectrum restricted to eigenvectors constant on ties.

    Points with equal depth have identical affinity rows and are
    interchangeable.  Eigenvectors that tell them apart span a degenerate
    eigenspace in an arbitrary basis and carry no row information, so they
    are projected out; every other eigenvector is already constant on ties.
    """
    vals, vecs = np.linalg.eigh(aff.Lap)
    _, tie = np.unique(aff.W, axis=0, return_inverse=True)
    tie = tie.ravel()
    counts = np.bincount(tie)
    avg = np.stack([np.bincount(tie, weights=v)[tie] / counts[tie] for v in vecs.T], axis=1)
    keep = np.linalg.norm(avg, axis=0) > 1e-6
    return np.clip(vals[keep], 0.0, None), avg[:, keep]


def estimate_row_count(aff: AffinitySet, k_max: int = 5) -> int:
    """Eigengap heuristic on the ascending Laplacian spectrum."""
    if k_max < 1:
        raise ConfigError("k_max must be >= 1")
    vals, _ = _spectrum(aff)
    top = min(k_max, len(vals) - 1)
    if top < 1:
        return 1
    gaps = np.diff(vals[: top + 1])
    if gaps.max() < 1e-9:
        return 1
    return int(np.argmax(gaps)) + 1


def _kmeans(X, k, init, iters=200):
    centers = init.copy()
    labels = np.zeros(len(X), dtype=int)
    for _ in range(iters):
        dist = ((X[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        new = np.argmin(dist, axis=1)
        moved = np.array([X[new == j].mean(axis=0) if np.any(new == j) else centers[j] for j in range(k)])
        if np.array_equal(new, labels) and np.allclose(moved, centers):
            return new, True
        labels, centers = new, moved
    return labels, False


def cluster_rows(ys, k: int | str = "auto", scale: float = 1.0, k_max: int = 5) -> RowAssignment:
    """Assign depth values to rows; row 0 has the smallest mean depth.

    Each value is embedded by its entries in the k eigenvectors of the
    Laplacian with the smallest eigenvalues; k-means starts from the
    embedded points at depth quantiles, so the result is deterministic.
    """
    y = np.asarray(ys, dtype=float).ravel()
    aff = build_laplacian(y, scale)
    if k == "auto":
        k = estimate_row_count(aff, k_max)
    k = int(k)
    if not 1 <= k <= len(y):
        raise ConfigError(f"k={k} must lie in [1, {len(y)}]")
    converged = True
    if k == 1:
        labels = np.zeros(len(y), dtype=int)
    else:
        _, vecs = _spectrum(aff)
        X = vecs[:, :k]
        # the first non-constant eigenvector of a 1-D affinity graph is monotone in
        # depth, so its quantiles are depth quantiles; using depth directly stays
        # well defined when the graph splits and that eigenvector is not unique
        order = np.argsort(y, kind="stable")
        picks = order[np.round(np.linspace(0, len(y) - 1, k)).astype(int)]
        labels, converged = _kmeans(X, k, X[picks])
        if not converged:
            log.warning("k-means did not converge; keeping the last assignment")
    present = sorted(set(labels.tolist()))
    means = {j: float(y[labels == j].mean()) for j in present}
    by_depth = sorted(present, key=lambda j: (means[j], j))
    remap = {j: r for r, j in enumerate(by_depth)}
    out = tuple(remap[j] for j in labels.tolist())
    row_means = tuple(means[j] for j in by_depth)
    return RowAssignment(out, tuple(range(len(row_means))), row_means, converged)


def brute_force_partition(ys, k: int):
    """Exhaustive minimum within-cluster sum of squares over contiguous splits.

    For one-dimensional data an optimal k-partition consists of contiguous
    runs of the sorted values, so enumerating cut points is exhaustive.
    Returns labels with row 0 the smallest-mean group.
    """
    y = np.asarray(ys, dtype=float)
    order = np.argsort(y, kind="stable")
    s = y[order]
    best, best_cuts = np.inf, None
    for cuts in itertools.combinations(range(1, len(s)), k - 1):
        parts = np.split(s, cuts)
        cost = sum(((p - p.mean()) ** 2).sum() for p in parts)
        if cost < best - 1e-12:
            best, best_cuts = cost, cuts
    labels = np.empty(len(y), dtype=int)
    for r, part in enumerate(np.split(order, best_cuts)):
        labels[part] = r
    return tuple(labels.tolist())
