"""Temporal-coherence view scheduling: exact k-nearest-neighbor graph over
training view positions and locality-biased sampling with periodic uniform
injection."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DEFAULT_K = 16
DEFAULT_RANDOM_EVERY = 12


class DegenerateGraphError(ValueError):
    pass


@dataclass
class ViewGraph:
    positions: np.ndarray
    neighbors: np.ndarray   # (n, k) indices, exact kNN, ties by index
    weights: np.ndarray     # (n, k) Euclidean distances
    k: int
    exploration: float      # additive constant in 1 / (w + W)
    random_every: int = DEFAULT_RANDOM_EVERY

    @property
    def n_views(self) -> int:
        return self.positions.shape[0]


def mean_nn_distance(positions: np.ndarray) -> float:
    d = np.linalg.norm(positions[:, None, :] - positions[None, :, :], axis=2)
    np.fill_diagonal(d, np.inf)
    return float(d.min(axis=1).mean())


def build_view_graph(positions, k: int = DEFAULT_K,
                     exploration: float | None = None,
                     random_every: int = DEFAULT_RANDOM_EVERY) -> ViewGraph:
    """Exact kNN by full pairwise distances (view sets are small); ties are
    broken by ascending index. exploration defaults to the mean
    nearest-neighbor distance, a scale-invariant choice."""
    positions = np.asarray(positions, dtype=np.float64)
    n = positions.shape[0]
    if n < 2:
        raise DegenerateGraphError("need at least 2 views")
    if k < 1:
        raise ValueError("k must be >= 1")
    k_eff = min(k, n - 1)
    d = np.linalg.norm(positions[:, None, :] - positions[None, :, :], axis=2)
    np.fill_diagonal(d, np.inf)
    idx = np.arange(n)
    neighbors = np.empty((n, k_eff), dtype=np.int64)
    weights = np.empty((n, k_eff))
    for i in range(n):
        order = np.lexsort((idx, d[i]))[:k_eff]
        neighbors[i] = order
        weights[i] = d[i, order]
    if exploration is None:
        nn = d.min(axis=1)
        exploration = float(nn.mean())
    return ViewGraph(positions=positions, neighbors=neighbors, weights=weights,
                     k=k_eff, exploration=float(exploration),
                     random_every=random_every)


def next_view(g: ViewGraph, current: int, iteration: int,
              rng: np.random.Generator) -> int:
    """Uniform view every random_every iterations, otherwise a neighbor of
    the current view with probability proportional to 1 / (w + W)."""
    if iteration % g.random_every == 0:
        return int(rng.integers(g.n_views))
    w = g.weights[current]
    p = 1.0 / (w + g.exploration)
    p = p / p.sum()
    return int(g.neighbors[current][rng.choice(g.k, p=p)])
