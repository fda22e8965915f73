"""Cosine similarity, RBF-kernel MMD with a permutation null, class purity,
and trajectory divergence."""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy.spatial.distance import cdist, pdist

from .autodiff import as_tensor

GUIDE_KINDS = ("mpc-classifier", "mpc-conditional", "clean-data")


@dataclass(frozen=True)
class SimilarityRecord:
    t: int
    delta: int
    prompt_or_class: int
    replicate: int
    cosine: float
    guide_kind: str

    def __post_init__(self):
        if not np.isnan(self.cosine) and not -1.0 <= self.cosine <= 1.0:
            raise ValueError(f"cosine {self.cosine} outside [-1, 1]")
        if self.guide_kind not in GUIDE_KINDS:
            raise ValueError(f"unknown guide kind {self.guide_kind!r}")


def _arr(x) -> np.ndarray:
    return np.asarray(as_tensor(x).data, dtype=np.float64)


def cosine(a, b) -> float:
    """Cosine similarity of two equally shaped arrays, flattened."""
    a, b = _arr(a).ravel(), _arr(b).ravel()
    if a.shape != b.shape:
        raise ValueError(f"cosine: shapes {a.shape} and {b.shape} differ")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ValueError("cosine of a zero vector is undefined")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def rowwise_cosine(a, b) -> np.ndarray:
    """Cosine between matching rows of two (n, d) arrays."""
    a, b = np.atleast_2d(_arr(a)), np.atleast_2d(_arr(b))
    if a.shape != b.shape:
        raise ValueError(f"cosine: shapes {a.shape} and {b.shape} differ")
    na, nb = np.linalg.norm(a, axis=1), np.linalg.norm(b, axis=1)
    if (na == 0).any() or (nb == 0).any():
        raise ValueError("cosine of a zero vector is undefined")
    return np.clip(np.einsum("nd,nd->n", a, b) / (na * nb), -1.0, 1.0)


class MMDResult(NamedTuple):
    statistic: float
    null_threshold: float


def median_bandwidth(pooled: np.ndarray) -> float:
    d = pdist(pooled)
    if d.size == 0 or d.max() == 0:
        raise ValueError("MMD bandwidth undefined: pooled points are all identical")
    bw = np.median(d)
    return float(bw if bw > 0 else np.median(d[d > 0]))


def _unbiased_from_kernel(K: np.ndarray, ind: np.ndarray) -> np.ndarray:
    """Unbiased MMD^2 for each column of a 0/1 group-indicator matrix."""
    m = ind.sum(axis=0)
    n = len(K) - m
    other = 1.0 - ind
    Ka = K @ ind
    xx = np.einsum("np,np->p", ind, Ka) - m  # diagonal of an RBF kernel is 1
    yy = np.einsum("np,np->p", other, K @ other) - n
    xy = np.einsum("np,np->p", other, Ka)
    return xx / (m * (m - 1)) + yy / (n * (n - 1)) - 2 * xy / (m * n)


def mmd_biased(sample_a, sample_b, bandwidth: float | None = None) -> float:
    a, b = np.atleast_2d(_arr(sample_a)), np.atleast_2d(_arr(sample_b))
    bw = bandwidth or median_bandwidth(np.vstack([a, b]))
    k = lambda x, y: np.exp(-cdist(x, y, "sqeuclidean") / (2 * bw * bw)).mean()
    return float(k(a, a) + k(b, b) - 2 * k(a, b))


def mmd_rbf(sample_a, sample_b, n_permutations: int = 200, seed: int = 0, level: float = 0.95) -> MMDResult:
    """Unbiased RBF MMD^2 plus the ``level`` quantile of its permutation null.

    Bandwidth follows the median pairwise-distance heuristic on the pooled set.
    """
    a, b = np.atleast_2d(_arr(sample_a)), np.atleast_2d(_arr(sample_b))
    if len(a) < 2 or len(b) < 2:
        raise ValueError("MMD needs at least two points per sample")
    pooled = np.vstack([a, b])
    bw = median_bandwidth(pooled)
    K = np.exp(-cdist(pooled, pooled, "sqeuclidean") / (2 * bw * bw))
    N, m = len(pooled), len(a)
    observed = np.zeros((N, 1))
    observed[:m] = 1.0
    stat = _unbiased_from_kernel(K, observed)[0]
    rng = np.random.default_rng(seed)
    ind = np.zeros((N, n_permutations))
    for p in range(n_permutations):
        ind[rng.permutation(N)[:m], p] = 1.0
    null = _unbiased_from_kernel(K, ind)
    return MMDResult(float(stat), float(np.quantile(null, level)))


def class_purity(samples, target: int, oracle) -> float:
    """Fraction of samples the clean-data Bayes classifier assigns to ``target``."""
    x = np.atleast_2d(_arr(samples))
    if x.size == 0:
        raise ValueError("class purity of an empty sample set")
    if not 0 <= target < oracle.num_classes:
        raise ValueError(f"target class {target} not covered by the oracle")
    return float(np.mean(oracle.bayes_classify(x) == target))


def trajectory_divergence(traj_a, traj_b) -> np.ndarray:
    """L2 distance between two trajectories at each shared time.

    Batched latents give one row per time and one column per sample.
    """
    if tuple(traj_a.times) != tuple(traj_b.times):
        raise ValueError(f"trajectory times differ: {traj_a.times} vs {traj_b.times}")
    return np.stack([
        np.linalg.norm(_arr(za) - _arr(zb), axis=-1)
        for za, zb in zip(traj_a.latents, traj_b.latents)
    ])
