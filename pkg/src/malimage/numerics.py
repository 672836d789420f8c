"""Shared numeric utilities: the seeded RNG contract and PCA.

All learners draw randomness from ``make_rng(seed)`` (numpy PCG64) so a run is
fully reproduced by its recorded seed. Matrices are plain float64 numpy arrays.

PCA uses the sample covariance (n-1 denominator). When the feature dimension
exceeds the sample count (the usual case for flattened pixel data) the
eigendecomposition runs on the n x n Gram matrix instead of the d x d
covariance and the eigenvectors are lifted back to feature space.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimMismatch

# eigenvalues below this fraction of the largest are treated as numerically zero
_RANK_TOL = 1e-10


def make_rng(seed: int) -> np.random.Generator:
    """The package RNG: PCG64 seeded with a 64-bit integer."""
    return np.random.default_rng(seed)


@dataclass
class PcaModel:
    mean: np.ndarray                 # (d,)
    components: np.ndarray           # (k, d), orthonormal rows
    explained_variance: np.ndarray   # (k,), nonincreasing
    total_variance: float            # trace of the sample covariance
    rank_deficient: bool = False     # fewer components than requested

    @property
    def k(self) -> int:
        return self.components.shape[0]


def pca_fit(x: np.ndarray, k: int) -> PcaModel:
    """Top-k principal components of the rows of x.

    If k exceeds the numeric rank, the model carries fewer components and
    sets ``rank_deficient`` instead of failing. Component signs follow the
    convention that each row's largest-magnitude entry is positive.
    """
    x = np.asarray(x, dtype=np.float64)
    n, d = x.shape
    if n < 2:
        raise DimMismatch("pca_fit needs at least 2 samples")
    if not 1 <= k <= min(n - 1, d):
        raise DimMismatch(f"k must be in [1, {min(n - 1, d)}], got {k}")

    mean = x.mean(axis=0)
    xc = x - mean
    total_variance = float(np.sum(xc * xc)) / (n - 1)

    if d > n:
        # Gram path: eigenvectors of xc xc^T / (n-1), lifted via xc^T u
        gram = (xc @ xc.T) / (n - 1)
        evals, evecs = np.linalg.eigh(gram)
    else:
        cov = (xc.T @ xc) / (n - 1)
        evals, evecs = np.linalg.eigh(cov)

    order = np.argsort(evals)[::-1]
    evals = evals[order]
    evecs = evecs[:, order]

    cutoff = _RANK_TOL * max(evals[0], 0.0)
    usable = int(np.sum(evals > max(cutoff, 0.0)))
    k_eff = min(k, usable)
    rank_deficient = k_eff < k

    if k_eff == 0:
        return PcaModel(mean=mean, components=np.zeros((0, d)),
                        explained_variance=np.zeros(0),
                        total_variance=total_variance, rank_deficient=True)

    lam = evals[:k_eff]
    if d > n:
        comps = (xc.T @ evecs[:, :k_eff]) / np.sqrt((n - 1) * lam)
        comps = comps.T
    else:
        comps = evecs[:, :k_eff].T

    # sign convention: largest-|entry| of each component is positive
    for row in comps:
        j = int(np.argmax(np.abs(row)))
        if row[j] < 0:
            row *= -1.0
    return PcaModel(mean=mean, components=comps, explained_variance=lam,
                    total_variance=total_variance, rank_deficient=rank_deficient)


def pca_transform(model: PcaModel, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != model.mean.shape[0]:
        raise DimMismatch(f"expected (n, {model.mean.shape[0]}) matrix, got {x.shape}")
    return (x - model.mean) @ model.components.T


def pca_reconstruct(model: PcaModel, z: np.ndarray) -> np.ndarray:
    return z @ model.components + model.mean


def scree(model: PcaModel) -> np.ndarray:
    """Explained-variance ratios (nonincreasing, summing to <= 1)."""
    if model.total_variance <= 0.0:
        return np.zeros_like(model.explained_variance)
    return model.explained_variance / model.total_variance
