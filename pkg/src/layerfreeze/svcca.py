"""SVCCA similarity between layer representations and the post-hoc "ideal" freezing schedule.

Representations are activation matrices of shape (datapoints x neurons)
collected on a fixed probe batch.  Each side is mean-centred, reduced to the
top singular directions that explain ``variance_keep`` of its variance, and
the two reduced subspaces are compared by CCA.  The score is the mean
canonical correlation, 1 meaning the two representations span the same
subspace of datapoint space.
"""
from __future__ import annotations

import warnings

import numpy as np

SINGULAR_TOL = 1e-10


def _reduced_basis(acts: np.ndarray, variance_keep: float) -> np.ndarray:
    """Orthonormal basis (datapoints x k) of the top-variance directions."""
    acts = np.asarray(acts, dtype=np.float64)
    if acts.ndim != 2:
        raise ValueError("activations must be a (datapoints x neurons) matrix")
    if not np.all(np.isfinite(acts)):
        raise ValueError("activations contain non-finite values")
    if acts.shape[0] <= acts.shape[1]:
        warnings.warn(
            f"{acts.shape[0]} datapoints for {acts.shape[1]} neurons; CCA is unreliable "
            "unless datapoints exceed neurons", RuntimeWarning, stacklevel=3)
    centred = acts - acts.mean(axis=0, keepdims=True)
    u, s, _ = np.linalg.svd(centred, full_matrices=False)
    if s.size == 0 or s[0] == 0.0:
        raise ValueError("activations have rank 0")
    keep = s > SINGULAR_TOL * s[0]
    u, s = u[:, keep], s[keep]
    var = s**2
    frac = np.cumsum(var) / var.sum()
    k = int(np.searchsorted(frac, variance_keep - 1e-12) + 1)
    return u[:, : min(k, s.size)]


def canonical_correlations(a: np.ndarray, b: np.ndarray, variance_keep: float = 0.99) -> np.ndarray:
    if not 0.0 < variance_keep <= 1.0:
        raise ValueError("variance_keep must lie in (0, 1]")
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape[0] != b.shape[0]:
        raise ValueError(f"datapoint counts differ: {a.shape[0]} vs {b.shape[0]}")
    qa = _reduced_basis(a, variance_keep)
    qb = _reduced_basis(b, variance_keep)
    rho = np.linalg.svd(qa.T @ qb, compute_uv=False)
    return np.clip(rho, 0.0, 1.0)


def svcca_score(a: np.ndarray, b: np.ndarray, variance_keep: float = 0.99) -> float:
    """Mean canonical correlation of the SVD-reduced representations, in [0, 1]."""
    return float(np.mean(canonical_correlations(a, b, variance_keep)))


def frozen_prefix(scores, threshold: float) -> int:
    """Length of the longest prefix of layers whose score reaches ``threshold``."""
    n = 0
    for s in scores:
        if s < threshold:
            break
        n += 1
    return n


def layer_scores(checkpoint: list[np.ndarray], final: list[np.ndarray],
                 variance_keep: float = 0.99) -> list[float]:
    if len(checkpoint) != len(final):
        raise ValueError(f"checkpoint has {len(checkpoint)} layers, final has {len(final)}")
    return [svcca_score(c, f, variance_keep) for c, f in zip(checkpoint, final)]


def ideal_schedule(checkpoints: list[list[np.ndarray]], final: list[np.ndarray],
                   threshold: float = 0.9, variance_keep: float = 0.99) -> list[int]:
    """Frozen-layer count per checkpoint: the prefix of layers already similar to the final model."""
    if not 0.0 < threshold < 1.0:
        raise ValueError("threshold must lie in (0, 1)")
    return [frozen_prefix(layer_scores(ckpt, final, variance_keep), threshold)
            for ckpt in checkpoints]
