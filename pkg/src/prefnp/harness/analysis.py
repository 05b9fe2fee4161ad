"""PCA of context embeddings and cluster separation."""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from sklearn.metrics import silhouette_samples

from ..rewards import LatentEmbedding

POWER_TOL = 1e-10
POWER_MAX_ITER = 100_000


class DegenerateVarianceWarning(UserWarning):
    pass


@dataclass
class Projection:
    coords: np.ndarray       # (n, components)
    components: np.ndarray   # (components, dim), orthonormal rows
    eigenvalues: np.ndarray  # descending
    mean: np.ndarray


def _as_matrix(embeddings) -> np.ndarray:
    rows = [e.values if isinstance(e, LatentEmbedding) else e for e in embeddings]
    return np.asarray(rows, dtype=np.float64).reshape(len(rows), -1)


def power_eig(cov: np.ndarray, components: int, rng: np.random.Generator | None = None,
              tol: float = POWER_TOL) -> tuple[np.ndarray, np.ndarray]:
    """Top eigenpairs of a symmetric PSD matrix by deflated power iteration.

    Each vector is re-orthogonalised against the ones already found, and
    iteration stops when the Rayleigh quotient and the vector both settle.
    Returns ``(eigenvalues, vectors)`` with vectors as rows.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    d = cov.shape[0]
    vals, vecs = [], []
    a = cov.copy()
    scale = max(float(np.abs(cov).max()), 1e-300)
    for _ in range(min(components, d)):
        v = rng.standard_normal(d)
        for u in vecs:
            v -= (u @ v) * u
        v /= np.linalg.norm(v)
        lam = float(v @ a @ v)
        for _ in range(POWER_MAX_ITER):
            w = a @ v
            for u in vecs:
                w -= (u @ w) * u
            nw = np.linalg.norm(w)
            if nw <= tol * scale:
                # remaining spectrum is numerically zero
                break
            w /= nw
            if w @ v < 0:
                w = -w
            new_lam = float(w @ a @ w)
            done = abs(new_lam - lam) <= tol * scale and np.linalg.norm(w - v) <= np.sqrt(tol)
            v, lam = w, new_lam
            if done:
                break
        vals.append(max(lam, 0.0))
        vecs.append(v)
        a = a - lam * np.outer(v, v)
    # ascending-to-descending order can be broken by near-equal pairs; sort explicitly
    order = np.argsort(vals)[::-1]
    return np.asarray(vals)[order], np.asarray(vecs)[order]


def pca_project(embeddings: Sequence[LatentEmbedding] | np.ndarray, components: int = 2) -> Projection:
    x = _as_matrix(embeddings)
    if len(x) < 2:
        raise ValueError("pca_project needs at least two embeddings")
    mean = x.mean(axis=0)
    xc = x - mean
    cov = xc.T @ xc / (len(x) - 1)
    k = min(components, x.shape[1])
    if not np.any(np.abs(xc) > 0):
        warnings.warn("all embeddings identical: zero variance, projection is zero", DegenerateVarianceWarning)
        comps = np.eye(x.shape[1])[:k]
        return Projection(np.zeros((len(x), k)), comps, np.zeros(k), mean)
    vals, vecs = power_eig(cov, k)
    # deterministic sign: largest-magnitude entry positive
    signs = np.sign(vecs[np.arange(len(vecs)), np.abs(vecs).argmax(axis=1)])
    vecs = vecs * signs[:, None]
    return Projection(xc @ vecs.T, vecs, vals, mean)


def silhouette_values(coords: np.ndarray, labels: Sequence) -> np.ndarray:
    """Per-point silhouettes; a point alone in its label gets 0."""
    labels = np.asarray([str(v) for v in labels])
    if len(set(labels)) < 2:
        raise ValueError("need at least two distinct labels")
    return silhouette_samples(np.asarray(coords, dtype=np.float64), labels, metric="euclidean")


def cluster_separation(coords: np.ndarray, labels: Sequence) -> float:
    return float(silhouette_values(coords, labels).mean())
