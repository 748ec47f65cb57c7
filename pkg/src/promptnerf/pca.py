"""PCA via power iteration with deflation, plus the nearest-centroid
separability score used to compare shared-init and random-init populations.

For wide matrices (n < p, the usual case for 23k-dimensional parameter
vectors) the eigenproblem is solved on the n x n Gram matrix and lifted
back, so the p x p covariance is never materialized.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class PcaResult:
    components: np.ndarray        # (k, p), rows orthonormal
    explained_variance: np.ndarray  # (k,), descending
    projections: np.ndarray       # (n, k)
    mean: np.ndarray              # (p,)

    def reconstruct(self) -> np.ndarray:
        return self.mean[None, :] + self.projections @ self.components


def _power_iteration(a: np.ndarray, seed: int, max_iter: int = 2000,
                     tol: float = 1e-12) -> tuple[float, np.ndarray]:
    rng = np.random.default_rng(seed)
    v = rng.normal(size=a.shape[0])
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(max_iter):
        av = a @ v
        norm = np.linalg.norm(av)
        if norm < 1e-300:  # null space reached
            return 0.0, v
        v_new = av / norm
        if np.linalg.norm(v_new - v) < tol or np.linalg.norm(v_new + v) < tol:
            v = v_new
            break
        v = v_new
    lam = float(v @ a @ v)
    return lam, v


def _fix_sign(v: np.ndarray) -> np.ndarray:
    i = int(np.argmax(np.abs(v)))
    return v if v[i] >= 0.0 else -v


def pca(matrix: np.ndarray, k: int, seed: int = 0) -> PcaResult:
    """Top-k principal components of the rows of ``matrix``."""
    matrix = np.asarray(matrix, dtype=np.float64)
    n, p = matrix.shape
    if n < 2:
        raise ValueError("pca needs at least 2 rows")
    if not (1 <= k <= min(n, p)):
        raise ValueError(f"k={k} out of range for {n}x{p} input")
    mean = matrix.mean(axis=0)
    xc = matrix - mean
    components = np.zeros((k, p))
    variances = np.zeros(k)
    if n < p:
        # Gram trick: eigenvectors of Xc Xc^T lift to components via Xc^T u
        g = xc @ xc.T
        for i in range(k):
            lam, u = _power_iteration(g, seed + i)
            v = xc.T @ u
            norm = np.linalg.norm(v)
            if norm < 1e-12:
                v = np.zeros(p)
            else:
                v /= norm
            components[i] = _fix_sign(v)
            variances[i] = max(lam, 0.0) / (n - 1)
            g -= lam * np.outer(u, u)
    else:
        c = (xc.T @ xc) / (n - 1)
        for i in range(k):
            lam, v = _power_iteration(c, seed + i)
            components[i] = _fix_sign(v)
            variances[i] = max(lam, 0.0)
            c -= lam * np.outer(v, v)
    projections = xc @ components.T
    return PcaResult(components, variances, projections, mean)


def nearest_centroid_accuracy(projections: np.ndarray, labels: list[str]) -> float:
    """Leave-one-out nearest-centroid classification accuracy."""
    labels = np.asarray(labels)
    classes = np.unique(labels)
    if len(classes) < 2:
        raise ValueError("separability needs at least 2 categories")
    sums = {c: projections[labels == c].sum(axis=0) for c in classes}
    counts = {c: int((labels == c).sum()) for c in classes}
    correct = 0
    for i, x in enumerate(projections):
        best, best_d = None, np.inf
        for c in classes:
            s, m = sums[c], counts[c]
            if c == labels[i]:
                if m == 1:
                    continue  # class vanishes when held out
                centroid = (s - x) / (m - 1)
            else:
                centroid = s / m
            d = float(np.sum((x - centroid) ** 2))
            if d < best_d:
                best_d, best = d, c
        correct += int(best == labels[i])
    return correct / len(labels)


def separability_score(matrix: np.ndarray, labels: list[str], k: int,
                       seed: int = 0) -> float:
    """Nearest-centroid accuracy in top-k PCA coordinates (leave-one-out on
    the classifier; the projection is fit once on all rows)."""
    k = min(k, min(matrix.shape))
    result = pca(matrix, k, seed=seed)
    return nearest_centroid_accuracy(result.projections, labels)
