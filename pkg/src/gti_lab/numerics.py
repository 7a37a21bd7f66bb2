"""Dense linear algebra and clustering primitives.

All randomness goes through :func:`make_rng`, a Philox (counter-based) generator
keyed by an explicit seed. Nothing here touches numpy's global RNG.
"""
from __future__ import annotations

import warnings

import numpy as np


class ZeroNormWarning(UserWarning):
    """A cosine was requested for a zero-norm vector; the value is defined as 0."""


def make_rng(seed, *stream) -> np.random.Generator:
    """Counter-based generator for ``seed`` and an optional integer stream path."""
    ss = np.random.SeedSequence([int(seed), *[int(s) for s in stream]])
    return np.random.Generator(np.random.Philox(ss))


def as_matrix(m) -> np.ndarray:
    a = np.asarray(m, dtype=np.float64)
    if a.ndim != 2 or a.size == 0:
        raise ValueError(f"expected a non-empty 2-d matrix, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError("matrix contains non-finite entries")
    return a


def svd_values(m) -> np.ndarray:
    """All ``min(rows, cols)`` singular values, descending."""
    a = as_matrix(m)
    s = np.linalg.svd(a, compute_uv=False)
    return np.maximum(np.sort(s)[::-1], 0.0)


def cosine(u, v) -> float:
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    nu = np.linalg.norm(u)
    nv = np.linalg.norm(v)
    if nu == 0.0 or nv == 0.0:
        warnings.warn("cosine of a zero-norm vector is defined as 0", ZeroNormWarning, stacklevel=2)
        return 0.0
    c = float(np.dot(u / nu, v / nv))
    return min(1.0, max(-1.0, c))


def cosine_matrix(x) -> tuple[np.ndarray, np.ndarray]:
    """Pairwise cosine matrix of the rows of ``x`` and the zero-norm row flags.

    Rows with zero norm get 0 everywhere (including the diagonal).
    """
    x = np.asarray(x, dtype=np.float64)
    norms = np.linalg.norm(x, axis=1)
    degenerate = norms == 0.0
    if degenerate.any():
        warnings.warn(f"{int(degenerate.sum())} zero-norm rows; their cosines are 0",
                      ZeroNormWarning, stacklevel=2)
    safe = np.where(degenerate, 1.0, norms)
    unit = x / safe[:, None]
    unit[degenerate] = 0.0
    s = np.clip(unit @ unit.T, -1.0, 1.0)
    # exact symmetry, and exactly 1 between identical non-degenerate rows
    # (the diagonal included), which rounding in the product can miss
    s = 0.5 * (s + s.T)
    _, group = np.unique(x, axis=0, return_inverse=True)
    group = group.ravel()
    same = (group[:, None] == group[None, :]) & ~degenerate[:, None]
    s[same] = 1.0
    return s, degenerate


def _sq_dists(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    # direct differences: exact zeros for coincident points, unlike the expanded form
    diff = points[:, None, :] - centroids[None, :, :]
    return np.einsum("nkd,nkd->nk", diff, diff)


def nearest(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    """Index of the nearest centroid per point; ties go to the lowest index."""
    return np.argmin(_sq_dists(points, centroids), axis=1)


def inertia(points, centroids, assignments) -> float:
    points = np.asarray(points, dtype=np.float64)
    diff = points - np.asarray(centroids)[assignments]
    return float(np.einsum("nd,nd->", diff, diff))


def _kmeans_pp(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(points)
    centroids = [points[rng.integers(n)]]
    d2 = _sq_dists(points, np.asarray(centroids))[:, 0]
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0.0:
            i = int(rng.integers(n))
        else:
            i = int(rng.choice(n, p=d2 / total))
        centroids.append(points[i])
        d2 = np.minimum(d2, _sq_dists(points, points[i:i + 1])[:, 0])
    return np.array(centroids)


def kmeans(points, k: int, seed: int = 0, max_iter: int = 100, tol: float = 0.0,
           history: list | None = None, n_init: int = 1) -> tuple[np.ndarray, np.ndarray]:
    """Lloyd's k-means with k-means++ seeding.

    Empty clusters are re-seeded from the point farthest from its centroid inside
    the cluster that currently has the largest inertia. With ``n_init > 1`` the
    lowest-inertia run over independent seedings wins (earliest on ties). When
    ``history`` is a list, the inertia after every assignment step of the
    winning run is appended to it.
    """
    points = as_matrix(points)
    n = len(points)
    if k < 1 or k > n:
        raise ValueError(f"k={k} must be in [1, {n}]")
    best = None
    for run in range(n_init):
        trace = []
        c, a = _lloyd(points, k, make_rng(seed, run), max_iter, tol, trace)
        score = inertia(points, c, a)
        if best is None or score < best[0]:
            best = (score, c, a, trace)
    if history is not None:
        history.extend(best[3])
    return best[1], best[2]


def _lloyd(points, k, rng, max_iter, tol, history):
    centroids = _kmeans_pp(points, k, rng)
    assign = nearest(points, centroids)
    for _ in range(max_iter):
        new = centroids.copy()
        for j in range(k):
            members = assign == j
            if members.any():
                new[j] = points[members].mean(axis=0)
        assign = nearest(points, new)
        _reseed_empty(points, new, assign)
        shift = float(np.max(np.abs(new - centroids)))
        centroids = new
        history.append(inertia(points, centroids, assign))
        if shift <= tol:
            break
    return centroids, assign


def _reseed_empty(points: np.ndarray, centroids: np.ndarray, assign: np.ndarray) -> None:
    k = len(centroids)
    for j in range(k):
        if np.any(assign == j):
            continue
        d2 = np.einsum("nd,nd->n", points - centroids[assign], points - centroids[assign])
        per_cluster = np.bincount(assign, weights=d2, minlength=k)
        worst = int(np.argmax(per_cluster))
        members = np.flatnonzero(assign == worst)
        if len(members) < 2:
            continue
        far = int(members[np.argmax(d2[members])])
        centroids[j] = points[far]
        assign[far] = j
