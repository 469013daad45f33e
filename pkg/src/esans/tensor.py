"""Dense linear algebra primitives: similarity, k-means, gradient checking.

Everything here is deterministic given a seeded ``numpy.random.Generator``
and computes in float64.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import DimMismatch, InvalidArg, NonFiniteLoss, TooFewPoints, ZeroNormVector

NORM_FLOOR = 1e-12


def as_vector(a) -> np.ndarray:
    v = np.asarray(a, dtype=np.float64)
    if v.ndim != 1:
        raise DimMismatch(f"expected a 1-d vector, got shape {v.shape}")
    if not np.all(np.isfinite(v)):
        raise ValueError("vector contains non-finite entries")
    return v


def cosine_sim(a, b) -> float:
    """Cosine of the angle between two nonzero vectors, in [-1, 1]."""
    va, vb = as_vector(a), as_vector(b)
    if va.shape != vb.shape:
        raise DimMismatch(f"dims differ: {va.shape[0]} vs {vb.shape[0]}")
    na, nb = float(np.linalg.norm(va)), float(np.linalg.norm(vb))
    if na < NORM_FLOOR or nb < NORM_FLOOR:
        raise ZeroNormVector("cosine undefined for (near-)zero vectors")
    c = float(va @ vb) / (na * nb)
    return min(1.0, max(-1.0, c))


def normalized_sim(a, b) -> float:
    """Affine rescaling of cosine similarity onto [0, 1]."""
    return (cosine_sim(a, b) + 1.0) / 2.0


@dataclass
class KMeansResult:
    centroids: np.ndarray  # (K, dim)
    assignments: np.ndarray  # (n,) int
    objective: float  # sum of squared point-to-centroid distances
    objective_trace: list[float]  # per-iteration objectives of the winning restart


def _sq_dists(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    # (n, K) squared Euclidean distances, computed stably
    diff = points[:, None, :] - centroids[None, :, :]
    return np.einsum("nkd,nkd->nk", diff, diff)


def _kmeanspp_seed(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    # Greedy k-means++: at each step sample several candidates proportional
    # to squared distance and keep the one that reduces the potential most.
    n = points.shape[0]
    trials = 2 + int(np.log(k)) if k > 1 else 1
    centroids = np.empty((k, points.shape[1]), dtype=np.float64)
    centroids[0] = points[rng.integers(0, n)]
    closest = np.sum((points - centroids[0]) ** 2, axis=1)
    for i in range(1, k):
        total = closest.sum()
        if total <= 0.0:
            # fewer distinct points than k: fall back to uniform picks
            centroids[i] = points[int(rng.integers(0, n))]
            continue
        candidates = rng.choice(n, size=trials, p=closest / total)
        best_idx, best_closest, best_pot = -1, closest, np.inf
        for idx in candidates:
            cand_closest = np.minimum(
                closest, np.sum((points - points[idx]) ** 2, axis=1)
            )
            pot = cand_closest.sum()
            if pot < best_pot:
                best_idx, best_closest, best_pot = int(idx), cand_closest, pot
        centroids[i] = points[best_idx]
        closest = best_closest
    return centroids


def kmeans(
    points,
    k: int,
    restarts: int = 10,
    max_iter: int = 100,
    rng: np.random.Generator | None = None,
) -> KMeansResult:
    """Lloyd's algorithm with k-means++ seeding over multiple restarts.

    Empty clusters are re-seeded to the point farthest from the dead
    centroid, which keeps the per-iteration objective non-increasing.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2:
        raise DimMismatch(f"expected a 2-d point matrix, got shape {pts.shape}")
    if k < 1:
        raise ValueError("k must be >= 1")
    if pts.shape[0] < k:
        raise TooFewPoints(f"{pts.shape[0]} points < {k} clusters")
    if restarts < 1:
        raise ValueError("restarts must be >= 1")
    if rng is None:
        rng = np.random.default_rng(0)

    best: KMeansResult | None = None
    for _ in range(restarts):
        centroids = _kmeanspp_seed(pts, k, rng)
        trace: list[float] = []
        assignments = np.zeros(pts.shape[0], dtype=np.int64)
        for _ in range(max_iter):
            d2 = _sq_dists(pts, centroids)
            assignments = np.argmin(d2, axis=1)
            obj = float(d2[np.arange(pts.shape[0]), assignments].sum())
            trace.append(obj)
            new_centroids = centroids.copy()
            for j in range(k):
                mask = assignments == j
                if mask.any():
                    new_centroids[j] = pts[mask].mean(axis=0)
                else:
                    far = int(np.argmax(np.sum((pts - centroids[j]) ** 2, axis=1)))
                    new_centroids[j] = pts[far]
            if np.array_equal(new_centroids, centroids):
                break
            centroids = new_centroids
        d2 = _sq_dists(pts, centroids)
        assignments = np.argmin(d2, axis=1)
        obj = float(d2[np.arange(pts.shape[0]), assignments].sum())
        trace.append(obj)
        if best is None or obj < best.objective:
            best = KMeansResult(centroids, assignments, obj, trace)
    assert best is not None
    return best


def grad_check(
    loss_and_grad: Callable[[np.ndarray], tuple[float, np.ndarray]],
    params,
    epsilon: float = 1e-6,
) -> float:
    """Max relative error of analytic gradients vs central finite differences.

    ``loss_and_grad`` maps a parameter vector to ``(loss, gradient)``; only
    the loss is used on the perturbed evaluations.
    """
    if not (0.0 < epsilon <= 1e-2):
        raise InvalidArg(f"epsilon must be in (0, 1e-2], got {epsilon}")
    x = as_vector(params).copy()
    loss, grad = loss_and_grad(x)
    grad = as_vector(grad)
    if grad.shape != x.shape:
        raise DimMismatch("gradient shape differs from parameter shape")
    if not np.isfinite(loss):
        raise NonFiniteLoss(f"loss is {loss}")
    worst = 0.0
    for i in range(x.size):
        xp = x.copy()
        xp[i] += epsilon
        lp, _ = loss_and_grad(xp)
        xm = x.copy()
        xm[i] -= epsilon
        lm, _ = loss_and_grad(xm)
        if not (np.isfinite(lp) and np.isfinite(lm)):
            raise NonFiniteLoss("perturbed loss is non-finite")
        numeric = (lp - lm) / (2.0 * epsilon)
        denom = max(1e-12, abs(grad[i]) + abs(numeric))
        worst = max(worst, abs(grad[i] - numeric) / denom)
    return worst
