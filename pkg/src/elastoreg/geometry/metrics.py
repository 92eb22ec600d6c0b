"""Alignment losses, rigid Procrustes fitting and evaluation metrics (mm)."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .neighbors import nearest_neighbors
from .pointset import GeometryError, LandmarkPair, PointSet, RigidTransform


def _coords(x) -> np.ndarray:
    pts = x.points if isinstance(x, PointSet) else np.asarray(x, dtype=np.float64)
    pts = np.atleast_2d(pts)
    if pts.size == 0:
        raise GeometryError("empty point subset")
    if pts.shape[1] != 3:
        raise GeometryError(f"expected (N, 3) coordinates, got {pts.shape}")
    return pts


def chamfer_loss(warped, target) -> float:
    """Two-way mean of squared nearest-neighbour distances, summed (mm^2)."""
    w, t = _coords(warped), _coords(target)
    _, d_wt = nearest_neighbors(w, t)
    _, d_tw = nearest_neighbors(t, w)
    return float(d_tw.mean() + d_wt.mean())


def chamfer_distance_metric(warped, target) -> float:
    """Half the sum of the two mean nearest-neighbour distances (mm)."""
    w, t = _coords(warped), _coords(target)
    _, d_wt = nearest_neighbors(w, t)
    _, d_tw = nearest_neighbors(t, w)
    return float(0.5 * (np.sqrt(d_tw).mean() + np.sqrt(d_wt).mean()))


def procrustes(source, warped) -> RigidTransform:
    """Least-squares rigid transform taking ``source`` onto ``warped``.

    Cross-covariance SVD; a reflection is turned into a proper rotation by
    flipping the last left-singular vector.
    """
    a, b = _coords(source), _coords(warped)
    if a.shape != b.shape:
        raise GeometryError("procrustes needs index-aligned sets of equal size")
    if len(a) < 3:
        raise GeometryError("procrustes needs at least 3 points")
    ca, cb = a.mean(axis=0), b.mean(axis=0)
    h = (a - ca).T @ (b - cb)
    u, s, vt = np.linalg.svd(h)
    if s[1] <= 1e-12 * max(s[0], 1e-300):
        raise GeometryError("degenerate configuration: rotation is not determined")
    if np.linalg.det(vt.T @ u.T) < 0:
        u[:, -1] = -u[:, -1]
    r = vt.T @ u.T
    return RigidTransform(r, cb - r @ ca)


def rigid_residuals(source, warped) -> np.ndarray:
    """Per-point norm of the displacement left after removing the best rigid fit."""
    a, b = _coords(source), _coords(warped)
    return np.linalg.norm(procrustes(a, b).apply(a) - b, axis=1)


def deformation_magnitude(source, warped, subset=None) -> float:
    """Mean rigid-excluded residual over ``subset`` (boolean mask or indices).

    The rigid fit always uses the full set.
    """
    res = rigid_residuals(source, warped)
    if subset is not None:
        res = res[np.asarray(subset)]
    if res.size == 0:
        raise GeometryError("empty subset for deformation magnitude")
    return float(res.mean())


def tre(landmarks: Sequence[LandmarkPair],
        warp: Callable[[np.ndarray], np.ndarray] | None = None) -> float:
    """Mean distance between warped-source and target landmark centroids."""
    if not landmarks:
        raise GeometryError("no landmark pairs")
    dists = []
    for pair in landmarks:
        src = pair.source_cluster if warp is None else warp(pair.source_cluster)
        dists.append(np.linalg.norm(np.mean(src, axis=0) - pair.target_cluster.mean(axis=0)))
    return float(np.mean(dists))


def rmse(predicted, ground_truth) -> float:
    p = np.asarray(predicted, dtype=np.float64)
    g = np.asarray(ground_truth, dtype=np.float64)
    if p.shape != g.shape:
        raise GeometryError(f"displacement fields differ in shape: {p.shape} vs {g.shape}")
    return float(np.sqrt(np.mean(np.sum((p - g) ** 2, axis=1))))
