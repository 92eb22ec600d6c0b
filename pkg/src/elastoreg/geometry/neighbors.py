"""Nearest-neighbour search with a compiled kernel and a numpy fallback.

The compiled ``_nnkernel`` extension is used when it was built; setting
``ELASTOREG_PURE_PYTHON=1`` forces the fallback. Both backends return the
same indices: ties go to the lowest reference index.
"""
from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from . import _nn_py

try:
    if os.environ.get("ELASTOREG_PURE_PYTHON"):
        raise ImportError("pure python requested")
    from . import _nnkernel as _compiled
except ImportError:
    _compiled = None

BACKEND = "cython" if _compiled is not None else "python"
BRUTE_FORCE_LIMIT = 2048
LEAF_SIZE = 16


def _kernel(backend: str | None):
    backend = backend or BACKEND
    if backend == "cython":
        if _compiled is None:
            raise RuntimeError("compiled nearest-neighbour kernel is not available")
        return _compiled
    if backend == "python":
        return _nn_py
    raise ValueError(f"unknown backend {backend!r}")


@dataclass
class KDTree:
    points: np.ndarray      # reference points reordered so leaves are contiguous
    perm: np.ndarray        # original index of each reordered point
    start: np.ndarray
    end: np.ndarray
    dim: np.ndarray
    val: np.ndarray
    left: np.ndarray
    right: np.ndarray

    @classmethod
    def build(cls, points, leaf_size: int = LEAF_SIZE) -> "KDTree":
        pts = np.ascontiguousarray(points, dtype=np.float64)
        order = np.arange(len(pts), dtype=np.int64)
        start, end, dim, val, left, right = [], [], [], [], [], []

        def new_node(lo, hi):
            start.append(lo)
            end.append(hi)
            dim.append(0)
            val.append(0.0)
            left.append(-1)
            right.append(-1)
            return len(start) - 1

        root = new_node(0, len(pts))
        pending = [root]
        while pending:
            node = pending.pop()
            lo, hi = start[node], end[node]
            if hi - lo <= leaf_size:
                continue
            seg = pts[order[lo:hi]]
            d = int(np.argmax(seg.max(axis=0) - seg.min(axis=0)))
            mid = (hi - lo) // 2
            part = np.argpartition(seg[:, d], mid, kind="introselect")
            order[lo:hi] = order[lo:hi][part]
            dim[node] = d
            val[node] = float(pts[order[lo + mid], d])
            left[node] = new_node(lo, lo + mid)
            right[node] = new_node(lo + mid, hi)
            pending.extend((left[node], right[node]))

        as64 = lambda xs: np.asarray(xs, dtype=np.int64)
        return cls(np.ascontiguousarray(pts[order]), order, as64(start), as64(end),
                   as64(dim), np.asarray(val, dtype=np.float64), as64(left), as64(right))

    def query(self, query, backend: str | None = None):
        q = np.ascontiguousarray(query, dtype=np.float64)
        return _kernel(backend).kdtree_query(q, self.points, self.perm, self.start,
                                             self.end, self.dim, self.val, self.left,
                                             self.right)


def brute_force(query, reference, backend: str | None = None):
    q = np.ascontiguousarray(query, dtype=np.float64)
    r = np.ascontiguousarray(reference, dtype=np.float64)
    return _kernel(backend).brute_nn(q, r)


def nearest_neighbors(query, reference, method: str = "auto", backend: str | None = None):
    """Index of, and squared distance to, the nearest reference point for each query.

    ``method`` is ``"brute"``, ``"tree"`` or ``"auto"`` (exhaustive up to
    ``BRUTE_FORCE_LIMIT`` reference points, tree above).
    """
    reference = np.asarray(reference, dtype=np.float64)
    if len(reference) == 0 or len(query) == 0:
        raise ValueError("nearest-neighbour search needs non-empty point sets")
    if method == "auto":
        method = "brute" if len(reference) <= BRUTE_FORCE_LIMIT else "tree"
    if method == "brute":
        return brute_force(query, reference, backend)
    if method == "tree":
        return KDTree.build(reference).query(query, backend)
    raise ValueError(f"unknown method {method!r}")
