"""Pure numpy/Python nearest-neighbour kernels (fallback for ``_nnkernel``)."""
from __future__ import annotations

import numpy as np

_CHUNK = 256


def brute_nn(query: np.ndarray, ref: np.ndarray):
    n = len(query)
    idx = np.empty(n, dtype=np.intp)
    d2 = np.empty(n, dtype=np.float64)
    rx, ry, rz = ref[:, 0], ref[:, 1], ref[:, 2]
    for lo in range(0, n, _CHUNK):
        q = query[lo:lo + _CHUNK]
        dx = rx[None, :] - q[:, 0:1]
        dy = ry[None, :] - q[:, 1:2]
        dz = rz[None, :] - q[:, 2:3]
        s = dx * dx + dy * dy + dz * dz
        j = np.argmin(s, axis=1)
        idx[lo:lo + _CHUNK] = j
        d2[lo:lo + _CHUNK] = s[np.arange(len(q)), j]
    return idx, d2


def kdtree_query(query, pts, perm, start, end, dim, val, left, right):
    n = len(query)
    idx = np.empty(n, dtype=np.intp)
    d2 = np.empty(n, dtype=np.float64)
    for i in range(n):
        q = query[i]
        best, bi = np.inf, -1
        stack = [(0, 0.0)]
        while stack:
            node, bound = stack.pop()
            if bound > best:
                continue
            if left[node] < 0:
                seg = pts[start[node]:end[node]]
                dx = seg[:, 0] - q[0]
                dy = seg[:, 1] - q[1]
                dz = seg[:, 2] - q[2]
                s = dx * dx + dy * dy + dz * dz
                smin = s.min()
                if smin <= best:
                    cand = perm[start[node]:end[node]][s == smin].min()
                    if smin < best or cand < bi:
                        best, bi = smin, cand
                continue
            diff = q[dim[node]] - val[node]
            if diff <= 0:
                near, far = left[node], right[node]
            else:
                near, far = right[node], left[node]
            stack.append((far, diff * diff))
            stack.append((near, 0.0))
        idx[i] = bi
        d2[i] = best
    return idx, d2
