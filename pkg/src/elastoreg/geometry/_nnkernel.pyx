# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled nearest-neighbour kernels.

Squared distances are formed as dx*dx + dy*dy + dz*dz in that order so
results agree bit for bit with the numpy fallback. Ties keep the lowest
reference index.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport INFINITY

cnp.import_array()


def brute_nn(const double[:, ::1] query, const double[:, ::1] ref):
    cdef Py_ssize_t n = query.shape[0], m = ref.shape[0]
    cdef Py_ssize_t i, j, bi
    cdef double qx, qy, qz, dx, dy, dz, s, best
    idx_arr = np.empty(n, dtype=np.intp)
    d2_arr = np.empty(n, dtype=np.float64)
    cdef Py_ssize_t[::1] idx = idx_arr
    cdef double[::1] d2 = d2_arr
    with nogil:
        for i in range(n):
            qx = query[i, 0]
            qy = query[i, 1]
            qz = query[i, 2]
            best = INFINITY
            bi = -1
            for j in range(m):
                dx = ref[j, 0] - qx
                dy = ref[j, 1] - qy
                dz = ref[j, 2] - qz
                s = dx * dx + dy * dy + dz * dz
                if s < best:
                    best = s
                    bi = j
            idx[i] = bi
            d2[i] = best
    return idx_arr, d2_arr


def kdtree_query(const double[:, ::1] query, const double[:, ::1] pts,
                 const cnp.int64_t[::1] perm, const cnp.int64_t[::1] start,
                 const cnp.int64_t[::1] end, const cnp.int64_t[::1] dim,
                 const double[::1] val, const cnp.int64_t[::1] left,
                 const cnp.int64_t[::1] right):
    cdef Py_ssize_t n = query.shape[0], n_nodes = start.shape[0]
    cdef Py_ssize_t i, k, top, node, near, far
    cdef cnp.int64_t bi, cand
    cdef double qx, qy, qz, dx, dy, dz, s, best, diff, q_d
    idx_arr = np.empty(n, dtype=np.intp)
    d2_arr = np.empty(n, dtype=np.float64)
    cdef Py_ssize_t[::1] idx = idx_arr
    cdef double[::1] d2 = d2_arr
    stack_arr = np.empty(n_nodes + 1, dtype=np.intp)
    bound_arr = np.empty(n_nodes + 1, dtype=np.float64)
    cdef Py_ssize_t[::1] stack = stack_arr
    cdef double[::1] bound = bound_arr
    with nogil:
        for i in range(n):
            qx = query[i, 0]
            qy = query[i, 1]
            qz = query[i, 2]
            best = INFINITY
            bi = -1
            top = 0
            stack[0] = 0
            bound[0] = 0.0
            top = 1
            while top > 0:
                top -= 1
                node = stack[top]
                if bound[top] > best:
                    continue
                if left[node] < 0:
                    for k in range(start[node], end[node]):
                        dx = pts[k, 0] - qx
                        dy = pts[k, 1] - qy
                        dz = pts[k, 2] - qz
                        s = dx * dx + dy * dy + dz * dz
                        cand = perm[k]
                        if s < best or (s == best and cand < bi):
                            best = s
                            bi = cand
                    continue
                if dim[node] == 0:
                    q_d = qx
                elif dim[node] == 1:
                    q_d = qy
                else:
                    q_d = qz
                diff = q_d - val[node]
                if diff <= 0:
                    near = left[node]
                    far = right[node]
                else:
                    near = right[node]
                    far = left[node]
                stack[top] = far
                bound[top] = diff * diff
                top += 1
                stack[top] = near
                bound[top] = 0.0
                top += 1
            idx[i] = bi
            d2[i] = best
    return idx_arr, d2_arr
