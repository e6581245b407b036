# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled geometry/assignment kernels; semantics match _puregeom."""

import numpy as np


def iou_matrix(double[:, ::1] a, double[:, ::1] b):
    cdef Py_ssize_t n = a.shape[0], m = b.shape[0], i, j
    out_arr = np.empty((n, m), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef double ax0, ay0, ax1, ay1, area_a
    cdef double iw, ih, inter, union
    for i in range(n):
        ax0 = a[i, 0]; ay0 = a[i, 1]; ax1 = a[i, 2]; ay1 = a[i, 3]
        area_a = (ax1 - ax0) * (ay1 - ay0)
        for j in range(m):
            iw = min(ax1, b[j, 2]) - max(ax0, b[j, 0])
            if iw < 0: iw = 0
            ih = min(ay1, b[j, 3]) - max(ay0, b[j, 1])
            if ih < 0: ih = 0
            inter = iw * ih
            union = area_a + (b[j, 2] - b[j, 0]) * (b[j, 3] - b[j, 1]) - inter
            out[i, j] = inter / union if union > 0 else 0.0
    return out_arr


def giou_matrix(double[:, ::1] a, double[:, ::1] b):
    cdef Py_ssize_t n = a.shape[0], m = b.shape[0], i, j
    out_arr = np.empty((n, m), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef double ax0, ay0, ax1, ay1, area_a
    cdef double iw, ih, inter, union, hull, iou
    for i in range(n):
        ax0 = a[i, 0]; ay0 = a[i, 1]; ax1 = a[i, 2]; ay1 = a[i, 3]
        area_a = (ax1 - ax0) * (ay1 - ay0)
        for j in range(m):
            iw = min(ax1, b[j, 2]) - max(ax0, b[j, 0])
            if iw < 0: iw = 0
            ih = min(ay1, b[j, 3]) - max(ay0, b[j, 1])
            if ih < 0: ih = 0
            inter = iw * ih
            union = area_a + (b[j, 2] - b[j, 0]) * (b[j, 3] - b[j, 1]) - inter
            iou = inter / union if union > 0 else 0.0
            hull = ((max(ax1, b[j, 2]) - min(ax0, b[j, 0]))
                    * (max(ay1, b[j, 3]) - min(ay0, b[j, 1])))
            out[i, j] = iou - ((hull - union) / hull if hull > 0 else 0.0)
    return out_arr


def lsa_core(double[:, ::1] cost):
    """Shortest-augmenting-path assignment for an n<=m cost matrix."""
    cdef Py_ssize_t n = cost.shape[0], m = cost.shape[1]
    if n == 0 or m == 0:
        empty = np.empty(0, dtype=np.intp)
        return empty, empty
    if n > m:
        raise ValueError("lsa_core requires rows <= cols")

    u_arr = np.zeros(n + 1, dtype=np.float64)
    v_arr = np.zeros(m + 1, dtype=np.float64)
    p_arr = np.zeros(m + 1, dtype=np.intp)
    way_arr = np.zeros(m + 1, dtype=np.intp)
    minv_arr = np.empty(m + 1, dtype=np.float64)
    used_arr = np.zeros(m + 1, dtype=np.uint8)
    cdef double[::1] u = u_arr, v = v_arr, minv = minv_arr
    cdef Py_ssize_t[::1] p = p_arr, way = way_arr
    cdef unsigned char[::1] used = used_arr
    cdef Py_ssize_t i, j, j0, j1, i0
    cdef double delta, cur
    cdef double INF = float("inf")

    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        for j in range(m + 1):
            minv[j] = INF
            used[j] = 0
        while True:
            used[j0] = 1
            i0 = p[j0]
            delta = INF
            j1 = 0
            for j in range(1, m + 1):
                if not used[j]:
                    cur = cost[i0 - 1, j - 1] - u[i0] - v[j]
                    if cur < minv[j]:
                        minv[j] = cur
                        way[j] = j0
                    if minv[j] < delta:
                        delta = minv[j]
                        j1 = j
            for j in range(m + 1):
                if used[j]:
                    u[p[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0 != 0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1

    rows = p_arr[1:]
    matched_cols = np.nonzero(rows)[0]
    row_ind = rows[matched_cols] - 1
    order = np.argsort(row_ind)
    return (row_ind[order].astype(np.intp),
            matched_cols[order].astype(np.intp))
