"""Pure numpy fallback for the geometry/assignment kernels.

Mirrors the compiled extension in ``_fastgeom.pyx`` function for function;
:mod:`dpp.boxgeo` picks one of the two at import time.
"""

import numpy as np


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise intersection-over-union of (n,4) and (m,4) xyxy boxes."""
    ax0, ay0, ax1, ay1 = (a[:, None, k] for k in range(4))
    bx0, by0, bx1, by1 = (b[None, :, k] for k in range(4))
    iw = np.maximum(np.minimum(ax1, bx1) - np.maximum(ax0, bx0), 0.0)
    ih = np.maximum(np.minimum(ay1, by1) - np.maximum(ay0, by0), 0.0)
    inter = iw * ih
    union = (ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter
    out = np.zeros_like(inter)
    np.divide(inter, union, out=out, where=union > 0)
    return out


def giou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise generalized IoU: iou - (hull - union) / hull, in [-1, 1]."""
    ax0, ay0, ax1, ay1 = (a[:, None, k] for k in range(4))
    bx0, by0, bx1, by1 = (b[None, :, k] for k in range(4))
    iw = np.maximum(np.minimum(ax1, bx1) - np.maximum(ax0, bx0), 0.0)
    ih = np.maximum(np.minimum(ay1, by1) - np.maximum(ay0, by0), 0.0)
    inter = iw * ih
    union = (ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter
    iou = np.zeros_like(inter)
    np.divide(inter, union, out=iou, where=union > 0)
    hull = ((np.maximum(ax1, bx1) - np.minimum(ax0, bx0))
            * (np.maximum(ay1, by1) - np.minimum(ay0, by0)))
    penalty = np.zeros_like(hull)
    np.divide(hull - union, hull, out=penalty, where=hull > 0)
    return iou - penalty


def lsa_core(cost: np.ndarray):
    """Minimum-cost assignment of every row of an n<=m cost matrix.

    Shortest-augmenting-path algorithm with dual potentials, O(n^2 m).
    Returns (row_ind, col_ind) sorted by row; callers handle transposition.
    """
    n, m = cost.shape
    if n == 0 or m == 0:
        empty = np.empty(0, dtype=np.intp)
        return empty, empty
    if n > m:
        raise ValueError("lsa_core requires rows <= cols")

    INF = np.inf
    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    # p[j]: 1-based row matched to column j (column 0 is virtual); 0 = free
    p = np.zeros(m + 1, dtype=np.intp)
    way = np.zeros(m + 1, dtype=np.intp)

    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(m + 1, INF)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            free = ~used[1:]
            cur = cost[i0 - 1, :] - u[i0] - v[1:]
            mv = minv[1:]
            upd = free & (cur < mv)
            mv[upd] = cur[upd]
            way[1:][upd] = j0
            masked = np.where(free, mv, INF)
            j1 = int(np.argmin(masked)) + 1
            delta = masked[j1 - 1]
            u[p[used]] += delta  # rows matched to used columns are distinct
            v[used] -= delta
            mv[free] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0 != 0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1

    matched_cols = np.nonzero(p[1:])[0]
    row_ind = p[1:][matched_cols] - 1
    col_ind = matched_cols
    order = np.argsort(row_ind)
    return row_ind[order].astype(np.intp), col_ind[order].astype(np.intp)
