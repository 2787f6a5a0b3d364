# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot kernels: patch statistics and directed contour distances.

Contracts match segstack._ext._fallback; that module is the reference for
behaviour, this one for speed.
"""

import numpy as np

from libc.math cimport sqrt

IMPLEMENTATION = "compiled"

BUCKET_THRESHOLD = 4096


def patch_moments(const float[:, :, ::1] data, int radius):
    """Per-channel mean and variance over the (2r+1)^2 patch at each pixel.

    Patches are clamped to the image edge. Returns (mean, variance) as
    (C, H, W) float32 arrays.
    """
    cdef Py_ssize_t nc = data.shape[0]
    cdef Py_ssize_t h = data.shape[1]
    cdef Py_ssize_t w = data.shape[2]
    mean_arr = np.empty((nc, h, w), dtype=np.float32)
    var_arr = np.empty((nc, h, w), dtype=np.float32)
    cdef float[:, :, ::1] mean = mean_arr
    cdef float[:, :, ::1] var = var_arr
    cdef Py_ssize_t c, i, j, di, dj, ii, jj
    cdef double s1, s2, v, m
    cdef double count = (2 * radius + 1) * (2 * radius + 1)
    for c in range(nc):
        for i in range(h):
            for j in range(w):
                s1 = 0.0
                s2 = 0.0
                for di in range(-radius, radius + 1):
                    ii = i + di
                    if ii < 0:
                        ii = 0
                    elif ii >= h:
                        ii = h - 1
                    for dj in range(-radius, radius + 1):
                        jj = j + dj
                        if jj < 0:
                            jj = 0
                        elif jj >= w:
                            jj = w - 1
                        v = data[c, ii, jj]
                        s1 += v
                        s2 += v * v
                m = s1 / count
                mean[c, i, j] = <float> m
                v = s2 / count - m * m
                var[c, i, j] = <float> (v if v > 0.0 else 0.0)
    return mean_arr, var_arr


cdef double _brute_directed(const double[:, ::1] a, const double[:, ::1] b):
    cdef Py_ssize_t na = a.shape[0]
    cdef Py_ssize_t nb = b.shape[0]
    cdef Py_ssize_t i, j
    cdef double best, d2, dx, dy, total = 0.0
    for i in range(na):
        best = -1.0
        for j in range(nb):
            dx = a[i, 0] - b[j, 0]
            dy = a[i, 1] - b[j, 1]
            d2 = dx * dx + dy * dy
            if best < 0.0 or d2 < best:
                best = d2
        total += sqrt(best)
    return total / na


def directed_avg_distance(const double[:, ::1] a, const double[:, ::1] b):
    """Mean over a in A of the Euclidean distance to the nearest b in B.

    Brute force for small B; above BUCKET_THRESHOLD points the target set
    is bucketed on a uniform grid and queried by expanding rings, which
    keeps the per-point search local for contour-like data.
    """
    cdef Py_ssize_t na = a.shape[0]
    cdef Py_ssize_t nb = b.shape[0]
    if na == 0 or nb == 0:
        raise ValueError("directed_avg_distance requires non-empty point sets")
    if nb <= <Py_ssize_t> BUCKET_THRESHOLD:
        return _brute_directed(a, b)

    # Grid over the combined bounding box so every query lies inside it.
    cdef double minx = a[0, 0], maxx = a[0, 0], miny = a[0, 1], maxy = a[0, 1]
    cdef Py_ssize_t i, j
    for i in range(na):
        if a[i, 0] < minx: minx = a[i, 0]
        if a[i, 0] > maxx: maxx = a[i, 0]
        if a[i, 1] < miny: miny = a[i, 1]
        if a[i, 1] > maxy: maxy = a[i, 1]
    for j in range(nb):
        if b[j, 0] < minx: minx = b[j, 0]
        if b[j, 0] > maxx: maxx = b[j, 0]
        if b[j, 1] < miny: miny = b[j, 1]
        if b[j, 1] > maxy: maxy = b[j, 1]

    cdef double extent_x = maxx - minx
    cdef double extent_y = maxy - miny
    cdef double cell = sqrt((extent_x + 1.0) * (extent_y + 1.0) / nb)
    if cell < 1.0:
        cell = 1.0
    cdef Py_ssize_t gx = <Py_ssize_t> (extent_x / cell) + 1
    cdef Py_ssize_t gy = <Py_ssize_t> (extent_y / cell) + 1
    while gx * gy > (1 << 22):
        cell *= 2.0
        gx = <Py_ssize_t> (extent_x / cell) + 1
        gy = <Py_ssize_t> (extent_y / cell) + 1

    counts_arr = np.zeros(gx * gy + 1, dtype=np.intp)
    cdef Py_ssize_t[::1] starts = counts_arr
    cdef Py_ssize_t[::1] cell_of = np.empty(nb, dtype=np.intp)
    cdef Py_ssize_t cx, cy, cid
    for j in range(nb):
        cx = <Py_ssize_t> ((b[j, 0] - minx) / cell)
        cy = <Py_ssize_t> ((b[j, 1] - miny) / cell)
        if cx >= gx: cx = gx - 1
        if cy >= gy: cy = gy - 1
        cid = cx * gy + cy
        cell_of[j] = cid
        starts[cid + 1] += 1
    for cid in range(gx * gy):
        starts[cid + 1] += starts[cid]
    items_arr = np.empty(nb, dtype=np.intp)
    cdef Py_ssize_t[::1] items = items_arr
    fill_arr = counts_arr[:-1].copy()
    cdef Py_ssize_t[::1] fill = fill_arr
    for j in range(nb):
        cid = cell_of[j]
        items[fill[cid]] = j
        fill[cid] += 1

    cdef double total = 0.0
    cdef double best, d2, dx, dy, bound
    cdef Py_ssize_t r, rmax, x, y, x0, x1, y0, y1, p
    rmax = gx if gx > gy else gy
    for i in range(na):
        cx = <Py_ssize_t> ((a[i, 0] - minx) / cell)
        cy = <Py_ssize_t> ((a[i, 1] - miny) / cell)
        if cx >= gx: cx = gx - 1
        if cy >= gy: cy = gy - 1
        best = -1.0
        for r in range(rmax + 1):
            if best >= 0.0 and r >= 2:
                # Any point in a ring-r cell is at least (r-1)*cell away.
                bound = (r - 1) * cell
                if bound * bound >= best:
                    break
            x0 = cx - r
            x1 = cx + r
            y0 = cy - r
            y1 = cy + r
            for x in range(x0, x1 + 1):
                if x < 0 or x >= gx:
                    continue
                for y in range(y0, y1 + 1):
                    if y < 0 or y >= gy:
                        continue
                    if r > 0 and x != x0 and x != x1 and y != y0 and y != y1:
                        continue  # interior cells were visited at smaller r
                    cid = x * gy + y
                    for p in range(starts[cid], starts[cid + 1]):
                        j = items[p]
                        dx = a[i, 0] - b[j, 0]
                        dy = a[i, 1] - b[j, 1]
                        d2 = dx * dx + dy * dy
                        if best < 0.0 or d2 < best:
                            best = d2
        total += sqrt(best)
    return total / na
