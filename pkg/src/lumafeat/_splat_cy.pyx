# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled splat compositing kernel (hot loop of the renderer).

Mirrors ``_splat_np.composite`` operation for operation; see that module for
the compositing semantics. Selected automatically at import by
``lumafeat.splat`` when the extension is available.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport ceil, exp, floor

cnp.import_array()


def composite(double[::1] px, double[::1] py, double[::1] z,
              double[::1] inv_a, double[::1] inv_b, double[::1] inv_c,
              double[::1] radius, double[::1] opacity, double[:, ::1] colors,
              int height, int width, double alpha_min, double alpha_max,
              double transmittance_min):
    """Accumulate sorted splats into RGB / depth / weight buffers."""
    rgb_arr = np.zeros((height, width, 3), dtype=np.float64)
    depth_arr = np.zeros((height, width), dtype=np.float64)
    weight_arr = np.zeros((height, width), dtype=np.float64)
    trans_arr = np.ones((height, width), dtype=np.float64)

    cdef double[:, :, ::1] rgb = rgb_arr
    cdef double[:, ::1] depth_acc = depth_arr
    cdef double[:, ::1] weight = weight_arr
    cdef double[:, ::1] trans = trans_arr

    cdef Py_ssize_t i, x, y, x0, x1, y0, y1
    cdef Py_ssize_t n = px.shape[0]
    cdef double r, dx, dy, q, alpha, t, contrib
    cdef double ia, ib2, ic, zi, op, c0, c1, c2

    with nogil:
        for i in range(n):
            r = radius[i]
            x0 = <Py_ssize_t>ceil(px[i] - r)
            x1 = <Py_ssize_t>floor(px[i] + r)
            y0 = <Py_ssize_t>ceil(py[i] - r)
            y1 = <Py_ssize_t>floor(py[i] + r)
            if x0 < 0:
                x0 = 0
            if x1 > width - 1:
                x1 = width - 1
            if y0 < 0:
                y0 = 0
            if y1 > height - 1:
                y1 = height - 1
            if x0 > x1 or y0 > y1:
                continue

            ia = inv_a[i]
            ib2 = 2.0 * inv_b[i]
            ic = inv_c[i]
            zi = z[i]
            op = opacity[i]
            c0 = colors[i, 0]
            c1 = colors[i, 1]
            c2 = colors[i, 2]

            for y in range(y0, y1 + 1):
                dy = y - py[i]
                for x in range(x0, x1 + 1):
                    t = trans[y, x]
                    if t < transmittance_min:
                        continue
                    dx = x - px[i]
                    q = ia * dx * dx + ib2 * dx * dy + ic * dy * dy
                    if q > 9.0:
                        continue
                    alpha = op * exp(-0.5 * q)
                    if alpha < alpha_min:
                        continue
                    if alpha > alpha_max:
                        alpha = alpha_max
                    contrib = t * alpha
                    rgb[y, x, 0] += contrib * c0
                    rgb[y, x, 1] += contrib * c1
                    rgb[y, x, 2] += contrib * c2
                    depth_acc[y, x] += contrib * zi
                    weight[y, x] += contrib
                    trans[y, x] = t * (1.0 - alpha)

    return rgb_arr, depth_arr, weight_arr, trans_arr
