"""Pure-NumPy splat compositing kernel (fallback backend).

Implements exactly the same front-to-back alpha compositing loop as the
Cython kernel in ``_splat_cy.pyx``; arithmetic is kept in the same order so
the two backends agree to floating-point round-off (the only operation that
may differ in the last ulp is exp). Points must arrive sorted front to back.
"""

import numpy as np


def composite(px, py, z, inv_a, inv_b, inv_c, radius, opacity, colors,
              height, width, alpha_min, alpha_max, transmittance_min):
    """Accumulate sorted splats into RGB / depth / weight buffers.

    Per pixel the update for splat i with footprint alpha a_i is
        rgb    += T * a_i * color_i
        depth  += T * a_i * z_i
        weight += T * a_i
        T      *= (1 - a_i)
    where T is the remaining transmittance. Pixels whose transmittance fell
    below ``transmittance_min`` and footprint values below ``alpha_min`` are
    skipped; alphas are clamped at ``alpha_max``.

    Returns (rgb (H,W,3), depth_acc (H,W), weight (H,W), transmittance (H,W)).
    """
    n = px.shape[0]
    rgb = np.zeros((height, width, 3), dtype=np.float64)
    depth_acc = np.zeros((height, width), dtype=np.float64)
    weight = np.zeros((height, width), dtype=np.float64)
    trans = np.ones((height, width), dtype=np.float64)

    for i in range(n):
        r = radius[i]
        x0 = max(0, int(np.ceil(px[i] - r)))
        x1 = min(width - 1, int(np.floor(px[i] + r)))
        y0 = max(0, int(np.ceil(py[i] - r)))
        y1 = min(height - 1, int(np.floor(py[i] + r)))
        if x0 > x1 or y0 > y1:
            continue

        xs = np.arange(x0, x1 + 1, dtype=np.float64)
        ys = np.arange(y0, y1 + 1, dtype=np.float64)
        dx = xs - px[i]
        dy = ys - py[i]
        # q = ia*dx^2 + (2*ib)*dx*dy + ic*dy^2, association mirrors the C loop
        q = (inv_a[i] * dx * dx)[None, :] \
            + ((2.0 * inv_b[i]) * dx)[None, :] * dy[:, None] \
            + (inv_c[i] * dy * dy)[:, None]

        t_patch = trans[y0:y1 + 1, x0:x1 + 1]
        alpha = opacity[i] * np.exp(-0.5 * q)
        alpha = np.minimum(alpha, alpha_max)
        live = (q <= 9.0) & (alpha >= alpha_min) & (t_patch >= transmittance_min)
        alpha = np.where(live, alpha, 0.0)

        contrib = t_patch * alpha
        rgb[y0:y1 + 1, x0:x1 + 1] += contrib[:, :, None] * colors[i]
        depth_acc[y0:y1 + 1, x0:x1 + 1] += contrib * z[i]
        weight[y0:y1 + 1, x0:x1 + 1] += contrib
        t_patch *= 1.0 - alpha

    return rgb, depth_acc, weight, trans
