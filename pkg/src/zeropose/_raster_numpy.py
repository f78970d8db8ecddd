"""Pure-numpy fallback for the compiled rasterizer kernel.

Same contract as zeropose._rasterize.fill_triangles: z-buffered,
perspective-correct barycentric fill, one vectorized pixel block per
triangle. Roughly two orders of magnitude slower than the extension on
triangle-dense meshes; selected automatically when the extension is not
importable (see zeropose.render.RASTER_BACKEND).
"""

from __future__ import annotations

import numpy as np


def fill_triangles(cam, proj, attrs, tris, vert_ok,
                   coord_out, depth_out, mask_out, zbuf):
    height, width = depth_out.shape
    for i0, i1, i2 in tris:
        if not (vert_ok[i0] and vert_ok[i1] and vert_ok[i2]):
            continue
        p0, p1, p2 = proj[i0], proj[i1], proj[i2]
        z0, z1, z2 = cam[i0, 2], cam[i1, 2], cam[i2, 2]
        den = (p1[0] - p0[0]) * (p2[1] - p0[1]) - (p2[0] - p0[0]) * (p1[1] - p0[1])
        if den == 0.0:
            continue

        px0 = max(0, int(np.floor(min(p0[0], p1[0], p2[0]))))
        px1 = min(width - 1, int(np.ceil(max(p0[0], p1[0], p2[0]))))
        py0 = max(0, int(np.floor(min(p0[1], p1[1], p2[1]))))
        py1 = min(height - 1, int(np.ceil(max(p0[1], p1[1], p2[1]))))
        if px1 < px0 or py1 < py0:
            continue

        xs = np.arange(px0, px1 + 1, dtype=np.float64)
        ys = np.arange(py0, py1 + 1, dtype=np.float64)
        xg, yg = np.meshgrid(xs, ys)

        w0 = (p1[0] - xg) * (p2[1] - yg) - (p2[0] - xg) * (p1[1] - yg)
        w1 = (p2[0] - xg) * (p0[1] - yg) - (p0[0] - xg) * (p2[1] - yg)
        w2 = (p0[0] - xg) * (p1[1] - yg) - (p1[0] - xg) * (p0[1] - yg)
        if den < 0.0:
            w0, w1, w2 = -w0, -w1, -w2
        eps = 1e-9 * abs(den)
        inside = (w0 >= -eps) & (w1 >= -eps) & (w2 >= -eps)
        if not inside.any():
            continue

        w0 = np.clip(w0, 0.0, None)
        w1 = np.clip(w1, 0.0, None)
        w2 = np.clip(w2, 0.0, None)
        bsum = w0 + w1 + w2
        inside &= bsum > 0.0
        with np.errstate(invalid="ignore", divide="ignore"):
            b0, b1, b2 = w0 / bsum, w1 / bsum, w2 / bsum
            invz = b0 / z0 + b1 / z1 + b2 / z2
        inside &= invz > 0.0
        if not inside.any():
            continue
        z = np.where(inside, 1.0 / np.where(invz > 0, invz, 1.0), np.inf)

        sub_zbuf = zbuf[py0:py1 + 1, px0:px1 + 1]
        win = inside & (z < sub_zbuf)
        if not win.any():
            continue
        sub_zbuf[win] = z[win]
        depth_out[py0:py1 + 1, px0:px1 + 1][win] = z[win].astype(np.float32)
        mask_out[py0:py1 + 1, px0:px1 + 1][win] = 1
        with np.errstate(invalid="ignore"):
            interp = (b0[..., None] * attrs[i0] / z0 + b1[..., None] * attrs[i1] / z1
                      + b2[..., None] * attrs[i2] / z2) * z[..., None]
            interp = np.clip(interp, 0.0, 1.0)
        coord_out[py0:py1 + 1, px0:px1 + 1][win] = interp[win].astype(np.float32)
