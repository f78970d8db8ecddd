# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Hot loop of the software rasterizer: z-buffered, perspective-correct
barycentric interpolation of per-vertex attributes over all triangles.

Mirrors zeropose._raster_numpy.fill_triangles; keep the two in sync.
"""

from libc.math cimport floor, ceil

cimport cython


def fill_triangles(const double[:, ::1] cam, const double[:, ::1] proj,
                   const double[:, ::1] attrs, const int[:, ::1] tris,
                   const unsigned char[::1] vert_ok,
                   float[:, :, ::1] coord_out, float[:, ::1] depth_out,
                   unsigned char[:, ::1] mask_out, double[:, ::1] zbuf):
    """Rasterize triangles into preallocated buffers.

    cam:    (N, 3) camera-frame vertex positions, mm
    proj:   (N, 2) projected pixel positions (integer coordinates = centers)
    attrs:  (N, 3) per-vertex attributes (normalized object coordinates)
    tris:   (M, 3) vertex indices
    vert_ok:(N,) 1 where the vertex is in front of the near plane
    zbuf:   (H, W) initialized to +inf
    """
    cdef Py_ssize_t height = coord_out.shape[0]
    cdef Py_ssize_t width = coord_out.shape[1]
    cdef Py_ssize_t m = tris.shape[0]
    cdef Py_ssize_t t, x, y, c
    cdef int i0, i1, i2
    cdef double x0, y0, x1, y1, x2, y2
    cdef double z0, z1, z2
    cdef double minx, maxx, miny, maxy
    cdef Py_ssize_t px0, px1, py0, py1
    cdef double den, w0, w1, w2, b0, b1, b2, bsum, eps
    cdef double invz, z, px, py
    cdef double a0, a1, a2

    for t in range(m):
        i0 = tris[t, 0]
        i1 = tris[t, 1]
        i2 = tris[t, 2]
        if not (vert_ok[i0] and vert_ok[i1] and vert_ok[i2]):
            continue
        x0 = proj[i0, 0]; y0 = proj[i0, 1]
        x1 = proj[i1, 0]; y1 = proj[i1, 1]
        x2 = proj[i2, 0]; y2 = proj[i2, 1]
        z0 = cam[i0, 2]; z1 = cam[i1, 2]; z2 = cam[i2, 2]

        den = (x1 - x0) * (y2 - y0) - (x2 - x0) * (y1 - y0)
        if den == 0.0:
            continue

        minx = x0
        if x1 < minx: minx = x1
        if x2 < minx: minx = x2
        maxx = x0
        if x1 > maxx: maxx = x1
        if x2 > maxx: maxx = x2
        miny = y0
        if y1 < miny: miny = y1
        if y2 < miny: miny = y2
        maxy = y0
        if y1 > maxy: maxy = y1
        if y2 > maxy: maxy = y2

        px0 = <Py_ssize_t>floor(minx)
        if px0 < 0: px0 = 0
        px1 = <Py_ssize_t>ceil(maxx)
        if px1 > width - 1: px1 = width - 1
        py0 = <Py_ssize_t>floor(miny)
        if py0 < 0: py0 = 0
        py1 = <Py_ssize_t>ceil(maxy)
        if py1 > height - 1: py1 = height - 1
        if px1 < px0 or py1 < py0:
            continue

        # epsilon keeps shared edges covered; relative to the triangle area
        eps = 1e-9 * (den if den > 0.0 else -den)

        for y in range(py0, py1 + 1):
            py = <double>y
            for x in range(px0, px1 + 1):
                px = <double>x
                w0 = (x1 - px) * (y2 - py) - (x2 - px) * (y1 - py)
                w1 = (x2 - px) * (y0 - py) - (x0 - px) * (y2 - py)
                w2 = (x0 - px) * (y1 - py) - (x1 - px) * (y0 - py)
                if den < 0.0:
                    w0 = -w0; w1 = -w1; w2 = -w2
                if w0 < -eps or w1 < -eps or w2 < -eps:
                    continue
                if w0 < 0.0: w0 = 0.0
                if w1 < 0.0: w1 = 0.0
                if w2 < 0.0: w2 = 0.0
                bsum = w0 + w1 + w2
                if bsum <= 0.0:
                    continue
                b0 = w0 / bsum; b1 = w1 / bsum; b2 = w2 / bsum

                invz = b0 / z0 + b1 / z1 + b2 / z2
                if invz <= 0.0:
                    continue
                z = 1.0 / invz
                if z < zbuf[y, x]:
                    zbuf[y, x] = z
                    depth_out[y, x] = <float>z
                    mask_out[y, x] = 1
                    a0 = (b0 * attrs[i0, 0] / z0 + b1 * attrs[i1, 0] / z1 + b2 * attrs[i2, 0] / z2) * z
                    a1 = (b0 * attrs[i0, 1] / z0 + b1 * attrs[i1, 1] / z1 + b2 * attrs[i2, 1] / z2) * z
                    a2 = (b0 * attrs[i0, 2] / z0 + b1 * attrs[i1, 2] / z1 + b2 * attrs[i2, 2] / z2) * z
                    if a0 < 0.0: a0 = 0.0
                    if a0 > 1.0: a0 = 1.0
                    if a1 < 0.0: a1 = 0.0
                    if a1 > 1.0: a1 = 1.0
                    if a2 < 0.0: a2 = 0.0
                    if a2 > 1.0: a2 = 1.0
                    coord_out[y, x, 0] = <float>a0
                    coord_out[y, x, 1] = <float>a1
                    coord_out[y, x, 2] = <float>a2
