# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled ray-march kernel for the analytic reference renderer.

Mirrors promptnerf.raymarch._render_numpy exactly; the pure-numpy path is
the fallback selected at import time when this module is unavailable.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt, exp, fmax, fmin, fabs

cnp.import_array()


cdef double clamp(double x, double lo, double hi) nogil:
    return fmax(lo, fmin(hi, x))


cdef double sdf_eval(int category, double size, double px, double py, double pz) nogil:
    cdef double r, h, qx, qy, qz, dx, dy, outside, inside, d2, k
    if category == 0:  # sphere
        return sqrt(px * px + py * py + pz * pz) - size
    elif category == 1:  # box (cube, half-extent 0.62*size)
        r = 0.62 * size
        qx = fabs(px) - r
        qy = fabs(py) - r
        qz = fabs(pz) - r
        outside = sqrt(fmax(qx, 0.0) ** 2 + fmax(qy, 0.0) ** 2 + fmax(qz, 0.0) ** 2)
        inside = fmin(fmax(qx, fmax(qy, qz)), 0.0)
        return outside + inside
    elif category == 2:  # torus in the xy-plane
        r = 0.70 * size
        h = 0.30 * size
        dx = sqrt(px * px + py * py) - r
        return sqrt(dx * dx + pz * pz) - h
    elif category == 3:  # capped cylinder along z
        r = 0.60 * size
        h = 0.80 * size
        dx = sqrt(px * px + py * py) - r
        dy = fabs(pz) - h
        outside = sqrt(fmax(dx, 0.0) ** 2 + fmax(dy, 0.0) ** 2)
        inside = fmin(fmax(dx, dy), 0.0)
        return outside + inside
    elif category == 4:  # cone: apex at +size*z, base radius 0.7*size at -size*z
        r = 0.70 * size
        h = 2.0 * size
        qx = sqrt(px * px + py * py)
        qz = pz + size  # base plane at qz = 0, apex at qz = h
        # distance to the 2D triangle (0..r at qz=0, apex at (0,h))
        k = clamp((qx * r + (h - qz) * h) / (r * r + h * h), 0.0, 1.0)
        dx = qx - r * (1.0 - k)
        dy = qz - h * k
        d2 = sqrt(dx * dx + dy * dy)
        if qz < 0.0:
            d2 = sqrt(fmax(qx - r, 0.0) ** 2 + qz * qz)
            return fmax(d2, -qz) if qx < r else d2
        if qx * h + qz * r < r * h and qz > 0.0:  # inside the triangle
            return -fmin(fmin(qz, (r * h - qx * h - qz * r) / sqrt(r * r + h * h)), h - qz)
        return d2
    else:  # capsule along z
        r = 0.40 * size
        h = 0.60 * size
        qz = clamp(pz, -h, h)
        return sqrt(px * px + py * py + (pz - qz) * (pz - qz)) - r


def sdf(int category, double size, cnp.ndarray[cnp.float64_t, ndim=2] points):
    """Signed distance of points (n, 3) to the canonical shape."""
    cdef Py_ssize_t n = points.shape[0], i
    cdef cnp.ndarray[cnp.float64_t, ndim=1] out = np.empty(n)
    for i in range(n):
        out[i] = sdf_eval(category, size, points[i, 0], points[i, 1], points[i, 2])
    return out


def render(int category, double size,
           cnp.ndarray[cnp.float64_t, ndim=1] center,
           cnp.ndarray[cnp.float64_t, ndim=1] albedo,
           double sigma_max, double feather,
           cnp.ndarray[cnp.float64_t, ndim=2] origins,
           cnp.ndarray[cnp.float64_t, ndim=2] dirs,
           double near, double far, int n_samples):
    """Quadrature volume rendering of the feathered SDF density over white."""
    cdef Py_ssize_t n_rays = origins.shape[0], i, k
    cdef cnp.ndarray[cnp.float64_t, ndim=2] out = np.empty((n_rays, 3))
    cdef double delta = (far - near) / n_samples
    cdef double t, px, py, pz, sd, u, sigma, w, trans, alpha, acc
    cdef double cr, cg, cb
    for i in range(n_rays):
        trans = 1.0
        cr = 0.0
        cg = 0.0
        cb = 0.0
        acc = 0.0
        for k in range(n_samples):
            t = near + (k + 0.5) * delta
            px = origins[i, 0] + t * dirs[i, 0] - center[0]
            py = origins[i, 1] + t * dirs[i, 1] - center[1]
            pz = origins[i, 2] + t * dirs[i, 2] - center[2]
            sd = sdf_eval(category, size, px, py, pz)
            u = clamp(0.5 - sd / feather, 0.0, 1.0)
            sigma = sigma_max * u * u * (3.0 - 2.0 * u)
            if sigma > 0.0:
                alpha = 1.0 - exp(-sigma * delta)
                w = trans * alpha
                cr += w * albedo[0]
                cg += w * albedo[1]
                cb += w * albedo[2]
                acc += w
                trans *= 1.0 - alpha
        cr += (1.0 - acc)
        cg += (1.0 - acc)
        cb += (1.0 - acc)
        out[i, 0] = cr
        out[i, 1] = cg
        out[i, 2] = cb
    return out
