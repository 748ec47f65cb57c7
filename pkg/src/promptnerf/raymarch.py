"""Analytic SDF densities and the reference ray-march renderer.

Two interchangeable backends implement the hot per-ray loop: a compiled
extension (``promptnerf._raymarch``) and the vectorized numpy code below.
The compiled one is used when it imported cleanly and the environment
variable ``PROMPTNERF_PURE`` is unset; both produce identical images up to
floating-point associativity (< 1e-12 per channel in practice).
"""

from __future__ import annotations

import os

import numpy as np

CATEGORIES = ("sphere", "box", "torus", "cylinder", "cone", "capsule")

try:
    from promptnerf import _raymarch as _native
except ImportError:
    _native = None


def backend_name() -> str:
    if _native is not None and not os.environ.get("PROMPTNERF_PURE"):
        return "compiled"
    return "numpy"


def _clamp(x, lo, hi):
    return np.clip(x, lo, hi)


def sdf_numpy(category: int, size: float, p: np.ndarray) -> np.ndarray:
    """Signed distance of points (n, 3) to the canonical (centered) shape."""
    x, y, z = p[:, 0], p[:, 1], p[:, 2]
    if category == 0:  # sphere
        return np.linalg.norm(p, axis=1) - size
    if category == 1:  # cube
        r = 0.62 * size
        q = np.abs(p) - r
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=1)
        inside = np.minimum(q.max(axis=1), 0.0)
        return outside + inside
    if category == 2:  # torus in the xy-plane
        r, h = 0.70 * size, 0.30 * size
        dxy = np.hypot(x, y) - r
        return np.hypot(dxy, z) - h
    if category == 3:  # capped cylinder along z
        r, h = 0.60 * size, 0.80 * size
        dx = np.hypot(x, y) - r
        dy = np.abs(z) - h
        outside = np.hypot(np.maximum(dx, 0.0), np.maximum(dy, 0.0))
        inside = np.minimum(np.maximum(dx, dy), 0.0)
        return outside + inside
    if category == 4:  # cone: apex at +size*z, base radius 0.7*size at -size*z
        r, h = 0.70 * size, 2.0 * size
        qx = np.hypot(x, y)
        qz = z + size
        k = _clamp((qx * r + (h - qz) * h) / (r * r + h * h), 0.0, 1.0)
        d = np.hypot(qx - r * (1.0 - k), qz - h * k)
        below = qz < 0.0
        d_below = np.hypot(np.maximum(qx - r, 0.0), qz)
        d_below = np.where(qx < r, np.maximum(d_below, -qz), d_below)
        slant = (r * h - qx * h - qz * r) / np.hypot(r, h)
        inside = (qx * h + qz * r < r * h) & (qz > 0.0)
        d_inside = -np.minimum(np.minimum(qz, slant), h - qz)
        return np.where(below, d_below, np.where(inside, d_inside, d))
    if category == 5:  # capsule along z
        r, h = 0.40 * size, 0.60 * size
        qz = z - _clamp(z, -h, h)
        return np.sqrt(x * x + y * y + qz * qz) - r
    raise ValueError(f"unknown category id {category}")


def density_numpy(category, size, sigma_max, feather, p) -> np.ndarray:
    """Feathered density: sigma_max inside, 0 outside, smoothstep across a
    band of width ``feather`` centered on the surface."""
    sd = sdf_numpy(category, size, p)
    u = _clamp(0.5 - sd / feather, 0.0, 1.0)
    return sigma_max * u * u * (3.0 - 2.0 * u)


def _render_numpy(category, size, center, albedo, sigma_max, feather,
                  origins, dirs, near, far, n_samples) -> np.ndarray:
    n_rays = origins.shape[0]
    delta = (far - near) / n_samples
    t = near + (np.arange(n_samples) + 0.5) * delta
    pts = origins[:, None, :] + t[None, :, None] * dirs[:, None, :] - center[None, None, :]
    sigma = density_numpy(category, size, sigma_max, feather, pts.reshape(-1, 3))
    sigma = sigma.reshape(n_rays, n_samples)
    alpha = 1.0 - np.exp(-sigma * delta)
    trans = np.cumprod(1.0 - alpha, axis=1)
    trans = np.concatenate([np.ones((n_rays, 1)), trans[:, :-1]], axis=1)
    w = trans * alpha
    acc = w.sum(axis=1, keepdims=True)
    return w.sum(axis=1, keepdims=True) * albedo[None, :] + (1.0 - acc)


def render_rays_analytic(category: int, size: float, center: np.ndarray,
                         albedo: np.ndarray, sigma_max: float, feather: float,
                         origins: np.ndarray, dirs: np.ndarray,
                         near: float, far: float, n_samples: int) -> np.ndarray:
    """Render one batch of rays against one analytic shape, over white."""
    origins = np.ascontiguousarray(origins, dtype=np.float64)
    dirs = np.ascontiguousarray(dirs, dtype=np.float64)
    center = np.ascontiguousarray(center, dtype=np.float64)
    albedo = np.ascontiguousarray(albedo, dtype=np.float64)
    if backend_name() == "compiled":
        return _native.render(category, size, center, albedo, sigma_max, feather,
                              origins, dirs, near, far, n_samples)
    return _render_numpy(category, size, center, albedo, sigma_max, feather,
                         origins, dirs, near, far, n_samples)
