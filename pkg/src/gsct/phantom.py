"""Procedural test volumes and a ray-marching forward projector for grids.

Phantoms live on ``[-1, 1]^3`` with spacing ``2 / n`` and are normalized to a
maximum of 1.  The voxel-grid projector is intentionally unrelated to the
splat rasterizer, so reconstructions from its output are not self-referential.
"""
from __future__ import annotations

import numpy as np
from scipy import ndimage

from . import _kernels as K
from .model import ContractError, ProjectionSet, ScanGeometry, Volume


def grid_coords(n: int):
    h = 2.0 / n
    ax = -1.0 + h * (np.arange(n) + 0.5)
    return h, np.meshgrid(ax, ax, ax, indexing="ij")


def _random_rotation(rng) -> np.ndarray:
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def _ellipsoid(pts, center, axes, rot):
    d = (pts - center) @ rot
    return np.sum((d / axes) ** 2, axis=-1) <= 1.0


def ellipsoid_phantom(n: int = 64, seed: int = 0, n_inner: int = 8, smooth: float = 1.0) -> Volume:
    """Shepp-Logan-like phantom: an outer shell plus random inner ellipsoids.

    ``smooth`` is the standard deviation (in voxels) of a Gaussian blur applied
    to the piecewise-constant composite; 0 keeps hard edges.
    """
    if n < 2:
        raise ContractError("phantom needs n >= 2")
    rng = np.random.default_rng(seed)
    h, (x, y, z) = grid_coords(n)
    pts = np.stack([x, y, z], axis=-1)
    vol = np.zeros((n, n, n))
    outer = np.array([0.72, 0.62, 0.8])
    vol[_ellipsoid(pts, np.zeros(3), outer, np.eye(3))] = 0.5
    vol[_ellipsoid(pts, np.zeros(3), outer - 0.06, np.eye(3))] = 0.25
    for _ in range(n_inner):
        axes = rng.uniform(0.08, 0.3, size=3)
        center = rng.uniform(-0.45, 0.45, size=3)
        value = rng.choice([-0.1, 0.15, 0.3, 0.5])
        vol[_ellipsoid(pts, center, axes, _random_rotation(rng))] += value
    vol = np.clip(vol, 0.0, None)
    if smooth > 0:
        vol = ndimage.gaussian_filter(vol, smooth, mode="constant")
    vol /= vol.max()
    return Volume.centered(vol, h)


def edge_phantom(n: int = 64, seed: int = 0, n_details: int = 120) -> Volume:
    """Edge-rich phantom: a bright flat body beside many dim, small structures.

    Most edges sit in low-intensity detail, which is where intensity-weighted
    sampling spends the fewest points.
    """
    rng = np.random.default_rng(seed)
    h, (x, y, z) = grid_coords(n)
    pts = np.stack([x, y, z], axis=-1)
    vol = np.zeros((n, n, n))
    vol[_ellipsoid(pts, np.array([-0.4, 0.0, 0.0]), np.array([0.35, 0.5, 0.5]), np.eye(3))] = 1.0
    for _ in range(n_details):
        center = np.array([rng.uniform(0.05, 0.8), rng.uniform(-0.6, 0.6), rng.uniform(-0.6, 0.6)])
        axes = rng.uniform(0.03, 0.08, size=3)
        vol[_ellipsoid(pts, center, axes, _random_rotation(rng))] = rng.uniform(0.15, 0.35)
    return Volume.centered(vol, h)


def block_phantom(n: int = 64, seed: int = 0, n_shapes: int = 10,
                 size_range: tuple[float, float] = (0.1, 0.35)) -> Volume:
    """Piecewise-constant boxes and ellipsoids with hard edges.

    Later shapes overwrite earlier ones.  ``size_range`` bounds the half-axes
    in world units.
    """
    rng = np.random.default_rng(seed)
    h, (x, y, z) = grid_coords(n)
    pts = np.stack([x, y, z], axis=-1)
    vol = np.zeros((n, n, n))
    for k in range(n_shapes):
        center = rng.uniform(-0.5, 0.5, size=3)
        half = rng.uniform(*size_range, size=3)
        rot = _random_rotation(rng)
        value = rng.uniform(0.3, 1.0)
        if k % 2 == 0:
            d = np.abs((pts - center) @ rot)
            mask = np.all(d <= half, axis=-1)
        else:
            mask = _ellipsoid(pts, center, half, rot)
        vol[mask] = value
    vol /= vol.max()
    return Volume.centered(vol, h)


def perturbed_phantom(volume: Volume, seed: int = 0, strength: float = 0.15, shift: float = 1.5) -> Volume:
    """A plausible prior: the volume slightly shifted, rescaled and blotched."""
    rng = np.random.default_rng(seed)
    v = ndimage.shift(volume.values, rng.uniform(-shift, shift, size=3), order=1, mode="constant")
    noise = ndimage.gaussian_filter(rng.normal(size=v.shape), 4.0)
    noise /= np.abs(noise).max()
    v = np.clip(v * (1.0 + strength * noise), 0.0, None)
    v /= v.max()
    return volume.grid_like(v)


def disk_phantom(n: int = 64, radius: float = 0.6, height: float = 0.6, supersample: int = 4) -> Volume:
    """Uniform cylinder of unit value (axis along z) with partial-volume edges.

    Each voxel holds the covered fraction estimated on a ``supersample^3``
    sub-grid.
    """
    h = 2.0 / n
    ax = -1.0 + h * (np.arange(n) + 0.5)
    sub = (np.arange(supersample) + 0.5) / supersample - 0.5
    fine = (ax[:, None] + h * sub[None, :]).reshape(-1)
    inside_z = (np.abs(fine) <= height).reshape(n, supersample).mean(axis=1)
    X, Y = np.meshgrid(fine, fine, indexing="ij")
    disk = (X * X + Y * Y <= radius * radius).reshape(n, supersample, n, supersample).mean(axis=(1, 3))
    vol = disk[:, :, None] * inside_z[None, None, :]
    return Volume.centered(vol, h)


def parallel_geometry(n_views: int, detector: int = 128, extent: float = 2.0,
                      full_circle: bool = False) -> ScanGeometry:
    """Uniform angles over ``[0, pi)`` (or ``[0, 2 pi)``) for a square detector."""
    span = 2 * np.pi if full_circle else np.pi
    return ScanGeometry("parallel", (detector, detector), (extent / detector,) * 2,
                        np.arange(n_views) * span / n_views)


def _box_clip(origins, dirs, lo, hi):
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        t_a = (lo - origins) * inv
        t_b = (hi - origins) * inv
    t_near = np.where(np.isfinite(t_a), np.minimum(t_a, t_b), -np.inf)
    t_far = np.where(np.isfinite(t_a), np.maximum(t_a, t_b), np.inf)
    # rays parallel to a slab must start inside it
    par = dirs == 0
    outside = par & ((origins < lo) | (origins > hi))
    t0 = np.max(np.where(par, -np.inf, t_near), axis=1)
    t1 = np.min(np.where(par, np.inf, t_far), axis=1)
    t1 = np.where(outside.any(axis=1), -np.inf, t1)
    return t0, t1


def project_volume(volume: Volume, geometry: ScanGeometry, step: float = 0.5) -> ProjectionSet:
    """Line integrals of the trilinear field through every detector pixel.

    ``step`` is the marching step as a fraction of the voxel spacing.
    """
    from .projector import view_frame

    vals = np.ascontiguousarray(volume.values, dtype=np.float64)
    h = volume.spacing
    origin = np.asarray(volume.origin)
    lo = origin
    hi = origin + h * (np.asarray(volume.dims) - 1)
    n_u, n_v = geometry.detector
    su, sv = geometry.pixel_spacing
    pu = (np.arange(n_u) - (n_u - 1) / 2.0) * su
    pv = (np.arange(n_v) - (n_v - 1) / 2.0) * sv
    PU, PV = np.meshgrid(pu, pv, indexing="ij")
    images = np.empty((geometry.n_views, n_u, n_v))
    for a in range(geometry.n_views):
        f = view_frame(geometry, a)
        pix = f.detector_center + PU.reshape(-1, 1) * f.u + PV.reshape(-1, 1) * f.v
        if geometry.mode == "parallel":
            dirs = np.broadcast_to(f.d, pix.shape).copy()
            starts = pix - 4.0 * np.linalg.norm(hi - lo + 1.0) * f.d
        else:
            starts = np.broadcast_to(f.source, pix.shape).copy()
            dirs = pix - starts
            dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        t0, t1 = _box_clip(starts, dirs, lo, hi)
        out = np.zeros(len(pix))
        K.march_rays(vals, np.ascontiguousarray((starts - origin) / h), np.ascontiguousarray(dirs / h),
                     t0, t1, step * h, out)
        images[a] = out.reshape(n_u, n_v)
    return ProjectionSet(geometry, images)
