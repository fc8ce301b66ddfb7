"""Differentiable X-ray rasterizer for Gaussian clouds.

Each 3D Gaussian projects to a 2D Gaussian on the detector whose amplitude is
the exact line integral through its center, ``rho * sqrt(2 pi / (d^T S^-1 d))``
for ray direction ``d``.  Parallel-beam projection is exact; cone-beam uses
the local affine (Jacobian) approximation around each splat's central ray.

Pixels accumulate splat contributions in any order (no depth sorting), and
the backward pass is organized per splat.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import _kernels as K
from .model import (
    CloudGradients,
    ContractError,
    GaussianCloud,
    ScanGeometry,
    Splat2D,
    factored_backward,
    normalize_backward,
    quaternion_to_rotation,
    rotation_grad_to_quaternion,
)

SQRT_2PI = np.sqrt(2.0 * np.pi)


@dataclass
class RenderSettings:
    """Knobs shared by the rasterizer and the voxelizer.

    ``cutoff`` is the value below which a splat footprint is dropped (assumes
    data of order one); ``extent_sigma`` caps footprints at that many standard
    deviations along the principal axis.
    """

    cutoff: float = 1e-4
    extent_sigma: float = 3.0
    antialias: bool = True
    dilation: float = 0.3
    tile_size: int = 16
    max_condition: float = 1e12


@dataclass
class RenderStats:
    """Counters for one render call; consumed by the benchmark harness."""

    n_splats: int = 0
    culled: int = 0
    degenerate: int = 0
    tile_pairs: int = 0
    pixel_pairs: int = 0
    project_ms: float = 0.0
    forward_ms: float = 0.0
    backward_ms: float = 0.0


@dataclass
class ViewFrame:
    """Orthonormal detector frame of one view.

    ``d`` points from source to detector; ``u``/``v`` are the detector axes.
    """

    u: np.ndarray
    v: np.ndarray
    d: np.ndarray
    detector_center: np.ndarray
    source: np.ndarray | None = None

    @property
    def rows(self) -> np.ndarray:
        return np.stack([self.u, self.v, self.d])


def view_frame(geometry: ScanGeometry, angle_index: int) -> ViewFrame:
    th = float(geometry.angles[angle_index])
    c, s = np.cos(th), np.sin(th)
    d = np.array([c, s, 0.0])
    u = np.array([-s, c, 0.0])
    v = np.array([0.0, 0.0, 1.0])
    if geometry.mode == "parallel":
        return ViewFrame(u, v, d, np.zeros(3))
    return ViewFrame(u, v, d, geometry.origin_to_detector * d, -geometry.source_to_origin * d)


@dataclass
class TileBins:
    tile_size: int
    n_tiles: tuple[int, int]
    offsets: np.ndarray
    indices: np.ndarray

    @property
    def pair_count(self) -> int:
        return int(self.offsets[-1])

    def tile(self, tu: int, tv: int) -> np.ndarray:
        t = tu * self.n_tiles[1] + tv
        return self.indices[self.offsets[t]:self.offsets[t + 1]]


def bin_tiles(bboxes: np.ndarray, detector: tuple[int, int], tile_size: int = 16) -> TileBins:
    """Assign every non-empty pixel rectangle to the tiles it touches.

    ``bboxes`` rows are inclusive ``(u_min, u_max, v_min, v_max)``; rows with
    ``min > max`` are culled.  Indices within a tile are in ascending order.
    """
    if tile_size < 1:
        raise ContractError("tile size must be >= 1")
    n_tu = -(-detector[0] // tile_size)
    n_tv = -(-detector[1] // tile_size)
    bb = np.ascontiguousarray(bboxes, dtype=np.int64).reshape(-1, 4)
    offsets, indices = K.bin_rects(bb, int(tile_size), n_tu, n_tv)
    return TileBins(tile_size, (n_tu, n_tv), offsets, indices)


def _sym2_eig_max(c: np.ndarray) -> np.ndarray:
    a, b, d = c[..., 0, 0], c[..., 0, 1], c[..., 1, 1]
    return 0.5 * (a + d) + np.sqrt(0.25 * (a - d) ** 2 + b * b)


def _sym2_eig_min(c: np.ndarray) -> np.ndarray:
    a, b, d = c[..., 0, 0], c[..., 0, 1], c[..., 1, 1]
    return 0.5 * (a + d) - np.sqrt(0.25 * (a - d) ** 2 + b * b)


def footprint_half_extents(peak, variances, lam_max, cutoff, extent_sigma):
    """Per-axis half extents ``min(sqrt(2 ln(peak/cutoff) var_k), k_sigma sqrt(lam_max))``.

    Shapes: ``peak`` (M,), ``variances`` (M, D), ``lam_max`` (M,).  Returns
    the extents (M, D) and a keep mask (peak above cutoff).
    """
    peak = np.asarray(peak, dtype=np.float64)
    cap = extent_sigma * np.sqrt(lam_max)[:, None]
    if cutoff > 0:
        keep = peak > cutoff
        with np.errstate(divide="ignore", invalid="ignore"):
            ln = np.where(keep, np.log(np.where(keep, peak, 1.0) / cutoff), 0.0)
        half = np.minimum(np.sqrt(2.0 * ln)[:, None] * np.sqrt(variances), cap)
    else:
        keep = peak > 0
        half = np.broadcast_to(cap, variances.shape).copy()
    return half, keep


def splat_bboxes(amplitude, cov2d, mean2d, detector, cutoff=1e-4, extent_sigma=3.0):
    """Vectorized :func:`splat_bbox`; culled rows get ``(0, -1, 0, -1)``."""
    cov2d = np.asarray(cov2d, dtype=np.float64).reshape(-1, 2, 2)
    mean2d = np.asarray(mean2d, dtype=np.float64).reshape(-1, 2)
    var = np.stack([cov2d[:, 0, 0], cov2d[:, 1, 1]], axis=1)
    half, keep = footprint_half_extents(
        np.asarray(amplitude).reshape(-1), var, _sym2_eig_max(cov2d), cutoff, extent_sigma
    )
    lo = np.ceil(mean2d - half)
    hi = np.floor(mean2d + half)
    limit = np.array([detector[0] - 1, detector[1] - 1], dtype=np.float64)
    lo = np.clip(lo, 0, limit + 1)
    hi = np.clip(hi, -1, limit)
    bb = np.stack([lo[:, 0], hi[:, 0], lo[:, 1], hi[:, 1]], axis=1)
    bb = np.where(np.isfinite(bb), bb, -1).astype(np.int64)
    empty = ~keep | (bb[:, 0] > bb[:, 1]) | (bb[:, 2] > bb[:, 3])
    bb[empty] = (0, -1, 0, -1)
    return bb


def splat_bbox(g_peak, cov2d, mean2d, cutoff, detector, extent_sigma=3.0):
    """Inclusive pixel rectangle ``(u_min, u_max, v_min, v_max)`` or ``None`` if culled."""
    bb = splat_bboxes(np.atleast_1d(g_peak), cov2d, mean2d, detector, cutoff, extent_sigma)[0]
    if bb[0] > bb[1]:
        return None
    return tuple(int(x) for x in bb)


def square_bboxes(cov2d, mean2d, detector, extent_sigma=3.0):
    """Circumscribed-square footprints (radius ``k sqrt(lam_max)``) for comparison."""
    cov2d = np.asarray(cov2d).reshape(-1, 2, 2)
    r = extent_sigma * np.sqrt(_sym2_eig_max(cov2d))
    return splat_bboxes(
        np.ones(len(r)), np.eye(2) * (r ** 2)[:, None, None] / extent_sigma ** 2,
        mean2d, detector, cutoff=0.0, extent_sigma=extent_sigma,
    )


# ---------------------------------------------------------------------------
# projection of 3D Gaussians
# ---------------------------------------------------------------------------


@dataclass
class ProjectedSplats:
    """All splats of one view, plus the intermediates the backward pass needs."""

    mean2d: np.ndarray
    cov2d: np.ndarray
    conic: np.ndarray
    amplitude: np.ndarray
    mu: np.ndarray
    bbox: np.ndarray
    valid: np.ndarray
    degenerate: np.ndarray
    cache: dict = field(default_factory=dict, repr=False)

    def __len__(self):
        return len(self.amplitude)

    def splat(self, i: int) -> Splat2D:
        bb = self.bbox[i]
        return Splat2D(
            self.mean2d[i].copy(), self.cov2d[i].copy(), self.conic_matrix(i),
            float(self.amplitude[i]), None if bb[0] > bb[1] else tuple(int(x) for x in bb),
            float(self.mu[i]),
        )

    def conic_matrix(self, i: int) -> np.ndarray:
        a, b, c = self.conic[i]
        return np.array([[a, b], [b, c]])


def _project_core(p, sigma, sigma_inv, rho, frame, geometry, settings):
    m = len(p)
    n_u, n_v = geometry.detector
    su, sv = geometry.pixel_spacing
    cu, cv = 0.5 * (n_u - 1), 0.5 * (n_v - 1)
    rows = frame.rows
    cache = {}
    if geometry.mode == "parallel":
        proj = p @ rows.T
        xc = None
        mean2d = np.stack([proj[:, 0] / su + cu, proj[:, 1] / sv + cv], axis=1)
        Q = np.broadcast_to(np.stack([frame.u / su, frame.v / sv]), (m, 2, 3))
        dirn = np.broadcast_to(frame.d, (m, 3))
        front = np.ones(m, dtype=bool)
    else:
        r = p - frame.source
        xc = r @ rows.T
        dsd = geometry.source_to_origin + geometry.origin_to_detector
        z = xc[:, 2]
        front = z > 1e-9 * dsd
        zs = np.where(front, z, 1.0)
        mean2d = np.stack([dsd * xc[:, 0] / zs / su + cu, dsd * xc[:, 1] / zs / sv + cv], axis=1)
        J = np.zeros((m, 2, 3))
        J[:, 0, 0] = dsd / (zs * su)
        J[:, 0, 2] = -dsd * xc[:, 0] / (zs * zs * su)
        J[:, 1, 1] = dsd / (zs * sv)
        J[:, 1, 2] = -dsd * xc[:, 1] / (zs * zs * sv)
        Q = J @ rows
        rn = np.linalg.norm(r, axis=1)
        dirn = r / np.where(rn > 0, rn, 1.0)[:, None]
        cache.update(r=r, rn=rn, zs=zs, dsd=dsd)
    cov = K.sandwich(np.ascontiguousarray(Q), sigma)
    w = np.einsum("mij,mj->mi", sigma_inv, dirn)
    a = np.einsum("mi,mi->m", dirn, w)
    mu = SQRT_2PI / np.sqrt(a)
    if settings.antialias and settings.dilation > 0:
        cov_d = cov + settings.dilation * np.eye(2)
        det0 = cov[:, 0, 0] * cov[:, 1, 1] - cov[:, 0, 1] ** 2
        det1 = cov_d[:, 0, 0] * cov_d[:, 1, 1] - cov_d[:, 0, 1] ** 2
        kappa = np.sqrt(np.maximum(det0, 0.0) / det1)
    else:
        cov_d = cov
        kappa = np.ones(m)
    lmax = _sym2_eig_max(cov_d)
    lmin = _sym2_eig_min(cov_d)
    degenerate = ~(lmin > 0) | ~(lmax <= settings.max_condition * np.maximum(lmin, 1e-300))
    degenerate |= ~np.isfinite(lmax) | ~np.isfinite(mu) | ~np.all(np.isfinite(mean2d), axis=1)
    degenerate &= front
    det = cov_d[:, 0, 0] * cov_d[:, 1, 1] - cov_d[:, 0, 1] ** 2
    safe = ~degenerate & front
    det = np.where(safe, det, 1.0)
    conic = np.stack([cov_d[:, 1, 1] / det, -cov_d[:, 0, 1] / det, cov_d[:, 0, 0] / det], axis=1)
    amp = np.where(safe, rho * mu * kappa, 0.0)
    bbox = splat_bboxes(amp, np.where(safe[:, None, None], cov_d, np.eye(2)),
                        np.where(safe[:, None], mean2d, -1e9), geometry.detector,
                        settings.cutoff, settings.extent_sigma)
    bbox[~safe] = (0, -1, 0, -1)
    valid = bbox[:, 0] <= bbox[:, 1]
    cache.update(Q=Q, dirn=dirn, w=w, a=a, kappa=kappa, cov=cov, xc=xc, rows=rows)
    return ProjectedSplats(mean2d, cov_d, conic, amp, mu, bbox, valid, degenerate, cache)


def project_gaussian(frame, geometry, position, cov3d, density, settings=None) -> Splat2D:
    """Project one Gaussian with an explicit covariance onto a detector view."""
    settings = settings or RenderSettings()
    cov3d = np.asarray(cov3d, dtype=np.float64).reshape(1, 3, 3)
    ps = _project_core(
        np.asarray(position, dtype=np.float64).reshape(1, 3), cov3d, np.linalg.inv(cov3d),
        np.array([max(float(density), 0.0)]), frame, geometry, settings,
    )
    if ps.degenerate[0]:
        raise ContractError("projected covariance is numerically singular")
    return ps.splat(0)


def project_cloud(cloud: GaussianCloud, geometry: ScanGeometry, angle_index: int,
                  settings: RenderSettings | None = None) -> ProjectedSplats:
    settings = settings or RenderSettings()
    act = cloud.activated()
    R = quaternion_to_rotation(act.quaternions)
    s = act.scales
    sigma = K.scaled_gram(R, s ** 2)
    sigma_inv = K.scaled_gram(R, 1.0 / s ** 2)
    ps = _project_core(act.positions, sigma, sigma_inv, act.densities,
                       view_frame(geometry, angle_index), geometry, settings)
    ps.cache.update(R=R, s=s, sigma=sigma, qn=act.quaternions, rho=act.densities)
    return ps


# ---------------------------------------------------------------------------
# rasterization
# ---------------------------------------------------------------------------


def _raster(ps: ProjectedSplats, detector, tile_size, stats: RenderStats | None):
    t0 = time.perf_counter()
    bins = bin_tiles(ps.bbox, detector, tile_size)
    img = np.zeros(detector, dtype=np.float64)
    K.raster_forward(np.ascontiguousarray(ps.mean2d), np.ascontiguousarray(ps.conic),
                     np.ascontiguousarray(ps.amplitude), ps.bbox, bins.offsets, bins.indices,
                     int(tile_size), int(detector[0]), int(detector[1]), img)
    if stats is not None:
        stats.tile_pairs = bins.pair_count
        stats.pixel_pairs = int(np.sum((ps.bbox[:, 1] - ps.bbox[:, 0] + 1)
                                       * (ps.bbox[:, 3] - ps.bbox[:, 2] + 1) * ps.valid))
        stats.forward_ms = 1e3 * (time.perf_counter() - t0)
    return img


@dataclass
class RasterGradients(CloudGradients):
    """Cloud gradients plus the per-splat 2D mean-gradient norm (pixels)."""

    mean2d_norm: np.ndarray = None


class RenderPass:
    """One forward rasterization that can be differentiated afterwards.

    >>> rp = RenderPass(cloud, geometry, 0)          # doctest: +SKIP
    >>> grads = rp.backward(np.ones_like(rp.image))  # doctest: +SKIP
    """

    def __init__(self, cloud: GaussianCloud, geometry: ScanGeometry, angle_index: int,
                 settings: RenderSettings | None = None):
        self.cloud = cloud
        self.geometry = geometry
        self.settings = settings or RenderSettings()
        self.stats = RenderStats(n_splats=len(cloud))
        t0 = time.perf_counter()
        self.splats = project_cloud(cloud, geometry, angle_index, self.settings)
        self.stats.project_ms = 1e3 * (time.perf_counter() - t0)
        self.stats.culled = int(np.sum(~self.splats.valid))
        self.stats.degenerate = int(np.sum(self.splats.degenerate))
        self.image = _raster(self.splats, geometry.detector, self.settings.tile_size, self.stats)

    def backward(self, grad_image: np.ndarray) -> RasterGradients:
        grad_image = np.ascontiguousarray(grad_image, dtype=np.float64)
        if grad_image.shape != tuple(self.geometry.detector):
            raise ContractError(f"grad image shape {grad_image.shape} != detector {self.geometry.detector}")
        t0 = time.perf_counter()
        ps = self.splats
        m = len(ps)
        g_amp = np.zeros(m)
        g_mean = np.zeros((m, 2))
        g_con = np.zeros((m, 3))
        K.raster_backward(np.ascontiguousarray(ps.mean2d), np.ascontiguousarray(ps.conic),
                          np.ascontiguousarray(ps.amplitude), ps.bbox, grad_image,
                          g_amp, g_mean, g_con)
        grads = _projection_backward(self.cloud, ps, self.geometry, self.settings,
                                     g_amp, g_mean, g_con)
        self.stats.backward_ms = 1e3 * (time.perf_counter() - t0)
        return grads


def _projection_backward(cloud, ps, geometry, settings, g_amp, g_mean, g_con):
    c = ps.cache
    m = len(ps)
    valid = ps.valid
    out = RasterGradients(np.zeros((m, 3)), np.zeros((m, 3)), np.zeros((m, 4)), np.zeros(m),
                          mean2d_norm=np.zeros(m))
    if m == 0 or not valid.any():
        return out
    idx = np.flatnonzero(valid)
    gA = g_amp[idx]
    gm = g_mean[idx]
    con = ps.conic[idx]
    C = np.empty((len(idx), 2, 2))
    C[:, 0, 0] = con[:, 0]
    C[:, 0, 1] = C[:, 1, 0] = con[:, 1]
    C[:, 1, 1] = con[:, 2]
    GC = np.empty_like(C)
    GC[:, 0, 0] = g_con[idx, 0]
    GC[:, 0, 1] = GC[:, 1, 0] = 0.5 * g_con[idx, 1]
    GC[:, 1, 1] = g_con[idx, 2]
    g_cov = -C @ GC @ C

    rho = c["rho"][idx]
    mu = ps.mu[idx]
    kappa = c["kappa"][idx]
    amp = ps.amplitude[idx]
    if settings.antialias and settings.dilation > 0:
        cov0 = c["cov"][idx]
        cov1 = ps.cov2d[idx]
        g_cov = g_cov + (0.5 * gA * amp)[:, None, None] * (np.linalg.inv(cov0) - np.linalg.inv(cov1))
    g_mu = gA * rho * kappa
    g_rho = gA * mu * kappa

    Q = c["Q"][idx]
    sigma = c["sigma"][idx]
    g_sigma = np.swapaxes(Q, 1, 2) @ g_cov @ Q
    g_Q = 2.0 * g_cov @ Q @ sigma
    w = c["w"][idx]
    a = c["a"][idx]
    g_sigma += (g_mu * mu / (2.0 * a))[:, None, None] * (w[:, :, None] * w[:, None, :])
    g_dir = -(g_mu * mu / a)[:, None] * w

    g_pos = np.einsum("mij,mi->mj", Q, gm)
    if geometry.mode == "cone":
        rows = c["rows"]
        xc = c["xc"][idx]
        zs = c["zs"][idx]
        dsd = c["dsd"]
        su, sv = geometry.pixel_spacing
        gJ = g_Q @ rows.T
        x, y = xc[:, 0], xc[:, 1]
        z2 = zs * zs
        z3 = z2 * zs
        gx = -gJ[:, 0, 2] * dsd / (z2 * su)
        gy = -gJ[:, 1, 2] * dsd / (z2 * sv)
        gz = (-gJ[:, 0, 0] * dsd / (z2 * su) + gJ[:, 0, 2] * 2 * dsd * x / (z3 * su)
              - gJ[:, 1, 1] * dsd / (z2 * sv) + gJ[:, 1, 2] * 2 * dsd * y / (z3 * sv))
        g_pos += np.stack([gx, gy, gz], axis=1) @ rows
        dirn = c["dirn"][idx]
        rn = c["rn"][idx]
        g_pos += (g_dir - dirn * np.sum(dirn * g_dir, axis=1, keepdims=True)) / rn[:, None]

    R = c["R"][idx]
    s = c["s"][idx]
    g_R, g_s = factored_backward(R, s, g_sigma)
    g_qn = rotation_grad_to_quaternion(c["qn"][idx], g_R)
    out.positions[idx] = g_pos
    out.log_scales[idx] = g_s * s
    out.rotations[idx] = normalize_backward(cloud.rotations[idx], g_qn)
    out.raw_densities[idx] = g_rho * (cloud.raw_densities[idx] >= 0)
    out.mean2d_norm[idx] = np.linalg.norm(gm, axis=1)
    return out


def rasterize_view(cloud: GaussianCloud, geometry: ScanGeometry, angle_index: int,
                   settings: RenderSettings | None = None, stats: RenderStats | None = None) -> np.ndarray:
    """Render one projection image ``(n_u, n_v)`` of the cloud."""
    if len(cloud) == 0:
        return np.zeros(geometry.detector)
    rp = RenderPass(cloud, geometry, angle_index, settings)
    if stats is not None:
        stats.__dict__.update(rp.stats.__dict__)
    return rp.image


def rasterize_backward(cloud: GaussianCloud, geometry: ScanGeometry, angle_index: int,
                       grad_image: np.ndarray, settings: RenderSettings | None = None) -> RasterGradients:
    """Gradients of ``sum(grad_image * rasterize_view(...))`` w.r.t. stored parameters."""
    if len(cloud) == 0:
        z = CloudGradients.zeros(0)
        return RasterGradients(*z.as_dict().values(), mean2d_norm=np.zeros(0))
    return RenderPass(cloud, geometry, angle_index, settings).backward(grad_image)


def rasterize_all(cloud: GaussianCloud, geometry: ScanGeometry,
                  settings: RenderSettings | None = None) -> np.ndarray:
    """Render every view; shape ``(n_views, n_u, n_v)``."""
    return np.stack([rasterize_view(cloud, geometry, i, settings) for i in range(geometry.n_views)])


def rasterize_bruteforce(ps: ProjectedSplats, detector) -> np.ndarray:
    """Reference: every valid splat evaluated at every pixel of its rectangle (numpy)."""
    img = np.zeros(detector)
    for i in np.flatnonzero(ps.valid):
        u0, u1, v0, v1 = ps.bbox[i]
        du = np.arange(u0, u1 + 1)[:, None] - ps.mean2d[i, 0]
        dv = np.arange(v0, v1 + 1)[None, :] - ps.mean2d[i, 1]
        a, b, c = ps.conic[i]
        img[u0:u1 + 1, v0:v1 + 1] += ps.amplitude[i] * np.exp(
            -0.5 * (a * du * du + 2 * b * du * dv + c * dv * dv))
    return img
