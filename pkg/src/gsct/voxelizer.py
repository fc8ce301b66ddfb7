"""Evaluation of the summed Gaussian field on regular grids, with gradients."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import _kernels as K
from .model import (
    CloudGradients,
    ContractError,
    GaussianCloud,
    Volume,
    factored_backward,
    normalize_backward,
    quaternion_to_rotation,
    rotation_grad_to_quaternion,
)
from .projector import RenderSettings, footprint_half_extents

log = logging.getLogger(__name__)

# forward work units are BRICK x BRICK columns spanning the full z range, so
# each splat's z-lines are never split
BRICK = 8
CHUNK_BYTES = 256 * 2 ** 20


@dataclass(frozen=True)
class GridRegion:
    """Axis-aligned block of a parent grid.

    ``origin`` is the world position of the region's first voxel center;
    ``offset`` locates that voxel in the parent grid.
    """

    offset: tuple[int, int, int]
    dims: tuple[int, int, int]
    spacing: float
    origin: tuple[float, float, float]

    @classmethod
    def full(cls, volume: Volume) -> "GridRegion":
        return cls((0, 0, 0), volume.dims, volume.spacing, volume.origin)

    @classmethod
    def of_grid(cls, dims, spacing, origin) -> "GridRegion":
        return cls((0, 0, 0), tuple(int(d) for d in dims), float(spacing),
                   tuple(float(o) for o in origin))

    def sub(self, offset, dims) -> "GridRegion":
        offset = tuple(int(o) for o in offset)
        dims = tuple(int(d) for d in dims)
        if any(o < 0 or o + d > n for o, d, n in zip(offset, dims, self.dims)):
            raise ContractError(f"region {offset}+{dims} outside parent {self.dims}")
        origin = tuple(o + self.spacing * k for o, k in zip(self.origin, offset))
        parent_off = tuple(a + b for a, b in zip(self.offset, offset))
        return GridRegion(parent_off, dims, self.spacing, origin)

    def slices(self) -> tuple[slice, slice, slice]:
        return tuple(slice(o, o + d) for o, d in zip(self.offset, self.dims))


def sample_subvolume(parent_dims, sub_dims=(32, 32, 32), rng=None) -> tuple[int, int, int]:
    """Uniformly random corner offset of a ``sub_dims`` block inside ``parent_dims``.

    Oversized requests are clamped to the parent with a warning.
    """
    rng = rng if rng is not None else np.random.default_rng()
    parent_dims = tuple(int(n) for n in parent_dims)
    sub = []
    for s, n in zip(sub_dims, parent_dims):
        if s > n:
            log.warning("sub-volume size %d exceeds parent size %d; clamping", s, n)
            s = n
        sub.append(int(s))
    return tuple(int(rng.integers(0, n - s + 1)) for s, n in zip(sub, parent_dims)), tuple(sub)


def sample_region(parent: GridRegion, sub_dims=(32, 32, 32), rng=None) -> GridRegion:
    offset, dims = sample_subvolume(parent.dims, sub_dims, rng)
    return parent.sub(offset, dims)


@dataclass
class VoxelStats:
    n_splats: int = 0
    culled: int = 0
    voxel_pairs: int = 0
    brick_pairs: int = 0


_PREC_IDX = ((0, 0), (0, 1), (0, 2), (1, 1), (1, 2), (2, 2))


class VoxelPass:
    """Forward voxelization of a region that can be differentiated afterwards."""

    def __init__(self, cloud: GaussianCloud, region: GridRegion,
                 settings: RenderSettings | None = None):
        self.cloud = cloud
        self.region = region
        self.settings = settings = settings or RenderSettings()
        self.stats = VoxelStats(n_splats=len(cloud))
        act = cloud.activated()
        self.R = quaternion_to_rotation(act.quaternions)
        self.s = act.scales
        self.qn = act.quaternions
        self.rho = act.densities
        h = region.spacing
        f = 1.0 / self.s
        # precision in index units is h^2 * Sigma^-1 = R diag((h/s)^2) R^T
        P = (self.R * ((h * f) ** 2)[:, None, :]) @ np.swapaxes(self.R, 1, 2)
        self.prec = np.ascontiguousarray(np.stack([P[:, i, j] for i, j in _PREC_IDX], axis=1))
        self.center = np.ascontiguousarray((act.positions - np.asarray(region.origin)) / h)
        var = np.einsum("mij,mj->mi", self.R ** 2, self.s ** 2)
        half, keep = footprint_half_extents(self.rho, var, self.s.max(axis=1) ** 2 if len(cloud) else np.zeros(0),
                                            settings.cutoff, settings.extent_sigma)
        half = half / h
        lo = np.ceil(self.center - half)
        hi = np.floor(self.center + half)
        dims = np.asarray(region.dims)
        lo = np.clip(lo, 0, dims)
        hi = np.clip(hi, -1, dims - 1)
        bb = np.stack([lo[:, 0], hi[:, 0], lo[:, 1], hi[:, 1], lo[:, 2], hi[:, 2]], axis=1)
        bb = np.where(np.isfinite(bb), bb, -1).astype(np.int64)
        empty = ~keep | np.any(bb[:, 0::2] > bb[:, 1::2], axis=1)
        bb[empty] = (0, -1, 0, -1, 0, -1)
        self.bbox = bb
        self.valid = ~empty
        ext = np.where(self.valid[:, None], bb[:, 1::2] - bb[:, 0::2] + 1, 0)
        self.stats.culled = int(np.sum(empty))
        self.stats.voxel_pairs = int(np.sum(np.prod(ext, axis=1)))
        self.values = self._forward()

    def _forward(self) -> np.ndarray:
        nx, ny, nz = self.region.dims
        out = np.zeros((nx, ny, nz))
        if len(self.cloud) == 0 or not self.valid.any():
            return out
        slab = max(1, CHUNK_BYTES // (8 * nx * ny))
        pairs = 0
        for z0 in range(0, nz, slab):
            z1 = min(z0 + slab, nz)
            bb = self.bbox.copy()
            bb[:, 4] = np.maximum(bb[:, 4], z0) - z0
            bb[:, 5] = np.minimum(bb[:, 5], z1 - 1) - z0
            nzc = z1 - z0
            offsets, indices = K.bin_boxes(bb, BRICK, BRICK, nzc, -(-nx // BRICK), -(-ny // BRICK), 1)
            pairs += int(offsets[-1])
            center = self.center.copy()
            center[:, 2] -= z0
            chunk = np.zeros((nx, ny, z1 - z0))
            K.voxel_forward(center, self.prec, self.rho, bb, offsets, indices, BRICK, BRICK, nzc,
                            nx, ny, nzc, chunk)
            out[:, :, z0:z1] = chunk
        self.stats.brick_pairs = pairs
        return out

    def volume(self) -> Volume:
        return Volume(self.values, self.region.spacing, self.region.origin)

    def backward(self, grad_volume: np.ndarray) -> CloudGradients:
        grad_volume = np.ascontiguousarray(grad_volume, dtype=np.float64)
        if grad_volume.shape != tuple(self.region.dims):
            raise ContractError(f"grad volume shape {grad_volume.shape} != region {self.region.dims}")
        m = len(self.cloud)
        out = CloudGradients.zeros(m)
        if m == 0 or not self.valid.any():
            return out
        g_rho = np.zeros(m)
        g_c = np.zeros((m, 3))
        g_p = np.zeros((m, 6))
        K.voxel_backward(self.center, self.prec, self.rho, self.bbox, grad_volume, g_rho, g_c, g_p)
        idx = np.flatnonzero(self.valid)
        h = self.region.spacing
        GP = np.empty((len(idx), 3, 3))
        for k, (i, j) in enumerate(_PREC_IDX):
            val = g_p[idx, k] if i == j else 0.5 * g_p[idx, k]
            GP[:, i, j] = val
            GP[:, j, i] = val
        # precision = R diag(f^2) R^T with f = h / s
        R = self.R[idx]
        s = self.s[idx]
        g_R, g_f = factored_backward(R, h / s, GP)
        out.positions[idx] = g_c[idx] / h
        out.log_scales[idx] = -g_f * (h / s)
        g_qn = rotation_grad_to_quaternion(self.qn[idx], g_R)
        out.rotations[idx] = normalize_backward(self.cloud.rotations[idx], g_qn)
        out.raw_densities[idx] = g_rho[idx] * (self.cloud.raw_densities[idx] >= 0)
        return out


def voxelize(cloud: GaussianCloud, region: GridRegion | Volume,
             settings: RenderSettings | None = None, stats: VoxelStats | None = None) -> Volume:
    """Sum of all splat densities at each voxel center of ``region``."""
    if isinstance(region, Volume):
        region = GridRegion.full(region)
    vp = VoxelPass(cloud, region, settings)
    if stats is not None:
        stats.__dict__.update(vp.stats.__dict__)
    return vp.volume()


def voxelize_backward(cloud: GaussianCloud, region: GridRegion | Volume, grad_volume: np.ndarray,
                      settings: RenderSettings | None = None) -> CloudGradients:
    """Gradients of ``sum(grad_volume * voxelize(...))`` w.r.t. stored parameters."""
    if isinstance(region, Volume):
        region = GridRegion.full(region)
    return VoxelPass(cloud, region, settings).backward(grad_volume)


def evaluate_field(cloud: GaussianCloud, points: np.ndarray) -> np.ndarray:
    """Untruncated density sum at arbitrary world points (reference path)."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    out = np.zeros(len(pts))
    if len(cloud) == 0:
        return out.reshape(np.shape(points)[:-1])
    act = cloud.activated()
    R = quaternion_to_rotation(act.quaternions)
    P = (R * (1.0 / act.scales ** 2)[:, None, :]) @ np.swapaxes(R, 1, 2)
    for i in range(len(cloud)):
        d = pts - act.positions[i]
        out += act.densities[i] * np.exp(-0.5 * np.einsum("ni,ij,nj->n", d, P[i], d))
    return out.reshape(np.shape(points)[:-1])
