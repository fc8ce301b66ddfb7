"""Cloud initialization: classical reconstructions, weighted sampling, and
prior-based warm starts."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from . import _kernels as K
from .model import ContractError, GaussianCloud, ProjectionSet, Volume

log = logging.getLogger(__name__)

STRATEGIES = ("fdk_intensity", "fdk_gradient", "prior_direct", "prior_rapid_fit")


@dataclass
class InitConfig:
    strategy: str = "fdk_gradient"
    n_gaussians: int = 2000
    density_scale: float = 0.15
    threshold: float = 0.05
    rapid_fit_iterations: int = 50
    seed: int = 0

    def __post_init__(self):
        self.strategy = self.strategy.replace("-", "_")
        if self.strategy not in STRATEGIES:
            raise ContractError(f"unknown init strategy {self.strategy!r}; expected one of {STRATEGIES}")
        if int(self.n_gaussians) < 1:
            raise ContractError("n_gaussians must be >= 1")
        if not 0 < self.density_scale <= 1:
            raise ContractError("density_scale must be in (0, 1]")
        if not 0 <= self.threshold < 1:
            raise ContractError("threshold must be in [0, 1)")
        if int(self.rapid_fit_iterations) < 0:
            raise ContractError("rapid_fit_iterations must be >= 0")
        self.n_gaussians = int(self.n_gaussians)
        self.rapid_fit_iterations = int(self.rapid_fit_iterations)

    def to_dict(self) -> dict:
        return asdict(self)


def default_grid(projections: ProjectionSet, n: int | None = None) -> Volume:
    """Cubic zero grid spanning the detector width, centered on the origin."""
    n_u, _ = projections.geometry.detector
    su, _ = projections.geometry.pixel_spacing
    width = n_u * su
    if projections.geometry.mode == "cone":
        g = projections.geometry
        width *= g.source_to_origin / (g.source_to_origin + g.origin_to_detector)
    n = n or min(n_u, 64)
    return Volume.centered(np.zeros((n, n, n)), width / n)


# ---------------------------------------------------------------------------
# classical reconstructions
# ---------------------------------------------------------------------------


def ramp_kernel(n: int, spacing: float) -> np.ndarray:
    """Spatial Ram-Lak kernel over offsets ``-(n-1)..(n-1)``."""
    k = np.arange(-(n - 1), n)
    h = np.zeros(len(k))
    h[k == 0] = 1.0 / (4.0 * spacing ** 2)
    odd = k % 2 == 1
    h[odd] = -1.0 / (np.pi * k[odd] * spacing) ** 2
    return h


def ramp_filter(images: np.ndarray, spacing: float) -> np.ndarray:
    """Ram-Lak filtering along detector axis ``u`` (axis 1), in the frequency domain.

    The band-limited spatial kernel is transformed rather than using ``|w|``
    directly, which avoids the DC offset of the naive frequency ramp.
    """
    n = images.shape[1]
    size = 1 << int(np.ceil(np.log2(2 * n - 1)))
    h = ramp_kernel(n, spacing)
    # circular placement so that offset 0 sits at index 0
    hk = np.zeros(size)
    hk[:n] = h[n - 1:]
    hk[size - (n - 1):] = h[:n - 1]
    H = np.fft.rfft(hk)
    F = np.fft.rfft(images, n=size, axis=1)
    return np.fft.irfft(F * H[None, :, None], n=size, axis=1)[:, :n] * spacing


def fbp_parallel(projections: ProjectionSet, grid: Volume | None = None, clamp: bool = True) -> Volume:
    """Filtered backprojection for parallel-beam scans.

    Views are weighted by ``pi / n_views``, which is exact for angles uniformly
    covering either a half or a full turn.
    """
    g = projections.geometry
    if g.mode != "parallel":
        raise ContractError("fbp_parallel needs parallel geometry; use backproject_cone")
    grid = grid or default_grid(projections)
    su, sv = g.pixel_spacing
    filtered = np.ascontiguousarray(ramp_filter(projections.images, su))
    out = np.zeros(grid.dims)
    n_u, n_v = g.detector
    K.backproject_parallel(filtered, np.cos(g.angles), np.sin(g.angles), su, sv,
                           (n_u - 1) / 2.0, (n_v - 1) / 2.0, *grid.origin, grid.spacing,
                           np.pi / g.n_views, out)
    if clamp:
        out = np.maximum(out, 0.0)
    return grid.grid_like(out)


def backproject_cone(projections: ProjectionSet, grid: Volume | None = None) -> Volume:
    """Unfiltered, distance-weighted cone-beam backprojection normalized to max 1."""
    g = projections.geometry
    if g.mode != "cone":
        raise ContractError("backproject_cone needs cone geometry")
    grid = grid or default_grid(projections)
    su, sv = g.pixel_spacing
    n_u, n_v = g.detector
    out = np.zeros(grid.dims)
    K.backproject_cone_kernel(np.ascontiguousarray(projections.images), np.cos(g.angles),
                              np.sin(g.angles), su, sv, (n_u - 1) / 2.0, (n_v - 1) / 2.0,
                              g.source_to_origin, g.source_to_origin + g.origin_to_detector,
                              *grid.origin, grid.spacing, out)
    out = np.maximum(out, 0.0)
    peak = out.max()
    if peak > 0:
        out /= peak
    return grid.grid_like(out)


def classical_reconstruction(projections: ProjectionSet, grid: Volume | None = None) -> Volume:
    if projections.geometry.mode == "parallel":
        return fbp_parallel(projections, grid)
    return backproject_cone(projections, grid)


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------


def foreground_mask(volume: Volume, threshold: float = 0.05) -> np.ndarray:
    if not 0 <= threshold < 1:
        raise ContractError("threshold must be in [0, 1)")
    v = volume.values
    peak = float(v.max())
    if peak <= 0:
        log.warning("foreground_mask: volume has no positive values; mask is empty")
        return np.zeros(v.shape, dtype=bool)
    return v > threshold * peak


def gradient_magnitude(volume: Volume) -> np.ndarray:
    """Central differences, zero at the boundary planes of each axis."""
    v = np.asarray(volume.values, dtype=np.float64)
    sq = np.zeros(v.shape)
    for axis in range(3):
        d = np.zeros(v.shape)
        lo = [slice(None)] * 3
        hi = [slice(None)] * 3
        mid = [slice(None)] * 3
        lo[axis], hi[axis], mid[axis] = slice(None, -2), slice(2, None), slice(1, -1)
        if v.shape[axis] > 2:
            d[tuple(mid)] = (v[tuple(hi)] - v[tuple(lo)]) / (2.0 * volume.spacing)
        sq += d * d
    return np.sqrt(sq)


def sample_positions(volume: Volume, mask: np.ndarray, n: int, mode: str = "gradient",
                     rng: np.random.Generator | None = None) -> np.ndarray:
    """Draw ``n`` world positions from masked voxels.

    Weights are the masked intensities (``mode="intensity"``) or gradient
    magnitudes (``mode="gradient"``).  Voxels are drawn without replacement
    when enough of them have positive weight, otherwise with replacement.
    Every sample is jittered uniformly within its voxel.
    """
    rng = rng if rng is not None else np.random.default_rng()
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != volume.dims:
        raise ContractError(f"mask shape {mask.shape} != volume {volume.dims}")
    if not mask.any():
        raise ContractError("sample_positions needs a non-empty mask")
    if mode == "intensity":
        w = np.maximum(volume.values, 0.0)
    elif mode == "gradient":
        w = gradient_magnitude(volume)
    else:
        raise ContractError(f"unknown sampling mode {mode!r}")
    idx = np.flatnonzero(mask)
    w = np.asarray(w, dtype=np.float64).reshape(-1)[idx]
    if w.sum() <= 0:
        # a flat foreground has no preferred voxels
        w = np.ones(len(idx))
    p = w / w.sum()
    replace = n > np.count_nonzero(p)
    pick = idx[rng.choice(len(idx), size=n, replace=replace, p=p)]
    ijk = np.stack(np.unravel_index(pick, volume.dims), axis=1).astype(np.float64)
    ijk += rng.uniform(-0.5, 0.5, size=ijk.shape)
    return np.asarray(volume.origin) + volume.spacing * ijk


def volume_extent(volume: Volume) -> float:
    """Half the diagonal of the grid's bounding box (through voxel centers)."""
    return 0.5 * volume.spacing * float(np.linalg.norm(np.asarray(volume.dims) - 1))


def sample_volume(volume: Volume, positions: np.ndarray) -> np.ndarray:
    """Trilinear interpolation at world positions (zero outside the grid)."""
    ijk = volume.world_to_index(positions).T
    return ndimage.map_coordinates(np.asarray(volume.values, dtype=np.float64), ijk, order=1,
                                   mode="constant", cval=0.0)


def init_cloud(volume: Volume, positions: np.ndarray, k: float = 0.15) -> GaussianCloud:
    """Isotropic, unrotated splats at ``positions``.

    Density is ``k`` times the interpolated volume value; the scale is the
    distance to the nearest other position, clamped to
    ``[spacing, 0.1 * extent]``.
    """
    if not k > 0:
        raise ContractError("density scale k must be positive")
    pos = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    if len(pos) == 0:
        raise ContractError("init_cloud needs at least one position")
    h = volume.spacing
    hi = max(h, 0.1 * volume_extent(volume))
    if len(pos) == 1:
        log.warning("init_cloud: single position, scale falls back to 2x voxel spacing")
        nn = np.array([2.0 * h])
    else:
        nn = cKDTree(pos).query(pos, k=2)[0][:, 1]
    scale = np.clip(nn, h, hi)
    dens = k * sample_volume(volume, pos)
    quats = np.tile([1.0, 0.0, 0.0, 0.0], (len(pos), 1))
    return GaussianCloud.from_activated(pos, np.repeat(scale[:, None], 3, axis=1), quats, dens)


def init_from_sampling(volume: Volume, config: InitConfig, mode: str,
                       rng: np.random.Generator | None = None) -> GaussianCloud:
    rng = rng if rng is not None else np.random.default_rng(config.seed)
    mask = foreground_mask(volume, config.threshold)
    pos = sample_positions(volume, mask, config.n_gaussians, mode, rng)
    return init_cloud(volume, pos, config.density_scale)


def init_from_prior(prior: Volume, config: InitConfig, train_config=None,
                    log_records: list | None = None) -> GaussianCloud:
    """Gradient sampling on a prior volume, then a short volume fit to it."""
    from .optim import TrainConfig, train_volume_fit

    peak = float(np.max(prior.values))
    if not np.isclose(peak, 1.0, rtol=1e-6):
        raise ContractError(f"prior must be normalized to max 1 (max is {peak:g})")
    cloud = init_from_sampling(prior, config, "gradient")
    if config.rapid_fit_iterations == 0:
        return cloud
    tc = train_config or TrainConfig(seed=config.seed, densify=False)
    tc = tc.replace(iterations=config.rapid_fit_iterations)
    result = train_volume_fit(cloud, prior, tc)
    if log_records is not None:
        log_records.extend(result.log)
    return result.cloud


def initialize(config: InitConfig, projections: ProjectionSet | None = None,
               prior: Volume | None = None, grid: Volume | None = None,
               train_config=None) -> GaussianCloud:
    """Build an initial cloud with the configured strategy."""
    if config.strategy in ("fdk_intensity", "fdk_gradient"):
        if projections is None:
            raise ContractError(f"strategy {config.strategy} needs projections")
        rec = classical_reconstruction(projections, grid)
        mode = "intensity" if config.strategy == "fdk_intensity" else "gradient"
        return init_from_sampling(rec, config, mode)
    if prior is None:
        raise ContractError(f"strategy {config.strategy} needs a prior volume")
    if config.strategy == "prior_direct":
        config = InitConfig(**{**config.to_dict(), "rapid_fit_iterations": 0})
    return init_from_prior(prior, config, train_config)
