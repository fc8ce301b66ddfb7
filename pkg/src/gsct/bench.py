"""Scaling harness for the rasterizer and the voxelizer.

Clouds are synthetic and fully determined by their seed: positions uniform in
a centered cube, zero rotation, one isotropic scale, one density.  Timings are
medians over repeats (after discarded warmup calls); the only quantities meant
for hard assertions are the log-log slope and the tile-pair counts.
"""
from __future__ import annotations

import csv
import time
from dataclasses import asdict, dataclass, fields
from itertools import product

import numpy as np

from .model import ContractError, GaussianCloud, ScanGeometry
from .projector import RenderPass, RenderSettings, bin_tiles, project_cloud, square_bboxes
from .voxelizer import GridRegion, VoxelPass

TARGETS = ("rasterize", "voxelize")


@dataclass
class BenchRow:
    """One measured grid cell.

    ``size`` is the detector side (rasterize) or grid side (voxelize) and
    ``elements`` the resulting pixel or voxel count.  ``*_iqr_ms`` is the
    interquartile range of the repeats.
    """

    target: str
    count: int
    size: int
    elements: int
    forward_ms: float
    forward_iqr_ms: float
    backward_ms: float
    backward_iqr_ms: float
    tile_pairs: int
    repeats: int


CSV_COLUMNS = tuple(f.name for f in fields(BenchRow))


def synthetic_cloud(n: int, scale: float = 0.02, density: float = 0.05, seed: int = 0,
                    anisotropy: float = 1.0, half_width: float = 0.8) -> GaussianCloud:
    """``n`` unrotated splats uniformly placed in ``[-half_width, half_width]^3``.

    With ``anisotropy > 1`` the z scale is ``scale * anisotropy`` (long axis
    along the detector's ``v`` direction for every view).
    """
    if n < 0:
        raise ContractError("splat count must be >= 0")
    rng = np.random.default_rng(seed)
    pos = rng.uniform(-half_width, half_width, size=(n, 3))
    scales = np.full((n, 3), float(scale))
    scales[:, 2] *= anisotropy
    quats = np.tile([1.0, 0.0, 0.0, 0.0], (n, 1))
    return GaussianCloud.from_activated(pos, scales, quats, np.full(n, float(density)))


def bench_geometry(detector: int, extent: float = 2.0) -> ScanGeometry:
    return ScanGeometry("parallel", (detector, detector), (extent / detector,) * 2, np.zeros(1))


def _median_iqr(samples):
    a = np.asarray(samples, dtype=np.float64)
    q1, med, q3 = np.percentile(a, [25, 50, 75])
    return float(med), float(q3 - q1)


def _time_cell(target, cloud, size, repeats, warmup, settings, rng):
    fwd, bwd = [], []
    pairs = None
    if target == "rasterize":
        geom = bench_geometry(size)
        grad = rng.normal(size=geom.detector)
        for r in range(warmup + repeats):
            t0 = time.perf_counter()
            rp = RenderPass(cloud, geom, 0, settings)
            t1 = time.perf_counter()
            rp.backward(grad)
            t2 = time.perf_counter()
            if r >= warmup:
                fwd.append(t1 - t0)
                bwd.append(t2 - t1)
            pairs = rp.stats.tile_pairs
        elements = size * size
    else:
        region = GridRegion((0, 0, 0), (size,) * 3, 2.0 / size, (-1.0 + 1.0 / size,) * 3)
        grad = rng.normal(size=(size,) * 3)
        for r in range(warmup + repeats):
            t0 = time.perf_counter()
            vp = VoxelPass(cloud, region, settings)
            t1 = time.perf_counter()
            vp.backward(grad)
            t2 = time.perf_counter()
            if r >= warmup:
                fwd.append(t1 - t0)
                bwd.append(t2 - t1)
            pairs = vp.stats.brick_pairs
        elements = size ** 3
    f_med, f_iqr = _median_iqr(fwd)
    b_med, b_iqr = _median_iqr(bwd)
    return BenchRow(target, len(cloud), int(size), int(elements), 1e3 * f_med, 1e3 * f_iqr,
                    1e3 * b_med, 1e3 * b_iqr, int(pairs), int(repeats))


def sweep(target: str, counts, sizes, repeats: int = 5, warmup: int = 1, scale: float = 0.06,
          seed: int = 0, settings: RenderSettings | None = None) -> list[BenchRow]:
    """Time forward and backward passes over the grid ``counts x sizes``.

    Rows come out in grid order (count-major).  ``sizes`` are detector sides
    for ``rasterize`` and grid sides for ``voxelize``.
    """
    if target not in TARGETS:
        raise ContractError(f"unknown bench target {target!r}; expected one of {TARGETS}")
    counts = [int(c) for c in np.atleast_1d(counts)]
    sizes = [int(s) for s in np.atleast_1d(sizes)]
    if not counts or not sizes:
        raise ContractError("bench grid is empty")
    if repeats < 1 or warmup < 0:
        raise ContractError("need repeats >= 1 and warmup >= 0")
    rows = []
    for count, size in product(counts, sizes):
        cloud = synthetic_cloud(count, scale=scale, seed=seed)
        rng = np.random.default_rng([seed, count, size])
        rows.append(_time_cell(target, cloud, size, repeats, warmup, settings, rng))
    return rows


def fit_power_law(rows, x: str = "elements", y: str = "forward_ms") -> tuple[float, float]:
    """Least-squares fit ``log y = a log x + b``; returns ``(a, r^2)``.

    Needs at least three rows whose ``x`` spans a factor of 4 or more.  A
    constant ``y`` gives exponent 0 with ``r^2 = 1``.
    """
    def get(r, k):
        return float(r[k] if isinstance(r, dict) else getattr(r, k))

    xs = np.array([get(r, x) for r in rows])
    ys = np.array([get(r, y) for r in rows])
    if len(xs) < 3:
        raise ContractError(f"power-law fit needs >= 3 rows, got {len(xs)}")
    if np.any(xs <= 0) or np.any(ys <= 0):
        raise ContractError("power-law fit needs positive values")
    if xs.max() / xs.min() < 4.0:
        raise ContractError("power-law fit needs sizes spanning at least 4x")
    lx, ly = np.log(xs), np.log(ys)
    a, b = np.polyfit(lx, ly, 1)
    resid = ly - (a * lx + b)
    ss_tot = float(np.sum((ly - ly.mean()) ** 2))
    r2 = 1.0 if ss_tot == 0 else 1.0 - float(np.sum(resid ** 2)) / ss_tot
    if ss_tot == 0:
        a = 0.0
    return float(a), float(r2)


@dataclass
class BoundingCount:
    rectangular: int
    square: int

    @property
    def ratio(self) -> float:
        return self.rectangular / self.square if self.square else float("nan")


def bounding_pairs(cloud: GaussianCloud, geometry: ScanGeometry, angle_index: int = 0,
                   settings: RenderSettings | None = None) -> BoundingCount:
    """Gaussian-tile pairs with density-aware rectangles vs circumscribed squares.

    Both counts use the same set of non-culled splats.
    """
    settings = settings or RenderSettings()
    ps = project_cloud(cloud, geometry, angle_index, settings)
    det = geometry.detector
    rect = bin_tiles(ps.bbox, det, settings.tile_size).pair_count
    sq_bb = square_bboxes(ps.cov2d, ps.mean2d, det, settings.extent_sigma)
    sq_bb[~ps.valid] = (0, -1, 0, -1)
    square = bin_tiles(sq_bb, det, settings.tile_size).pair_count
    return BoundingCount(int(rect), int(square))


def anisotropic_bounding(n: int = 2000, detector: int = 128, anisotropy: float = 10.0,
                         scale: float = 0.01, seed: int = 0) -> BoundingCount:
    """Tile-pair counts on an ``anisotropy : 1`` cloud (long axis along ``v``)."""
    cloud = synthetic_cloud(n, scale=scale, seed=seed, anisotropy=anisotropy)
    return bounding_pairs(cloud, bench_geometry(detector))


def write_csv(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=CSV_COLUMNS)
        w.writeheader()
        for r in rows:
            d = asdict(r) if isinstance(r, BenchRow) else dict(r)
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in d.items()})


def read_csv(path) -> list[BenchRow]:
    types = {f.name: f.type for f in fields(BenchRow)}
    out = []
    with open(path, newline="") as fh:
        for rec in csv.DictReader(fh):
            kw = {}
            for k, v in rec.items():
                t = types[k]
                kw[k] = v if t == "str" else (int(v) if t == "int" else float(v))
            out.append(BenchRow(**kw))
    return out
