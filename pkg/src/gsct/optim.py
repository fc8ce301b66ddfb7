"""Training engines: Adam, learning-rate schedule, adaptive density control,
and the projection-driven and volume-driven optimization loops.

An "iteration" of :func:`train_reconstruction` is one epoch over every
projection in shuffled order.  Each epoch draws its randomness from
``default_rng([seed, epoch])``, so a run resumed from a checkpoint replays
exactly the same view orders and sub-volumes as an uninterrupted one.
"""
from __future__ import annotations

import dataclasses
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import losses, metrics
from .initialization import default_grid, volume_extent
from .model import CloudGradients, ContractError, GaussianCloud, GSCTError, ProjectionSet, Volume
from .projector import RenderPass, RenderSettings
from .voxelizer import GridRegion, VoxelPass, sample_region, voxelize

log = logging.getLogger(__name__)

BETA1 = 0.9
BETA2 = 0.999
ADAM_EPS = 1e-15
PARAMS = GaussianCloud.PARAMS


class TrainingDiverged(GSCTError):
    """Non-finite loss; carries the last finite state (start of the epoch)."""

    def __init__(self, epoch: int, cloud: GaussianCloud, records: list):
        super().__init__(f"non-finite loss in epoch {epoch}; returning state from its start")
        self.epoch = epoch
        self.cloud = cloud
        self.log = records


@dataclass
class TrainConfig:
    """Optimization hyperparameters.

    Position learning rates are fractions of the scene extent (half the
    diagonal of the reconstruction grid).  ``max_gaussians=None`` caps the
    cloud at 1.1x its initial size.
    """

    iterations: int = 300
    lr_position: float = 2e-4
    lr_position_final: float = 1e-6
    lr_scale: float = 5e-3
    lr_rotation: float = 1e-3
    lr_density: float = 2e-3
    lr_decay_steps: int | None = None
    densify: bool = True
    densify_interval: int = 5
    densify_start: int = 2
    densify_stop: float = 0.6
    grad_threshold: float = 5e-5
    prune_threshold: float = 5e-4
    split_scale: float = 0.01
    max_gaussians: int | None = None
    alpha_ssim: float = 0.25
    alpha_tv: float = 0.05
    tv_size: int = 32
    fit_chunk: int = 64
    eval_every: int = 1
    checkpoint_every: int = 0
    checkpoint_dir: str | None = None
    deterministic: bool = True
    seed: int = 0

    def __post_init__(self):
        if int(self.iterations) < 0:
            raise ContractError("iterations must be >= 0")
        for name in ("lr_position", "lr_position_final", "lr_scale", "lr_rotation", "lr_density",
                     "grad_threshold", "prune_threshold", "split_scale", "alpha_ssim", "alpha_tv"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise ContractError(f"{name} must be finite and >= 0, got {v}")
        if self.densify_interval < 1:
            raise ContractError("densify_interval must be >= 1")
        if self.max_gaussians is not None and self.max_gaussians < 1:
            raise ContractError("max_gaussians must be >= 1")

    def replace(self, **kw) -> "TrainConfig":
        return dataclasses.replace(self, **kw)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ContractError(f"unknown TrainConfig keys: {sorted(unknown)}")
        return cls(**d)

    @property
    def weights(self) -> losses.LossWeights:
        return losses.LossWeights(self.alpha_ssim, self.alpha_tv)


@dataclass
class OptimState:
    """Adam moments and densification statistics, row-aligned with the cloud."""

    m: dict
    v: dict
    step: int = 0
    epoch: int = 0
    grad_accum: np.ndarray = None
    grad_count: np.ndarray = None
    grad_vec: np.ndarray = None
    skipped: int = 0
    seed: int = 0
    max_gaussians: int = 0

    @classmethod
    def zeros(cls, cloud: GaussianCloud, seed: int = 0) -> "OptimState":
        m = len(cloud)
        return cls(m={k: np.zeros_like(getattr(cloud, k)) for k in PARAMS},
                   v={k: np.zeros_like(getattr(cloud, k)) for k in PARAMS},
                   grad_accum=np.zeros(m), grad_count=np.zeros(m, dtype=np.int64),
                   grad_vec=np.zeros((m, 3)), seed=seed)

    def __len__(self):
        return len(self.grad_accum)

    def reset_accumulators(self):
        self.grad_accum[:] = 0.0
        self.grad_count[:] = 0
        self.grad_vec[:] = 0.0

    def take(self, index) -> None:
        """Keep only rows ``index`` (boolean mask or integer array)."""
        for d in (self.m, self.v):
            for k in PARAMS:
                d[k] = d[k][index]
        self.grad_accum = self.grad_accum[index]
        self.grad_count = self.grad_count[index]
        self.grad_vec = self.grad_vec[index]

    def extend(self, n: int) -> None:
        """Append ``n`` zero rows (new splats start with fresh moments)."""
        for d in (self.m, self.v):
            for k in PARAMS:
                d[k] = np.concatenate([d[k], np.zeros((n,) + d[k].shape[1:])])
        self.grad_accum = np.concatenate([self.grad_accum, np.zeros(n)])
        self.grad_count = np.concatenate([self.grad_count, np.zeros(n, dtype=np.int64)])
        self.grad_vec = np.concatenate([self.grad_vec, np.zeros((n, 3))])

    def arrays(self) -> dict:
        out = {f"m_{k}": self.m[k] for k in PARAMS}
        out.update({f"v_{k}": self.v[k] for k in PARAMS})
        out.update(grad_accum=self.grad_accum, grad_count=self.grad_count, grad_vec=self.grad_vec)
        return out

    def scalars(self) -> dict:
        return {"step": self.step, "epoch": self.epoch, "skipped": self.skipped,
                "seed": self.seed, "max_gaussians": self.max_gaussians}

    @classmethod
    def from_arrays(cls, arrays: dict, scalars: dict) -> "OptimState":
        return cls(m={k: np.array(arrays[f"m_{k}"]) for k in PARAMS},
                   v={k: np.array(arrays[f"v_{k}"]) for k in PARAMS},
                   grad_accum=np.array(arrays["grad_accum"]),
                   grad_count=np.array(arrays["grad_count"]),
                   grad_vec=np.array(arrays["grad_vec"]), **scalars)


def lr_schedule(base: float, final: float, step: int, horizon: int) -> float:
    """Log-linear decay from ``base`` to ``final`` over ``horizon`` steps."""
    if base <= 0 or final <= 0:
        raise ContractError("learning rates must be positive for log-linear decay")
    if horizon <= 0:
        return final
    t = min(max(step / horizon, 0.0), 1.0)
    return float(np.exp((1.0 - t) * np.log(base) + t * np.log(final)))


def adam_step(cloud: GaussianCloud, state: OptimState, grads: CloudGradients, lrs: dict) -> int:
    """One Adam update of every parameter class, in place.

    Splats with any non-finite gradient keep their parameters and moments for
    this step; their count is returned (and added to ``state.skipped``).
    Raw densities are projected back onto ``>= 0`` afterwards.
    """
    m = len(cloud)
    if len(state) != m:
        raise ContractError(f"optimizer state has {len(state)} rows, cloud has {m}")
    g = grads.as_dict()
    bad = np.zeros(m, dtype=bool)
    for k in PARAMS:
        if len(g[k]) != m:
            raise ContractError(f"gradient {k} has {len(g[k])} rows, cloud has {m}")
        bad |= ~np.isfinite(g[k].reshape(m, -1)).all(axis=1) if m else bad
    state.step += 1
    t = state.step
    c1 = 1.0 - BETA1 ** t
    c2 = 1.0 - BETA2 ** t
    for k in PARAMS:
        gk = g[k]
        if bad.any():
            gk = np.where(_rows(bad, gk), 0.0, gk)
        mk = BETA1 * state.m[k] + (1.0 - BETA1) * gk
        vk = BETA2 * state.v[k] + (1.0 - BETA2) * gk * gk
        upd = lrs[k] * (mk / c1) / (np.sqrt(vk / c2) + ADAM_EPS)
        if bad.any():
            keep = _rows(bad, gk)
            mk = np.where(keep, state.m[k], mk)
            vk = np.where(keep, state.v[k], vk)
            upd = np.where(keep, 0.0, upd)
        state.m[k] = mk
        state.v[k] = vk
        setattr(cloud, k, getattr(cloud, k) - upd)
    np.maximum(cloud.raw_densities, 0.0, out=cloud.raw_densities)
    n_bad = int(bad.sum())
    state.skipped += n_bad
    return n_bad


def _rows(mask, like):
    return mask.reshape((-1,) + (1,) * (like.ndim - 1))


def accumulate(state: OptimState, visible: np.ndarray, magnitude: np.ndarray, pos_grad: np.ndarray):
    """Add one step's positional-gradient statistics for visible splats."""
    ok = visible & np.isfinite(magnitude) & np.all(np.isfinite(pos_grad), axis=1)
    state.grad_accum[ok] += magnitude[ok]
    state.grad_count[ok] += 1
    state.grad_vec[ok] += pos_grad[ok]


@dataclass
class ControlReport:
    pruned: int = 0
    cloned: int = 0
    split: int = 0
    capped: int = 0


def adaptive_control(cloud: GaussianCloud, state: OptimState, config: TrainConfig,
                     extent: float, rng: np.random.Generator) -> tuple[GaussianCloud, ControlReport]:
    """Prune faint splats, then clone or split those with large positional gradients.

    Clones halve the density of both copies (so the rendered field is
    unchanged) and the copy is moved half a scale downhill along the
    accumulated positional gradient.  Splits replace a parent by two children
    drawn from the parent Gaussian, with scales divided by 1.6 and the
    parent's density (peak value, not mass).  When the cap on the number of
    splats would be exceeded, only the highest-gradient candidates that fit
    are densified.
    """
    rep = ControlReport()
    m = len(cloud)
    if m == 0:
        return cloud, rep
    dens = cloud.densities
    peak = float(dens.max())
    prune = dens < config.prune_threshold * peak
    mean_grad = state.grad_accum / np.maximum(state.grad_count, 1)
    cand = np.flatnonzero(~prune & (mean_grad > config.grad_threshold))
    cap = state.max_gaussians or m
    budget = max(0, cap - (m - int(prune.sum())))
    if len(cand) > budget:
        order = np.argsort(-mean_grad[cand], kind="stable")
        rep.capped = len(cand) - budget
        cand = np.sort(cand[order[:budget]])
    scales = cloud.scales
    big = scales.max(axis=1) > config.split_scale * extent
    clone_idx = cand[~big[cand]]
    split_idx = cand[big[cand]]

    new_parts = []
    if len(clone_idx):
        c = cloud.select(clone_idx)
        c.raw_densities = 0.5 * c.raw_densities
        cloud.raw_densities[clone_idx] *= 0.5
        g = state.grad_vec[clone_idx]
        norm = np.linalg.norm(g, axis=1, keepdims=True)
        direction = np.where(norm > 0, -g / np.where(norm > 0, norm, 1.0), 0.0)
        c.positions = c.positions + 0.5 * scales[clone_idx].max(axis=1, keepdims=True) * direction
        new_parts.append(c)
    if len(split_idx):
        from .model import quaternion_to_rotation

        act = cloud.activated()
        R = quaternion_to_rotation(act.quaternions[split_idx])
        s = scales[split_idx]
        kids = []
        for _ in range(2):
            z = rng.standard_normal((len(split_idx), 3))
            p = act.positions[split_idx] + np.einsum("mij,mj->mi", R, s * z)
            kids.append(GaussianCloud(p, np.log(s / 1.6), cloud.rotations[split_idx].copy(),
                                      cloud.raw_densities[split_idx].copy()))
        new_parts.extend(kids)
    keep = ~prune
    keep[split_idx] = False
    rep.pruned = int(prune.sum())
    rep.cloned = len(clone_idx)
    rep.split = len(split_idx)
    out = cloud.select(keep)
    state.take(keep)
    for part in new_parts:
        out = out.concat(part)
        state.extend(len(part))
    state.reset_accumulators()
    return out, rep


def _densify_now(config: TrainConfig, epoch: int) -> bool:
    if not config.densify:
        return False
    stop = config.densify_stop * config.iterations
    return (epoch + 1) % config.densify_interval == 0 and config.densify_start <= epoch < stop


def _learning_rates(config: TrainConfig, extent: float, step: int, horizon: int) -> dict:
    return {
        "positions": lr_schedule(config.lr_position * extent, config.lr_position_final * extent,
                                 step, horizon),
        "log_scales": config.lr_scale,
        "rotations": config.lr_rotation,
        "raw_densities": config.lr_density,
    }


@dataclass
class TrainResult:
    cloud: GaussianCloud
    log: list = field(default_factory=list)
    state: OptimState | None = None


def _init_state(cloud, config, state):
    if state is None:
        state = OptimState.zeros(cloud, config.seed)
        state.max_gaussians = config.max_gaussians or max(1, int(np.ceil(1.1 * len(cloud))))
    elif len(state) != len(cloud):
        raise ContractError("resumed optimizer state does not match the cloud size")
    return state


def _checkpoint(config, cloud, state, records, epoch):
    if config.checkpoint_every and config.checkpoint_dir and (epoch + 1) % config.checkpoint_every == 0:
        from .io import save_checkpoint

        d = Path(config.checkpoint_dir)
        d.mkdir(parents=True, exist_ok=True)
        save_checkpoint(d / f"ckpt_{epoch + 1:05d}.npz", cloud, state, config.to_dict(), records)


def _evaluate(cloud, grid: Volume, reference: Volume | None, settings) -> dict:
    if reference is None:
        return {}
    vol = voxelize(cloud, grid, settings).values
    return {"psnr": metrics.psnr(vol, reference.values, 1.0),
            "ssim3d": metrics.ssim3d_score(vol, reference.values)}


def train_reconstruction(cloud: GaussianCloud, projections: ProjectionSet, config: TrainConfig,
                         grid: Volume | None = None, reference: Volume | None = None,
                         state: OptimState | None = None, log_records: list | None = None,
                         settings: RenderSettings | None = None, callback=None) -> TrainResult:
    """Fit the cloud to measured projections.

    ``reference`` (a ground-truth volume on ``grid``) enables PSNR/SSIM3D in
    the log; metrics use a fixed data range of 1.
    """
    if projections.n_views == 0:
        raise ContractError("train_reconstruction needs at least one view")
    if len(cloud) == 0:
        raise ContractError("cannot train an empty cloud")
    settings = settings or RenderSettings()
    cloud = cloud.copy()
    if grid is None:
        grid = reference if reference is not None else default_grid(projections)
    full = GridRegion.full(grid)
    extent = volume_extent(grid)
    weights = config.weights
    state = _init_state(cloud, config, state)
    records = list(log_records or [])
    n_views = projections.n_views
    horizon = config.lr_decay_steps or config.iterations * n_views
    tv_dims = tuple(min(config.tv_size, n) for n in grid.dims)
    targets = projections.images
    t_start = time.perf_counter()
    for epoch in range(state.epoch, config.iterations):
        rng = np.random.default_rng([config.seed, epoch])
        order = rng.permutation(n_views)
        good = cloud.copy()
        sums = {"loss": 0.0, "l1": 0.0, "ssim": 0.0, "tv": 0.0}
        skipped = 0
        for vi in order:
            rp = RenderPass(cloud, projections.geometry, int(vi), settings)
            vp = None
            if weights.alpha_tv > 0:
                vp = VoxelPass(cloud, sample_region(full, tv_dims, rng), settings)
            res = losses.total_loss_recon(rp.image, targets[vi], vp.values if vp else None, weights)
            if not np.isfinite(res.value):
                raise TrainingDiverged(epoch, good, records)
            g = rp.backward(res.grad_pred)
            accumulate(state, rp.splats.valid, g.mean2d_norm, g.positions)
            if vp is not None:
                g += vp.backward(res.grad_volume)
            skipped += adam_step(cloud, state, g, _learning_rates(config, extent, state.step, horizon))
            sums["loss"] += res.value
            for k, v in res.components.items():
                sums[k] += v
        rec = {"epoch": epoch + 1, "steps": state.step}
        rec.update({k: v / n_views for k, v in sums.items()})
        rep = ControlReport()
        if _densify_now(config, epoch):
            cloud, rep = adaptive_control(cloud, state, config, extent, rng)
        rec.update(n_gaussians=len(cloud), pruned=rep.pruned, cloned=rep.cloned, split=rep.split,
                   skipped=skipped)
        if config.eval_every and ((epoch + 1) % config.eval_every == 0 or epoch + 1 == config.iterations):
            rec.update(_evaluate(cloud, grid, reference, settings))
        rec["wall_time"] = time.perf_counter() - t_start
        records.append(rec)
        state.epoch = epoch + 1
        _checkpoint(config, cloud, state, records, epoch)
        if callback is not None:
            callback(rec, cloud)
    return TrainResult(cloud, records, state)


def train_volume_fit(cloud: GaussianCloud, target: Volume, config: TrainConfig,
                     state: OptimState | None = None, log_records: list | None = None,
                     settings: RenderSettings | None = None, callback=None) -> TrainResult:
    """Fit the cloud directly to a volume with L1 + alpha_ssim * 3D SSIM.

    Each iteration voxelizes the full grid when every axis is at most
    ``fit_chunk``, otherwise a random ``fit_chunk^3`` block.
    """
    vals = np.asarray(target.values, dtype=np.float64)
    if not np.all(np.isfinite(vals)):
        raise ContractError("target volume must be finite")
    if len(cloud) == 0:
        raise ContractError("cannot train an empty cloud")
    settings = settings or RenderSettings()
    cloud = cloud.copy()
    full = GridRegion.full(target)
    extent = volume_extent(target)
    state = _init_state(cloud, config, state)
    records = list(log_records or [])
    horizon = config.lr_decay_steps or config.iterations
    chunk = tuple(min(config.fit_chunk, n) for n in target.dims)
    whole = chunk == tuple(target.dims)
    h = target.spacing
    t_start = time.perf_counter()
    for it in range(state.epoch, config.iterations):
        rng = np.random.default_rng([config.seed, it])
        region = full if whole else sample_region(full, chunk, rng)
        good = cloud.copy()
        vp = VoxelPass(cloud, region, settings)
        res = losses.total_loss_fit(vp.values, vals[region.slices()], config.alpha_ssim)
        if not np.isfinite(res.value):
            raise TrainingDiverged(it, good, records)
        g = vp.backward(res.grad_pred)
        accumulate(state, vp.valid, np.linalg.norm(g.positions, axis=1) * h, g.positions)
        skipped = adam_step(cloud, state, g, _learning_rates(config, extent, state.step, horizon))
        rec = {"epoch": it + 1, "steps": state.step, "loss": res.value}
        rec.update(res.components)
        rep = ControlReport()
        if _densify_now(config, it):
            cloud, rep = adaptive_control(cloud, state, config, extent, rng)
        rec.update(n_gaussians=len(cloud), pruned=rep.pruned, cloned=rep.cloned, split=rep.split,
                   skipped=skipped)
        if config.eval_every and ((it + 1) % config.eval_every == 0 or it + 1 == config.iterations):
            rec.update(_evaluate(cloud, target, target, settings))
        rec["wall_time"] = time.perf_counter() - t_start
        records.append(rec)
        state.epoch = it + 1
        _checkpoint(config, cloud, state, records, it)
        if callback is not None:
            callback(rec, cloud)
    return TrainResult(cloud, records, state)
