"""Core data types: the Gaussian cloud, scan geometry, volumes and projections.

A cloud stores unconstrained parameters (positions, log-scales, raw
quaternions, raw densities); :meth:`GaussianCloud.activated` maps them to the
physical quantities used by the renderers.  Covariances are always built as
``R diag(s^2) R^T`` so that any finite parameter set yields a positive
definite matrix.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np


class GSCTError(Exception):
    """Base class for errors raised by this package."""


class InvalidParameterError(GSCTError, ValueError):
    """A stored splat parameter is not finite."""

    def __init__(self, index: int, name: str):
        super().__init__(f"splat {index}: non-finite {name}")
        self.index = index
        self.name = name


class EmptyModelError(GSCTError, ValueError):
    """An operation needs at least one splat."""


class ContractError(GSCTError, ValueError):
    """Inputs violate an operation's preconditions (shapes, sizes, modes)."""


# ---------------------------------------------------------------------------
# Gaussian cloud
# ---------------------------------------------------------------------------


@dataclass
class GaussianCloud:
    """Learnable set of 3D Gaussians.

    Attributes
    ----------
    positions : (M, 3) float array
        Centers in world coordinates.
    log_scales : (M, 3) float array
        Natural log of the per-axis standard deviations.
    rotations : (M, 4) float array
        Quaternions ``(w, x, y, z)``; normalized on activation.
    raw_densities : (M,) float array
        Attenuation amplitudes; clamped at zero on activation.
    """

    positions: np.ndarray
    log_scales: np.ndarray
    rotations: np.ndarray
    raw_densities: np.ndarray

    PARAMS = ("positions", "log_scales", "rotations", "raw_densities")

    def __post_init__(self):
        self.positions = np.ascontiguousarray(self.positions, dtype=np.float64).reshape(-1, 3)
        self.log_scales = np.ascontiguousarray(self.log_scales, dtype=np.float64).reshape(-1, 3)
        self.rotations = np.ascontiguousarray(self.rotations, dtype=np.float64).reshape(-1, 4)
        self.raw_densities = np.ascontiguousarray(self.raw_densities, dtype=np.float64).reshape(-1)
        m = len(self.positions)
        for name in self.PARAMS[1:]:
            if len(getattr(self, name)) != m:
                raise ContractError(f"{name} has length {len(getattr(self, name))}, expected {m}")

    def __len__(self) -> int:
        return len(self.positions)

    @property
    def count(self) -> int:
        return len(self.positions)

    @classmethod
    def empty(cls) -> "GaussianCloud":
        return cls(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 4)), np.zeros(0))

    @classmethod
    def from_activated(cls, positions, scales, quaternions, densities) -> "GaussianCloud":
        """Build a cloud from physical (activated) values."""
        scales = np.asarray(scales, dtype=np.float64)
        if np.any(scales <= 0):
            raise ContractError("scales must be strictly positive")
        quats = np.asarray(quaternions, dtype=np.float64).reshape(-1, 4)
        return cls(
            np.asarray(positions, dtype=np.float64),
            np.log(scales),
            normalize_quaternions(quats),
            np.maximum(np.asarray(densities, dtype=np.float64), 0.0),
        )

    def copy(self) -> "GaussianCloud":
        return GaussianCloud(*(getattr(self, n).copy() for n in self.PARAMS))

    def select(self, index) -> "GaussianCloud":
        """Subset by boolean mask or integer index array."""
        return GaussianCloud(*(getattr(self, n)[index] for n in self.PARAMS))

    def concat(self, other: "GaussianCloud") -> "GaussianCloud":
        return GaussianCloud(
            *(np.concatenate([getattr(self, n), getattr(other, n)]) for n in self.PARAMS)
        )

    def validate(self) -> None:
        """Raise :class:`InvalidParameterError` for the first non-finite parameter."""
        for name in self.PARAMS:
            arr = getattr(self, name)
            bad = ~np.isfinite(arr.reshape(len(arr), -1 if len(arr) else 1)).all(axis=1)
            if bad.any():
                raise InvalidParameterError(int(np.flatnonzero(bad)[0]), name)
        norms = np.linalg.norm(self.rotations, axis=1)
        if np.any(norms == 0):
            raise InvalidParameterError(int(np.flatnonzero(norms == 0)[0]), "rotations")

    def activated(self) -> "ActivatedCloud":
        """Vectorized activation of every splat."""
        self.validate()
        return ActivatedCloud(
            positions=self.positions,
            scales=np.exp(self.log_scales),
            quaternions=normalize_quaternions(self.rotations),
            densities=np.maximum(self.raw_densities, 0.0),
        )

    @property
    def scales(self) -> np.ndarray:
        return np.exp(self.log_scales)

    @property
    def densities(self) -> np.ndarray:
        return np.maximum(self.raw_densities, 0.0)


class ActivatedCloud(NamedTuple):
    positions: np.ndarray
    scales: np.ndarray
    quaternions: np.ndarray
    densities: np.ndarray


@dataclass
class CloudGradients:
    """Gradients with respect to the stored (raw) cloud parameters."""

    positions: np.ndarray
    log_scales: np.ndarray
    rotations: np.ndarray
    raw_densities: np.ndarray

    @classmethod
    def zeros(cls, m: int) -> "CloudGradients":
        return cls(np.zeros((m, 3)), np.zeros((m, 3)), np.zeros((m, 4)), np.zeros(m))

    def __iadd__(self, other: "CloudGradients") -> "CloudGradients":
        for name in GaussianCloud.PARAMS:
            getattr(self, name).__iadd__(getattr(other, name))
        return self

    def scaled(self, factor: float) -> "CloudGradients":
        return CloudGradients(*(getattr(self, n) * factor for n in GaussianCloud.PARAMS))

    def as_dict(self) -> dict:
        return {n: getattr(self, n) for n in GaussianCloud.PARAMS}


def activate(cloud: GaussianCloud, i: int):
    """Activated ``(position, scales, unit_quat, density)`` of splat ``i``."""
    if not 0 <= i < len(cloud):
        raise IndexError(f"splat index {i} out of range for M={len(cloud)}")
    for name in GaussianCloud.PARAMS:
        if not np.all(np.isfinite(getattr(cloud, name)[i])):
            raise InvalidParameterError(i, name)
    q = cloud.rotations[i]
    n = np.linalg.norm(q)
    if n == 0:
        raise InvalidParameterError(i, "rotations")
    return (
        cloud.positions[i].copy(),
        np.exp(cloud.log_scales[i]),
        q / n,
        max(float(cloud.raw_densities[i]), 0.0),
    )


def normalize_quaternions(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def quaternion_to_rotation(q: np.ndarray) -> np.ndarray:
    """Rotation matrices for unit quaternions ``(w, x, y, z)``; shape (..., 3, 3)."""
    w, x, y, z = np.moveaxis(np.asarray(q, dtype=np.float64), -1, 0)
    r = np.empty(np.shape(w) + (3, 3))
    r[..., 0, 0] = 1 - 2 * (y * y + z * z)
    r[..., 0, 1] = 2 * (x * y - w * z)
    r[..., 0, 2] = 2 * (x * z + w * y)
    r[..., 1, 0] = 2 * (x * y + w * z)
    r[..., 1, 1] = 1 - 2 * (x * x + z * z)
    r[..., 1, 2] = 2 * (y * z - w * x)
    r[..., 2, 0] = 2 * (x * z - w * y)
    r[..., 2, 1] = 2 * (y * z + w * x)
    r[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return r


def rotation_grad_to_quaternion(q: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Pull a gradient w.r.t. rotation matrices back onto unit quaternions."""
    w, x, y, z = np.moveaxis(q, -1, 0)
    g00, g01, g02 = g[..., 0, 0], g[..., 0, 1], g[..., 0, 2]
    g10, g11, g12 = g[..., 1, 0], g[..., 1, 1], g[..., 1, 2]
    g20, g21, g22 = g[..., 2, 0], g[..., 2, 1], g[..., 2, 2]
    gw = -z * g01 + y * g02 + z * g10 - x * g12 - y * g20 + x * g21
    gx = y * g01 + z * g02 + y * g10 - 2 * x * g11 - w * g12 + z * g20 + w * g21 - 2 * x * g22
    gy = -2 * y * g00 + x * g01 + w * g02 + x * g10 + z * g12 - w * g20 + z * g21 - 2 * y * g22
    gz = -2 * z * g00 - w * g01 + x * g02 + w * g10 - 2 * z * g11 + y * g12 + x * g20 + y * g21
    return 2.0 * np.stack([gw, gx, gy, gz], axis=-1)


def normalize_backward(q_raw: np.ndarray, g_unit: np.ndarray) -> np.ndarray:
    """Gradient through ``q / |q|``."""
    n = np.linalg.norm(q_raw, axis=-1, keepdims=True)
    u = q_raw / n
    return (g_unit - u * np.sum(u * g_unit, axis=-1, keepdims=True)) / n


def covariance(scales: np.ndarray, unit_quat: np.ndarray) -> np.ndarray:
    """``R diag(s^2) R^T``; broadcasts over leading dimensions."""
    r = quaternion_to_rotation(unit_quat)
    s2 = np.asarray(scales, dtype=np.float64) ** 2
    return (r * s2[..., None, :]) @ np.swapaxes(r, -1, -2)


def inverse_covariance(scales: np.ndarray, unit_quat: np.ndarray) -> np.ndarray:
    r = quaternion_to_rotation(unit_quat)
    inv_s2 = 1.0 / np.asarray(scales, dtype=np.float64) ** 2
    return (r * inv_s2[..., None, :]) @ np.swapaxes(r, -1, -2)


def factored_backward(r: np.ndarray, f: np.ndarray, g: np.ndarray):
    """Gradients of ``R diag(f^2) R^T`` given a symmetric upstream gradient.

    Returns ``(grad_R, grad_f)``.
    """
    g = 0.5 * (g + np.swapaxes(g, -1, -2))
    m = r * f[..., None, :]
    gm = 2.0 * g @ m
    grad_f = np.sum(gm * r, axis=-2)
    grad_r = gm * f[..., None, :]
    return grad_r, grad_f


def scene_extent(cloud: GaussianCloud) -> float:
    """Half the diagonal of the positions' bounding box."""
    if len(cloud) == 0:
        raise EmptyModelError("scene extent of an empty cloud is undefined")
    lo = cloud.positions.min(axis=0)
    hi = cloud.positions.max(axis=0)
    return 0.5 * float(np.linalg.norm(hi - lo))


# ---------------------------------------------------------------------------
# Geometry, volumes, projections
# ---------------------------------------------------------------------------


@dataclass
class ScanGeometry:
    """Acquisition description for parallel- or cone-beam scans.

    Detector pixel ``(i, j)`` has its center at ``(i - (n_u-1)/2) * s_u`` along
    the detector ``u`` axis and ``(j - (n_v-1)/2) * s_v`` along ``v``.
    """

    mode: str
    detector: tuple[int, int]
    pixel_spacing: tuple[float, float]
    angles: np.ndarray
    source_to_origin: float = 0.0
    origin_to_detector: float = 0.0

    def __post_init__(self):
        self.angles = np.asarray(self.angles, dtype=np.float64).reshape(-1)
        self.detector = (int(self.detector[0]), int(self.detector[1]))
        self.pixel_spacing = (float(self.pixel_spacing[0]), float(self.pixel_spacing[1]))
        if self.mode not in ("parallel", "cone"):
            raise ContractError(f"unknown beam mode {self.mode!r}")
        if min(self.detector) < 1:
            raise ContractError("detector must have at least one pixel per axis")
        if min(self.pixel_spacing) <= 0:
            raise ContractError("pixel spacing must be positive")
        if not np.all(np.isfinite(self.angles)):
            raise ContractError("angles must be finite")
        if self.mode == "cone" and (self.source_to_origin <= 0 or self.origin_to_detector <= 0):
            raise ContractError("cone geometry needs positive source/detector distances")

    @property
    def n_views(self) -> int:
        return len(self.angles)

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "detector": list(self.detector),
            "pixel_spacing": list(self.pixel_spacing),
            "angles": [float(a) for a in self.angles],
            "source_to_origin": float(self.source_to_origin),
            "origin_to_detector": float(self.origin_to_detector),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ScanGeometry":
        return cls(
            mode=d["mode"],
            detector=tuple(d["detector"]),
            pixel_spacing=tuple(d["pixel_spacing"]),
            angles=np.asarray(d["angles"], dtype=np.float64),
            source_to_origin=float(d.get("source_to_origin", 0.0)),
            origin_to_detector=float(d.get("origin_to_detector", 0.0)),
        )

    def subset(self, views: Sequence[int]) -> "ScanGeometry":
        return ScanGeometry(
            self.mode, self.detector, self.pixel_spacing, self.angles[list(views)],
            self.source_to_origin, self.origin_to_detector,
        )


@dataclass
class Volume:
    """Dense scalar grid indexed ``values[x, y, z]`` with isotropic spacing."""

    values: np.ndarray
    spacing: float = 1.0
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        self.values = np.asarray(self.values)
        if self.values.ndim != 3 or min(self.values.shape) < 1:
            raise ContractError(f"volume must be a non-empty 3D array, got {self.values.shape}")
        self.spacing = float(self.spacing)
        if self.spacing <= 0:
            raise ContractError("spacing must be positive")
        self.origin = tuple(float(o) for o in self.origin)

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(n) for n in self.values.shape)

    @classmethod
    def centered(cls, values: np.ndarray, spacing: float) -> "Volume":
        """Volume whose grid is centered on the world origin."""
        dims = np.asarray(np.shape(values))
        return cls(values, spacing, tuple(-(dims - 1) / 2.0 * spacing))

    def grid_like(self, values: np.ndarray) -> "Volume":
        return Volume(values, self.spacing, self.origin)

    def voxel_centers(self) -> np.ndarray:
        axes = [self.origin[k] + self.spacing * np.arange(n) for k, n in enumerate(self.dims)]
        return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)

    def world_to_index(self, points: np.ndarray) -> np.ndarray:
        return (np.asarray(points) - np.asarray(self.origin)) / self.spacing

    def normalized(self) -> tuple["Volume", float]:
        """Copy scaled to max 1, and the scale factor that was divided out."""
        peak = float(np.max(self.values))
        scale = peak if peak > 0 else 1.0
        return self.grid_like(self.values / scale), scale


@dataclass
class ProjectionSet:
    """Stack of detector images, ``images[view, u, v]``."""

    geometry: ScanGeometry
    images: np.ndarray = field(repr=False)

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        expected = (self.geometry.n_views,) + tuple(self.geometry.detector)
        if self.images.shape != expected:
            raise ContractError(f"images have shape {self.images.shape}, expected {expected}")

    @property
    def n_views(self) -> int:
        return self.geometry.n_views

    def normalized(self) -> tuple["ProjectionSet", float]:
        peak = float(np.max(self.images)) if self.images.size else 0.0
        scale = peak if peak > 0 else 1.0
        return ProjectionSet(self.geometry, self.images / scale), scale


class Splat2D(NamedTuple):
    """A single Gaussian projected onto one detector view."""

    mean2d: np.ndarray
    cov2d: np.ndarray
    conic: np.ndarray
    amplitude: float
    bbox: tuple[int, int, int, int] | None
    mu: float
