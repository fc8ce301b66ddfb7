"""File formats.

Volume
    ``<name>.raw``: little-endian float32, x fastest, then y, then z.
    ``<name>.raw.json``: ``{"format": "gsct-volume", "version": 1, "dims",
    "spacing", "origin", "min", "max"}``.
Projections
    ``<name>.proj``: 16-byte header (magic ``GSPJ``, u32 version, u32 views,
    u16 n_u, u16 n_v) then float32 LE values, u fastest, then v, then view.
    ``<name>.proj.json``: the scan geometry fields.
Compressed cloud (``FGSC``)
    16-byte header: magic ``FGSC``, u32 version, u64 splat count ``M``;
    then ``M`` records of 11 IEEE binary16 values
    ``(px, py, pz, sx, sy, sz, qw, qx, qy, qz, rho)`` with activated values.
    File size is exactly ``16 + 22 * M``.
Checkpoint
    ``.npz`` archive holding full-precision cloud and optimizer arrays plus a
    JSON blob with the configuration and the metric log.
"""
from __future__ import annotations

import csv
import json
import logging
import os
import struct
from pathlib import Path

import numpy as np

from .model import GaussianCloud, GSCTError, ProjectionSet, ScanGeometry, Volume

log = logging.getLogger(__name__)

VOLUME_VERSION = 1
PROJ_MAGIC = b"GSPJ"
PROJ_VERSION = 1
FGSC_MAGIC = b"FGSC"
FGSC_VERSION = 1
FGSC_HEADER = 16
FGSC_RECORD = 22
CHECKPOINT_VERSION = 1
HALF_MAX = float(np.finfo(np.float16).max)
HALF_TINY = float(np.finfo(np.float16).smallest_subnormal)


class ParseError(GSCTError):
    """Malformed file; ``offset`` is the byte position where parsing failed."""

    def __init__(self, message: str, offset: int | None = None, path=None):
        where = f" at byte {offset}" if offset is not None else ""
        src = f"{path}: " if path else ""
        super().__init__(f"{src}{message}{where}")
        self.offset = offset
        self.path = path


class MagicError(ParseError):
    pass


class VersionError(ParseError):
    pass


class TruncationError(ParseError):
    def __init__(self, expected: int, actual: int, path=None):
        super().__init__(f"expected {expected} bytes, found {actual}", offset=actual, path=path)
        self.expected = expected
        self.actual = actual


class ConfigConflictError(GSCTError):
    def __init__(self, conflicts: dict):
        lines = ", ".join(f"{k}: checkpoint={a!r} requested={b!r}" for k, (a, b) in sorted(conflicts.items()))
        super().__init__(f"checkpoint configuration conflicts: {lines}")
        self.conflicts = conflicts


def _sidecar(path) -> Path:
    p = Path(path)
    return p.with_name(p.name + ".json")


def _write_json(path, obj):
    with open(path, "w") as f:
        json.dump(obj, f, indent=2, sort_keys=True)
        f.write("\n")


def _read_json(path) -> dict:
    try:
        with open(path) as f:
            return json.load(f)
    except FileNotFoundError:
        raise ParseError("missing metadata sidecar", path=path) from None
    except json.JSONDecodeError as e:
        raise ParseError(f"invalid JSON ({e.msg})", offset=e.pos, path=path) from None


# ---------------------------------------------------------------------------
# volumes
# ---------------------------------------------------------------------------


def volume_bytes(values: np.ndarray) -> bytes:
    return np.asarray(values).astype("<f4").tobytes(order="F")


def write_volume(path, volume: Volume) -> Path:
    path = Path(path)
    v = volume.values.astype("<f4")
    path.write_bytes(v.tobytes(order="F"))
    _write_json(_sidecar(path), {
        "format": "gsct-volume",
        "version": VOLUME_VERSION,
        "dims": list(volume.dims),
        "spacing": volume.spacing,
        "origin": list(volume.origin),
        "min": float(v.min()),
        "max": float(v.max()),
    })
    return path


def read_volume(path) -> Volume:
    path = Path(path)
    meta = _read_json(_sidecar(path))
    if meta.get("format") != "gsct-volume":
        raise MagicError(f"sidecar format {meta.get('format')!r} is not gsct-volume", path=path)
    if meta.get("version") != VOLUME_VERSION:
        raise VersionError(f"unsupported volume version {meta.get('version')}", path=path)
    dims = tuple(int(n) for n in meta["dims"])
    if len(dims) != 3 or min(dims) < 1:
        raise ParseError(f"bad dims {dims}", path=path)
    data = path.read_bytes()
    expected = 4 * dims[0] * dims[1] * dims[2]
    if len(data) != expected:
        raise TruncationError(expected, len(data), path)
    values = np.frombuffer(data, dtype="<f4").reshape(dims, order="F").astype(np.float32)
    return Volume(values, meta["spacing"], tuple(meta["origin"]))


# ---------------------------------------------------------------------------
# projections
# ---------------------------------------------------------------------------


def write_projections(path, projections: ProjectionSet) -> Path:
    path = Path(path)
    n_views = projections.n_views
    n_u, n_v = projections.geometry.detector
    if n_u > 0xFFFF or n_v > 0xFFFF:
        raise GSCTError("detector dimension exceeds 65535")
    header = PROJ_MAGIC + struct.pack("<IIHH", PROJ_VERSION, n_views, n_u, n_v)
    # images[view, u, v] written with u fastest
    payload = np.ascontiguousarray(np.swapaxes(projections.images, 1, 2)).astype("<f4").tobytes()
    path.write_bytes(header + payload)
    _write_json(_sidecar(path), {"format": "gsct-geometry", "version": PROJ_VERSION,
                                 **projections.geometry.to_dict()})
    return path


def read_projections(path) -> ProjectionSet:
    path = Path(path)
    data = path.read_bytes()
    if len(data) < 16:
        raise TruncationError(16, len(data), path)
    if data[:4] != PROJ_MAGIC:
        raise MagicError(f"bad magic {data[:4]!r}", offset=0, path=path)
    version, n_views, n_u, n_v = struct.unpack_from("<IIHH", data, 4)
    if version != PROJ_VERSION:
        raise VersionError(f"unsupported projection version {version}", offset=4, path=path)
    expected = 16 + 4 * n_views * n_u * n_v
    if len(data) != expected:
        raise TruncationError(expected, len(data), path)
    meta = _read_json(_sidecar(path))
    try:
        geometry = ScanGeometry.from_dict(meta)
    except (KeyError, TypeError, ValueError) as e:
        raise ParseError(f"invalid geometry sidecar ({e})", path=_sidecar(path)) from None
    if geometry.detector != (n_u, n_v) or geometry.n_views != n_views:
        raise ParseError(f"geometry {geometry.n_views}x{geometry.detector} does not match "
                         f"payload {n_views}x{(n_u, n_v)}", offset=8, path=path)
    flat = np.frombuffer(data, dtype="<f4", offset=16).reshape(n_views, n_v, n_u)
    return ProjectionSet(geometry, np.swapaxes(flat, 1, 2).astype(np.float64))


# ---------------------------------------------------------------------------
# compressed clouds
# ---------------------------------------------------------------------------


def compressed_size(m: int) -> int:
    return FGSC_HEADER + FGSC_RECORD * int(m)


def compress_model(cloud: GaussianCloud) -> bytes:
    """Encode activated parameters as binary16 (round to nearest even).

    Values beyond the finite binary16 range saturate, and positive scales too
    small to represent are raised to the smallest subnormal; both are counted
    with a warning.
    """
    cloud.validate()
    act = cloud.activated()
    m = len(cloud)
    rec = np.empty((m, 11), dtype=np.float64)
    rec[:, 0:3] = act.positions
    rec[:, 3:6] = act.scales
    rec[:, 6:10] = act.quaternions
    rec[:, 10] = act.densities
    over = np.abs(rec) > HALF_MAX
    rec = np.clip(rec, -HALF_MAX, HALF_MAX)
    tiny = np.zeros_like(over)
    tiny[:, 3:6] = rec[:, 3:6] < HALF_TINY
    rec[:, 3:6] = np.maximum(rec[:, 3:6], HALF_TINY)
    n_sat = int(over.sum() + tiny.sum())
    if n_sat:
        log.warning("compress_model: %d values saturated to the binary16 range", n_sat)
    half = rec.astype("<f2")
    half[:, 6:10] = _stable_half_quaternions(half[:, 6:10])
    body = half.tobytes()
    header = FGSC_MAGIC + struct.pack("<IQ", FGSC_VERSION, m)
    return header + body


def _renorm_half(q16: np.ndarray) -> np.ndarray:
    q = q16.astype(np.float64)
    return (q / np.linalg.norm(q, axis=-1, keepdims=True)).astype("<f2")


def _stable_half_quaternions(q16: np.ndarray) -> np.ndarray:
    """Binary16 quaternions that survive decode-renormalize-encode unchanged.

    Rows that are not already fixed points are replaced by the closest fixed
    point among their +-1 ulp neighbors, so a decoded file re-encodes to
    identical bytes.
    """
    q16 = q16.copy()
    bad = np.flatnonzero(np.any(_renorm_half(q16) != q16, axis=1))
    if bad.size == 0:
        return q16
    steps = np.array(np.meshgrid(*[(-1, 0, 1)] * 4, indexing="ij")).reshape(4, -1).T
    for i in bad:
        row = q16[i]
        target = row.astype(np.float64)
        target /= np.linalg.norm(target)
        up = np.nextafter(row, np.float16(np.inf))
        dn = np.nextafter(row, np.float16(-np.inf))
        cand = np.where(steps == 1, up, np.where(steps == -1, dn, row)).astype("<f2")
        fixed = np.all(_renorm_half(cand) == cand, axis=1)
        if fixed.any():
            cand = cand[fixed]
            err = np.linalg.norm(cand.astype(np.float64) - target, axis=1)
            q16[i] = cand[np.argmin(err)]
    return q16


def decompress_model(data: bytes) -> GaussianCloud:
    data = bytes(data)
    if len(data) < FGSC_HEADER:
        raise TruncationError(FGSC_HEADER, len(data))
    if data[:4] != FGSC_MAGIC:
        raise MagicError(f"bad magic {data[:4]!r}", offset=0)
    version, m = struct.unpack_from("<IQ", data, 4)
    if version != FGSC_VERSION:
        raise VersionError(f"unsupported FGSC version {version}", offset=4)
    expected = compressed_size(m)
    if len(data) != expected:
        raise TruncationError(expected, len(data))
    rec = np.frombuffer(data, dtype="<f2", offset=FGSC_HEADER).reshape(m, 11).astype(np.float64)
    if not np.all(np.isfinite(rec)):
        bad = int(np.argwhere(~np.isfinite(rec))[0, 0])
        raise ParseError("non-finite value in record", offset=FGSC_HEADER + FGSC_RECORD * bad)
    scales = rec[:, 3:6]
    if np.any(scales <= 0):
        bad = int(np.argwhere(scales <= 0)[0, 0])
        raise ParseError("non-positive scale in record", offset=FGSC_HEADER + FGSC_RECORD * bad)
    q = rec[:, 6:10]
    if np.any(np.linalg.norm(q, axis=1) == 0):
        bad = int(np.flatnonzero(np.linalg.norm(q, axis=1) == 0)[0])
        raise ParseError("zero quaternion in record", offset=FGSC_HEADER + FGSC_RECORD * bad)
    return GaussianCloud.from_activated(rec[:, 0:3], scales, q, np.maximum(rec[:, 10], 0.0))


def save_compressed(path, cloud: GaussianCloud) -> Path:
    path = Path(path)
    path.write_bytes(compress_model(cloud))
    return path


def load_compressed(path) -> GaussianCloud:
    try:
        return decompress_model(Path(path).read_bytes())
    except ParseError as e:
        if e.path is None:
            e.path = path
            e.args = (f"{path}: {e.args[0]}",)
        raise


# ---------------------------------------------------------------------------
# full-precision clouds and checkpoints
# ---------------------------------------------------------------------------


def save_cloud(path, cloud: GaussianCloud) -> Path:
    path = Path(path)
    with open(path, "wb") as f:
        np.savez(f, format_version=np.int64(CHECKPOINT_VERSION),
                 **{k: getattr(cloud, k) for k in GaussianCloud.PARAMS})
    return path


def load_cloud(path) -> GaussianCloud:
    with np.load(path) as z:
        if "positions" not in z:
            raise ParseError("not a cloud archive", path=path)
        return GaussianCloud(*(z[k] for k in GaussianCloud.PARAMS))


def save_checkpoint(path, cloud: GaussianCloud, state, config: dict, metric_log: list) -> Path:
    """Write everything needed to resume training bit-identically."""
    path = Path(path)
    arrays = {f"cloud_{k}": getattr(cloud, k) for k in GaussianCloud.PARAMS}
    arrays.update({f"state_{k}": v for k, v in state.arrays().items()})
    meta = {"version": CHECKPOINT_VERSION, "config": config, "log": metric_log,
            "state": state.scalars()}
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        np.savez(f, meta=np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8),
                 **arrays)
    os.replace(tmp, path)
    return path


def load_checkpoint(path, config: dict | None = None):
    """Returns ``(cloud, state, config, metric_log)``.

    When ``config`` is given, any key whose value differs from the stored
    configuration raises :class:`ConfigConflictError` listing all conflicts.
    """
    from .optim import OptimState

    with np.load(path) as z:
        if "meta" not in z:
            raise ParseError("not a checkpoint archive", path=path)
        meta = json.loads(z["meta"].tobytes().decode())
        if meta.get("version") != CHECKPOINT_VERSION:
            raise VersionError(f"checkpoint version {meta.get('version')} != {CHECKPOINT_VERSION}", path=path)
        cloud = GaussianCloud(*(z[f"cloud_{k}"] for k in GaussianCloud.PARAMS))
        arrays = {k[len("state_"):]: z[k] for k in z.files if k.startswith("state_")}
    stored = meta["config"]
    if config is not None:
        conflicts = {k: (stored.get(k), v) for k, v in config.items() if stored.get(k) != v}
        conflicts.update({k: (v, None) for k, v in stored.items() if k not in config})
        if conflicts:
            raise ConfigConflictError(conflicts)
    state = OptimState.from_arrays(arrays, meta["state"])
    return cloud, state, stored, meta["log"]


# ---------------------------------------------------------------------------
# metric logs
# ---------------------------------------------------------------------------

METRIC_COLUMNS = ("epoch", "steps", "loss", "l1", "ssim", "tv", "n_gaussians",
                  "psnr", "ssim3d", "pruned", "cloned", "split", "skipped", "wall_time")


def write_metric_csv(path, records: list[dict], deterministic: bool = False) -> Path:
    """Write the metric log as CSV.

    In deterministic mode the ``wall_time`` column is moved to a sidecar file
    ``<path>.timing.csv`` so the main file is reproducible byte for byte.
    """
    path = Path(path)
    cols = [c for c in METRIC_COLUMNS if any(c in r for r in records)] or list(METRIC_COLUMNS)
    main_cols = [c for c in cols if not (deterministic and c == "wall_time")]
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(main_cols)
        for r in records:
            w.writerow([_fmt(r.get(c)) for c in main_cols])
    if deterministic and "wall_time" in cols:
        with open(path.with_name(path.name + ".timing.csv"), "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["epoch", "wall_time"])
            for r in records:
                w.writerow([_fmt(r.get("epoch")), _fmt(r.get("wall_time"))])
    return path


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return v


def read_metric_csv(path) -> list[dict]:
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    out = []
    for r in rows:
        rec = {}
        for k, v in r.items():
            if v == "":
                rec[k] = None
            else:
                try:
                    rec[k] = int(v)
                except ValueError:
                    rec[k] = float(v)
        out.append(rec)
    return out
