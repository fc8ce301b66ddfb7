"""Command-line entry point: ``gsct <command> [options]``.

Every command writes ``<stem>.config.json`` (the fully resolved run
configuration) and ``<stem>.metrics.csv`` next to its main output.  Passing a
resolved config back through ``--config`` reproduces the run; flags given on
the command line override config values.

Errors are reported as a single JSON line on stderr, e.g.
``{"error": "usage", "type": "ConfigError", "message": "..."}``, with exit
status 2 for usage problems (flags, paths, configuration) and 1 for failures
during the run.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import __version__, set_threads
from .model import GSCTError, Volume

log = logging.getLogger("gsct")

PHANTOMS = ("ellipsoid", "edge", "block", "disk")


class UsageError(GSCTError):
    """Bad flags, paths, or configuration (exit status 2)."""


class ConfigError(UsageError):
    pass


# ---------------------------------------------------------------------------
# run configuration
# ---------------------------------------------------------------------------


@dataclass
class RunConfig:
    """Everything a command needs, as one JSON document.

    ``train``, ``init`` and ``loss`` hold the fields of
    :class:`~gsct.optim.TrainConfig`, :class:`~gsct.initialization.InitConfig`
    and :class:`~gsct.losses.LossWeights`.  The top-level ``seed`` and
    ``deterministic`` values are copied into the sections that use them, and
    ``loss`` overrides the loss weights inside ``train``.
    """

    command: str = ""
    seed: int = 0
    deterministic: bool = True
    threads: int | None = None
    paths: dict = field(default_factory=dict)
    geometry: dict = field(default_factory=dict)
    options: dict = field(default_factory=dict)
    init: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    loss: dict = field(default_factory=dict)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)

    def train_config(self):
        from .losses import LossWeights
        from .optim import TrainConfig

        _check_keys("loss", self.loss, {f.name for f in fields(LossWeights)})
        _check_keys("train", self.train, {f.name for f in fields(TrainConfig)})
        merged = {**self.train, **self.loss, "seed": self.seed, "deterministic": self.deterministic}
        try:
            return TrainConfig.from_dict(merged)
        except (TypeError, GSCTError) as e:
            raise ConfigError(f"train: {e}") from None

    def init_config(self):
        from .initialization import InitConfig

        _check_keys("init", self.init, {f.name for f in fields(InitConfig)})
        try:
            return InitConfig(**{**self.init, "seed": self.seed})
        except (TypeError, GSCTError) as e:
            raise ConfigError(f"init: {e}") from None


def _check_keys(section, d, allowed):
    bad = sorted(set(d) - allowed)
    if bad:
        raise ConfigError(f"unknown keys in {section!r}: {', '.join(bad)}")


def load_run_config(path) -> RunConfig:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"config file not found: {p}")
    try:
        d = json.loads(p.read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"{p}: invalid JSON ({e})") from None
    if not isinstance(d, dict):
        raise ConfigError(f"{p}: top level must be an object")
    return RunConfig.from_dict(d)


def _stem(path: Path) -> Path:
    name = path.name
    for suf in (".raw", ".proj", ".bin", ".npz", ".fgsc", ".csv", ".json"):
        if name.endswith(suf):
            name = name[: -len(suf)]
            break
    return path.with_name(name)


def write_sidecars(out: Path, cfg: RunConfig, rows: list[dict], deterministic: bool) -> None:
    """Resolved config and metric CSV next to ``out``."""
    from .io import write_metric_csv

    stem = _stem(out)
    resolved = cfg.to_dict()
    with open(stem.with_name(stem.name + ".config.json"), "w") as f:
        json.dump(resolved, f, indent=2, sort_keys=True)
        f.write("\n")
    mpath = stem.with_name(stem.name + ".metrics.csv")
    if rows and "epoch" in rows[0]:
        write_metric_csv(mpath, rows, deterministic=deterministic)
    else:
        with open(mpath, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["metric", "value"])
            for r in rows:
                for k, v in r.items():
                    w.writerow([k, repr(v) if isinstance(v, float) else v])


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def _input(path, what: str) -> Path:
    if path is None:
        raise UsageError(f"missing {what} path")
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"{what} not found: {p}")
    return p


def _output(path, what: str) -> Path:
    if path is None:
        raise UsageError(f"missing output path for {what}")
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    return p


def _load_cloud(path):
    from . import io

    p = _input(path, "cloud")
    if p.suffix == ".fgsc":
        return io.load_compressed(p)
    return io.load_cloud(p)


def _volume_stats(v: Volume) -> dict:
    return {"dims": "x".join(map(str, v.dims)), "min": float(v.values.min()),
            "max": float(v.values.max()), "mean": float(v.values.mean())}


def _merge(cfg: RunConfig, section: str, **values):
    """Set command-line values (skipping ``None``) into a config section."""
    target = getattr(cfg, section)
    for k, v in values.items():
        if v is not None:
            target[k] = v


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_phantom(cfg: RunConfig):
    from . import io
    from . import phantom as P

    o = cfg.options
    o.setdefault("kind", "ellipsoid")
    o.setdefault("dims", 64)
    kind, n = o["kind"], int(o["dims"])
    if kind not in PHANTOMS:
        raise ConfigError(f"unknown phantom kind {kind!r}; expected one of {PHANTOMS}")
    if n < 2:
        raise ConfigError("dims must be >= 2")
    if kind == "ellipsoid":
        vol = P.ellipsoid_phantom(n, cfg.seed)
    elif kind == "edge":
        vol = P.edge_phantom(n, cfg.seed)
    elif kind == "block":
        vol = P.block_phantom(n, cfg.seed)
    else:
        vol = P.disk_phantom(n)
    if o.get("perturb"):
        vol = P.perturbed_phantom(vol, cfg.seed + 1)
    out = _output(cfg.paths.get("out"), "volume")
    io.write_volume(out, vol)
    return out, [_volume_stats(vol)]


def _geometry(cfg: RunConfig):
    from .model import ScanGeometry
    from .phantom import parallel_geometry

    g = cfg.geometry
    g.setdefault("mode", "parallel")
    g.setdefault("views", 50)
    g.setdefault("detector", 128)
    g.setdefault("extent", 2.0)
    g.setdefault("full_circle", g["mode"] == "cone")
    g.setdefault("source_to_origin", 4.0)
    g.setdefault("origin_to_detector", 2.0)
    if g["mode"] not in ("parallel", "cone"):
        raise ConfigError(f"unknown geometry mode {g['mode']!r}")
    if int(g["views"]) < 1 or int(g["detector"]) < 1:
        raise ConfigError("views and detector must be >= 1")
    base = parallel_geometry(int(g["views"]), int(g["detector"]), float(g["extent"]),
                             bool(g["full_circle"]))
    if g["mode"] == "parallel":
        return base
    # keep the object's magnified shadow on the detector
    mag = (g["source_to_origin"] + g["origin_to_detector"]) / g["source_to_origin"]
    sp = float(g["extent"]) * mag / int(g["detector"])
    return ScanGeometry("cone", base.detector, (sp, sp), base.angles,
                        float(g["source_to_origin"]), float(g["origin_to_detector"]))


def cmd_project(cfg: RunConfig):
    from . import io
    from .phantom import project_volume
    from .projector import rasterize_all

    geom = _geometry(cfg)
    vpath, cpath = cfg.paths.get("volume"), cfg.paths.get("cloud")
    if (vpath is None) == (cpath is None):
        raise UsageError("project needs exactly one of --volume or --cloud")
    if vpath is not None:
        ps = project_volume(io.read_volume(_input(vpath, "volume")), geom,
                            float(cfg.options.setdefault("step", 0.5)))
    else:
        from .model import ProjectionSet

        ps = ProjectionSet(geom, rasterize_all(_load_cloud(cpath), geom))
    out = _output(cfg.paths.get("out"), "projections")
    io.write_projections(out, ps)
    return out, [{"views": ps.n_views, "max": float(ps.images.max()), "mean": float(ps.images.mean())}]


def _grid_for(cfg, ps, reference):
    from .initialization import default_grid

    if reference is not None:
        return reference
    n = cfg.options.get("dims")
    return default_grid(ps, int(n) if n else None)


def _build_init(cfg, ps, grid, records=None):
    from . import initialization as I
    from . import io

    ic = cfg.init_config()
    prior = None
    if ic.strategy.startswith("prior"):
        prior = io.read_volume(_input(cfg.paths.get("prior"), "prior volume"))
    log.info("initializing with %s (%d splats)", ic.strategy, ic.n_gaussians)
    if ic.strategy == "prior_rapid_fit":
        from .optim import TrainConfig

        fit = TrainConfig(seed=ic.seed, densify=False, lr_density=cfg.train_config().lr_density)
        return I.init_from_prior(prior, ic, fit, records)
    return I.initialize(ic, ps, prior=prior, grid=grid)


def cmd_init(cfg: RunConfig):
    from . import io

    ps = None
    if cfg.paths.get("views"):
        ps = io.read_projections(_input(cfg.paths["views"], "projections"))
    elif not cfg.init_config().strategy.startswith("prior"):
        raise UsageError("fdk strategies need --views")
    reference = None
    if cfg.paths.get("reference"):
        reference = io.read_volume(_input(cfg.paths["reference"], "reference volume"))
    grid = _grid_for(cfg, ps, reference) if ps is not None else None
    cloud = _build_init(cfg, ps, grid)
    out = _output(cfg.paths.get("out"), "cloud")
    io.save_cloud(out, cloud)
    row = {"n_gaussians": len(cloud)}
    if reference is not None:
        row.update(_score(cloud, reference))
    return out, [row]


def _score(cloud, reference):
    from . import metrics
    from .voxelizer import voxelize

    v = voxelize(cloud, reference).values
    return {"psnr": metrics.psnr(v, reference.values, 1.0),
            "ssim3d": metrics.ssim3d_score(v, reference.values)}


def _train_outputs(cfg, result, grid):
    from . import io
    from .voxelizer import voxelize

    out_dir = _output(cfg.paths.get("out_dir"), "run directory")
    out_dir.mkdir(parents=True, exist_ok=True)
    io.write_volume(out_dir / "volume.raw", voxelize(result.cloud, grid))
    io.save_cloud(out_dir / "cloud.npz", result.cloud)
    return out_dir / "run"


def _resume(cfg, tc):
    from . import io

    path = cfg.paths.get("resume")
    if not path:
        return None, None, None
    try:
        cloud, state, _, records = io.load_checkpoint(_input(path, "checkpoint"), tc.to_dict())
    except io.ConfigConflictError as e:
        raise ConfigError(str(e)) from None
    return cloud, state, records


def cmd_reconstruct(cfg: RunConfig):
    from . import io
    from .optim import train_reconstruction

    ps = io.read_projections(_input(cfg.paths.get("views"), "projections"))
    reference = None
    if cfg.paths.get("reference"):
        reference = io.read_volume(_input(cfg.paths["reference"], "reference volume"))
    grid = _grid_for(cfg, ps, reference)
    tc = cfg.train_config()
    _checkpoint_dir(tc, cfg)
    cloud, state, records = _resume(cfg, tc)
    if cloud is None:
        cloud = _load_cloud(cfg.paths["cloud"]) if cfg.paths.get("cloud") else _build_init(cfg, ps, grid)
    result = train_reconstruction(cloud, ps, tc, grid=grid, reference=reference, state=state,
                                  log_records=records, callback=_progress)
    stem = _train_outputs(cfg, result, grid)
    return stem, result.log


def _checkpoint_dir(tc, cfg):
    if tc.checkpoint_every and not tc.checkpoint_dir and cfg.paths.get("out_dir"):
        tc.checkpoint_dir = str(Path(cfg.paths["out_dir"]) / "checkpoints")
        cfg.train["checkpoint_dir"] = tc.checkpoint_dir


def _progress(rec, cloud):
    extra = "".join(f" {k}={rec[k]:.4f}" for k in ("psnr", "ssim3d") if k in rec)
    log.info("epoch %d loss=%.5f n=%d%s", rec["epoch"], rec["loss"], rec["n_gaussians"], extra)


def cmd_fit_volume(cfg: RunConfig):
    from . import initialization as I
    from . import io
    from .optim import train_volume_fit

    target = io.read_volume(_input(cfg.paths.get("volume"), "volume"))
    tc = cfg.train_config()
    _checkpoint_dir(tc, cfg)
    cloud, state, records = _resume(cfg, tc)
    if cloud is None:
        if cfg.paths.get("cloud"):
            cloud = _load_cloud(cfg.paths["cloud"])
        else:
            ic = cfg.init_config()
            cloud = I.init_from_sampling(target, ic, "gradient", np.random.default_rng(ic.seed))
    result = train_volume_fit(cloud, target, tc, state=state, log_records=records,
                              callback=_progress)
    stem = _train_outputs(cfg, result, target)
    if cfg.paths.get("compressed"):
        io.save_compressed(_output(cfg.paths["compressed"], "compressed cloud"), result.cloud)
    return stem, result.log


def cmd_voxelize(cfg: RunConfig):
    from . import io
    from .voxelizer import voxelize

    cloud = _load_cloud(cfg.paths.get("cloud"))
    if cfg.paths.get("like"):
        grid = io.read_volume(_input(cfg.paths["like"], "template volume"))
    else:
        n = int(cfg.options.setdefault("dims", 64))
        if n < 1:
            raise ConfigError("dims must be >= 1")
        grid = Volume.centered(np.zeros((n, n, n)), 2.0 / n)
    vol = voxelize(cloud, grid)
    out = _output(cfg.paths.get("out"), "volume")
    io.write_volume(out, vol)
    return out, [_volume_stats(vol)]


def cmd_compress(cfg: RunConfig):
    from . import io

    cloud = _load_cloud(cfg.paths.get("cloud"))
    out = _output(cfg.paths.get("out"), "compressed cloud")
    io.save_compressed(out, cloud)
    return out, [{"n_gaussians": len(cloud), "bytes": out.stat().st_size}]


def cmd_decompress(cfg: RunConfig):
    from . import io

    cloud = io.load_compressed(_input(cfg.paths.get("input"), "compressed cloud"))
    out = _output(cfg.paths.get("out"), "cloud")
    io.save_cloud(out, cloud)
    return out, [{"n_gaussians": len(cloud)}]


def cmd_metrics(cfg: RunConfig):
    from . import io, metrics

    pred = io.read_volume(_input(cfg.paths.get("pred"), "predicted volume"))
    target = io.read_volume(_input(cfg.paths.get("target"), "target volume"))
    if pred.dims != target.dims:
        raise UsageError(f"volume dims differ: {pred.dims} vs {target.dims}")
    rng = cfg.options.get("data_range")
    row = {"psnr": metrics.psnr(pred.values, target.values, rng),
           "ssim3d": metrics.ssim3d_score(pred.values, target.values)}
    print(json.dumps(row))
    out = cfg.paths.get("out")
    if out is None:
        stem = _stem(Path(cfg.paths["pred"]))
        out = stem.with_name(stem.name + ".scores")
    return _output(out, "scores"), [row]


def cmd_bench(cfg: RunConfig):
    from . import bench

    o = cfg.options
    o.setdefault("target", "rasterize")
    o.setdefault("counts", [20000])
    o.setdefault("sizes", [128, 256, 512] if o["target"] == "rasterize" else [32, 64, 128])
    o.setdefault("repeats", 5)
    o.setdefault("warmup", 1)
    o.setdefault("scale", 0.06)
    if o["target"] not in bench.TARGETS:
        raise ConfigError(f"unknown bench target {o['target']!r}")
    rows = bench.sweep(o["target"], o["counts"], o["sizes"], int(o["repeats"]), int(o["warmup"]),
                       float(o["scale"]), cfg.seed)
    out = _output(cfg.paths.get("out"), "bench CSV")
    bench.write_csv(out, rows)
    summary = {}
    if len(rows) >= 3:
        try:
            slope, r2 = bench.fit_power_law(rows)
            summary = {"slope": slope, "r2": r2}
            print(json.dumps(summary))
        except GSCTError as e:
            log.warning("power-law fit skipped: %s", e)
    return out, [summary] if summary else []


COMMANDS = {
    "phantom": cmd_phantom,
    "project": cmd_project,
    "init": cmd_init,
    "reconstruct": cmd_reconstruct,
    "fit-volume": cmd_fit_volume,
    "voxelize": cmd_voxelize,
    "compress": cmd_compress,
    "decompress": cmd_decompress,
    "metrics": cmd_metrics,
    "bench": cmd_bench,
}


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _train_flags(p):
    p.add_argument("--iters", type=int, help="epochs (reconstruct) or iterations (fit-volume)")
    p.add_argument("--n-gaussians", type=int)
    p.add_argument("--alpha-ssim", type=float)
    p.add_argument("--alpha-tv", type=float)
    p.add_argument("--no-densify", action="store_true", default=None)
    p.add_argument("--checkpoint-every", type=int)
    p.add_argument("--resume", help="checkpoint to resume from")
    p.add_argument("--out-dir", help="directory for volume.raw, cloud.npz and run.* files")
    p.add_argument("--cloud", help="start from this cloud instead of initializing")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="gsct", description="Gaussian-splatting CT reconstruction toolkit.")
    p.add_argument("--version", action="version", version=f"gsct {__version__}")
    p.add_argument("--threads", type=int, help="worker threads (default: GSCT_THREADS or all cores)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def add(name, help_):
        s = sub.add_parser(name, help=help_)
        s.add_argument("--config", help="JSON run configuration")
        s.add_argument("--seed", type=int)
        s.add_argument("--threads", type=int, default=argparse.SUPPRESS)
        return s

    s = add("phantom", "generate a procedural volume")
    s.add_argument("--dims", type=int)
    s.add_argument("--kind", choices=PHANTOMS)
    s.add_argument("--perturb", action="store_true", default=None,
                   help="return a shifted, blotched variant (a plausible prior)")
    s.add_argument("--out")

    s = add("project", "simulate projections of a volume or a cloud")
    s.add_argument("--volume")
    s.add_argument("--cloud")
    s.add_argument("--views", type=int)
    s.add_argument("--detector", type=int)
    s.add_argument("--mode", choices=("parallel", "cone"))
    s.add_argument("--full-circle", action="store_true", default=None)
    s.add_argument("--step", type=float, help="ray-marching step in voxel spacings")
    s.add_argument("--out")

    s = add("init", "initialize a cloud")
    s.add_argument("--views", help="projection file")
    s.add_argument("--prior", help="prior volume for prior-* strategies")
    s.add_argument("--reference", help="ground truth for scoring")
    s.add_argument("--strategy", "--init", dest="strategy")
    s.add_argument("--n-gaussians", type=int)
    s.add_argument("--dims", type=int)
    s.add_argument("--out")

    s = add("reconstruct", "reconstruct from projections")
    s.add_argument("--views", help="projection file")
    s.add_argument("--init", dest="strategy")
    s.add_argument("--prior")
    s.add_argument("--reference", help="ground truth volume for logged PSNR/SSIM3D")
    s.add_argument("--dims", type=int)
    _train_flags(s)

    s = add("fit-volume", "fit a cloud directly to a volume")
    s.add_argument("--volume")
    s.add_argument("--compressed", help="also write the fitted cloud in compressed form")
    _train_flags(s)

    s = add("voxelize", "sample a cloud on a grid")
    s.add_argument("--cloud")
    s.add_argument("--like", help="use this volume's grid")
    s.add_argument("--dims", type=int)
    s.add_argument("--out")

    s = add("compress", "write a cloud in the 22-byte half-precision format")
    s.add_argument("--cloud")
    s.add_argument("--out")

    s = add("decompress", "read a compressed cloud")
    s.add_argument("--in", dest="input")
    s.add_argument("--out")

    s = add("metrics", "PSNR and SSIM3D between two volumes")
    s.add_argument("--pred")
    s.add_argument("--target")
    s.add_argument("--data-range", type=float)
    s.add_argument("--out")

    s = add("bench", "scaling sweep of the rasterizer or voxelizer")
    s.add_argument("--target", choices=("rasterize", "voxelize"))
    s.add_argument("--counts", type=int, nargs="+")
    s.add_argument("--sizes", type=int, nargs="+")
    s.add_argument("--repeats", type=int)
    s.add_argument("--warmup", type=int)
    s.add_argument("--scale", type=float)
    s.add_argument("--out")
    return p


def resolve(args: argparse.Namespace) -> RunConfig:
    """Combine ``--config`` (if any) with command-line flags."""
    cfg = load_run_config(args.config) if getattr(args, "config", None) else RunConfig()
    if cfg.command and cfg.command != args.command:
        raise ConfigError(f"config is for {cfg.command!r}, not {args.command!r}")
    cfg.command = args.command
    a = vars(args)
    if a.get("seed") is not None:
        cfg.seed = a["seed"]
    if args.threads is not None:
        cfg.threads = args.threads
    cmd = args.command
    paths = {k: a.get(k) for k in ("out", "cloud", "prior", "reference", "like", "input", "pred",
                                   "resume", "out_dir", "compressed")}
    if cmd == "metrics":
        paths["target"] = a.get("target")
    if cmd in ("project", "fit-volume"):
        paths["volume"] = a.get("volume")
    if cmd in ("init", "reconstruct"):
        paths["views"] = a.get("views")
    _merge(cfg, "paths", **paths)
    if cmd == "project":
        _merge(cfg, "geometry", views=a.get("views"), detector=a.get("detector"), mode=a.get("mode"),
               full_circle=a.get("full_circle"))
        _merge(cfg, "options", step=a.get("step"))
    if cmd == "phantom":
        _merge(cfg, "options", dims=a.get("dims"), kind=a.get("kind"), perturb=a.get("perturb"))
    if cmd in ("init", "reconstruct", "voxelize"):
        _merge(cfg, "options", dims=a.get("dims"))
    if cmd in ("init", "reconstruct", "fit-volume"):
        strategy = a.get("strategy")
        _merge(cfg, "init", strategy=strategy.replace("-", "_") if strategy else None,
               n_gaussians=a.get("n_gaussians"))
    if cmd in ("reconstruct", "fit-volume"):
        _merge(cfg, "train", iterations=a.get("iters"), checkpoint_every=a.get("checkpoint_every"),
               densify=False if a.get("no_densify") else None)
        _merge(cfg, "loss", alpha_ssim=a.get("alpha_ssim"), alpha_tv=a.get("alpha_tv"))
        if cmd == "fit-volume":
            cfg.init.setdefault("n_gaussians", 5000)
            cfg.train.setdefault("iterations", 500)
            cfg.train.setdefault("densify", False)
    if cmd == "metrics":
        _merge(cfg, "options", data_range=a.get("data_range"))
    if cmd == "bench":
        _merge(cfg, "options", target=a.get("target"), counts=a.get("counts"), sizes=a.get("sizes"),
               repeats=a.get("repeats"), warmup=a.get("warmup"), scale=a.get("scale"))
    # echo every default into the resolved file
    if cmd in ("init", "reconstruct", "fit-volume"):
        cfg.init = cfg.init_config().to_dict()
        cfg.init.pop("seed")
    if cmd in ("reconstruct", "fit-volume"):
        tc = cfg.train_config().to_dict()
        cfg.loss = {"alpha_ssim": tc.pop("alpha_ssim"), "alpha_tv": tc.pop("alpha_tv")}
        for k in ("seed", "deterministic"):
            tc.pop(k)
        cfg.train = tc
    if cmd == "project":
        _geometry(cfg)
    return cfg


def _fail(kind: str, exc: BaseException, code: int) -> int:
    msg = str(exc).replace("\n", " ")
    sys.stderr.write(json.dumps({"error": kind, "type": type(exc).__name__, "message": msg}) + "\n")
    return code


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("no command given; see gsct --help")
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        cfg = resolve(args)
        set_threads(cfg.threads)
    except UsageError as e:
        return _fail("usage", e, 2)
    except GSCTError as e:
        return _fail("usage", e, 2)
    try:
        out, rows = COMMANDS[cfg.command](cfg)
        write_sidecars(Path(out), cfg, rows, cfg.deterministic)
    except UsageError as e:
        return _fail("usage", e, 2)
    except (GSCTError, OSError, ValueError) as e:
        return _fail("runtime", e, 1)
    return 0


if __name__ == "__main__":
    sys.exit(main())
