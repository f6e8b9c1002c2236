"""Command line entry point: ``uodf <command> [options]``.

Every command accepts ``--config cfg.json``; explicit flags override keys in
the file. Exit codes: 0 ok, 1 internal error, 2 bad input file, 3 bad
configuration.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import platform
import sys
import tempfile
import time
from dataclasses import asdict, fields as dc_fields
from pathlib import Path

import numpy as np

from . import __version__
from .field import (FieldFormatError, DirectionalField, ScalarFieldGrid, compute_sdf_gt, compute_udf_gt,
                    compute_uodf_all, export_field, read_field)
from .grid import Direction, GridSpec
from .mesh import MeshError, TriangleMesh, file_digest, load_mesh, normalize_mesh

log = logging.getLogger("uodf")

EXIT_OK, EXIT_INTERNAL, EXIT_INPUT, EXIT_CONFIG = 0, 1, 2, 3
FIXTURES = ("sphere", "plates", "bumpy", "shells")
FIELD_NAMES = {Direction.LR: "lr.uodf", Direction.FB: "fb.uodf", Direction.UD: "ud.uodf"}


class ConfigError(Exception):
    pass


class InputError(Exception):
    pass


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

def _threads_from_env() -> None:
    raw = os.environ.get("UODF_THREADS")
    if not raw:
        return
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"UODF_THREADS must be an integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError("UODF_THREADS must be at least 1")
    import numba

    numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))


def _grid(R) -> GridSpec:
    try:
        return GridSpec(int(R))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid resolution {R!r}: {exc}") from None


def _int_list(text) -> list[int]:
    if isinstance(text, list):
        return [int(x) for x in text]
    try:
        return [int(x) for x in str(text).split(",") if x.strip()]
    except ValueError:
        raise ConfigError(f"expected a comma-separated list of integers, got {text!r}") from None


def _str_list(text) -> list[str]:
    if isinstance(text, list):
        return [str(x) for x in text]
    return [x.strip() for x in str(text).split(",") if x.strip()]


def _existing(path) -> Path:
    p = Path(path)
    if not p.is_file():
        raise InputError(f"no such file: {p}")
    return p


def fixture_shape(name: str):
    from .shapes import AnalyticSphere, MeshShape, bumpy_sphere, close_plates, nested_shells

    if name == "sphere":
        return AnalyticSphere(0.9)
    if name == "plates":
        return close_plates()
    if name == "bumpy":
        return MeshShape(bumpy_sphere(), name="bumpy")
    if name == "shells":
        return MeshShape(TriangleMesh.concatenate(nested_shells()), name="shells")
    raise ConfigError(f"unknown fixture {name!r}; expected one of {', '.join(FIXTURES)}")


def _shape(cfg: dict, inputs: dict, required: bool = True):
    from .shapes import MeshShape

    if cfg.get("mesh"):
        path = _existing(cfg["mesh"])
        inputs[str(path)] = file_digest(path)
        mesh = load_mesh(path)
        if cfg.get("normalize", True):
            mesh = normalize_mesh(mesh)
        return MeshShape(mesh, name=path.stem)
    if cfg.get("fixture"):
        return fixture_shape(cfg["fixture"])
    if required:
        raise ConfigError("need --mesh or --fixture")
    return None


def _read_field(path, inputs: dict):
    path = _existing(path)
    inputs[str(path)] = file_digest(path)
    return read_field(path)


def _atomic_write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    with os.fdopen(fd, "w", encoding="utf-8") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _versions() -> dict:
    import numba
    import scipy

    return {"uodf": __version__, "python": platform.python_version(), "numpy": np.__version__,
            "scipy": scipy.__version__, "numba": numba.__version__}


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True, default=str).encode()).hexdigest()


def write_manifest(path: Path, command: str, cfg: dict, inputs: dict, outputs: list, wall: float) -> None:
    manifest = {
        "command": command,
        "config": cfg,
        "config_hash": config_hash(cfg),
        "inputs": inputs,
        "seed": cfg.get("seed"),
        "versions": _versions(),
        "wall_time_s": wall,
        "outputs": [str(p) for p in outputs],
    }
    _atomic_write(path, json.dumps(manifest, indent=2, sort_keys=True, default=str))


def _manifest_path(cfg: dict, out: Path) -> Path:
    if cfg.get("manifest"):
        return Path(cfg["manifest"])
    return out / "manifest.json" if out.suffix == "" else out.with_name(out.name + ".manifest.json")


# ---------------------------------------------------------------------------
# commands; each returns the list of files written
# ---------------------------------------------------------------------------

def cmd_gt(cfg: dict, inputs: dict) -> list[Path]:
    grid = _grid(cfg["resolution"])
    shape = _shape(cfg, inputs)
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    written = []
    fields = compute_uodf_all(shape, grid)
    for d, fld in fields.items():
        export_field(fld, out / FIELD_NAMES[d])
        written.append(out / FIELD_NAMES[d])
    udf = compute_udf_gt(shape, grid)
    export_field(udf, out / "udf.sclr")
    written.append(out / "udf.sclr")
    if cfg.get("sdf"):
        sdf = compute_sdf_gt(shape, grid, udf=udf, lr_field=fields[Direction.LR])
        for msg in sdf.diagnostics:
            log.warning(msg)
        export_field(sdf, out / "sdf.sclr")
        written.append(out / "sdf.sclr")
    return written


def _train_config(cfg: dict):
    from .neural import TrainConfig

    keys = {f.name for f in dc_fields(TrainConfig)}
    try:
        return TrainConfig(**{k: v for k, v in cfg.items() if k in keys and v is not None})
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def cmd_fit(cfg: dict, inputs: dict) -> list[Path]:
    from .neural import RaySampler, TrainingDiverged, save_checkpoint, train_direction

    if not cfg.get("direction"):
        raise ConfigError("fit needs --direction")
    try:
        direction = Direction.parse(cfg["direction"])
    except (KeyError, ValueError):
        raise ConfigError(f"unknown direction {cfg['direction']!r}") from None
    tcfg = _train_config(cfg)
    shape = _shape(cfg, inputs)
    sampler = RaySampler.from_shape(shape, _grid(tcfg.lattice), direction)
    out = Path(cfg["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    log_path = out.with_name(out.name + ".log.jsonl")
    with open(log_path, "w", encoding="utf-8") as fh:
        def record(entry, model):
            fh.write(json.dumps(asdict(entry)) + "\n")
            fh.flush()

        try:
            model, _ = train_direction(sampler, tcfg, callback=record)
        except TrainingDiverged as exc:
            save_checkpoint(exc.model, out)
            raise
    save_checkpoint(model, out)
    return [out, Path(str(out) + ".json"), log_path]


def _predict_fields(paths, grid: GridSpec, threshold: float, inputs: dict) -> dict:
    from .neural import load_checkpoint, predict_field

    fields = {}
    for p in paths:
        path = _existing(p)
        inputs[str(path)] = file_digest(path)
        model = load_checkpoint(path)
        if model.direction in fields:
            raise ConfigError(f"two checkpoints for direction {model.direction.name}")
        fields[model.direction] = predict_field(model, grid, threshold)
    if set(fields) != set(Direction):
        raise ConfigError("need one checkpoint per direction (lr, fb, ud)")
    return fields


def cmd_predict(cfg: dict, inputs: dict) -> list[Path]:
    paths = cfg.get("checkpoints") or []
    fields = _predict_fields(paths, _grid(cfg["resolution"]), float(cfg.get("threshold", 0.5)), inputs)
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    for d, fld in fields.items():
        export_field(fld, out / FIELD_NAMES[d])
    return [out / FIELD_NAMES[d] for d in Direction]


def cmd_recon(cfg: dict, inputs: dict) -> list[Path]:
    from .gep import DEFAULT_TAU, MIN_SUPPORT, estimate_normals, export_points, reconstruct
    from .metrics import evaluate, surface_reference

    tau = float(cfg.get("tau") or DEFAULT_TAU)
    if tau <= 0:
        raise ConfigError("tau must be positive")
    min_support = int(cfg.get("min_support", MIN_SUPPORT))
    if cfg.get("checkpoints"):
        fields = _predict_fields(cfg["checkpoints"], _grid(cfg["resolution"]),
                                 float(cfg.get("threshold", 0.5)), inputs)
    else:
        paths = cfg.get("fields") or []
        if len(paths) != 3:
            raise ConfigError("recon needs three --fields files or three --checkpoints")
        fields = {}
        for p in paths:
            fld = _read_field(p, inputs)
            if not isinstance(fld, DirectionalField):
                raise InputError(f"{p} holds a scalar grid, not a directional field")
            fields[fld.direction] = fld
        if set(fields) != set(Direction):
            raise ConfigError("need one field per direction (lr, fb, ud)")
        sizes = {f.resolution for f in fields.values()}
        if len(sizes) != 1:
            raise ConfigError(f"direction fields disagree on grid resolution: {sorted(sizes)}")
    t0 = time.perf_counter()
    gep = reconstruct(fields, tau, min_support)
    gep.normals = estimate_normals(gep)
    runtime = time.perf_counter() - t0
    out = Path(cfg["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    export_points(gep, out)
    written = [out]
    report_path = Path(cfg.get("report") or out.with_suffix(".report.json"))
    shape = _shape(cfg, inputs, required=False)
    if shape is not None:
        samples = surface_reference(shape, int(cfg.get("surface_samples", 100_000)), int(cfg.get("seed", 0)))
        report = evaluate("uodf", gep.fused, shape, gep.grid, surface_samples=samples, gep=gep,
                          runtime_s=runtime, tau=tau)
        report.to_json(report_path)
    else:
        summary = {"method": "uodf", "resolution": gep.grid.resolution, "n_points": gep.n_fused,
                   "n_pre_fusion": gep.n_pre, "runtime_s": runtime, "tau": tau}
        report_path.write_text(json.dumps(summary, indent=2, sort_keys=True))
    written.append(report_path)
    return written


def cmd_baseline(cfg: dict, inputs: dict) -> list[Path]:
    from .baseline import mc_gep_from_sdf, udf_gradient_sign_gep
    from .gep import export_points

    if not cfg.get("field"):
        raise ConfigError("baseline needs --field (an sdf or udf grid file)")
    fld = _read_field(cfg["field"], inputs)
    if not isinstance(fld, ScalarFieldGrid):
        raise InputError(f"{cfg['field']} is a directional field; baselines need a scalar grid")
    pts = mc_gep_from_sdf(fld) if fld.kind == "sdf" else udf_gradient_sign_gep(fld)
    out = Path(cfg["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    export_points(pts, out)
    return [out]


def cmd_eval(cfg: dict, inputs: dict) -> list[Path]:
    from .gep import read_points
    from .metrics import evaluate, surface_reference

    if not cfg.get("points"):
        raise ConfigError("eval needs --points")
    path = _existing(cfg["points"])
    inputs[str(path)] = file_digest(path)
    try:
        pts, _ = read_points(path)
    except ValueError as exc:
        raise InputError(f"{path}: {exc}") from None
    shape = _shape(cfg, inputs)
    grid = _grid(cfg["resolution"])
    samples = surface_reference(shape, int(cfg.get("surface_samples", 100_000)), int(cfg.get("seed", 0)))
    report = evaluate(cfg.get("method") or path.stem, pts.astype(np.float64), shape, grid,
                      surface_samples=samples)
    out = Path(cfg["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    report.to_json(out)
    return [out]


def cmd_bench(cfg: dict, inputs: dict) -> list[Path]:
    from .metrics import METHODS, resolution_sweep, write_csv

    methods = _str_list(cfg.get("methods") or ",".join(METHODS))
    resolutions = _int_list(cfg.get("resolutions") or [])
    unknown = [m for m in methods if m not in METHODS]
    if unknown:
        raise ConfigError(f"unknown method(s) {unknown}; expected from {', '.join(METHODS)}")
    if not methods or not resolutions:
        raise ConfigError("bench needs at least one method and one resolution")
    for R in resolutions:
        _grid(R)
    shape = _shape(cfg, inputs)
    rows = resolution_sweep(shape, methods, resolutions, cfg.get("tau"))
    out = Path(cfg["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    write_csv(rows, out)
    for r in rows:
        print(f"{r['method']:>20s} R={r['resolution']:<4d} cd_gep x1e5 = {r['cd_gep_1e5']:.6g}"
              f"  ({r['n_points']} points, {r['runtime_s']:.2f}s)")
    return [out]


COMMANDS = {
    "gt": cmd_gt, "fit": cmd_fit, "predict": cmd_predict, "recon": cmd_recon,
    "baseline": cmd_baseline, "eval": cmd_eval, "bench": cmd_bench,
}

DEFAULTS = {
    "gt": {"resolution": 65, "normalize": True, "sdf": False},
    "fit": {"out": "model.bin"},
    "predict": {"resolution": 65, "threshold": 0.5},
    "recon": {"threshold": 0.5, "seed": 0},
    "baseline": {},
    "eval": {"seed": 0},
    "bench": {"resolutions": "33,65,129,257"},
}


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def _shape_args(p: argparse.ArgumentParser) -> None:
    g = p.add_mutually_exclusive_group()
    g.add_argument("--mesh", help="OBJ or PLY mesh")
    g.add_argument("--fixture", help=f"built-in shape: {', '.join(FIXTURES)}")
    p.add_argument("--no-normalize", dest="normalize", action="store_const", const=False, default=None,
                   help="use mesh coordinates as-is instead of fitting them into the unit cube")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="uodf", description=__doc__.split("\n")[0])
    ap.add_argument("--version", action="version", version=__version__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def add(name, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", help="JSON file with option values; flags override it")
        p.add_argument("--manifest", help="manifest path (default next to the output)")
        return p

    p = add("gt", "exact directional fields plus UDF (and SDF) grids")
    _shape_args(p)
    p.add_argument("-r", "--resolution", type=int)
    p.add_argument("--sdf", action="store_const", const=True, default=None,
                   help="also write a signed grid (watertight inputs only)")
    p.add_argument("-o", "--out", help="output directory")

    p = add("fit", "train the networks for one direction")
    _shape_args(p)
    p.add_argument("--direction", choices=["lr", "fb", "ud", "LR", "FB", "UD"])
    p.add_argument("--epochs", type=int)
    p.add_argument("--lattice", type=int)
    p.add_argument("--points-per-ray", dest="points_per_ray", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("-o", "--out", help="checkpoint path (a .json sidecar is written next to it)")

    p = add("predict", "evaluate trained checkpoints on a grid")
    p.add_argument("--checkpoints", nargs=3, metavar="CKPT")
    p.add_argument("-r", "--resolution", type=int)
    p.add_argument("--threshold", type=float)
    p.add_argument("-o", "--out", help="output directory")

    p = add("recon", "edge points from three directional fields or checkpoints")
    _shape_args(p)
    src = p.add_mutually_exclusive_group()
    src.add_argument("--fields", nargs=3, metavar="FIELD")
    src.add_argument("--checkpoints", nargs=3, metavar="CKPT")
    p.add_argument("-r", "--resolution", type=int, help="grid for --checkpoints")
    p.add_argument("--threshold", type=float)
    p.add_argument("--tau", type=float)
    p.add_argument("--min-support", dest="min_support", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--report", help="report JSON (default: <out>.report.json)")
    p.add_argument("-o", "--out", help="points file (.ply or .xyz)")

    p = add("baseline", "edge points from an SDF or UDF grid by linear interpolation")
    p.add_argument("--field", help="sdf.sclr or udf.sclr")
    p.add_argument("-o", "--out", help="points file (.ply or .xyz)")

    p = add("eval", "score a point set against a shape")
    _shape_args(p)
    p.add_argument("--points")
    p.add_argument("-r", "--resolution", type=int)
    p.add_argument("--method")
    p.add_argument("--seed", type=int)
    p.add_argument("-o", "--out", help="report JSON")

    p = add("bench", "resolution sweep of exact-input methods")
    _shape_args(p)
    p.add_argument("--methods", help="comma-separated")
    p.add_argument("--resolutions", help="comma-separated, e.g. 33,65,129")
    p.add_argument("--tau", type=float)
    p.add_argument("-o", "--out", help="CSV path")
    return ap


def merge_config(command: str, args: argparse.Namespace) -> dict:
    cfg = dict(DEFAULTS[command])
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise ConfigError(f"no such config file: {path}")
        try:
            loaded = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
        if not isinstance(loaded, dict):
            raise ConfigError(f"{path}: expected a JSON object")
        cfg.update(loaded)
    skip = {"command", "config", "verbose"}
    cfg.update({k: v for k, v in vars(args).items() if k not in skip and v is not None})
    if not cfg.get("out"):
        raise ConfigError(f"{command} needs --out")
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    from .neural import TrainingDiverged

    try:
        _threads_from_env()
        cfg = merge_config(args.command, args)
        inputs: dict = {}
        t0 = time.perf_counter()
        written = COMMANDS[args.command](cfg, inputs)
        wall = time.perf_counter() - t0
        write_manifest(_manifest_path(cfg, Path(cfg["out"])), args.command, cfg, inputs, written, wall)
        return EXIT_OK
    except ConfigError as exc:
        print(f"uodf: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (InputError, MeshError, FieldFormatError, FileNotFoundError) as exc:
        print(f"uodf: input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except TrainingDiverged as exc:
        print(f"uodf: {exc}; last finite weights were saved", file=sys.stderr)
        return EXIT_INTERNAL
    except Exception as exc:  # noqa: BLE001
        log.debug("internal error", exc_info=True)
        print(f"uodf: internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
