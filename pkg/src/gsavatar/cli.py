"""Command-line driver: synth, init, train, render, eval, ablate.

All state flows through a JSON project config; `--seed`, `--threads`,
`--double`, and the ablation switches override it per run.  Exit codes:
0 success, 2 config error, 3 data error, 4 numeric divergence; errors print
one structured JSON line on stderr.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import sys
from dataclasses import dataclass, field as dc_field, replace
from pathlib import Path

import numpy as np

from . import formats
from .config import (
    FieldConfig,
    LossConfig,
    RegionProfile,
    RenderSettings,
    TrainConfig,
    config_from_dict,
    config_hash,
    config_to_dict,
)
from .fields import MultiScaleHashField
from .formats import DataFormatError
from .gaussians import ShapeError
from .regions import LABEL_NAMES, initialize_cloud
from .render import RenderTarget, render_avatar, render_priors
from .synthetic import (
    SynthConfig,
    bake_ground_truth,
    camera_ring,
    capsule_mesh,
    capsule_rig,
    dimming_factor,
    pose_script,
    render_ground_truth,
)
from .threads import set_num_threads
from .training import (
    DivergenceError,
    TrainFrame,
    evaluate,
    psnr,
    ssim,
    train,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class PathConfig:
    dataset_dir: str = "dataset"
    output_dir: str = "out"
    mesh: str = "mesh.obj"
    skin: str = "skin.json"
    rig: str = "rig.json"
    poses: str = "poses.json"
    priors: str = "priors.gpri"
    manifest: str = "manifest.json"
    init_checkpoint: str = ""


@dataclass(frozen=True)
class ProjectConfig:
    paths: PathConfig = dc_field(default_factory=PathConfig)
    region: RegionProfile = dc_field(default_factory=RegionProfile)
    field: FieldConfig = dc_field(default_factory=FieldConfig)
    synth: SynthConfig = dc_field(default_factory=SynthConfig)
    train: TrainConfig = dc_field(default_factory=TrainConfig)
    loss: LossConfig = dc_field(default_factory=LossConfig)
    render: RenderSettings = dc_field(default_factory=RenderSettings)
    png_gamma: float = 2.2
    seed: int = 0


_NESTED = {
    "paths": PathConfig,
    "region": RegionProfile,
    "field": FieldConfig,
    "synth": SynthConfig,
    "train": TrainConfig,
    "loss": LossConfig,
    "render": RenderSettings,
}


def project_to_dict(cfg: ProjectConfig) -> dict:
    out = {"format": "gsavatar-project", "version": 1}
    out.update(config_to_dict(cfg))
    return out


def project_from_dict(data: dict) -> ProjectConfig:
    kwargs = {}
    for f in dataclasses.fields(ProjectConfig):
        if f.name not in data:
            continue
        if f.name in _NESTED:
            kwargs[f.name] = config_from_dict(_NESTED[f.name], data[f.name])
        else:
            kwargs[f.name] = data[f.name]
    return ProjectConfig(**kwargs)


def write_project(path, cfg: ProjectConfig):
    formats.write_json(path, project_to_dict(cfg))


def read_project(path) -> ProjectConfig:
    data = formats.read_json(path)
    if data.get("format") != "gsavatar-project":
        raise ConfigError(f"{path}: not a project config")
    try:
        return project_from_dict(data)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{path}: {e}") from e


def _apply_master_seed(cfg: ProjectConfig, seed: int) -> ProjectConfig:
    return replace(
        cfg,
        seed=seed,
        region=replace(cfg.region, seed=seed),
        synth=replace(cfg.synth, seed=seed),
        train=replace(cfg.train, seed=seed),
    )


def _apply_flags(cfg: ProjectConfig, args) -> ProjectConfig:
    if args.seed is not None:
        cfg = _apply_master_seed(cfg, args.seed)
    else:
        cfg = _apply_master_seed(cfg, cfg.seed)
    fargs = {}
    if args.no_hash_sh:
        fargs["use_hash_sh"] = False
    if args.no_hash_vd:
        fargs["use_hash_vd"] = False
    if args.no_depth:
        fargs["use_depth_prior"] = False
    if args.no_normals:
        fargs["use_normal_prior"] = False
    if args.no_multiscale:
        fargs["use_multiscale"] = False
    if fargs:
        cfg = replace(cfg, field=replace(cfg.field, **fargs))
    targs = {}
    if args.no_ao:
        targs["ao_enabled"] = False
    if args.double:
        targs["precision"] = "f64"
    if targs:
        cfg = replace(cfg, train=replace(cfg.train, **targs))
    return cfg


# --------------------------------------------------------------------------
# dataset plumbing
# --------------------------------------------------------------------------

@dataclass
class Dataset:
    mesh: object
    rig: object
    poses: list
    pack: object
    cameras: list
    train_cameras: list
    test_cameras: list
    target: RenderTarget
    manifest: dict
    dataset_dir: Path


def _dataset_paths(cfg: ProjectConfig, base: Path) -> dict:
    droot = (base / cfg.paths.dataset_dir).resolve()
    return {
        "root": droot,
        "mesh": droot / cfg.paths.mesh,
        "skin": droot / cfg.paths.skin,
        "rig": droot / cfg.paths.rig,
        "poses": droot / cfg.paths.poses,
        "priors": droot / cfg.paths.priors,
        "manifest": droot / cfg.paths.manifest,
    }


def load_dataset(cfg: ProjectConfig, base: Path) -> Dataset:
    p = _dataset_paths(cfg, base)
    for key in ("mesh", "skin", "rig", "poses", "priors", "manifest"):
        if not p[key].exists():
            raise FileNotFoundError(f"dataset file missing: {p[key]}")
    mesh = formats.read_mesh(p["mesh"], p["skin"])
    rig = formats.read_rig(p["rig"])
    poses = formats.read_poses(p["poses"])
    pack = formats.read_priors(p["priors"])
    manifest = formats.read_json(p["manifest"])
    cameras = [formats.camera_from_dict(c) for c in manifest["cameras"]]
    target = RenderTarget(
        height=manifest["image"]["height"],
        width=manifest["image"]["width"],
        background=np.asarray(manifest["background"]),
    )
    return Dataset(
        mesh=mesh,
        rig=rig,
        poses=poses,
        pack=pack,
        cameras=cameras,
        train_cameras=manifest["train_cameras"],
        test_cameras=manifest["test_cameras"],
        target=target,
        manifest=manifest,
        dataset_dir=p["root"],
    )


def frame_filename(cam_idx: int, pose_idx: int) -> str:
    return f"frames/c{cam_idx:02d}_p{pose_idx:03d}.fimg"


def load_frames(ds: Dataset, camera_indices: list) -> list:
    frames = []
    for ci in camera_indices:
        for pi, pose in enumerate(ds.poses):
            path = ds.dataset_dir / frame_filename(ci, pi)
            if not path.exists():
                raise FileNotFoundError(f"missing target image {path}")
            frames.append(TrainFrame(pose=pose, cam=ds.cameras[ci], image=formats.read_float_image(path)))
    return frames


def dataset_hash(droot: Path, files: list) -> str:
    h = hashlib.sha256()
    for rel in sorted(files):
        h.update(rel.encode("utf-8"))
        h.update((droot / rel).read_bytes())
    return h.hexdigest()


def _field_bbox(mesh, field_cfg: FieldConfig):
    lo, hi = mesh.bounds(margin=0.05)
    pad = field_cfg.max_offset
    return lo - pad, hi + pad


def build_initial_model(cfg: ProjectConfig, ds: Dataset, dtype):
    cloud = initialize_cloud(ds.mesh, cfg.region, n_joints=ds.rig.n_joints, sh_degree=cfg.field.sh_degree)
    lo, hi = _field_bbox(ds.mesh, cfg.field)
    t_range = tuple(ds.manifest["t_range"])
    field = MultiScaleHashField.create(cfg.field, lo, hi, seed=cfg.seed, t_range=t_range, dtype=dtype)
    return cloud.astype(dtype), field


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------

def cmd_synth(cfg: ProjectConfig, base: Path, args) -> int:
    s = cfg.synth
    out = (base / cfg.paths.dataset_dir).resolve()
    (out / "frames").mkdir(parents=True, exist_ok=True)
    mesh = capsule_mesh(s)
    rig = capsule_rig(s)
    poses = pose_script(s)
    cams, train_idx, test_idx = camera_ring(s)
    gt_cloud = bake_ground_truth(mesh, cfg.region, s)
    pack = render_priors(mesh, resolution=s.prior_resolution)
    target = RenderTarget(height=s.image_size, width=s.image_size, background=np.asarray(s.background))
    settings = cfg.render

    files = []
    for ci, cam in enumerate(cams):
        for pi, pose in enumerate(poses):
            img = render_ground_truth(
                gt_cloud, rig, pose, cam, target, settings, dim=dimming_factor(pose.t, s)
            )
            rel = frame_filename(ci, pi)
            formats.write_float_image(out / rel, img.astype(np.float32))
            files.append(rel)

    formats.write_obj(out / cfg.paths.mesh, mesh)
    formats.write_skin_sidecar(out / cfg.paths.skin, mesh)
    formats.write_rig(out / cfg.paths.rig, rig)
    formats.write_poses(out / cfg.paths.poses, poses)
    formats.write_priors(out / cfg.paths.priors, pack)
    files += [cfg.paths.mesh, cfg.paths.skin, cfg.paths.rig, cfg.paths.poses, cfg.paths.priors]

    manifest = {
        "format": "gsavatar-dataset",
        "version": 1,
        "seed": cfg.seed,
        "cameras": [formats.camera_to_dict(c) for c in cams],
        "train_cameras": train_idx,
        "test_cameras": test_idx,
        "n_poses": len(poses),
        "t_range": [poses[0].t, poses[-1].t] if len(poses) > 1 else [0.0, 1.0],
        "background": [float(b) for b in s.background],
        "image": {"height": s.image_size, "width": s.image_size},
        "dimming": s.dimming,
        "dataset_hash": dataset_hash(out, files),
    }
    formats.write_json(out / cfg.paths.manifest, manifest)
    write_project(out / "project.json", cfg)
    print(f"dataset written to {out}: {len(cams)} cameras x {len(poses)} poses, "
          f"{len(mesh.vertices)} vertices, hash {manifest['dataset_hash'][:12]}")
    return EXIT_OK


def cmd_init(cfg: ProjectConfig, base: Path, args) -> int:
    ds = load_dataset(cfg, base)
    dtype = np.float64 if cfg.train.precision == "f64" else np.float32
    cloud, field = build_initial_model(cfg, ds, dtype)
    outdir = (base / cfg.paths.output_dir).resolve()
    outdir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "stage": "init",
        "config_hash": config_hash(cfg),
        "seed": cfg.seed,
        "n_primitives": len(cloud),
    }
    path = outdir / "init.gavt"
    formats.write_checkpoint(path, cloud, field, ds.rig, manifest)
    counts = {name: int(np.sum(cloud.labels == code)) for code, name in LABEL_NAMES.items()}
    for name, cnt in counts.items():
        print(f"{name:6s} {cnt}")
    print(f"total  {len(cloud)}")
    print(f"checkpoint written to {path}")
    return EXIT_OK


def cmd_train(cfg: ProjectConfig, base: Path, args) -> int:
    ds = load_dataset(cfg, base)
    dtype = np.float64 if cfg.train.precision == "f64" else np.float32
    init_path = cfg.paths.init_checkpoint
    if init_path and (base / init_path).exists():
        cloud, field, rig, _ = formats.read_checkpoint(base / init_path)
        cloud = cloud.astype(dtype)
        field = field.astype(dtype)
    else:
        cloud, field = build_initial_model(cfg, ds, dtype)
        rig = ds.rig
    frames = load_frames(ds, ds.train_cameras)
    result = train(
        cloud, field, rig, frames, ds.pack, ds.target, cfg.train, cfg.loss, cfg.render
    )
    outdir = (base / cfg.paths.output_dir).resolve()
    outdir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "stage": "train",
        "config_hash": config_hash(cfg),
        "seed": cfg.seed,
        "dataset_hash": ds.manifest.get("dataset_hash", ""),
        "iterations": len(result.history),
        "status": result.status,
    }
    ck = outdir / "train.gavt"
    formats.write_checkpoint(ck, result.cloud, result.field, result.rig, manifest)
    formats.write_csv(
        outdir / "loss.csv",
        ["iteration", "total", "l1", "dssim"],
        [(it, f"{t:.8f}", f"{l:.8f}", f"{d:.8f}") for it, t, l, d in result.history],
    )
    print(f"checkpoint written to {ck}")
    if result.status != "ok":
        raise DivergenceError(result.status)
    return EXIT_OK


def _load_model(cfg: ProjectConfig, base: Path, args):
    ck = args.checkpoint or str((base / cfg.paths.output_dir) / "train.gavt")
    path = (base / ck) if not Path(ck).is_absolute() else Path(ck)
    if not path.exists():
        raise FileNotFoundError(f"missing checkpoint {path}")
    return formats.read_checkpoint(path)


def cmd_render(cfg: ProjectConfig, base: Path, args) -> int:
    ds = load_dataset(cfg, base)
    cloud, field, rig, _ = _load_model(cfg, base, args)
    cam_indices = _parse_indices(args.cameras, len(ds.cameras)) or ds.test_cameras
    pose_indices = _parse_indices(args.poses, len(ds.poses)) or list(range(len(ds.poses)))
    outdir = (base / cfg.paths.output_dir).resolve() / "renders"
    outdir.mkdir(parents=True, exist_ok=True)
    report_all = {}
    for ci in cam_indices:
        for pi in pose_indices:
            img, report = render_avatar(
                cloud, field, rig, ds.poses[pi], ds.pack, ds.cameras[ci],
                ds.target, cfg.render, ao_frozen=not cfg.train.ao_enabled,
            )
            stem = f"c{ci:02d}_p{pi:03d}"
            formats.write_float_image(outdir / f"{stem}.fimg", img.astype(np.float32))
            formats.write_png(outdir / f"{stem}.png", img, gamma=cfg.png_gamma)
            report_all[stem] = report
    formats.write_json(outdir / "report.json", report_all)
    print(f"{len(report_all)} renders written to {outdir}")
    return EXIT_OK


def cmd_eval(cfg: ProjectConfig, base: Path, args) -> int:
    ds = load_dataset(cfg, base)
    cloud, field, rig, _ = _load_model(cfg, base, args)
    frames = load_frames(ds, ds.test_cameras)
    rows = evaluate(
        cloud, field, rig, frames, ds.pack, ds.target, cfg.render, cfg.loss,
        ao_frozen=not cfg.train.ao_enabled,
    )
    outdir = (base / cfg.paths.output_dir).resolve()
    outdir.mkdir(parents=True, exist_ok=True)
    formats.write_csv(
        outdir / "eval.csv",
        ["frame", "t", "psnr_db", "ssim"],
        [(k, f"{t:.6f}", f"{p:.4f}", f"{s:.6f}") for k, t, p, s in rows],
    )
    mean_psnr = float(np.mean([r[2] for r in rows]))
    mean_ssim = float(np.mean([r[3] for r in rows]))
    print(f"held-out frames: {len(rows)}  mean PSNR {mean_psnr:.2f} dB  mean SSIM {mean_ssim:.4f}")
    return EXIT_OK


ABLATIONS = [
    ("full", {}),
    ("no_hash_sh", {"use_hash_sh": False}),
    ("no_hash_vd", {"use_hash_vd": False}),
    ("no_depth", {"use_depth_prior": False}),
    ("no_normals", {"use_normal_prior": False}),
    ("no_multiscale", {"use_multiscale": False}),
]


def cmd_ablate(cfg: ProjectConfig, base: Path, args) -> int:
    ds = load_dataset(cfg, base)
    dtype = np.float64 if cfg.train.precision == "f64" else np.float32
    frames = load_frames(ds, ds.train_cameras)
    test_frames = load_frames(ds, ds.test_cameras)
    dhash = ds.manifest.get("dataset_hash", "")
    rows = []
    scores = {}
    for name, switches in ABLATIONS:
        vcfg = replace(cfg, field=replace(cfg.field, **switches))
        cloud, field = build_initial_model(vcfg, ds, dtype)
        result = train(
            cloud, field, ds.rig, frames, ds.pack, ds.target, vcfg.train, vcfg.loss, vcfg.render
        )
        if result.status != "ok":
            raise DivergenceError(f"{name}: {result.status}")
        ev = evaluate(
            result.cloud, result.field, result.rig, test_frames, ds.pack, ds.target,
            vcfg.render, vcfg.loss, ao_frozen=not vcfg.train.ao_enabled,
        )
        p = float(np.mean([r[2] for r in ev]))
        s = float(np.mean([r[3] for r in ev]))
        scores[name] = p
        rows.append((name, f"{p:.4f}", f"{s:.6f}", dhash))
        print(f"{name:14s} PSNR {p:7.3f} dB  SSIM {s:.4f}")
    outdir = (base / cfg.paths.output_dir).resolve()
    outdir.mkdir(parents=True, exist_ok=True)
    formats.write_csv(outdir / "ablation.csv", ["variant", "psnr_db", "ssim", "dataset_hash"], rows)
    losers = [n for n in scores if n != "full" and scores[n] > scores["full"]]
    if losers:
        raise DivergenceError(
            f"ablation ordering violated: {', '.join(losers)} beat the full model"
        )
    return EXIT_OK


def _parse_indices(spec: str | None, limit: int) -> list:
    if not spec:
        return []
    try:
        idx = [int(p) for p in spec.split(",") if p.strip() != ""]
    except ValueError as e:
        raise ConfigError(f"bad index list {spec!r}") from e
    for i in idx:
        if not 0 <= i < limit:
            raise ConfigError(f"index {i} out of range (limit {limit})")
    return idx


# --------------------------------------------------------------------------
# entry point
# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="gsavatar",
        description="Region-aware skinned 3D Gaussian avatar pipeline",
    )
    sub = ap.add_subparsers(dest="command", required=True)
    for name, fn in COMMANDS.items():
        p = sub.add_parser(name, help=fn.__doc__)
        p.add_argument("--config", required=True, help="project config JSON")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--threads", type=int, default=1)
        p.add_argument("--double", action="store_true", help="64-bit float pipeline")
        p.add_argument("--no-hash-sh", action="store_true")
        p.add_argument("--no-hash-vd", action="store_true")
        p.add_argument("--no-depth", action="store_true")
        p.add_argument("--no-normals", action="store_true")
        p.add_argument("--no-multiscale", action="store_true")
        p.add_argument("--no-ao", action="store_true")
        if name in ("render", "eval"):
            p.add_argument("--checkpoint", default="", help="avatar checkpoint path")
        if name == "render":
            p.add_argument("--cameras", default="", help="comma-separated camera indices")
            p.add_argument("--poses", default="", help="comma-separated pose indices")
    return ap


def _fail(code: int, name: str, message: str) -> int:
    sys.stderr.write(json.dumps({"error": name, "code": code, "message": message}) + "\n")
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        set_num_threads(args.threads)
        cfg_path = Path(args.config)
        if not cfg_path.exists():
            raise ConfigError(f"config not found: {cfg_path}")
        cfg = _apply_flags(read_project(cfg_path), args)
        base = cfg_path.parent.resolve()
        return COMMANDS[args.command](cfg, base, args)
    except ConfigError as e:
        return _fail(EXIT_CONFIG, "config_error", str(e))
    except (DataFormatError, FileNotFoundError, ShapeError) as e:
        return _fail(EXIT_DATA, "data_error", str(e))
    except DivergenceError as e:
        return _fail(EXIT_NUMERIC, "numeric_error", str(e))
    except ValueError as e:
        return _fail(EXIT_CONFIG, "config_error", str(e))


COMMANDS = {
    "synth": cmd_synth,
    "init": cmd_init,
    "train": cmd_train,
    "render": cmd_render,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
}


if __name__ == "__main__":
    sys.exit(main())
