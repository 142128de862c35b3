"""File formats: structured text for configs and scene data, little-endian
binaries for checkpoints, prior packs, and float images.

Every writer is deterministic (sorted JSON keys, fixed separators, declared
array order) so write -> read -> write is byte-identical.
"""

from __future__ import annotations

import csv
import io
import json
import struct
from pathlib import Path

import numpy as np
from PIL import Image

from .config import (
    FieldConfig,
    LossConfig,
    RegionProfile,
    RenderSettings,
    TrainConfig,
    config_from_dict,
    config_to_dict,
)
from .fields import HashGridBand, MultiScaleHashField, OrthoFrame, PriorPack
from .gaussians import GaussianCloud
from .regions import LABEL_CODES, LABEL_NAMES, CanonicalMesh
from .render import Camera
from .skeleton import PoseFrame, Rig


class DataFormatError(ValueError):
    pass


_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_CODE_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


def _dump_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ": "), indent=1) + "\n"


def write_json(path, obj):
    Path(path).write_text(_dump_json(obj), encoding="utf-8")


def read_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise DataFormatError(f"{path}: invalid JSON ({e})") from e


def _expect(data: dict, fmt: str, path):
    if data.get("format") != fmt:
        raise DataFormatError(f"{path}: expected format {fmt!r}, got {data.get('format')!r}")


# --------------------------------------------------------------------------
# meshes and rigs
# --------------------------------------------------------------------------

def write_obj(path, mesh: CanonicalMesh):
    lines = []
    for v in mesh.vertices:
        lines.append(f"v {float(v[0])!r} {float(v[1])!r} {float(v[2])!r}")
    for f in mesh.faces:
        lines.append(f"f {f[0] + 1} {f[1] + 1} {f[2] + 1}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_obj(path):
    """OBJ subset: v and f lines; returns (vertices, faces)."""
    verts = []
    faces = []
    for ln, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        parts = line.split()
        if not parts or parts[0] in ("#", "vn", "vt", "s", "o", "g", "usemtl", "mtllib"):
            continue
        if parts[0] == "v":
            if len(parts) < 4:
                raise DataFormatError(f"{path}:{ln}: malformed vertex line")
            verts.append([float(parts[1]), float(parts[2]), float(parts[3])])
        elif parts[0] == "f":
            if len(parts) != 4:
                raise DataFormatError(f"{path}:{ln}: only triangle faces are supported")
            faces.append([int(p.split("/")[0]) - 1 for p in parts[1:4]])
    return np.asarray(verts, dtype=np.float64), np.asarray(faces, dtype=np.int64).reshape(-1, 3)


def write_skin_sidecar(path, mesh: CanonicalMesh):
    write_json(
        path,
        {
            "format": "gsavatar-skin",
            "version": 1,
            "n_joints": mesh.n_joints,
            "weights": [[float(x) for x in row] for row in mesh.skin_weights],
            "labels": [LABEL_NAMES[int(l)] for l in mesh.labels],
        },
    )


def read_mesh(obj_path, skin_path) -> CanonicalMesh:
    verts, faces = read_obj(obj_path)
    data = read_json(skin_path)
    _expect(data, "gsavatar-skin", skin_path)
    weights = np.asarray(data["weights"], dtype=np.float64)
    try:
        labels = np.asarray([LABEL_CODES[l] for l in data["labels"]], dtype=np.uint8)
    except KeyError as e:
        raise DataFormatError(f"{skin_path}: unknown region label {e}") from e
    if weights.shape[0] != verts.shape[0] or labels.shape[0] != verts.shape[0]:
        raise DataFormatError(f"{skin_path}: sidecar rows do not match vertex count")
    return CanonicalMesh(verts, faces, weights, labels)


def write_rig(path, rig: Rig):
    write_json(
        path,
        {
            "format": "gsavatar-rig",
            "version": 1,
            "euler_order": rig.euler_order,
            "n_joints": rig.n_joints,
            "parents": [int(p) for p in rig.parents],
            "rest_positions": [[float(x) for x in row] for row in rig.rest_positions],
            "names": list(rig.names),
        },
    )


def read_rig(path) -> Rig:
    data = read_json(path)
    _expect(data, "gsavatar-rig", path)
    rig = Rig(
        parents=np.asarray(data["parents"], dtype=np.int64),
        rest_positions=np.asarray(data["rest_positions"], dtype=np.float64),
        names=tuple(data.get("names", ())),
        euler_order=data.get("euler_order", "xyz"),
    )
    if rig.n_joints != data.get("n_joints", rig.n_joints):
        raise DataFormatError(f"{path}: n_joints mismatch")
    return rig


def write_poses(path, poses: list):
    write_json(
        path,
        {
            "format": "gsavatar-poses",
            "version": 1,
            "frames": [
                {
                    "t": float(p.t),
                    "euler": [[float(x) for x in row] for row in p.euler],
                    "translation": [float(x) for x in p.translation],
                }
                for p in poses
            ],
        },
    )


def read_poses(path) -> list:
    data = read_json(path)
    _expect(data, "gsavatar-poses", path)
    return [
        PoseFrame(
            t=f["t"],
            euler=np.asarray(f["euler"], dtype=np.float64),
            translation=np.asarray(f["translation"], dtype=np.float64),
        )
        for f in data["frames"]
    ]


def camera_to_dict(cam: Camera) -> dict:
    return {
        "model": cam.model,
        "fx": cam.fx,
        "fy": cam.fy,
        "cx": cam.cx,
        "cy": cam.cy,
        "width": cam.width,
        "height": cam.height,
        "W": [[float(x) for x in row] for row in cam.W],
    }


def camera_from_dict(d: dict) -> Camera:
    return Camera(
        W=np.asarray(d["W"], dtype=np.float64),
        fx=d["fx"],
        fy=d["fy"],
        cx=d["cx"],
        cy=d["cy"],
        width=d["width"],
        height=d["height"],
        model=d["model"],
    )


# --------------------------------------------------------------------------
# images
# --------------------------------------------------------------------------

def write_float_image(path, img: np.ndarray):
    """Planar little-endian float32 with a one-line text header."""
    img = np.asarray(img)
    if img.ndim == 2:
        img = img[..., np.newaxis]
    h, w, c = img.shape
    header = f"FIMG 1\n{h} {w} {c}\n".encode("ascii")
    data = np.ascontiguousarray(img.transpose(2, 0, 1)).astype("<f4").tobytes()
    Path(path).write_bytes(header + data)


def read_float_image(path) -> np.ndarray:
    blob = Path(path).read_bytes()
    nl1 = blob.index(b"\n")
    nl2 = blob.index(b"\n", nl1 + 1)
    if blob[:nl1] != b"FIMG 1":
        raise DataFormatError(f"{path}: not a float image")
    h, w, c = (int(x) for x in blob[nl1 + 1 : nl2].split())
    data = np.frombuffer(blob[nl2 + 1 :], dtype="<f4")
    if data.size != h * w * c:
        raise DataFormatError(f"{path}: truncated float image")
    img = data.reshape(c, h, w).transpose(1, 2, 0).astype(np.float32)
    return img[..., 0] if c == 1 else img


def write_png(path, img: np.ndarray, gamma: float = 2.2):
    img = np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0)
    if gamma != 1.0:
        img = img ** (1.0 / gamma)
    quant = np.round(img * 255.0).astype(np.uint8)
    Image.fromarray(quant, mode="RGB" if quant.ndim == 3 else "L").save(path, format="PNG")


# --------------------------------------------------------------------------
# binary checkpoints
# --------------------------------------------------------------------------

def _pack_array(buf: io.BytesIO, arr: np.ndarray):
    arr = np.asarray(arr)
    if arr.dtype == np.uint8:
        code = 2
        data = arr.astype("<u1")
    elif arr.dtype.kind == "f":
        code = _DTYPE_CODES[arr.dtype]
        data = arr.astype("<f4" if code == 0 else "<f8")
    else:
        code = 3
        data = arr.astype("<i8")
    buf.write(struct.pack("<BB", code, arr.ndim))
    for d in arr.shape:
        buf.write(struct.pack("<q", d))
    buf.write(np.ascontiguousarray(data).tobytes())


def _unpack_array(buf: io.BytesIO) -> np.ndarray:
    code, ndim = struct.unpack("<BB", buf.read(2))
    shape = tuple(struct.unpack("<q", buf.read(8))[0] for _ in range(ndim))
    if code == 2:
        dt = np.dtype("<u1")
        out_dt = np.uint8
    elif code == 3:
        dt = np.dtype("<i8")
        out_dt = np.int64
    else:
        dt = _CODE_DTYPES[code]
        out_dt = np.float32 if code == 0 else np.float64
    n = int(np.prod(shape)) if shape else 1
    data = np.frombuffer(buf.read(n * dt.itemsize), dtype=dt)
    return data.reshape(shape).astype(out_dt)


FIELD_MAGIC = b"GAHF"
CKPT_MAGIC = b"GAVT"
PRIOR_MAGIC = b"GPRI"


def field_to_bytes(field: MultiScaleHashField) -> bytes:
    buf = io.BytesIO()
    buf.write(FIELD_MAGIC)
    buf.write(struct.pack("<I", 1))
    header = _dump_json(
        {
            "config": config_to_dict(field.cfg),
            "bbox_min": [float(x) for x in field.bbox_min],
            "bbox_max": [float(x) for x in field.bbox_max],
            "t_range": [float(field.t_range[0]), float(field.t_range[1])],
            "dtype": _DTYPE_CODES[np.dtype(field.dtype)],
        }
    ).encode("utf-8")
    buf.write(struct.pack("<I", len(header)))
    buf.write(header)
    for band in (field.low, field.high):
        if band is None:
            continue
        for tab in band.tables:
            _pack_array(buf, tab)
    for p in field.decoder:
        _pack_array(buf, p)
    for p in field.ao_decoder:
        _pack_array(buf, p)
    return buf.getvalue()


def field_from_bytes(blob: bytes) -> MultiScaleHashField:
    buf = io.BytesIO(blob)
    if buf.read(4) != FIELD_MAGIC:
        raise DataFormatError("not a field checkpoint")
    (version,) = struct.unpack("<I", buf.read(4))
    if version != 1:
        raise DataFormatError(f"unsupported field checkpoint version {version}")
    (hlen,) = struct.unpack("<I", buf.read(4))
    header = json.loads(buf.read(hlen).decode("utf-8"))
    cfg = config_from_dict(FieldConfig, header["config"])
    dtype = np.float32 if header["dtype"] == 0 else np.float64

    def read_band(band_cfg):
        res = band_cfg.resolutions()
        tables = [_unpack_array(buf).astype(dtype) for _ in res]
        return HashGridBand(np.asarray(res), tables, band_cfg.feature_dim, band_cfg.log2_table_size)

    low = read_band(cfg.low_band)
    high = read_band(cfg.high_band) if cfg.use_multiscale else None
    decoder = [_unpack_array(buf).astype(dtype) for _ in range(6)]
    ao = [_unpack_array(buf).astype(dtype) for _ in range(6)]
    return MultiScaleHashField(
        cfg,
        np.asarray(header["bbox_min"]),
        np.asarray(header["bbox_max"]),
        low,
        high,
        decoder,
        ao,
        tuple(header["t_range"]),
    )


def write_field(path, field: MultiScaleHashField):
    Path(path).write_bytes(field_to_bytes(field))


def read_field(path) -> MultiScaleHashField:
    return field_from_bytes(Path(path).read_bytes())


def write_checkpoint(path, cloud: GaussianCloud, field: MultiScaleHashField, rig: Rig, manifest: dict):
    """Avatar checkpoint: manifest + embedded field + cloud arrays + rig."""
    buf = io.BytesIO()
    buf.write(CKPT_MAGIC)
    buf.write(struct.pack("<I", 1))
    mblob = _dump_json(manifest).encode("utf-8")
    buf.write(struct.pack("<I", len(mblob)))
    buf.write(mblob)
    fblob = field_to_bytes(field)
    buf.write(struct.pack("<Q", len(fblob)))
    buf.write(fblob)
    for arr in (
        cloud.x0, cloud.quat, cloud.log_scale, cloud.opacity_raw, cloud.sh,
        cloud.weights, cloud.tau, cloud.labels,
    ):
        _pack_array(buf, arr)
    _pack_array(buf, rig.parents)
    _pack_array(buf, rig.rest_positions)
    rig_names = _dump_json(list(rig.names)).encode("utf-8")
    buf.write(struct.pack("<I", len(rig_names)))
    buf.write(rig_names)
    Path(path).write_bytes(buf.getvalue())


def read_checkpoint(path):
    """Returns (cloud, field, rig, manifest)."""
    blob = Path(path).read_bytes()
    buf = io.BytesIO(blob)
    if buf.read(4) != CKPT_MAGIC:
        raise DataFormatError(f"{path}: not an avatar checkpoint")
    (version,) = struct.unpack("<I", buf.read(4))
    if version != 1:
        raise DataFormatError(f"{path}: unsupported checkpoint version {version}")
    (mlen,) = struct.unpack("<I", buf.read(4))
    manifest = json.loads(buf.read(mlen).decode("utf-8"))
    (flen,) = struct.unpack("<Q", buf.read(8))
    field = field_from_bytes(buf.read(flen))
    dtype = field.dtype
    arrs = [_unpack_array(buf) for _ in range(8)]
    cloud = GaussianCloud(
        x0=arrs[0].astype(dtype), quat=arrs[1].astype(dtype),
        log_scale=arrs[2].astype(dtype), opacity_raw=arrs[3].astype(dtype),
        sh=arrs[4].astype(dtype), weights=arrs[5].astype(dtype),
        tau=arrs[6].astype(dtype), labels=arrs[7],
    )
    parents = _unpack_array(buf)
    rest = _unpack_array(buf)
    (nlen,) = struct.unpack("<I", buf.read(4))
    names = tuple(json.loads(buf.read(nlen).decode("utf-8")))
    rig = Rig(parents=parents, rest_positions=rest, names=names)
    return cloud, field, rig, manifest


def write_priors(path, pack: PriorPack):
    buf = io.BytesIO()
    buf.write(PRIOR_MAGIC)
    buf.write(struct.pack("<I", 1))
    for fr in pack.frames:
        for arr in (fr.origin, fr.axis_u, fr.axis_v, fr.axis_w, fr.extent):
            buf.write(np.asarray(arr, dtype="<f8").tobytes())
    _pack_array(buf, pack.depth_maps)
    _pack_array(buf, pack.depth_masks.astype(np.uint8))
    _pack_array(buf, pack.normal_maps)
    _pack_array(buf, pack.normal_masks.astype(np.uint8))
    Path(path).write_bytes(buf.getvalue())


def read_priors(path) -> PriorPack:
    buf = io.BytesIO(Path(path).read_bytes())
    if buf.read(4) != PRIOR_MAGIC:
        raise DataFormatError(f"{path}: not a prior pack")
    (version,) = struct.unpack("<I", buf.read(4))
    if version != 1:
        raise DataFormatError(f"{path}: unsupported prior pack version {version}")
    frames = []
    for _ in range(4):
        vals = np.frombuffer(buf.read(8 * 14), dtype="<f8")
        frames.append(
            OrthoFrame(
                origin=vals[0:3].copy(), axis_u=vals[3:6].copy(), axis_v=vals[6:9].copy(),
                axis_w=vals[9:12].copy(), extent=vals[12:14].copy(),
            )
        )
    depth_maps = _unpack_array(buf)
    depth_masks = _unpack_array(buf).astype(bool)
    normal_maps = _unpack_array(buf)
    normal_masks = _unpack_array(buf).astype(bool)
    return PriorPack(depth_maps, depth_masks, normal_maps, normal_masks, tuple(frames))


# --------------------------------------------------------------------------
# tables
# --------------------------------------------------------------------------

def write_csv(path, header: list, rows: list):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow(row)


def read_csv(path):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        rows = list(reader)
    return rows[0], rows[1:]
