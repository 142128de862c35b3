"""Procedural test scenes with exact ground truth.

A two-bone capsule stands in for a body at desk scale: the end caps are
labeled as the high-detail regions, skinning weights blend smoothly across
the middle joint, and a procedural texture carries fine detail only on the
caps.  Ground-truth images come exclusively from the brute-force reference
renderer, so end-to-end fitting tests are independent of the tiled path.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np

from .config import RegionProfile, RenderSettings
from .gaussians import SH_C0, GaussianCloud, sh_basis
from .mathutil import inv_sigmoid, look_at
from .regions import FACE, HAND, TORSO, CanonicalMesh, initialize_cloud
from .render import Camera, RenderTarget, Splat2D, project_gaussians, rasterize_reference
from .skeleton import PoseFrame, Rig, blend_linear, bone_transforms


@dataclass(frozen=True)
class SynthConfig:
    """Parameters of the bundled capsule scene."""

    height: float = 0.8
    radius: float = 0.12
    rings: int = 8
    segments: int = 9
    blend_width: float = 0.06
    n_poses: int = 10
    n_train_cameras: int = 6
    image_size: int = 128
    camera_distance: float = 2.1
    focal: float = 230.0
    background: tuple = (0.0, 0.0, 0.0)
    prior_resolution: int = 128
    gt_opacity: float = 0.9
    bend_max: float = 0.7
    yaw_max: float = 0.35
    dimming: float = 0.0  # peak brightness drop over the sequence, 0 disables
    stripe_freq: float = 60.0
    seed: int = 0


def capsule_mesh(cfg: SynthConfig, n_joints: int = 2) -> CanonicalMesh:
    """Capsule along +y: hemispherical caps, labeled face (bottom) / hand (top)."""
    r = cfg.radius
    h = cfg.height
    rings = cfg.rings
    segs = cfg.segments
    ys = []
    radii = []
    n_cap = max(2, rings // 3)
    # bottom cap profile (from just above the pole), cylinder, top cap
    for k in range(1, n_cap + 1):
        th = -0.5 * np.pi + 0.5 * np.pi * k / (n_cap + 1)
        ys.append(r + r * np.sin(th))
        radii.append(r * np.cos(th))
    for k in range(rings):
        ys.append(r + (h - 2 * r) * k / max(rings - 1, 1))
        radii.append(r)
    for k in range(1, n_cap + 1):
        th = 0.5 * np.pi * k / (n_cap + 1)
        ys.append(h - r + r * np.sin(th))
        radii.append(r * np.cos(th))

    verts = [np.array([0.0, 0.0, 0.0])]
    for y, rr in zip(ys, radii):
        for s in range(segs):
            phi = 2 * np.pi * s / segs
            verts.append(np.array([rr * np.sin(phi), y, rr * np.cos(phi)]))
    verts.append(np.array([0.0, h, 0.0]))
    verts = np.asarray(verts)
    nv = verts.shape[0]
    n_rings = len(ys)

    faces = []
    for s in range(segs):
        faces.append([0, 1 + (s + 1) % segs, 1 + s])
    for k in range(n_rings - 1):
        base0 = 1 + k * segs
        base1 = 1 + (k + 1) * segs
        for s in range(segs):
            s2 = (s + 1) % segs
            faces.append([base0 + s, base0 + s2, base1 + s])
            faces.append([base0 + s2, base1 + s2, base1 + s])
    top = nv - 1
    base = 1 + (n_rings - 1) * segs
    for s in range(segs):
        faces.append([base + s, base + (s + 1) % segs, top])
    faces = np.asarray(faces, dtype=np.int64)

    y = verts[:, 1]
    w1 = 1.0 / (1.0 + np.exp(-(y - 0.5 * h) / cfg.blend_width))
    weights = np.stack([1.0 - w1, w1], axis=1)
    if n_joints != 2:
        raise ValueError("capsule scene uses a 2-bone rig")

    labels = np.full(nv, TORSO, dtype=np.uint8)
    labels[y < 1.2 * r] = FACE
    labels[y > h - 1.2 * r] = HAND
    return CanonicalMesh(verts, faces, weights, labels)


def capsule_rig(cfg: SynthConfig) -> Rig:
    return Rig(
        parents=np.array([-1, 0]),
        rest_positions=np.array([[0.0, 0.0, 0.0], [0.0, 0.5 * cfg.height, 0.0]]),
        names=("base", "mid"),
    )


def pose_script(cfg: SynthConfig) -> list:
    """Smooth bend of the middle joint plus a slight root yaw and drift."""
    poses = []
    n = cfg.n_poses
    for p in range(n):
        t = p / max(n - 1, 1)
        bend = cfg.bend_max * np.sin(2 * np.pi * t)
        yaw = cfg.yaw_max * np.sin(2 * np.pi * t + 1.3)
        euler = np.array([[0.0, yaw, 0.0], [0.0, 0.0, bend]])
        trans = np.array([0.03 * np.sin(2 * np.pi * t + 0.4), 0.0, 0.0])
        poses.append(PoseFrame(t=t, euler=euler, translation=trans))
    return poses


def camera_ring(cfg: SynthConfig) -> tuple[list, list, list]:
    """Returns (cameras, train_indices, test_indices).

    Training cameras sit at uniform azimuths; the held-out camera bisects the
    first gap.
    """
    size = cfg.image_size
    center = np.array([0.0, 0.5 * cfg.height, 0.0])
    cams = []
    azimuths = [2 * np.pi * k / cfg.n_train_cameras for k in range(cfg.n_train_cameras)]
    azimuths.append(np.pi / cfg.n_train_cameras)  # test view between two train views
    for az in azimuths:
        eye = center + cfg.camera_distance * np.array([np.sin(az), 0.12, np.cos(az)])
        cams.append(
            Camera(
                W=look_at(eye, center),
                fx=cfg.focal,
                fy=cfg.focal,
                cx=size / 2,
                cy=size / 2,
                width=size,
                height=size,
            )
        )
    train_idx = list(range(cfg.n_train_cameras))
    test_idx = [cfg.n_train_cameras]
    return cams, train_idx, test_idx


def texture_color(points: np.ndarray, labels: np.ndarray, cfg: SynthConfig) -> np.ndarray:
    """Smooth body gradient; high-frequency stripes only on face/hand caps."""
    x, y, z = points[:, 0], points[:, 1], points[:, 2]
    azim = np.arctan2(x, z)
    base = np.stack(
        [
            0.45 + 0.25 * np.sin(2.0 * np.pi * y / cfg.height + 0.3),
            0.45 + 0.25 * np.cos(1.5 * np.pi * y / cfg.height),
            0.5 + 0.2 * np.sin(azim),
        ],
        axis=1,
    )
    detail = labels != TORSO
    stripes = 0.28 * np.sin(cfg.stripe_freq * y) * np.cos(3.0 * azim)
    base[detail] += stripes[detail, np.newaxis] * np.array([1.0, -0.8, 0.6])
    return np.clip(base, 0.04, 0.96)


def bake_ground_truth(
    mesh: CanonicalMesh, profile: RegionProfile, cfg: SynthConfig
) -> GaussianCloud:
    """Cloud with texture colors baked into the DC SH band."""
    cloud = initialize_cloud(mesh, profile)
    rgb = texture_color(cloud.x0, cloud.labels, cfg)
    cloud.sh[:, :, 0] = (rgb - 0.5) / SH_C0
    cloud.opacity_raw[:] = inv_sigmoid(cfg.gt_opacity)
    return cloud


def dimming_factor(t: float, cfg: SynthConfig) -> float:
    """Scripted global dimming over the normalized sequence time."""
    if cfg.dimming <= 0:
        return 1.0
    return 1.0 - cfg.dimming * (0.5 - 0.5 * np.cos(2 * np.pi * t))


def render_ground_truth(
    cloud: GaussianCloud,
    rig: Rig,
    pose: PoseFrame,
    cam: Camera,
    target: RenderTarget,
    settings: RenderSettings,
    dim: float = 1.0,
) -> np.ndarray:
    """Reference render of a baked cloud (no parameter field involved)."""
    B = bone_transforms(rig, pose)
    M = blend_linear(cloud.weights, B)
    x_t = np.einsum("nij,nj->ni", M, cloud.x0) + cloud.weights @ B.translation
    from .gaussians import covariance_from_quat_scale

    cov_t = M @ covariance_from_quat_scale(cloud.quat, cloud.scales()) @ np.swapaxes(M, -1, -2)
    n = len(cloud)
    if cam.model == "perspective":
        v = x_t - cam.origin()
        d_t = v / np.linalg.norm(v, axis=1, keepdims=True)
    else:
        d_t = np.broadcast_to(cam.forward_axis(), (n, 3)).copy()
    det = np.linalg.det(M)
    ok = np.abs(det) > 1e-9
    d_c = d_t.copy()
    if ok.any():
        y = np.linalg.solve(M[ok], d_t[ok][..., np.newaxis])[..., 0]
        d_c[ok] = y / np.linalg.norm(y, axis=1, keepdims=True)
    Y = sh_basis(d_c, cloud.sh_degree)
    rgb = np.maximum(np.einsum("nck,nk->nc", cloud.sh, Y) + 0.5, 0.0)
    color = dim * rgb
    mean2d, cov2d, depth, _radius, idx = project_gaussians(x_t, cov_t, cam, settings)
    splats = Splat2D(
        mean2d=mean2d,
        cov2d=cov2d,
        depth=depth,
        color=color[idx],
        alpha0=cloud.opacities()[idx],
    )
    return rasterize_reference(splats, target, settings)
