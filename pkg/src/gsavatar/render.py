"""Projection and rasterization of posed Gaussians.

`project_gaussians` maps posed covariances to screen-space ellipses with the
EWA affine Jacobian; `rasterize` sorts by depth and composites front to back
per tile, while `rasterize_reference` is the brute-force oracle (per-pixel
blend over every splat, no tiling, no early termination).  `render_avatar`
composes the field queries, skinning, projection, and rasterization, and can
capture every intermediate needed for the analytic backward pass.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np

from . import _kernels
from .config import FieldConfig, RenderSettings
from .fields import (
    MultiScaleHashField,
    OrthoFrame,
    PriorPack,
    decode_residuals,
    mlp_forward,
    temporal_encoding,
)
from .gaussians import (
    GaussianCloud,
    ShapeError,
    covariance_from_quat_scale,
    sh_basis,
)
from .mathutil import sigmoid
from .regions import CanonicalMesh
from .skeleton import BoneTransforms, PoseFrame, Rig, blend_linear, bone_transforms


@dataclass(frozen=True)
class Camera:
    """Pinhole or orthographic camera; ``W`` is the world-to-camera rigid map."""

    W: np.ndarray
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    model: str = "perspective"

    def __post_init__(self):
        W = np.asarray(self.W, dtype=np.float64)
        if W.shape != (4, 4):
            raise ShapeError("W must be 4x4")
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if self.width < 1 or self.height < 1:
            raise ValueError("image dimensions must be >= 1")
        if self.model not in ("perspective", "orthographic"):
            raise ValueError(f"unknown camera model {self.model!r}")
        R = W[:3, :3]
        if np.max(np.abs(R @ R.T - np.eye(3))) > 1e-6:
            raise ValueError("camera rotation must be orthonormal")
        object.__setattr__(self, "W", W)

    @property
    def rotation(self) -> np.ndarray:
        return self.W[:3, :3]

    @property
    def translation(self) -> np.ndarray:
        return self.W[:3, 3]

    def origin(self) -> np.ndarray:
        return -self.rotation.T @ self.translation

    def forward_axis(self) -> np.ndarray:
        return self.rotation[2]


@dataclass(frozen=True)
class RenderTarget:
    """Canvas description: size, background color, and tile layout."""

    height: int
    width: int
    background: np.ndarray = dc_field(default_factory=lambda: np.zeros(3))
    tile_size: int = 16

    def __post_init__(self):
        bg = np.asarray(self.background, dtype=np.float64)
        if bg.shape != (3,):
            raise ShapeError("background must be rgb")
        if not np.all(np.isfinite(bg)):
            raise ValueError("background must be finite")
        if self.height < 1 or self.width < 1 or self.tile_size < 1:
            raise ValueError("invalid render target")
        object.__setattr__(self, "background", bg)


@dataclass
class Splat2D:
    """Projected splats, struct-of-arrays; ``cov2d`` packs (a, b, c)."""

    mean2d: np.ndarray
    cov2d: np.ndarray
    depth: np.ndarray
    color: np.ndarray
    alpha0: np.ndarray

    def __post_init__(self):
        m = self.mean2d.shape[0]
        if (
            self.cov2d.shape != (m, 3)
            or self.depth.shape != (m,)
            or self.color.shape != (m, 3)
            or self.alpha0.shape != (m,)
        ):
            raise ShapeError("inconsistent splat arrays")

    def __len__(self) -> int:
        return self.mean2d.shape[0]

    def conics(self) -> np.ndarray:
        a, b, c = self.cov2d[:, 0], self.cov2d[:, 1], self.cov2d[:, 2]
        det = a * c - b * b
        return np.stack([c / det, -b / det, a / det], axis=1)

    def radii(self, sigma_cutoff: float) -> np.ndarray:
        a, b, c = self.cov2d[:, 0], self.cov2d[:, 1], self.cov2d[:, 2]
        mid = 0.5 * (a + c)
        det = a * c - b * b
        lam_max = mid + np.sqrt(np.maximum(mid * mid - det, 0.0))
        return sigma_cutoff * np.sqrt(np.maximum(lam_max, 0.0))


def project_gaussians(
    x_t: np.ndarray,
    cov_t: np.ndarray,
    cam: Camera,
    settings: RenderSettings = RenderSettings(),
    want_cache: bool = False,
):
    """EWA projection of posed Gaussians onto the image plane.

    Culls splats behind the near plane or whose cutoff ellipse misses the
    image.  Returns (Splat2D-without-color, valid_index) plus a cache for the
    backward pass when requested; color/alpha0 slots are filled by the caller.
    """
    x_t = np.atleast_2d(x_t)
    n = x_t.shape[0]
    dtype = x_t.dtype
    R = cam.rotation.astype(dtype)
    t = cam.translation.astype(dtype)
    xc = x_t @ R.T + t
    front = xc[:, 2] > settings.near_plane

    fx, fy = dtype.type(cam.fx), dtype.type(cam.fy)
    if cam.model == "perspective":
        z = np.where(front, xc[:, 2], 1.0)
        iz = 1.0 / z
        u = fx * xc[:, 0] * iz + cam.cx
        v = fy * xc[:, 1] * iz + cam.cy
        limx = 1.3 * 0.5 * cam.width / cam.fx
        limy = 1.3 * 0.5 * cam.height / cam.fy
        rx = xc[:, 0] * iz
        ry = xc[:, 1] * iz
        inside_x = np.abs(rx) <= limx
        inside_y = np.abs(ry) <= limy
        hx = np.clip(rx, -limx, limx)
        hy = np.clip(ry, -limy, limy)
        J = np.zeros((n, 2, 3), dtype=dtype)
        J[:, 0, 0] = fx * iz
        J[:, 0, 2] = -fx * hx * iz
        J[:, 1, 1] = fy * iz
        J[:, 1, 2] = -fy * hy * iz
    else:
        u = fx * xc[:, 0] + cam.cx
        v = fy * xc[:, 1] + cam.cy
        iz = np.zeros(n, dtype=dtype)
        hx = hy = iz
        inside_x = inside_y = np.ones(n, dtype=bool)
        J = np.zeros((n, 2, 3), dtype=dtype)
        J[:, 0, 0] = fx
        J[:, 1, 1] = fy

    V = np.einsum("ij,njk,lk->nil", R, cov_t, R)
    cov2d_full = np.einsum("nij,njk,nlk->nil", J, V, J)
    a = cov2d_full[:, 0, 0] + settings.lowpass
    b = 0.5 * (cov2d_full[:, 0, 1] + cov2d_full[:, 1, 0])
    c = cov2d_full[:, 1, 1] + settings.lowpass

    mid = 0.5 * (a + c)
    det = a * c - b * b
    lam_max = mid + np.sqrt(np.maximum(mid * mid - det, 0.0))
    radius = settings.sigma_cutoff * np.sqrt(np.maximum(lam_max, 0.0))

    on_screen = (
        (u + radius > 0.0)
        & (u - radius < cam.width)
        & (v + radius > 0.0)
        & (v - radius < cam.height)
    )
    valid = front & on_screen & (det > 0)
    idx = np.flatnonzero(valid)

    mean2d = np.stack([u, v], axis=1)[idx]
    cov2d = np.stack([a, b, c], axis=1)[idx]
    depth = xc[idx, 2]
    rad = radius[idx]
    result = (mean2d, cov2d, depth, rad, idx)
    if not want_cache:
        return result
    cache = dict(
        xc=xc, iz=iz, hx=hx, hy=hy, inside_x=inside_x, inside_y=inside_y,
        J=J, V=V, cam=cam, idx=idx, n=n,
    )
    return result, cache


def project_gaussians_backward(cache, g_mean2d, g_cov2d_full):
    """Backward of :func:`project_gaussians` on the valid subset.

    ``g_cov2d_full`` is the (M,2,2) symmetric gradient on the 2D covariance.
    Returns gradients on the posed centers and covariances for all N inputs
    (zero where culled).
    """
    cam: Camera = cache["cam"]
    idx = cache["idx"]
    n = cache["n"]
    J = cache["J"][idx]
    V = cache["V"][idx]
    dtype = g_mean2d.dtype
    R = cam.rotation.astype(dtype)
    fx, fy = dtype.type(cam.fx), dtype.type(cam.fy)

    G = 0.5 * (g_cov2d_full + np.swapaxes(g_cov2d_full, -1, -2))
    g_V = np.einsum("nji,njk,nkl->nil", J, G, J)
    g_cov_t_valid = np.einsum("ji,njk,kl->nil", R, g_V, R)
    g_J = 2.0 * np.einsum("nij,njk,nkl->nil", G, J, V)

    g_xc = np.zeros((idx.shape[0], 3), dtype=dtype)
    if cam.model == "perspective":
        xc = cache["xc"][idx]
        iz = cache["iz"][idx]
        hx = cache["hx"][idx]
        hy = cache["hy"][idx]
        in_x = cache["inside_x"][idx].astype(dtype)
        in_y = cache["inside_y"][idx].astype(dtype)
        iz2 = iz * iz
        # screen mean
        g_xc[:, 0] += g_mean2d[:, 0] * fx * iz
        g_xc[:, 1] += g_mean2d[:, 1] * fy * iz
        g_xc[:, 2] += -iz2 * (g_mean2d[:, 0] * fx * xc[:, 0] + g_mean2d[:, 1] * fy * xc[:, 1])
        # Jacobian entries J00=fx*iz, J02=-fx*hx*iz, J11=fy*iz, J12=-fy*hy*iz
        g_xc[:, 0] += g_J[:, 0, 2] * (-fx * in_x * iz2)
        g_xc[:, 1] += g_J[:, 1, 2] * (-fy * in_y * iz2)
        g_xc[:, 2] += g_J[:, 0, 0] * (-fx * iz2)
        g_xc[:, 2] += g_J[:, 1, 1] * (-fy * iz2)
        g_xc[:, 2] += g_J[:, 0, 2] * fx * iz2 * (in_x * xc[:, 0] * iz + hx)
        g_xc[:, 2] += g_J[:, 1, 2] * fy * iz2 * (in_y * xc[:, 1] * iz + hy)
    else:
        g_xc[:, 0] += g_mean2d[:, 0] * fx
        g_xc[:, 1] += g_mean2d[:, 1] * fy

    g_x_t = np.zeros((n, 3), dtype=dtype)
    g_cov_t = np.zeros((n, 3, 3), dtype=dtype)
    g_x_t[idx] = g_xc @ R
    g_cov_t[idx] = g_cov_t_valid
    return g_x_t, g_cov_t


def conic_backward(cov2d: np.ndarray, g_conic: np.ndarray) -> np.ndarray:
    """From packed conic gradients to the full 2x2 covariance gradient."""
    a, b, c = cov2d[:, 0], cov2d[:, 1], cov2d[:, 2]
    det = a * c - b * b
    inv = np.empty((cov2d.shape[0], 2, 2), dtype=cov2d.dtype)
    inv[:, 0, 0] = c / det
    inv[:, 0, 1] = -b / det
    inv[:, 1, 0] = -b / det
    inv[:, 1, 1] = a / det
    Gh = np.empty_like(inv)
    Gh[:, 0, 0] = g_conic[:, 0]
    Gh[:, 0, 1] = 0.5 * g_conic[:, 1]
    Gh[:, 1, 0] = 0.5 * g_conic[:, 1]
    Gh[:, 1, 1] = g_conic[:, 2]
    return -np.einsum("nij,njk,nkl->nil", inv, Gh, inv)


def _finite_rows(splats: Splat2D) -> np.ndarray:
    ok = np.isfinite(splats.mean2d).all(axis=1)
    ok &= np.isfinite(splats.cov2d).all(axis=1)
    ok &= np.isfinite(splats.depth)
    ok &= np.isfinite(splats.color).all(axis=1)
    ok &= np.isfinite(splats.alpha0)
    return ok


def rasterize(
    splats: Splat2D,
    target: RenderTarget,
    settings: RenderSettings = RenderSettings(),
    report: dict | None = None,
    want_cache: bool = False,
):
    """Depth-sorted tiled alpha blending; background fills the remainder."""
    dtype = splats.mean2d.dtype
    ok = _finite_rows(splats)
    n_bad = int((~ok).sum())
    order = np.flatnonzero(ok)[np.argsort(splats.depth[ok], kind="stable")]

    means = np.ascontiguousarray(splats.mean2d[order])
    conics = np.ascontiguousarray(splats.conics()[order])
    colors = np.ascontiguousarray(splats.color[order])
    alphas = np.ascontiguousarray(splats.alpha0[order])
    radii = np.ascontiguousarray(splats.radii(settings.sigma_cutoff)[order]).astype(np.float64)

    h, w = target.height, target.width
    offsets, lists = _kernels.bin_splats(
        means.astype(np.float64), radii, h, w, target.tile_size
    )
    img = np.zeros((h, w, 3), dtype=dtype)
    out_T = np.ones((h, w), dtype=dtype)
    out_nvis = np.zeros((h, w), dtype=np.int64)
    bg = target.background.astype(dtype)
    _kernels.raster_forward(
        means,
        conics,
        colors,
        alphas,
        offsets,
        lists,
        h,
        w,
        target.tile_size,
        bg,
        dtype.type(settings.sigma_cutoff**2),
        dtype.type(settings.term_threshold),
        img,
        out_T,
        out_nvis,
    )
    if report is not None:
        report["n_nonfinite_rejected"] = n_bad
        report["n_rasterized"] = int(order.shape[0])
    if not want_cache:
        return img
    cache = dict(
        order=order, means=means, conics=conics, colors=colors, alphas=alphas,
        offsets=offsets, lists=lists, out_T=out_T, out_nvis=out_nvis,
        target=target, settings=settings, n=len(splats), cov2d_sorted=splats.cov2d[order],
    )
    return img, cache


def rasterize_backward(cache, g_img: np.ndarray):
    """Backward of :func:`rasterize`.

    Returns per-input-splat gradients (g_mean2d, g_cov2d_full, g_color,
    g_alpha0), zeros for rejected/unsorted rows.
    """
    means = cache["means"]
    conics = cache["conics"]
    colors = cache["colors"]
    alphas = cache["alphas"]
    offsets = cache["offsets"]
    lists = cache["lists"]
    target: RenderTarget = cache["target"]
    settings: RenderSettings = cache["settings"]
    dtype = means.dtype
    L = lists.shape[0]
    ge_mean = np.zeros((L, 2), dtype=dtype)
    ge_conic = np.zeros((L, 3), dtype=dtype)
    ge_color = np.zeros((L, 3), dtype=dtype)
    ge_alpha = np.zeros(L, dtype=dtype)
    _kernels.raster_backward(
        means,
        conics,
        colors,
        alphas,
        offsets,
        lists,
        target.height,
        target.width,
        target.tile_size,
        target.background.astype(dtype),
        dtype.type(settings.sigma_cutoff**2),
        cache["out_T"],
        cache["out_nvis"],
        np.ascontiguousarray(g_img.astype(dtype)),
        ge_mean,
        ge_conic,
        ge_color,
        ge_alpha,
    )
    m = means.shape[0]
    gs_mean, gs_conic, gs_color, gs_alpha = _kernels.merge_entry_grads(
        lists, ge_mean, ge_conic, ge_color, ge_alpha, m
    )
    g_cov2d_sorted = conic_backward(cache["cov2d_sorted"], gs_conic)

    n = cache["n"]
    order = cache["order"]
    g_mean2d = np.zeros((n, 2), dtype=dtype)
    g_cov2d = np.zeros((n, 2, 2), dtype=dtype)
    g_color = np.zeros((n, 3), dtype=dtype)
    g_alpha0 = np.zeros(n, dtype=dtype)
    g_mean2d[order] = gs_mean
    g_cov2d[order] = g_cov2d_sorted
    g_color[order] = gs_color
    g_alpha0[order] = gs_alpha
    return g_mean2d, g_cov2d, g_color, g_alpha0


def rasterize_reference(
    splats: Splat2D,
    target: RenderTarget,
    settings: RenderSettings = RenderSettings(),
) -> np.ndarray:
    """Oracle renderer: full per-pixel sort, no tiling, no early termination."""
    dtype = splats.mean2d.dtype
    ok = _finite_rows(splats)
    order = np.flatnonzero(ok)[np.argsort(splats.depth[ok], kind="stable")]
    means = np.ascontiguousarray(splats.mean2d[order])
    conics = np.ascontiguousarray(splats.conics()[order])
    colors = np.ascontiguousarray(splats.color[order])
    alphas = np.ascontiguousarray(splats.alpha0[order])
    h, w = target.height, target.width
    img = np.zeros((h, w, 3), dtype=dtype)
    _kernels.reference_forward(
        means, conics, colors, alphas, h, w,
        target.background.astype(dtype), dtype.type(settings.sigma_cutoff**2), img,
    )
    return img


@dataclass
class RenderContext:
    """Everything the analytic backward pass needs from a forward render."""

    image: np.ndarray
    report: dict
    cloud: GaussianCloud
    field: MultiScaleHashField
    rig: Rig
    pose: PoseFrame
    cam: Camera
    target: RenderTarget
    settings: RenderSettings
    ao_frozen: bool
    data: dict


def render_avatar(
    cloud: GaussianCloud,
    field: MultiScaleHashField,
    rig: Rig,
    pose: PoseFrame,
    pack: PriorPack | None,
    cam: Camera,
    target: RenderTarget,
    settings: RenderSettings = RenderSettings(),
    ao_frozen: bool = False,
    use_reference: bool = False,
    want_grad: bool = False,
):
    """Full pipeline: field residuals -> LBS -> SH color -> project -> blend.

    Returns (image, report) or a :class:`RenderContext` when ``want_grad``.
    """
    cfg: FieldConfig = field.cfg
    dtype = field.dtype
    n = len(cloud)
    report: dict = {"n_primitives": n}

    x0 = cloud.x0.astype(dtype)
    tau = cloud.tau

    # parameter field: residuals and ambient occlusion
    z, z_cache = field.assemble_input(x0, tau, pack, pose.t, want_cache=True)
    (delta_x, sh_res), dec_cache = decode_residuals(field, z, want_cache=True)
    hash_dim = z_cache[3]
    ao_cache = None
    if ao_frozen:
        ao = np.ones(n, dtype=dtype)
    else:
        gamma = temporal_encoding(pose.t, cfg.pe_freqs, field.t_range, dtype)
        za = np.concatenate([z[:, :hash_dim], np.broadcast_to(gamma, (n, gamma.shape[0]))], axis=1)
        ao_out, ao_mlp_cache = mlp_forward(field.ao_decoder, za)
        ao = sigmoid(ao_out[:, 0])
        ao_cache = ao_mlp_cache

    # skinning (delta-form blend: zero pose is an exact no-op)
    x0p = x0 + delta_x
    B = bone_transforms(rig, pose)
    Blin = B.linear.astype(dtype)
    Bt = B.translation.astype(dtype)
    w = cloud.weights.astype(dtype)
    eye3 = np.eye(3, dtype=dtype)
    Mdelta = np.einsum("nb,bij->nij", w, Blin - eye3)
    M = eye3 + Mdelta
    tvec = w @ Bt
    x_t = x0p + np.einsum("nij,nj->ni", Mdelta, x0p) + tvec

    scales = cloud.scales().astype(dtype)
    quat = cloud.quat.astype(dtype)
    cov_c = covariance_from_quat_scale(quat, scales)
    cov_t = M @ cov_c @ np.swapaxes(M, -1, -2)

    # viewing directions, warped to canonical space
    if cam.model == "perspective":
        vvec = x_t - cam.origin().astype(dtype)
        vnorm = np.linalg.norm(vvec, axis=1, keepdims=True)
        d_t = vvec / vnorm
    else:
        d_t = np.broadcast_to(cam.forward_axis().astype(dtype), (n, 3)).copy()
        vnorm = None
    det_M = np.linalg.det(M)
    warp_ok = np.abs(det_M) > 1e-9
    report["n_singular_fallback"] = int((~warp_ok).sum())
    y = np.zeros_like(d_t)
    if warp_ok.any():
        y[warp_ok] = np.linalg.solve(M[warp_ok], d_t[warp_ok][..., np.newaxis])[..., 0]
    ynorm = np.linalg.norm(y, axis=1, keepdims=True)
    ynorm[~warp_ok] = 1.0
    ynorm[ynorm == 0] = 1.0
    d_c = np.where(warp_ok[:, np.newaxis], y / ynorm, d_t)

    # view-dependent color with ambient occlusion
    sh_eff = cloud.sh.astype(dtype) + sh_res if cfg.use_hash_sh else cloud.sh.astype(dtype)
    Y = sh_basis(d_c, cfg.sh_degree)
    rgb_pre = np.einsum("nck,nk->nc", sh_eff, Y) + 0.5
    rgb = np.maximum(rgb_pre, 0.0)
    color = ao[:, np.newaxis] * rgb

    # projection + rasterization
    proj, proj_cache = project_gaussians(x_t, cov_t, cam, settings, want_cache=True)
    mean2d, cov2d, depth, radius, idx = proj
    report["n_culled"] = n - idx.shape[0]
    splats = Splat2D(
        mean2d=mean2d,
        cov2d=cov2d,
        depth=depth,
        color=color[idx],
        alpha0=cloud.opacities().astype(dtype)[idx],
    )
    if use_reference:
        image = rasterize_reference(splats, target, settings)
        raster_cache = None
    else:
        image, raster_cache = rasterize(splats, target, settings, report, want_cache=True)

    if not want_grad:
        return image, report

    data = dict(
        z=z, z_cache=z_cache, dec_cache=dec_cache, ao_cache=ao_cache, ao=ao,
        hash_dim=hash_dim, delta_x=delta_x, x0p=x0p, B=B, M=M, x_t=x_t,
        scales=scales, cov_c=cov_c, cov_t=cov_t, d_t=d_t, d_c=d_c, y=y,
        ynorm=ynorm, vnorm=vnorm, warp_ok=warp_ok, sh_eff=sh_eff, Y=Y,
        rgb_pre=rgb_pre, rgb=rgb, color=color, proj_cache=proj_cache, idx=idx,
        raster_cache=raster_cache, splats=splats, w=w,
    )
    return RenderContext(
        image=image, report=report, cloud=cloud, field=field, rig=rig,
        pose=pose, cam=cam, target=target, settings=settings,
        ao_frozen=ao_frozen, data=data,
    )


def build_prior_frames(
    bbox_min: np.ndarray, bbox_max: np.ndarray, margin: float = 0.05
) -> tuple[OrthoFrame, ...]:
    """Front/back/left/right orthographic frames around the canonical body.

    The body faces +z with +y up; the front camera looks along -z.
    """
    lo = np.asarray(bbox_min, dtype=np.float64)
    hi = np.asarray(bbox_max, dtype=np.float64)
    pad = (hi - lo) * margin
    lo = lo - pad
    hi = hi + pad
    size = hi - lo
    up = np.array([0.0, 1.0, 0.0])

    def frame(axis_w, axis_u, ext_u, ext_v, origin):
        return OrthoFrame(
            origin=np.asarray(origin, dtype=np.float64),
            axis_u=np.asarray(axis_u, dtype=np.float64),
            axis_v=up,
            axis_w=np.asarray(axis_w, dtype=np.float64),
            extent=np.array([ext_u, ext_v]),
        )

    front = frame((0, 0, -1), (1, 0, 0), size[0], size[1], (lo[0], lo[1], hi[2]))
    back = frame((0, 0, 1), (-1, 0, 0), size[0], size[1], (hi[0], lo[1], lo[2]))
    left = frame((1, 0, 0), (0, 0, 1), size[2], size[1], (lo[0], lo[1], lo[2]))
    right = frame((-1, 0, 0), (0, 0, -1), size[2], size[1], (hi[0], lo[1], hi[2]))
    return (front, back, left, right)


def render_priors(
    mesh: CanonicalMesh,
    resolution: int = 512,
    margin: float = 0.05,
    report: dict | None = None,
) -> PriorPack:
    """Depth and face-normal maps from the four orthographic frames.

    Normals are geometric (per face), stored in world space and flipped to
    face the camera.  Masks mark rasterized coverage.
    """
    lo, hi = mesh.bounds()
    frames = build_prior_frames(lo, hi, margin)
    v = mesh.vertices
    f = mesh.faces
    e1 = v[f[:, 1]] - v[f[:, 0]]
    e2 = v[f[:, 2]] - v[f[:, 0]]
    fn = np.cross(e1, e2)
    nrm = np.linalg.norm(fn, axis=1, keepdims=True)
    good = nrm[:, 0] > 1e-14
    fn[good] = fn[good] / nrm[good]

    h = w = resolution
    depth_maps = np.zeros((4, h, w))
    depth_masks = np.zeros((4, h, w), dtype=bool)
    normal_maps = np.zeros((2, h, w, 3))
    normal_masks = np.zeros((2, h, w), dtype=bool)
    skipped_total = 0
    for vi, fr in enumerate(frames):
        a, b, depth = fr.project(v, w, h)
        flip = np.sign(fn @ fr.axis_w)
        normals = np.where((flip > 0)[:, np.newaxis], -fn, fn)
        zmap, mask, nmap, skipped = _kernels.mesh_raster_view(
            a, b, depth, f, normals, h, w
        )
        skipped_total += int(skipped)
        depth_maps[vi] = zmap
        depth_masks[vi] = mask
        if vi < 2:
            normal_maps[vi] = nmap
            normal_masks[vi] = mask
    if report is not None:
        report["n_degenerate_triangles"] = skipped_total
    return PriorPack(
        depth_maps=depth_maps,
        depth_masks=depth_masks,
        normal_maps=normal_maps,
        normal_masks=normal_masks,
        frames=frames,
    )
