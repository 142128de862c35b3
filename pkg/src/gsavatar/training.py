"""Losses, image metrics, the analytic backward pass, and the optimizer.

The objective is (1 - lam) * L1 + lam * D-SSIM against rendered targets.
`backward` chains hand-derived gradients from the pixels through the
rasterizer, projection, skinning, spherical harmonics, decoders, and hash
tables back to every optimizable parameter group; a finite-difference oracle
in the test suite validates every stage.  The optimizer is Adam with
per-group learning rates.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np
from scipy.ndimage import correlate1d

from .config import LossConfig, TrainConfig
from .fields import (
    MultiScaleHashField,
    ao_head_backward,
    decode_residuals_backward,
)
from .gaussians import (
    GaussianCloud,
    ShapeError,
    covariance_backward,
    sh_basis_grad,
)
from .render import (
    Camera,
    RenderContext,
    RenderTarget,
    project_gaussians_backward,
    rasterize_backward,
    render_avatar,
)
from .config import RenderSettings
from .skeleton import Rig, bone_transforms_backward, lbs_backward

PSNR_CAP_DB = 99.0


class DivergenceError(RuntimeError):
    pass


# --------------------------------------------------------------------------
# image losses and metrics
# --------------------------------------------------------------------------

def _check_pair(a: np.ndarray, b: np.ndarray):
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ShapeError(f"image shapes differ: {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a = a[..., np.newaxis]
        b = b[..., np.newaxis]
    if a.ndim != 3:
        raise ShapeError("images must be HxW or HxWxC")
    return a, b


def l1_loss(a: np.ndarray, b: np.ndarray) -> float:
    a, b = _check_pair(a, b)
    return float(np.mean(np.abs(a - b)))


def l1_loss_backward(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """dL1/da."""
    a2, b2 = _check_pair(a, b)
    g = np.sign(a2 - b2) / a2.size
    return g.reshape(np.asarray(a).shape)


def _gaussian_window(size: int, sigma: float) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2.0
    w = np.exp(-(r * r) / (2.0 * sigma * sigma))
    return w / w.sum()


def _filt_valid(img: np.ndarray, win: np.ndarray) -> np.ndarray:
    """Separable windowed sum over valid positions; img is (H,W,C)."""
    rad = win.shape[0] // 2
    out = correlate1d(img, win, axis=0, mode="constant")
    out = correlate1d(out, win, axis=1, mode="constant")
    return out[rad:-rad, rad:-rad]


def _unfilt_valid(gmap: np.ndarray, win: np.ndarray, shape) -> np.ndarray:
    """Adjoint of :func:`_filt_valid` (zero-pad then correlate)."""
    rad = win.shape[0] // 2
    padded = np.zeros(shape, dtype=gmap.dtype)
    padded[rad:-rad, rad:-rad] = gmap
    out = correlate1d(padded, win, axis=0, mode="constant")
    out = correlate1d(out, win, axis=1, mode="constant")
    return out


def _ssim_maps(a: np.ndarray, b: np.ndarray, cfg: LossConfig):
    if min(a.shape[0], a.shape[1]) < cfg.ssim_window:
        raise ShapeError(
            f"images must be at least {cfg.ssim_window} pixels on each side for SSIM"
        )
    win = _gaussian_window(cfg.ssim_window, cfg.ssim_sigma).astype(np.float64)
    a = a.astype(np.float64)
    b = b.astype(np.float64)
    mu_a = _filt_valid(a, win)
    mu_b = _filt_valid(b, win)
    saa = _filt_valid(a * a, win)
    sbb = _filt_valid(b * b, win)
    sab = _filt_valid(a * b, win)
    va = saa - mu_a * mu_a
    vb = sbb - mu_b * mu_b
    cov = sab - mu_a * mu_b
    A1 = 2.0 * mu_a * mu_b + cfg.ssim_c1
    A2 = 2.0 * cov + cfg.ssim_c2
    B1 = mu_a * mu_a + mu_b * mu_b + cfg.ssim_c1
    B2 = va + vb + cfg.ssim_c2
    s = (A1 * A2) / (B1 * B2)
    return s, (win, mu_a, mu_b, A1, A2, B1, B2)


def ssim(a: np.ndarray, b: np.ndarray, cfg: LossConfig = LossConfig()) -> float:
    """Mean windowed SSIM (11x11 Gaussian window, sigma 1.5, L = 1)."""
    a, b = _check_pair(a, b)
    s, _ = _ssim_maps(a, b, cfg)
    return float(np.mean(s))


def dssim_loss(a: np.ndarray, b: np.ndarray, cfg: LossConfig = LossConfig()) -> float:
    """(1 - SSIM) / 2."""
    return (1.0 - ssim(a, b, cfg)) / 2.0


def dssim_loss_backward(a: np.ndarray, b: np.ndarray, cfg: LossConfig = LossConfig()) -> np.ndarray:
    """d(D-SSIM)/da."""
    orig_shape = np.asarray(a).shape
    a2, b2 = _check_pair(a, b)
    s, (win, mu_a, mu_b, A1, A2, B1, B2) = _ssim_maps(a2, b2, cfg)
    denom = B1 * B2
    gs = -0.5 / s.size  # d(dssim)/ds per map element
    ds_dA1 = A2 / denom
    ds_dA2 = A1 / denom
    ds_dB1 = -s / B1
    ds_dB2 = -s / B2
    # with va = Saa - mu_a^2 and cov = Sab - mu_a mu_b as functions of the maps
    c_mu = gs * (
        ds_dA1 * 2.0 * mu_b
        + ds_dB1 * 2.0 * mu_a
        + ds_dB2 * (-2.0 * mu_a)
        + ds_dA2 * (-2.0 * mu_b)
    )
    c_saa = gs * ds_dB2
    c_sab = gs * ds_dA2 * 2.0
    shape = a2.shape
    a64 = a2.astype(np.float64)
    b64 = b2.astype(np.float64)
    g = (
        _unfilt_valid(c_mu, win, shape)
        + 2.0 * a64 * _unfilt_valid(c_saa, win, shape)
        + b64 * _unfilt_valid(c_sab, win, shape)
    )
    return g.reshape(orig_shape)


def total_loss(a: np.ndarray, b: np.ndarray, cfg: LossConfig = LossConfig()):
    """(1-lam)*L1 + lam*D-SSIM; returns (total, l1, dssim)."""
    l1 = l1_loss(a, b)
    ds = dssim_loss(a, b, cfg)
    return (1.0 - cfg.lam) * l1 + cfg.lam * ds, l1, ds


def total_loss_backward(a: np.ndarray, b: np.ndarray, cfg: LossConfig = LossConfig()) -> np.ndarray:
    return (1.0 - cfg.lam) * l1_loss_backward(a, b) + cfg.lam * dssim_loss_backward(a, b, cfg)


def psnr(a: np.ndarray, b: np.ndarray, cap_db: float = PSNR_CAP_DB) -> float:
    """10 log10(1 / MSE) for unit dynamic range; identical images hit the cap."""
    a, b = _check_pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse <= 10.0 ** (-cap_db / 10.0):
        return cap_db
    return 10.0 * np.log10(1.0 / mse)


# --------------------------------------------------------------------------
# gradients
# --------------------------------------------------------------------------

@dataclass
class GradientSet:
    """Per-parameter gradient buffers keyed like the parameter dict."""

    grads: dict

    def __getitem__(self, key: str) -> np.ndarray:
        return self.grads[key]

    def keys(self):
        return self.grads.keys()

    def check_finite(self):
        for key, g in self.grads.items():
            if not np.all(np.isfinite(g)):
                bad = np.argwhere(~np.isfinite(g))
                raise DivergenceError(
                    f"non-finite gradient in {key} at index {tuple(bad[0])}"
                )

    def max_abs(self) -> float:
        return max((float(np.max(np.abs(g))) if g.size else 0.0) for g in self.grads.values())


def cloud_parameters(cloud: GaussianCloud) -> dict:
    return {
        "cloud/x0": cloud.x0,
        "cloud/quat": cloud.quat,
        "cloud/log_scale": cloud.log_scale,
        "cloud/opacity_raw": cloud.opacity_raw,
        "cloud/sh": cloud.sh,
    }


def all_parameters(cloud: GaussianCloud, field: MultiScaleHashField, rest_positions=None) -> dict:
    params = cloud_parameters(cloud)
    for k, v in field.parameters().items():
        params[f"field/{k}"] = v
    if rest_positions is not None:
        params["rig/rest_positions"] = rest_positions
    return params


def backward(ctx: RenderContext, g_image: np.ndarray) -> GradientSet:
    """Analytic reverse pass from an image gradient to all parameter groups.

    Every key present in the parameter dict gets a gradient buffer; paths
    that are disabled (ablations, frozen AO) yield exact zeros.
    """
    d = ctx.data
    if d["raster_cache"] is None:
        raise ValueError("backward requires a tiled forward render (use_reference=False)")
    cloud = ctx.cloud
    field = ctx.field
    cfg = field.cfg
    dtype = field.dtype
    n = len(cloud)
    idx = d["idx"]

    # rasterizer
    g_mean2d_s, g_cov2d_s, g_color_s, g_alpha0_s = rasterize_backward(
        d["raster_cache"], g_image.astype(dtype)
    )
    g_color = np.zeros((n, 3), dtype=dtype)
    g_alpha0 = np.zeros(n, dtype=dtype)
    g_color[idx] = g_color_s
    g_alpha0[idx] = g_alpha0_s

    # projection
    g_x_t, g_cov_t = project_gaussians_backward(d["proj_cache"], g_mean2d_s, g_cov2d_s)

    # opacity activation
    alpha0 = cloud.opacities().astype(dtype)
    g_opacity_raw = g_alpha0 * alpha0 * (1.0 - alpha0)

    # color: ao * clamp(SH + 0.5)
    rgb = d["rgb"]
    rgb_pre = d["rgb_pre"]
    ao = d["ao"]
    Y = d["Y"]
    sh_eff = d["sh_eff"]
    d_c = d["d_c"]
    g_ao = np.sum(g_color * rgb, axis=1)
    g_rgb = ao[:, np.newaxis] * g_color
    g_rgb_pre = g_rgb * (rgb_pre > 0)
    g_sh_eff = np.einsum("nc,nk->nck", g_rgb_pre, Y)
    g_Y = np.einsum("nc,nck->nk", g_rgb_pre, sh_eff)
    g_dc = np.einsum("nk,nkd->nd", g_Y, sh_basis_grad(d_c, cfg.sh_degree))

    # canonical view direction: d_c = normalize(M^-1 d_t), fallback d_t
    M = d["M"]
    warp_ok = d["warp_ok"]
    y = d["y"]
    ynorm = d["ynorm"]
    g_dt = np.zeros_like(g_dc)
    g_M = np.zeros((n, 3, 3), dtype=dtype)
    if warp_ok.any():
        ok = warp_ok
        dcn = d_c[ok]
        g_y = (g_dc[ok] - dcn * np.sum(dcn * g_dc[ok], axis=1, keepdims=True)) / ynorm[ok]
        Mt = np.swapaxes(M[ok], -1, -2)
        g_dt_ok = np.linalg.solve(Mt, g_y[..., np.newaxis])[..., 0]
        g_dt[ok] = g_dt_ok
        g_M[ok] = -np.einsum("ni,nj->nij", g_dt_ok, y[ok])
    if (~warp_ok).any():
        g_dt[~warp_ok] = g_dc[~warp_ok]

    # posed view direction d_t = normalize(x_t - origin) (perspective only)
    if ctx.cam.model == "perspective":
        d_t = d["d_t"]
        vnorm = d["vnorm"]
        g_x_t = g_x_t + (g_dt - d_t * np.sum(d_t * g_dt, axis=1, keepdims=True)) / vnorm

    # posed covariance: cov_t = M cov_c M^T
    cov_c = d["cov_c"]
    g_cov_t_sym = 0.5 * (g_cov_t + np.swapaxes(g_cov_t, -1, -2))
    g_M = g_M + 2.0 * g_cov_t_sym @ M @ cov_c
    g_cov_c = np.swapaxes(M, -1, -2) @ g_cov_t_sym @ M

    # canonical covariance: quaternions and scales
    scales = d["scales"]
    g_quat, g_scales = covariance_backward(cloud.quat.astype(dtype), scales, g_cov_c)
    g_log_scale = g_scales * np.exp(cloud.log_scale.astype(dtype))

    # LBS
    g_x0p, g_Blin, g_Bt = lbs_backward(d["w"], M, d["x0p"], g_x_t, g_M)
    g_J = bone_transforms_backward(
        ctx.rig, ctx.pose, g_Blin.astype(np.float64), g_Bt.astype(np.float64)
    )

    # displacement and decoders
    g_x0 = g_x0p.copy()
    dec_grads, g_z = decode_residuals_backward(field, d["dec_cache"], g_x0p, g_sh_eff)
    hash_dim = d["hash_dim"]
    if d["ao_cache"] is not None:
        ao_grads, g_za = ao_head_backward(field, d["ao_cache"], ao, g_ao)
        g_z[:, :hash_dim] += g_za[:, :hash_dim]
    else:
        ao_grads = [np.zeros_like(p) for p in field.ao_decoder]
    low_g, high_g, g_x_field = field.assemble_input_backward(d["z_cache"], g_z)
    g_x0 += g_x_field.astype(dtype)

    grads = {
        "cloud/x0": g_x0,
        "cloud/quat": g_quat,
        "cloud/log_scale": g_log_scale,
        "cloud/opacity_raw": g_opacity_raw,
        "cloud/sh": g_sh_eff,
        "rig/rest_positions": g_J,
    }
    names = ["W1", "b1", "W2", "b2", "W3", "b3"]
    for nm, g in zip(names, dec_grads):
        grads[f"field/decoder/{nm}"] = g
    for nm, g in zip(names, ao_grads):
        grads[f"field/ao/{nm}"] = g
    for lvl, g in enumerate(low_g):
        grads[f"field/low/{lvl}"] = g
    if high_g is not None:
        for lvl, g in enumerate(high_g):
            grads[f"field/high/{lvl}"] = g
    return GradientSet(grads)


def loss_and_backward(
    ctx: RenderContext, target_image: np.ndarray, loss_cfg: LossConfig = LossConfig()
):
    """Convenience: total loss of a rendered context plus its GradientSet."""
    total, l1, ds = total_loss(ctx.image, target_image, loss_cfg)
    g_img = total_loss_backward(ctx.image, target_image, loss_cfg)
    return total, l1, ds, backward(ctx, g_img)


# --------------------------------------------------------------------------
# optimizer and training loop
# --------------------------------------------------------------------------

class Adam:
    """Adam with per-parameter learning rates, stepping a dict of arrays."""

    def __init__(self, params: dict, lrs: dict, beta1=0.9, beta2=0.999, eps=1e-15):
        self.params = params
        self.lrs = {k: float(v) for k, v in lrs.items() if k in params}
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(params[k], dtype=np.float64) for k in self.lrs}
        self.v = {k: np.zeros_like(params[k], dtype=np.float64) for k in self.lrs}

    def step(self, grads: GradientSet):
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for key in sorted(self.lrs):
            g = grads[key].astype(np.float64)
            m = self.m[key]
            v = self.v[key]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = self.lrs[key] * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            p = self.params[key]
            p -= update.astype(p.dtype)


def learning_rate_map(train_cfg: TrainConfig, field: MultiScaleHashField, sh_active: bool) -> dict:
    lr = train_cfg.lr
    out = {
        "cloud/x0": lr.positions,
        "cloud/quat": lr.quaternions,
        "cloud/log_scale": lr.scales,
        "cloud/opacity_raw": lr.opacity,
    }
    if sh_active:
        out["cloud/sh"] = lr.sh
    if train_cfg.optimize_skeleton:
        out["rig/rest_positions"] = lr.skeleton
    names = ["W1", "b1", "W2", "b2", "W3", "b3"]
    for nm in names:
        out[f"field/decoder/{nm}"] = lr.mlps
        out[f"field/ao/{nm}"] = lr.mlps
    for lvl in range(field.low.n_levels):
        out[f"field/low/{lvl}"] = lr.hash_tables
    if field.high is not None:
        for lvl in range(field.high.n_levels):
            out[f"field/high/{lvl}"] = lr.hash_tables
    return out


@dataclass
class TrainFrame:
    """One training record: a pose, the camera it was captured with, the image."""

    pose: object
    cam: Camera
    image: np.ndarray


@dataclass
class TrainResult:
    cloud: GaussianCloud
    field: MultiScaleHashField
    rig: Rig
    history: list
    status: str = "ok"


def train(
    cloud: GaussianCloud,
    field: MultiScaleHashField,
    rig: Rig,
    frames: list,
    pack,
    target: RenderTarget,
    train_cfg: TrainConfig,
    loss_cfg: LossConfig = LossConfig(),
    settings: RenderSettings = RenderSettings(),
    log_every: int = 0,
) -> TrainResult:
    """Fits cloud/field/skeleton to the target frames.

    One random frame per iteration; the ambient-occlusion decoder stays
    frozen (ao = 1, zero gradients) for the first ``ao_freeze_iters``
    iterations or for the whole run when AO is disabled.  Aborts with the
    last finite state if the loss diverges.
    """
    if not frames:
        raise ValueError("training needs at least one frame")
    dtype = np.float64 if train_cfg.precision == "f64" else np.float32
    cloud = cloud.astype(dtype)
    field = field.astype(dtype)
    rest = rig.rest_positions.copy()

    params = all_parameters(cloud, field, rest)
    sh_active = not field.cfg.use_hash_sh
    opt = Adam(params, learning_rate_map(train_cfg, field, sh_active))
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence((train_cfg.seed, 11))))

    history = []
    status = "ok"
    snapshot = None
    snap_every = max(1, train_cfg.iterations // 20)
    cur_rig = rig
    for it in range(train_cfg.iterations):
        if it % snap_every == 0:
            snapshot = (cloud.copy(), _copy_field(field), rest.copy(), it)
        frame = frames[int(rng.integers(len(frames)))]
        cur_rig = rig.with_rest_positions(rest)
        frozen = (not train_cfg.ao_enabled) or (it < train_cfg.ao_freeze_iters)
        ctx = render_avatar(
            cloud, field, cur_rig, frame.pose, pack, frame.cam, target,
            settings, ao_frozen=frozen, want_grad=True,
        )
        total, l1, ds = total_loss(ctx.image, frame.image.astype(dtype), loss_cfg)
        if not np.isfinite(total):
            cloud, field, rest = _restore(snapshot)
            status = f"diverged at iteration {it}; restored iteration {snapshot[3]}"
            break
        g_img = total_loss_backward(ctx.image, frame.image.astype(dtype), loss_cfg)
        grads = backward(ctx, g_img)
        opt.step(grads)
        history.append((it, total, l1, ds))
        if log_every and it % log_every == 0:
            print(f"iter {it:5d}  loss {total:.5f}  l1 {l1:.5f}  dssim {ds:.5f}")

    return TrainResult(cloud, field, rig.with_rest_positions(rest), history, status)


def _copy_field(field: MultiScaleHashField) -> MultiScaleHashField:
    return field.astype(field.dtype)


def _restore(snapshot):
    cloud, field, rest, _ = snapshot
    return cloud, field, rest


def evaluate(
    cloud: GaussianCloud,
    field: MultiScaleHashField,
    rig: Rig,
    frames: list,
    pack,
    target: RenderTarget,
    settings: RenderSettings = RenderSettings(),
    loss_cfg: LossConfig = LossConfig(),
    ao_frozen: bool = False,
) -> list:
    """PSNR/SSIM per frame against the stored target images."""
    rows = []
    for k, frame in enumerate(frames):
        img, _ = render_avatar(
            cloud, field, rig, frame.pose, pack, frame.cam, target, settings,
            ao_frozen=ao_frozen,
        )
        ref = frame.image.astype(img.dtype)
        rows.append((k, frame.pose.t, psnr(img, ref), ssim(img, ref, loss_cfg)))
    return rows
