"""Continuous parameter fields over canonical space.

Two multi-resolution hash bands (a low band for body/garments, a high band
for face/hand detail) are blended by the region weight ``tau`` and combined
with orthographic depth/normal samples and a temporal encoding into the
decoder input.  A small MLP predicts per-primitive residuals (position
offset and SH coefficients); a second one predicts the ambient-occlusion
factor.  Every query has a hand-written backward so the whole pipeline stays
differentiable without a framework.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np

from .config import BandConfig, FieldConfig
from .gaussians import ShapeError
from .mathutil import sigmoid

HASH_PRIMES = (np.uint32(1), np.uint32(2654435761), np.uint32(805459861))

# corner visit order for trilinear interpolation, shared by fwd and bwd
_CORNERS = np.array(
    [[0, 0, 0], [1, 0, 0], [0, 1, 0], [1, 1, 0], [0, 0, 1], [1, 0, 1], [0, 1, 1], [1, 1, 1]],
    dtype=np.int64,
)


@dataclass
class HashGridBand:
    """One band: per-level feature tables at geometrically growing resolutions."""

    resolutions: np.ndarray  # (L,)
    tables: list  # level -> (T_l, F) array
    feature_dim: int
    log2_table_size: int

    def __post_init__(self):
        res = np.asarray(self.resolutions, dtype=np.int64)
        if np.any(np.diff(res) <= 0):
            raise ValueError("level resolutions must be strictly increasing")
        for lvl, tab in enumerate(self.tables):
            if tab.shape != (table_entries(res[lvl], self.table_size), self.feature_dim):
                raise ShapeError(f"table {lvl} has shape {tab.shape}")
        self.resolutions = res

    @property
    def n_levels(self) -> int:
        return len(self.tables)

    @property
    def table_size(self) -> int:
        return 1 << self.log2_table_size

    @property
    def output_dim(self) -> int:
        return self.n_levels * self.feature_dim

    @classmethod
    def create(cls, cfg: BandConfig, rng: np.random.Generator, init_scale: float, dtype):
        res = np.asarray(cfg.resolutions(), dtype=np.int64)
        tables = [
            rng.uniform(-init_scale, init_scale, size=(table_entries(r, cfg.table_size), cfg.feature_dim)).astype(
                dtype
            )
            for r in res
        ]
        return cls(res, tables, cfg.feature_dim, cfg.log2_table_size)


def table_entries(resolution: int, table_size: int) -> int:
    """Dense addressing when the level's grid fits the table."""
    dense = (int(resolution) + 1) ** 3
    return min(dense, table_size)


def _corner_indices(cx, cy, cz, resolution: int, table_size: int):
    dense = (resolution + 1) ** 3
    if dense <= table_size:
        stride = resolution + 1
        return cx + stride * (cy + stride * cz)
    ux = cx.astype(np.uint32) * HASH_PRIMES[0]
    uy = cy.astype(np.uint32) * HASH_PRIMES[1]
    uz = cz.astype(np.uint32) * HASH_PRIMES[2]
    return ((ux ^ uy ^ uz) & np.uint32(table_size - 1)).astype(np.int64)


def hash_query(
    band: HashGridBand,
    x: np.ndarray,
    bbox_min: np.ndarray,
    bbox_max: np.ndarray,
    want_cache: bool = False,
):
    """Trilinear multi-level lookup; points are clamped to the bounding box.

    Returns (N, L*F) features, plus a cache for the backward pass when
    requested.
    """
    x = np.atleast_2d(np.asarray(x))
    n = x.shape[0]
    extent = bbox_max - bbox_min
    u_raw = (x - bbox_min) / extent
    inside = (u_raw > 0.0) & (u_raw < 1.0)  # clamped axes get zero gradient
    u = np.clip(u_raw, 0.0, 1.0)

    feats = np.empty((n, band.output_dim), dtype=band.tables[0].dtype)
    caches = []
    for lvl in range(band.n_levels):
        r = int(band.resolutions[lvl])
        p = u * r
        c0 = np.minimum(np.floor(p), r - 1).astype(np.int64)
        f = (p - c0).astype(band.tables[0].dtype)
        cx = c0[:, 0:1] + _CORNERS[:, 0][np.newaxis, :]
        cy = c0[:, 1:2] + _CORNERS[:, 1][np.newaxis, :]
        cz = c0[:, 2:3] + _CORNERS[:, 2][np.newaxis, :]
        idx = _corner_indices(cx, cy, cz, r, band.table_size)
        wx = np.where(_CORNERS[:, 0][np.newaxis, :] == 1, f[:, 0:1], 1.0 - f[:, 0:1])
        wy = np.where(_CORNERS[:, 1][np.newaxis, :] == 1, f[:, 1:2], 1.0 - f[:, 1:2])
        wz = np.where(_CORNERS[:, 2][np.newaxis, :] == 1, f[:, 2:3], 1.0 - f[:, 2:3])
        w = wx * wy * wz  # (N, 8)
        gathered = band.tables[lvl][idx]  # (N, 8, F)
        feats[:, lvl * band.feature_dim : (lvl + 1) * band.feature_dim] = np.einsum(
            "nc,ncf->nf", w, gathered
        )
        if want_cache:
            caches.append((idx, w, wx, wy, wz, f))
    if not want_cache:
        return feats
    return feats, (caches, inside, extent)


def hash_query_backward(
    band: HashGridBand,
    cache,
    g_feats: np.ndarray,
    table_grads: list | None = None,
):
    """Backward of :func:`hash_query`.

    Accumulates into per-level ``table_grads`` (created when None) and
    returns (table_grads, g_x).
    """
    caches, inside, extent = cache
    n = g_feats.shape[0]
    dtype = g_feats.dtype
    if table_grads is None:
        table_grads = [np.zeros_like(t) for t in band.tables]
    g_x = np.zeros((n, 3), dtype=dtype)
    sign = np.where(_CORNERS == 1, 1.0, -1.0)  # (8, 3)
    for lvl in range(band.n_levels):
        idx, w, wx, wy, wz, _f = caches[lvl]
        g_lvl = g_feats[:, lvl * band.feature_dim : (lvl + 1) * band.feature_dim]
        # table entries: dL/dT[idx] += w * g
        np.add.at(table_grads[lvl], idx, w[:, :, np.newaxis] * g_lvl[:, np.newaxis, :])
        # position: dL/dp = sum_c (g . T[idx_c]) dW_c/dp
        gdotT = np.einsum("nf,ncf->nc", g_lvl, band.tables[lvl][idx])
        dw_dfx = sign[np.newaxis, :, 0] * wy * wz
        dw_dfy = sign[np.newaxis, :, 1] * wx * wz
        dw_dfz = sign[np.newaxis, :, 2] * wx * wy
        r = float(band.resolutions[lvl])
        g_x[:, 0] += np.sum(gdotT * dw_dfx, axis=1) * r
        g_x[:, 1] += np.sum(gdotT * dw_dfy, axis=1) * r
        g_x[:, 2] += np.sum(gdotT * dw_dfz, axis=1) * r
    g_x = g_x * inside / extent
    return table_grads, g_x


def blended_query(
    field: "MultiScaleHashField", x: np.ndarray, tau: np.ndarray, want_cache: bool = False
):
    """Region blend tau*F_h + (1-tau)*F_l.

    The low band is shared by both sides, so the blend reduces to
    ``[low || tau * high]``; without the high band the feature is just the
    low-band lookup.
    """
    tau = np.atleast_1d(np.asarray(tau))
    if np.any((tau < 0) | (tau > 1)):
        raise ValueError("tau must lie in [0,1]")
    low = hash_query(field.low, x, field.bbox_min, field.bbox_max, want_cache)
    if want_cache:
        low, low_cache = low
    if field.high is None:
        if want_cache:
            return low, (low_cache, None, tau)
        return low
    high = hash_query(field.high, x, field.bbox_min, field.bbox_max, want_cache)
    if want_cache:
        high, high_cache = high
    tau_col = tau.astype(low.dtype)[:, np.newaxis]
    feats = np.concatenate([low, tau_col * high], axis=1)
    if want_cache:
        return feats, (low_cache, (high_cache, high), tau)
    return feats


def blended_query_backward(field: "MultiScaleHashField", cache, g_feats: np.ndarray):
    """Backward of :func:`blended_query`; returns (low_grads, high_grads, g_x)."""
    low_cache, high_part, tau = cache
    d_low = field.low.output_dim
    low_grads, g_x = hash_query_backward(field.low, low_cache, g_feats[:, :d_low])
    high_grads = None
    if field.high is not None:
        high_cache, _high = high_part
        tau_col = tau.astype(g_feats.dtype)[:, np.newaxis]
        high_grads, g_x_high = hash_query_backward(
            field.high, high_cache, tau_col * g_feats[:, d_low:]
        )
        g_x = g_x + g_x_high
    return low_grads, high_grads, g_x


@dataclass(frozen=True)
class OrthoFrame:
    """Axis-aligned orthographic projection frame for the prior maps."""

    origin: np.ndarray  # (3,) world position of pixel (0,0) plane corner
    axis_u: np.ndarray  # (3,) unit, maps to +x in the image
    axis_v: np.ndarray  # (3,) unit, maps to +y (rows) in the image
    axis_w: np.ndarray  # (3,) unit viewing direction (depth axis)
    extent: np.ndarray  # (2,) world size along (u, v)

    def project(self, x: np.ndarray, width: int, height: int):
        """Continuous pixel coordinates (col, row) and frame depth of points."""
        local = np.atleast_2d(x) - self.origin
        a = (local @ self.axis_u) / self.extent[0] * width - 0.5
        b = (local @ self.axis_v) / self.extent[1] * height - 0.5
        depth = local @ self.axis_w
        return a, b, depth


@dataclass(frozen=True)
class PriorPack:
    """Four orthographic depth maps and two normal maps with their frames.

    View order is (front, back, left, right); normals cover (front, back).
    """

    depth_maps: np.ndarray  # (4, H, W)
    depth_masks: np.ndarray  # (4, H, W) bool
    normal_maps: np.ndarray  # (2, H, W, 3)
    normal_masks: np.ndarray  # (2, H, W) bool
    frames: tuple  # 4 OrthoFrame

    def __post_init__(self):
        if self.depth_maps.shape[0] != 4 or self.normal_maps.shape[0] != 2:
            raise ShapeError("expect 4 depth views and 2 normal views")
        if self.depth_masks.shape != self.depth_maps.shape:
            raise ShapeError("depth masks must match depth maps")
        if self.normal_masks.shape != self.normal_maps.shape[:3]:
            raise ShapeError("normal masks must match normal maps")
        if len(self.frames) != 4:
            raise ShapeError("need one frame per depth view")

    @property
    def resolution(self) -> tuple[int, int]:
        return self.depth_maps.shape[1], self.depth_maps.shape[2]


def _bilinear_sample(img: np.ndarray, mask: np.ndarray, a: np.ndarray, b: np.ndarray):
    """Masked bilinear lookup; a sample is valid only when all four texels are
    in bounds and inside the mask (keeps boundary values clean and the
    gradient well defined).  Returns (value, cache)."""
    h, w = mask.shape
    j0 = np.floor(a).astype(np.int64)
    i0 = np.floor(b).astype(np.int64)
    fa = a - j0
    fb = b - i0
    valid = (j0 >= 0) & (j0 + 1 < w) & (i0 >= 0) & (i0 + 1 < h)
    j0c = np.clip(j0, 0, w - 2)
    i0c = np.clip(i0, 0, h - 2)
    m = (
        mask[i0c, j0c]
        & mask[i0c, j0c + 1]
        & mask[i0c + 1, j0c]
        & mask[i0c + 1, j0c + 1]
        & valid
    )
    w00 = (1 - fa) * (1 - fb)
    w01 = fa * (1 - fb)
    w10 = (1 - fa) * fb
    w11 = fa * fb
    chan = img.shape[2:] if img.ndim == 3 else ()
    def gv(ii, jj):
        return img[ii, jj]
    if chan:
        val = (
            w00[:, None] * gv(i0c, j0c)
            + w01[:, None] * gv(i0c, j0c + 1)
            + w10[:, None] * gv(i0c + 1, j0c)
            + w11[:, None] * gv(i0c + 1, j0c + 1)
        )
        val = val * m[:, None]
    else:
        val = w00 * gv(i0c, j0c) + w01 * gv(i0c, j0c + 1) + w10 * gv(i0c + 1, j0c) + w11 * gv(i0c + 1, j0c + 1)
        val = val * m
    cache = (i0c, j0c, fa, fb, m)
    return val, cache


def _bilinear_backward(img: np.ndarray, cache, g_val: np.ndarray):
    """d(value)/d(a,b) for the masked bilinear sample; returns (g_a, g_b)."""
    i0, j0, fa, fb, m = cache
    if img.ndim == 3:
        v00 = img[i0, j0]
        v01 = img[i0, j0 + 1]
        v10 = img[i0 + 1, j0]
        v11 = img[i0 + 1, j0 + 1]
        dval_da = (1 - fb)[:, None] * (v01 - v00) + fb[:, None] * (v11 - v10)
        dval_db = (1 - fa)[:, None] * (v10 - v00) + fa[:, None] * (v11 - v01)
        g_a = np.sum(g_val * dval_da, axis=1) * m
        g_b = np.sum(g_val * dval_db, axis=1) * m
    else:
        v00 = img[i0, j0]
        v01 = img[i0, j0 + 1]
        v10 = img[i0 + 1, j0]
        v11 = img[i0 + 1, j0 + 1]
        g_a = g_val * ((1 - fb) * (v01 - v00) + fb * (v11 - v10)) * m
        g_b = g_val * ((1 - fa) * (v10 - v00) + fa * (v11 - v01)) * m
    return g_a, g_b


def sample_depth_prior(pack: PriorPack, x: np.ndarray, want_cache: bool = False):
    """Four-view depth feature phi_d; zero outside the valid human region."""
    x = np.atleast_2d(x)
    h, w = pack.resolution
    out = np.zeros((x.shape[0], 4), dtype=x.dtype)
    caches = []
    for v in range(4):
        a, b, _ = pack.frames[v].project(x, w, h)
        val, cache = _bilinear_sample(pack.depth_maps[v], pack.depth_masks[v], a, b)
        out[:, v] = val
        caches.append(cache)
    if want_cache:
        return out, (pack, caches)
    return out


def sample_depth_prior_backward(cache, g_out: np.ndarray):
    pack, caches = cache
    h, w = pack.resolution
    g_x = np.zeros((g_out.shape[0], 3), dtype=g_out.dtype)
    for v in range(4):
        fr = pack.frames[v]
        g_a, g_b = _bilinear_backward(pack.depth_maps[v], caches[v], g_out[:, v])
        g_x += np.outer(g_a, fr.axis_u) * (w / fr.extent[0])
        g_x += np.outer(g_b, fr.axis_v) * (h / fr.extent[1])
    return g_x


def sample_normal_prior(pack: PriorPack, x: np.ndarray, want_cache: bool = False):
    """Front/back normal feature phi_n (6-vector); zero outside the masks.

    Normals are stored raw (not renormalized after interpolation)."""
    x = np.atleast_2d(x)
    h, w = pack.resolution
    out = np.zeros((x.shape[0], 6), dtype=x.dtype)
    caches = []
    for v in range(2):
        a, b, _ = pack.frames[v].project(x, w, h)
        val, cache = _bilinear_sample(pack.normal_maps[v], pack.normal_masks[v], a, b)
        out[:, 3 * v : 3 * v + 3] = val
        caches.append(cache)
    if want_cache:
        return out, (pack, caches)
    return out


def sample_normal_prior_backward(cache, g_out: np.ndarray):
    pack, caches = cache
    h, w = pack.resolution
    g_x = np.zeros((g_out.shape[0], 3), dtype=g_out.dtype)
    for v in range(2):
        fr = pack.frames[v]
        g_a, g_b = _bilinear_backward(
            pack.normal_maps[v], caches[v], g_out[:, 3 * v : 3 * v + 3]
        )
        g_x += np.outer(g_a, fr.axis_u) * (w / fr.extent[0])
        g_x += np.outer(g_b, fr.axis_v) * (h / fr.extent[1])
    return g_x


def temporal_encoding(t: float, n_freqs: int, t_range=(0.0, 1.0), dtype=np.float64) -> np.ndarray:
    """(sin(2^l pi t_hat), cos(2^l pi t_hat))_{l<L} with t normalized to [0,1]."""
    if n_freqs < 0:
        raise ValueError("frequency count must be >= 0")
    t0, t1 = t_range
    t_hat = 0.0 if t1 <= t0 else float(np.clip((t - t0) / (t1 - t0), 0.0, 1.0))
    out = np.empty(2 * n_freqs, dtype=dtype)
    for l in range(n_freqs):
        arg = (2.0**l) * np.pi * t_hat
        out[2 * l] = np.sin(arg)
        out[2 * l + 1] = np.cos(arg)
    return out


def _mlp_init(rng: np.random.Generator, dims: list[int], dtype, final_scale=1e-2):
    params = []
    for i in range(len(dims) - 1):
        fan_in = dims[i]
        std = np.sqrt(2.0 / fan_in)
        if i == len(dims) - 2:
            std *= final_scale
        W = (rng.standard_normal((fan_in, dims[i + 1])) * std).astype(dtype)
        b = np.zeros(dims[i + 1], dtype=dtype)
        params.extend([W, b])
    return params


def mlp_forward(params: list, z: np.ndarray):
    """Two-hidden-layer ReLU MLP; returns (out, cache)."""
    W1, b1, W2, b2, W3, b3 = params
    if z.shape[1] != W1.shape[0]:
        raise ShapeError(f"decoder expects width {W1.shape[0]}, got {z.shape[1]}")
    h1 = np.maximum(z @ W1 + b1, 0.0)
    h2 = np.maximum(h1 @ W2 + b2, 0.0)
    out = h2 @ W3 + b3
    return out, (z, h1, h2)


def mlp_backward(params: list, cache, g_out: np.ndarray):
    """Returns (param_grads list, g_z)."""
    W1, b1, W2, b2, W3, b3 = params
    z, h1, h2 = cache
    gW3 = h2.T @ g_out
    gb3 = g_out.sum(axis=0)
    gh2 = (g_out @ W3.T) * (h2 > 0)
    gW2 = h1.T @ gh2
    gb2 = gh2.sum(axis=0)
    gh1 = (gh2 @ W2.T) * (h1 > 0)
    gW1 = z.T @ gh1
    gb1 = gh1.sum(axis=0)
    g_z = gh1 @ W1.T
    return [gW1, gb1, gW2, gb2, gW3, gb3], g_z


@dataclass
class MultiScaleHashField:
    """Two hash bands plus the residual and ambient-occlusion decoders."""

    cfg: FieldConfig
    bbox_min: np.ndarray
    bbox_max: np.ndarray
    low: HashGridBand
    high: HashGridBand | None
    decoder: list  # [W1,b1,W2,b2,W3,b3]
    ao_decoder: list
    t_range: tuple = (0.0, 1.0)

    def __post_init__(self):
        out_dim = self.decoder[4].shape[1]
        if out_dim != self.cfg.decoder_out_dim:
            raise ShapeError(
                f"decoder output width {out_dim}, expected {self.cfg.decoder_out_dim}"
            )
        if self.ao_decoder[4].shape[1] != 1:
            raise ShapeError("ao decoder must output one value")

    @classmethod
    def create(
        cls,
        cfg: FieldConfig,
        bbox_min,
        bbox_max,
        seed: int = 0,
        t_range=(0.0, 1.0),
        dtype=np.float32,
    ) -> "MultiScaleHashField":
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence((seed, 7))))
        low = HashGridBand.create(cfg.low_band, rng, cfg.init_scale, dtype)
        high = (
            HashGridBand.create(cfg.high_band, rng, cfg.init_scale, dtype)
            if cfg.use_multiscale
            else None
        )
        decoder = _mlp_init(
            rng, [cfg.decoder_in_dim, cfg.hidden_dim, cfg.hidden_dim, cfg.decoder_out_dim], dtype
        )
        ao = _mlp_init(rng, [cfg.ao_in_dim, cfg.ao_hidden_dim, cfg.ao_hidden_dim, 1], dtype)
        # bias the ao output toward 1 so un-freezing does not jolt brightness
        ao[5][:] = 4.0
        return cls(
            cfg,
            np.asarray(bbox_min, dtype=np.float64),
            np.asarray(bbox_max, dtype=np.float64),
            low,
            high,
            decoder,
            ao,
            t_range,
        )

    # --- parameter plumbing -------------------------------------------------
    def parameters(self) -> dict[str, np.ndarray]:
        names = ["W1", "b1", "W2", "b2", "W3", "b3"]
        out = {f"decoder/{n}": p for n, p in zip(names, self.decoder)}
        out.update({f"ao/{n}": p for n, p in zip(names, self.ao_decoder)})
        for lvl, t in enumerate(self.low.tables):
            out[f"low/{lvl}"] = t
        if self.high is not None:
            for lvl, t in enumerate(self.high.tables):
                out[f"high/{lvl}"] = t
        return out

    def astype(self, dtype) -> "MultiScaleHashField":
        low = HashGridBand(
            self.low.resolutions,
            [t.astype(dtype) for t in self.low.tables],
            self.low.feature_dim,
            self.low.log2_table_size,
        )
        high = None
        if self.high is not None:
            high = HashGridBand(
                self.high.resolutions,
                [t.astype(dtype) for t in self.high.tables],
                self.high.feature_dim,
                self.high.log2_table_size,
            )
        return MultiScaleHashField(
            self.cfg,
            self.bbox_min,
            self.bbox_max,
            low,
            high,
            [p.astype(dtype) for p in self.decoder],
            [p.astype(dtype) for p in self.ao_decoder],
            self.t_range,
        )

    @property
    def dtype(self):
        return self.decoder[0].dtype

    # --- queries -------------------------------------------------------------
    def assemble_input(
        self,
        x: np.ndarray,
        tau: np.ndarray,
        pack: PriorPack | None,
        t: float,
        want_cache: bool = False,
    ):
        """Joint decoder input z = [hash || phi_d || phi_n || gamma(t)].

        Ablation switches zero their block, keeping the width fixed so the
        decoder is invariant to perturbations of a disabled input.
        """
        cfg = self.cfg
        x = np.atleast_2d(x)
        n = x.shape[0]
        dtype = self.dtype
        hq = blended_query(self, x, tau, want_cache)
        if want_cache:
            feats, hash_cache = hq
        else:
            feats, hash_cache = hq, None
        x_typed = x.astype(dtype)
        if cfg.use_depth_prior and pack is not None:
            dp = sample_depth_prior(pack, x_typed, want_cache)
            phi_d, d_cache = dp if want_cache else (dp, None)
        else:
            phi_d, d_cache = np.zeros((n, 4), dtype=dtype), None
        if cfg.use_normal_prior and pack is not None:
            npr = sample_normal_prior(pack, x_typed, want_cache)
            phi_n, n_cache = npr if want_cache else (npr, None)
        else:
            phi_n, n_cache = np.zeros((n, 6), dtype=dtype), None
        parts = [feats, phi_d, phi_n]
        if cfg.use_time_in_decoder:
            gamma = temporal_encoding(t, cfg.pe_freqs, self.t_range, dtype)
            parts.append(np.broadcast_to(gamma, (n, gamma.shape[0])))
        z = np.concatenate(parts, axis=1)
        if want_cache:
            return z, (hash_cache, d_cache, n_cache, feats.shape[1])
        return z

    def assemble_input_backward(self, cache, g_z: np.ndarray):
        """Routes dL/dz to hash tables and the query position."""
        hash_cache, d_cache, n_cache, hash_dim = cache
        low_g, high_g, g_x = blended_query_backward(self, hash_cache, g_z[:, :hash_dim])
        off = hash_dim
        if d_cache is not None:
            g_x = g_x + sample_depth_prior_backward(d_cache, g_z[:, off : off + 4])
        off += 4
        if n_cache is not None:
            g_x = g_x + sample_normal_prior_backward(n_cache, g_z[:, off : off + 6])
        return low_g, high_g, g_x


def decode_residuals(field: MultiScaleHashField, z: np.ndarray, want_cache: bool = False):
    """MLP decode of the joint input into (delta_x, sh residual block).

    ``delta_x`` is bounded by tanh times the configured maximum offset; the
    SH block is raw.  Disabled heads (ablations) output exact zeros.
    """
    cfg = field.cfg
    out, mlp_cache = mlp_forward(field.decoder, np.atleast_2d(z))
    raw_dx = out[:, :3]
    th = np.tanh(raw_dx)
    if cfg.use_hash_vd:
        delta_x = cfg.max_offset * th
    else:
        delta_x = np.zeros_like(raw_dx)
    n = out.shape[0]
    if cfg.use_hash_sh:
        sh_res = out[:, 3:].reshape(n, 3, cfg.n_sh_coeffs)
    else:
        sh_res = np.zeros((n, 3, cfg.n_sh_coeffs), dtype=out.dtype)
    if want_cache:
        return (delta_x, sh_res), (mlp_cache, th)
    return delta_x, sh_res


def decode_residuals_backward(
    field: MultiScaleHashField, cache, g_dx: np.ndarray, g_sh: np.ndarray
):
    """Returns (decoder param grads, g_z)."""
    cfg = field.cfg
    mlp_cache, th = cache
    n = g_dx.shape[0]
    g_out = np.zeros((n, cfg.decoder_out_dim), dtype=g_dx.dtype)
    if cfg.use_hash_vd:
        g_out[:, :3] = g_dx * cfg.max_offset * (1.0 - th * th)
    if cfg.use_hash_sh:
        g_out[:, 3:] = g_sh.reshape(n, -1)
    return mlp_backward(field.decoder, mlp_cache, g_out)


def query_ao(
    field: MultiScaleHashField,
    x: np.ndarray,
    t: float,
    tau: np.ndarray | None = None,
    frozen: bool = False,
    want_cache: bool = False,
):
    """Ambient-occlusion factor in (0,1); exactly 1.0 while frozen."""
    x = np.atleast_2d(x)
    n = x.shape[0]
    if frozen:
        ao = np.ones(n, dtype=field.dtype)
        return (ao, None) if want_cache else ao
    if tau is None:
        tau = np.ones(n)
    feats = blended_query(field, x, tau, want_cache)
    if want_cache:
        feats, hash_cache = feats
    gamma = temporal_encoding(t, field.cfg.pe_freqs, field.t_range, field.dtype)
    za = np.concatenate([feats, np.broadcast_to(gamma, (n, gamma.shape[0]))], axis=1)
    out, mlp_cache = mlp_forward(field.ao_decoder, za)
    ao = sigmoid(out[:, 0])
    if want_cache:
        return ao, (hash_cache, mlp_cache, ao)
    return ao


def ao_head_backward(field: MultiScaleHashField, mlp_cache, ao: np.ndarray, g_ao: np.ndarray):
    """Backward of the ao decoder head only (sigmoid + MLP).

    Returns (ao param grads, g_za); the hash part of g_za still needs routing
    through the blended-query backward by the caller.
    """
    g_logit = (g_ao * ao * (1.0 - ao))[:, np.newaxis]
    return mlp_backward(field.ao_decoder, mlp_cache, g_logit)
