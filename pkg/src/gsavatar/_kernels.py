"""Numba kernels for the tiled rasterizer and the mesh prior renderer.

Parallelism is over tiles only; each tile owns a disjoint set of pixels and a
disjoint slice of the per-entry gradient buffers, and merges happen serially
in a fixed order, so any thread count produces bitwise-identical results.
"""

import numpy as np
from numba import njit, prange

ALPHA_CLAMP = 1.0 - 1e-6  # keeps 1/(1-alpha) finite in the backward pass


@njit(cache=True)
def bin_splats(means, radii, height, width, tile_size):
    """CSR tile lists; splats must arrive depth-sorted so lists stay sorted.

    Returns (offsets (n_tiles+1,), lists (L,)) with splat indices per tile.
    """
    n = means.shape[0]
    ntx = (width + tile_size - 1) // tile_size
    nty = (height + tile_size - 1) // tile_size
    n_tiles = ntx * nty
    rect = np.empty((n, 4), dtype=np.int64)
    counts = np.zeros(n_tiles, dtype=np.int64)
    for i in range(n):
        r = radii[i]
        x0 = int(np.floor((means[i, 0] - r) / tile_size))
        x1 = int(np.floor((means[i, 0] + r) / tile_size))
        y0 = int(np.floor((means[i, 1] - r) / tile_size))
        y1 = int(np.floor((means[i, 1] + r) / tile_size))
        if x0 < 0:
            x0 = 0
        if y0 < 0:
            y0 = 0
        if x1 > ntx - 1:
            x1 = ntx - 1
        if y1 > nty - 1:
            y1 = nty - 1
        rect[i, 0] = x0
        rect[i, 1] = x1
        rect[i, 2] = y0
        rect[i, 3] = y1
        if x1 >= x0 and y1 >= y0:
            for ty in range(y0, y1 + 1):
                for tx in range(x0, x1 + 1):
                    counts[ty * ntx + tx] += 1
    offsets = np.zeros(n_tiles + 1, dtype=np.int64)
    for t in range(n_tiles):
        offsets[t + 1] = offsets[t] + counts[t]
    lists = np.empty(offsets[n_tiles], dtype=np.int64)
    fill = offsets[:-1].copy()
    for i in range(n):
        x0, x1, y0, y1 = rect[i, 0], rect[i, 1], rect[i, 2], rect[i, 3]
        if x1 >= x0 and y1 >= y0:
            for ty in range(y0, y1 + 1):
                for tx in range(x0, x1 + 1):
                    t = ty * ntx + tx
                    lists[fill[t]] = i
                    fill[t] += 1
    return offsets, lists


@njit(cache=True, parallel=True)
def raster_forward(
    means,
    conics,
    colors,
    alphas,
    offsets,
    lists,
    height,
    width,
    tile_size,
    bg,
    q_cutoff,
    term_threshold,
    out_img,
    out_T,
    out_nvis,
):
    ntx = (width + tile_size - 1) // tile_size
    nty = (height + tile_size - 1) // tile_size
    for tile in prange(ntx * nty):
        tx = tile % ntx
        ty = tile // ntx
        px0 = tx * tile_size
        py0 = ty * tile_size
        px1 = min(px0 + tile_size, width)
        py1 = min(py0 + tile_size, height)
        start = offsets[tile]
        end = offsets[tile + 1]
        for py in range(py0, py1):
            for px in range(px0, px1):
                cx = px + 0.5
                cy = py + 0.5
                T = 1.0
                cr = 0.0
                cg = 0.0
                cb = 0.0
                nvis = 0
                for e in range(start, end):
                    i = lists[e]
                    dx = cx - means[i, 0]
                    dy = cy - means[i, 1]
                    q = conics[i, 0] * dx * dx + 2.0 * conics[i, 1] * dx * dy + conics[i, 2] * dy * dy
                    nvis = e - start + 1
                    if q > q_cutoff or q < 0.0:
                        continue
                    a = alphas[i] * np.exp(-0.5 * q)
                    if a > ALPHA_CLAMP:
                        a = ALPHA_CLAMP
                    cr += colors[i, 0] * a * T
                    cg += colors[i, 1] * a * T
                    cb += colors[i, 2] * a * T
                    T *= 1.0 - a
                    if T < term_threshold:
                        break
                out_img[py, px, 0] = cr + T * bg[0]
                out_img[py, px, 1] = cg + T * bg[1]
                out_img[py, px, 2] = cb + T * bg[2]
                out_T[py, px] = T
                out_nvis[py, px] = nvis


@njit(cache=True, parallel=True)
def raster_backward(
    means,
    conics,
    colors,
    alphas,
    offsets,
    lists,
    height,
    width,
    tile_size,
    bg,
    q_cutoff,
    out_T,
    out_nvis,
    g_img,
    ge_mean,
    ge_conic,
    ge_color,
    ge_alpha,
):
    """Per-entry gradients; slot e belongs to exactly one tile (disjoint writes)."""
    ntx = (width + tile_size - 1) // tile_size
    nty = (height + tile_size - 1) // tile_size
    for tile in prange(ntx * nty):
        tx = tile % ntx
        ty = tile // ntx
        px0 = tx * tile_size
        py0 = ty * tile_size
        px1 = min(px0 + tile_size, width)
        py1 = min(py0 + tile_size, height)
        start = offsets[tile]
        for py in range(py0, py1):
            for px in range(px0, px1):
                nvis = out_nvis[py, px]
                if nvis == 0:
                    continue
                cx = px + 0.5
                cy = py + 0.5
                gr = g_img[py, px, 0]
                gg = g_img[py, px, 1]
                gb = g_img[py, px, 2]
                T = out_T[py, px]
                # running sum of everything composited behind the current splat
                ar = T * bg[0]
                ag = T * bg[1]
                ab = T * bg[2]
                for e in range(start + nvis - 1, start - 1, -1):
                    i = lists[e]
                    dx = cx - means[i, 0]
                    dy = cy - means[i, 1]
                    qa = conics[i, 0]
                    qb = conics[i, 1]
                    qc = conics[i, 2]
                    q = qa * dx * dx + 2.0 * qb * dx * dy + qc * dy * dy
                    if q > q_cutoff or q < 0.0:
                        continue
                    expq = np.exp(-0.5 * q)
                    a = alphas[i] * expq
                    clamped = a > ALPHA_CLAMP
                    if clamped:
                        a = ALPHA_CLAMP
                    T = T / (1.0 - a)  # transmittance in front of this splat
                    ge_color[e, 0] += a * T * gr
                    ge_color[e, 1] += a * T * gg
                    ge_color[e, 2] += a * T * gb
                    d_alpha = (
                        (colors[i, 0] * T - ar / (1.0 - a)) * gr
                        + (colors[i, 1] * T - ag / (1.0 - a)) * gg
                        + (colors[i, 2] * T - ab / (1.0 - a)) * gb
                    )
                    if not clamped:
                        ge_alpha[e] += expq * d_alpha
                        gq = -0.5 * a * d_alpha
                        ge_conic[e, 0] += gq * dx * dx
                        ge_conic[e, 1] += gq * 2.0 * dx * dy
                        ge_conic[e, 2] += gq * dy * dy
                        gmx = gq * (-2.0) * (qa * dx + qb * dy)
                        gmy = gq * (-2.0) * (qb * dx + qc * dy)
                        ge_mean[e, 0] += gmx
                        ge_mean[e, 1] += gmy
                    ar += colors[i, 0] * a * T
                    ag += colors[i, 1] * a * T
                    ab += colors[i, 2] * a * T


@njit(cache=True)
def merge_entry_grads(lists, ge_mean, ge_conic, ge_color, ge_alpha, n_splats):
    """Serial, fixed-order reduction of per-entry gradients onto splats."""
    g_mean = np.zeros((n_splats, 2), dtype=ge_mean.dtype)
    g_conic = np.zeros((n_splats, 3), dtype=ge_conic.dtype)
    g_color = np.zeros((n_splats, 3), dtype=ge_color.dtype)
    g_alpha = np.zeros(n_splats, dtype=ge_alpha.dtype)
    for e in range(lists.shape[0]):
        i = lists[e]
        g_mean[i, 0] += ge_mean[e, 0]
        g_mean[i, 1] += ge_mean[e, 1]
        g_conic[i, 0] += ge_conic[e, 0]
        g_conic[i, 1] += ge_conic[e, 1]
        g_conic[i, 2] += ge_conic[e, 2]
        g_color[i, 0] += ge_color[e, 0]
        g_color[i, 1] += ge_color[e, 1]
        g_color[i, 2] += ge_color[e, 2]
        g_alpha[i] += ge_alpha[e]
    return g_mean, g_conic, g_color, g_alpha


@njit(cache=True)
def reference_forward(means, conics, colors, alphas, height, width, bg, q_cutoff, out_img):
    """Oracle path: every pixel blends every splat in order; no tiles, no
    early termination, no footprint lists."""
    n = means.shape[0]
    for py in range(height):
        for px in range(width):
            cx = px + 0.5
            cy = py + 0.5
            T = 1.0
            cr = 0.0
            cg = 0.0
            cb = 0.0
            for i in range(n):
                dx = cx - means[i, 0]
                dy = cy - means[i, 1]
                q = conics[i, 0] * dx * dx + 2.0 * conics[i, 1] * dx * dy + conics[i, 2] * dy * dy
                if q > q_cutoff or q < 0.0:
                    continue
                a = alphas[i] * np.exp(-0.5 * q)
                if a > ALPHA_CLAMP:
                    a = ALPHA_CLAMP
                cr += colors[i, 0] * a * T
                cg += colors[i, 1] * a * T
                cb += colors[i, 2] * a * T
                T *= 1.0 - a
            out_img[py, px, 0] = cr + T * bg[0]
            out_img[py, px, 1] = cg + T * bg[1]
            out_img[py, px, 2] = cb + T * bg[2]


@njit(cache=True)
def mesh_raster_view(px_a, px_b, depth, tris, tri_normals, height, width):
    """Z-buffered triangle fill in one orthographic frame.

    ``px_a``/``px_b`` are continuous pixel coords (col, row) per vertex.
    Returns (depth_map, mask, normal_map, n_skipped).
    """
    zbuf = np.full((height, width), np.inf)
    mask = np.zeros((height, width), dtype=np.bool_)
    normals = np.zeros((height, width, 3))
    skipped = 0
    for f in range(tris.shape[0]):
        i0, i1, i2 = tris[f, 0], tris[f, 1], tris[f, 2]
        ax, ay, az = px_a[i0], px_b[i0], depth[i0]
        bx, by, bz = px_a[i1], px_b[i1], depth[i1]
        cxx, cyy, cz = px_a[i2], px_b[i2], depth[i2]
        area = (bx - ax) * (cyy - ay) - (by - ay) * (cxx - ax)
        if np.abs(area) < 1e-12:
            skipped += 1
            continue
        lo_x = max(int(np.floor(min(ax, bx, cxx))), 0)
        hi_x = min(int(np.ceil(max(ax, bx, cxx))), width - 1)
        lo_y = max(int(np.floor(min(ay, by, cyy))), 0)
        hi_y = min(int(np.ceil(max(ay, by, cyy))), height - 1)
        inv_area = 1.0 / area
        for py in range(lo_y, hi_y + 1):
            for px in range(lo_x, hi_x + 1):
                x = px + 0.0
                y = py + 0.0
                w0 = ((bx - x) * (cyy - y) - (by - y) * (cxx - x)) * inv_area
                w1 = ((cxx - x) * (ay - y) - (cyy - y) * (ax - x)) * inv_area
                w2 = 1.0 - w0 - w1
                if w0 < 0.0 or w1 < 0.0 or w2 < 0.0:
                    continue
                z = w0 * az + w1 * bz + w2 * cz
                if z < zbuf[py, px]:
                    zbuf[py, px] = z
                    mask[py, px] = True
                    normals[py, px, 0] = tri_normals[f, 0]
                    normals[py, px, 1] = tri_normals[f, 1]
                    normals[py, px, 2] = tri_normals[f, 2]
    for py in range(height):
        for px in range(width):
            if not mask[py, px]:
                zbuf[py, px] = 0.0
    return zbuf, mask, normals, skipped
