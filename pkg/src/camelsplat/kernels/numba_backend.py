"""Hot per-pixel and nearest-neighbor loops accelerated with numba."""

import math

import numba as nb
import numpy as np

# Compositing opacity is capped just below 1 so transmittance never hits
# exactly zero; the cap is applied identically in forward and backward.
A_MAX = 1.0 - 1e-12


@nb.njit(cache=True)
def _build_pixel_lists(order, bbox, height, width):
    """CSR lists of splats per pixel, preserving front-to-back order.

    Entries store positions into `order`, so iterating a pixel's slice
    visits splats in global depth order.
    """
    npix = height * width
    counts = np.zeros(npix + 1, np.int64)
    for oi in range(order.shape[0]):
        g = order[oi]
        x0, x1, y0, y1 = bbox[g, 0], bbox[g, 1], bbox[g, 2], bbox[g, 3]
        for y in range(y0, y1 + 1):
            row = y * width
            for x in range(x0, x1 + 1):
                counts[row + x + 1] += 1
    for p in range(npix):
        counts[p + 1] += counts[p]
    entries = np.empty(counts[npix], np.int64)
    cursor = counts[:npix].copy()
    for oi in range(order.shape[0]):
        g = order[oi]
        x0, x1, y0, y1 = bbox[g, 0], bbox[g, 1], bbox[g, 2], bbox[g, 3]
        for y in range(y0, y1 + 1):
            row = y * width
            for x in range(x0, x1 + 1):
                entries[cursor[row + x]] = oi
                cursor[row + x] += 1
    return counts, entries


@nb.njit(cache=True)
def _composite_forward(counts, entries, order, means2d, conics, alphas, colors,
                       zcam, height, width, power_cutoff, stop_t, eps_alpha):
    color = np.zeros((height, width, 3), np.float64)
    depth = np.zeros((height, width), np.float64)
    alpha_img = np.zeros((height, width), np.float64)
    wsum = np.zeros(means2d.shape[0], np.float64)
    for y in range(height):
        for x in range(width):
            p = y * width + x
            t = 1.0
            c0 = 0.0
            c1 = 0.0
            c2 = 0.0
            sz = 0.0
            sw = 0.0
            for e in range(counts[p], counts[p + 1]):
                if t <= stop_t:
                    break
                g = order[entries[e]]
                dx = x - means2d[g, 0]
                dy = y - means2d[g, 1]
                power = -0.5 * (conics[g, 0] * dx * dx
                                + 2.0 * conics[g, 1] * dx * dy
                                + conics[g, 2] * dy * dy)
                if power < -power_cutoff:
                    continue
                aa = alphas[g] * math.exp(power)
                if aa > A_MAX:
                    aa = A_MAX
                w = aa * t
                c0 += w * colors[g, 0]
                c1 += w * colors[g, 1]
                c2 += w * colors[g, 2]
                sz += w * zcam[g]
                sw += w
                wsum[g] += w
                t *= 1.0 - aa
            color[y, x, 0] = c0
            color[y, x, 1] = c1
            color[y, x, 2] = c2
            alpha_img[y, x] = sw
            if sw > eps_alpha:
                depth[y, x] = sz / sw
    return color, depth, alpha_img, wsum


@nb.njit(cache=True)
def _composite_backward(counts, entries, order, means2d, conics, alphas, colors,
                        zcam, height, width, power_cutoff, stop_t, eps_alpha,
                        d_color, d_depth, d_alpha, max_len):
    n = means2d.shape[0]
    d_means2d = np.zeros((n, 2), np.float64)
    d_conics = np.zeros((n, 3), np.float64)
    d_alphas = np.zeros(n, np.float64)
    d_colors = np.zeros((n, 3), np.float64)
    d_zcam = np.zeros(n, np.float64)
    # Scratch for one pixel's replayed contribution list.
    s_g = np.empty(max_len, np.int64)
    s_gval = np.empty(max_len, np.float64)
    s_aa = np.empty(max_len, np.float64)
    s_w = np.empty(max_len, np.float64)
    s_tprev = np.empty(max_len, np.float64)
    s_dx = np.empty(max_len, np.float64)
    s_dy = np.empty(max_len, np.float64)
    for y in range(height):
        for x in range(width):
            p = y * width + x
            # Replay the forward composite, keeping per-contribution state.
            t = 1.0
            sz = 0.0
            sw = 0.0
            m = 0
            for e in range(counts[p], counts[p + 1]):
                if t <= stop_t:
                    break
                g = order[entries[e]]
                dx = x - means2d[g, 0]
                dy = y - means2d[g, 1]
                power = -0.5 * (conics[g, 0] * dx * dx
                                + 2.0 * conics[g, 1] * dx * dy
                                + conics[g, 2] * dy * dy)
                if power < -power_cutoff:
                    continue
                gval = math.exp(power)
                aa = alphas[g] * gval
                if aa > A_MAX:
                    aa = A_MAX
                w = aa * t
                s_g[m] = g
                s_gval[m] = gval
                s_aa[m] = aa
                s_w[m] = w
                s_tprev[m] = t
                s_dx[m] = dx
                s_dy[m] = dy
                sz += w * zcam[g]
                sw += w
                t *= 1.0 - aa
                m += 1
            if m == 0:
                continue
            has_depth = sw > eps_alpha
            dval = sz / sw if has_depth else 0.0
            dc0 = d_color[y, x, 0]
            dc1 = d_color[y, x, 1]
            dc2 = d_color[y, x, 2]
            da_pix = d_alpha[y, x]
            dd_pix = d_depth[y, x]
            # Reverse scan: d w_i needs the suffix sum of ghat_j * w_j.
            s_after = 0.0
            for i in range(m - 1, -1, -1):
                g = s_g[i]
                w = s_w[i]
                ghat = (dc0 * colors[g, 0] + dc1 * colors[g, 1]
                        + dc2 * colors[g, 2] + da_pix)
                if has_depth:
                    ghat += dd_pix * (zcam[g] - dval) / sw
                    d_zcam[g] += dd_pix * w / sw
                d_colors[g, 0] += w * dc0
                d_colors[g, 1] += w * dc1
                d_colors[g, 2] += w * dc2
                daa = ghat * s_tprev[i] - s_after / (1.0 - s_aa[i])
                s_after += ghat * w
                if alphas[g] * s_gval[i] > A_MAX:
                    continue  # clamped: flat in alpha and position
                d_alphas[g] += s_gval[i] * daa
                dpower = s_aa[i] * daa
                dx = s_dx[i]
                dy = s_dy[i]
                ca = conics[g, 0]
                cb = conics[g, 1]
                cc = conics[g, 2]
                d_means2d[g, 0] += (ca * dx + cb * dy) * dpower
                d_means2d[g, 1] += (cb * dx + cc * dy) * dpower
                d_conics[g, 0] += -0.5 * dx * dx * dpower
                d_conics[g, 1] += -dx * dy * dpower
                d_conics[g, 2] += -0.5 * dy * dy * dpower
    return d_means2d, d_conics, d_alphas, d_colors, d_zcam


def splat_composite(order, means2d, conics, alphas, colors, zcam, bbox,
                    height, width, power_cutoff, stop_t, eps_alpha):
    """Front-to-back composite of depth-sorted splats.

    Returns (color, depth, alpha, per-splat weight sums, ctx); ctx feeds
    the matching backward pass.
    """
    counts, entries = _build_pixel_lists(order, bbox, height, width)
    color, depth, alpha_img, wsum = _composite_forward(
        counts, entries, order, means2d, conics, alphas, colors, zcam,
        height, width, power_cutoff, stop_t, eps_alpha)
    ctx = (counts, entries, order, means2d, conics, alphas, colors, zcam,
           height, width, power_cutoff, stop_t, eps_alpha)
    return color, depth, alpha_img, wsum, ctx


def splat_composite_vjp(ctx, d_color, d_depth, d_alpha):
    """Backward of splat_composite for the given upstream image gradients."""
    (counts, entries, order, means2d, conics, alphas, colors, zcam,
     height, width, power_cutoff, stop_t, eps_alpha) = ctx
    max_len = int(np.max(np.diff(counts))) if counts.shape[0] > 1 else 0
    if max_len == 0:
        n = means2d.shape[0]
        return (np.zeros((n, 2)), np.zeros((n, 3)), np.zeros(n),
                np.zeros((n, 3)), np.zeros(n))
    return _composite_backward(
        counts, entries, order, means2d, conics, alphas, colors, zcam,
        height, width, power_cutoff, stop_t, eps_alpha,
        np.ascontiguousarray(d_color), np.ascontiguousarray(d_depth),
        np.ascontiguousarray(d_alpha), max_len)


@nb.njit(cache=True)
def _nn_brute(queries, points):
    q_n = queries.shape[0]
    idx = np.empty(q_n, np.int64)
    d2 = np.empty(q_n, np.float64)
    for i in range(q_n):
        best = np.inf
        best_j = -1
        for j in range(points.shape[0]):
            dx = queries[i, 0] - points[j, 0]
            dy = queries[i, 1] - points[j, 1]
            dz = queries[i, 2] - points[j, 2]
            d = dx * dx + dy * dy + dz * dz
            if d < best:
                best = d
                best_j = j
        idx[i] = best_j
        d2[i] = best
    return idx, d2


@nb.njit(cache=True)
def _nn_grid(queries, points):
    p_n = points.shape[0]
    q_n = queries.shape[0]
    idx_out = np.empty(q_n, np.int64)
    d2_out = np.empty(q_n, np.float64)
    # Uniform grid over the point bounding box, ~cbrt(P) cells per axis.
    lo = np.empty(3, np.float64)
    span = np.empty(3, np.float64)
    for d in range(3):
        mn = points[0, d]
        mx = points[0, d]
        for p in range(1, p_n):
            v = points[p, d]
            if v < mn:
                mn = v
            if v > mx:
                mx = v
        lo[d] = mn
        span[d] = mx - mn
    ext = max(span[0], max(span[1], span[2]))
    ncell = int(round(p_n ** (1.0 / 3.0))) + 1
    if ncell > 48:
        ncell = 48
    cs = ext / ncell if ext > 0.0 else 1.0
    dims = np.empty(3, np.int64)
    for d in range(3):
        nd = int(span[d] / cs) + 1
        if nd > 128:
            nd = 128
        dims[d] = nd
    nx, ny, nz = dims[0], dims[1], dims[2]
    ncells = nx * ny * nz
    counts = np.zeros(ncells + 1, np.int64)
    cell_of = np.empty(p_n, np.int64)
    for p in range(p_n):
        ix = int((points[p, 0] - lo[0]) / cs)
        iy = int((points[p, 1] - lo[1]) / cs)
        iz = int((points[p, 2] - lo[2]) / cs)
        if ix >= nx:
            ix = nx - 1
        if iy >= ny:
            iy = ny - 1
        if iz >= nz:
            iz = nz - 1
        c = (ix * ny + iy) * nz + iz
        cell_of[p] = c
        counts[c + 1] += 1
    for c in range(ncells):
        counts[c + 1] += counts[c]
    bucket = np.empty(p_n, np.int64)
    cursor = counts[:ncells].copy()
    for p in range(p_n):
        c = cell_of[p]
        bucket[cursor[c]] = p
        cursor[c] += 1
    cs2 = cs * cs
    for qi in range(q_n):
        qx = queries[qi, 0]
        qy = queries[qi, 1]
        qz = queries[qi, 2]
        ix = int((qx - lo[0]) / cs)
        iy = int((qy - lo[1]) / cs)
        iz = int((qz - lo[2]) / cs)
        if ix < 0:
            ix = 0
        if iy < 0:
            iy = 0
        if iz < 0:
            iz = 0
        if ix >= nx:
            ix = nx - 1
        if iy >= ny:
            iy = ny - 1
        if iz >= nz:
            iz = nz - 1
        ring_max = max(max(ix, nx - 1 - ix), max(max(iy, ny - 1 - iy),
                                                 max(iz, nz - 1 - iz)))
        best = np.inf
        best_j = -1
        for ring in range(ring_max + 1):
            # Cells at Chebyshev ring r hold points no closer than (r-1)*cs,
            # so once that bound exceeds the best distance we are done.
            if best_j >= 0 and ring >= 1:
                lb = (ring - 1) * (ring - 1) * cs2
                if lb > best:
                    break
            for ox in range(-ring, ring + 1):
                cx = ix + ox
                if cx < 0 or cx >= nx:
                    continue
                for oy in range(-ring, ring + 1):
                    cy = iy + oy
                    if cy < 0 or cy >= ny:
                        continue
                    for oz in range(-ring, ring + 1):
                        if max(abs(ox), max(abs(oy), abs(oz))) != ring:
                            continue
                        cz = iz + oz
                        if cz < 0 or cz >= nz:
                            continue
                        c = (cx * ny + cy) * nz + cz
                        for b in range(counts[c], counts[c + 1]):
                            j = bucket[b]
                            dx = qx - points[j, 0]
                            dy = qy - points[j, 1]
                            dz = qz - points[j, 2]
                            d = dx * dx + dy * dy + dz * dz
                            if d < best or (d == best and j < best_j):
                                best = d
                                best_j = j
        idx_out[qi] = best_j
        d2_out[qi] = best
    return idx_out, d2_out


def nn_points(queries, points):
    """Exact nearest neighbor: index and squared distance per query.

    Ties are broken toward the lowest point index, matching a first-wins
    brute-force scan.
    """
    queries = np.ascontiguousarray(queries, np.float64)
    points = np.ascontiguousarray(points, np.float64)
    if queries.shape[0] == 0:
        return np.empty(0, np.int64), np.empty(0, np.float64)
    if points.shape[0] <= 64:
        return _nn_brute(queries, points)
    return _nn_grid(queries, points)


def nn_points_brute(queries, points):
    """Brute-force twin of nn_points, kept for tests and benchmarks."""
    queries = np.ascontiguousarray(queries, np.float64)
    points = np.ascontiguousarray(points, np.float64)
    if queries.shape[0] == 0:
        return np.empty(0, np.int64), np.empty(0, np.float64)
    return _nn_brute(queries, points)
