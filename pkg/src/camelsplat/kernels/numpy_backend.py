"""Pure-numpy fallback for the hot kernels.

Same contracts as the numba backend; compositing is vectorized over a
dense (splat, row, col) tensor instead of per-pixel loops, which matches
the sequential semantics because transmittance only decreases.
"""

import numpy as np

A_MAX = 1.0 - 1e-12


def _alpha_blocks(order, means2d, conics, alphas, bbox, height, width,
                  power_cutoff):
    """Per-splat opacity aa and Gaussian falloff gval as dense tensors."""
    r = order.shape[0]
    aa_t = np.zeros((r, height, width))
    gval_t = np.zeros((r, height, width))
    for oi in range(r):
        g = order[oi]
        x0, x1, y0, y1 = bbox[g]
        xs = np.arange(x0, x1 + 1, dtype=np.float64)[None, :] - means2d[g, 0]
        ys = np.arange(y0, y1 + 1, dtype=np.float64)[:, None] - means2d[g, 1]
        power = -0.5 * (conics[g, 0] * xs * xs
                        + 2.0 * conics[g, 1] * xs * ys
                        + conics[g, 2] * ys * ys)
        gval = np.where(power >= -power_cutoff, np.exp(power), 0.0)
        gval_t[oi, y0:y1 + 1, x0:x1 + 1] = gval
        aa_t[oi, y0:y1 + 1, x0:x1 + 1] = np.minimum(alphas[g] * gval, A_MAX)
    return aa_t, gval_t


def splat_composite(order, means2d, conics, alphas, colors, zcam, bbox,
                    height, width, power_cutoff, stop_t, eps_alpha):
    """Front-to-back composite of depth-sorted splats (numpy path)."""
    n = means2d.shape[0]
    r = order.shape[0]
    ctx = (order, means2d, conics, alphas, colors, zcam, bbox,
           height, width, power_cutoff, stop_t, eps_alpha)
    if r == 0:
        return (np.zeros((height, width, 3)), np.zeros((height, width)),
                np.zeros((height, width)), np.zeros(n), ctx)
    aa_t, _ = _alpha_blocks(order, means2d, conics, alphas, bbox,
                            height, width, power_cutoff)
    tprev = np.ones_like(aa_t)
    if r > 1:
        np.cumprod(1.0 - aa_t[:-1], axis=0, out=tprev[1:])
    include = tprev > stop_t
    w_t = aa_t * tprev * include
    col = colors[order]
    color = np.einsum('rhw,rc->hwc', w_t, col)
    sw = w_t.sum(axis=0)
    sz = np.einsum('rhw,r->hw', w_t, zcam[order])
    has_depth = sw > eps_alpha
    depth = np.where(has_depth, sz / np.where(has_depth, sw, 1.0), 0.0)
    wsum = np.zeros(n)
    wsum[order] = w_t.sum(axis=(1, 2))
    return color, depth, sw, wsum, ctx


def splat_composite_vjp(ctx, d_color, d_depth, d_alpha):
    (order, means2d, conics, alphas, colors, zcam, bbox,
     height, width, power_cutoff, stop_t, eps_alpha) = ctx
    n = means2d.shape[0]
    d_means2d = np.zeros((n, 2))
    d_conics = np.zeros((n, 3))
    d_alphas = np.zeros(n)
    d_colors = np.zeros((n, 3))
    d_zcam = np.zeros(n)
    r = order.shape[0]
    if r == 0:
        return d_means2d, d_conics, d_alphas, d_colors, d_zcam
    aa_t, gval_t = _alpha_blocks(order, means2d, conics, alphas, bbox,
                                 height, width, power_cutoff)
    tprev = np.ones_like(aa_t)
    if r > 1:
        np.cumprod(1.0 - aa_t[:-1], axis=0, out=tprev[1:])
    include = tprev > stop_t
    w_t = aa_t * tprev * include
    col = colors[order]
    zc = zcam[order]
    sw = w_t.sum(axis=0)
    sz = np.einsum('rhw,r->hw', w_t, zc)
    has_depth = sw > eps_alpha
    sw_safe = np.where(has_depth, sw, 1.0)
    dval = np.where(has_depth, sz / sw_safe, 0.0)
    dd = np.where(has_depth, d_depth, 0.0)
    ghat = (np.einsum('hwc,rc->rhw', d_color, col) + d_alpha[None]
            + dd[None] * (zc[:, None, None] - dval[None]) / sw_safe[None])
    np.add.at(d_zcam, order, (dd[None] * w_t / sw_safe[None]).sum(axis=(1, 2)))
    np.add.at(d_colors, order, np.einsum('rhw,hwc->rc', w_t, d_color))
    gw = ghat * w_t
    s_after = np.zeros_like(gw)
    if r > 1:
        s_after[:-1] = np.cumsum(gw[::-1], axis=0)[::-1][1:]
    daa = include * ghat * tprev - s_after / (1.0 - aa_t)
    # The opacity clamp is flat: no gradient where aa was capped.
    for oi in range(r):
        g = order[oi]
        x0, x1, y0, y1 = bbox[g]
        gval = gval_t[oi, y0:y1 + 1, x0:x1 + 1]
        da_blk = daa[oi, y0:y1 + 1, x0:x1 + 1]
        unclamped = alphas[g] * gval <= A_MAX
        d_alphas[g] += np.sum(gval * da_blk * unclamped)
        dpower = aa_t[oi, y0:y1 + 1, x0:x1 + 1] * da_blk * unclamped
        xs = np.arange(x0, x1 + 1, dtype=np.float64)[None, :] - means2d[g, 0]
        ys = np.arange(y0, y1 + 1, dtype=np.float64)[:, None] - means2d[g, 1]
        ca, cb, cc = conics[g]
        d_means2d[g, 0] += np.sum((ca * xs + cb * ys) * dpower)
        d_means2d[g, 1] += np.sum((cb * xs + cc * ys) * dpower)
        d_conics[g, 0] += np.sum(-0.5 * xs * xs * dpower)
        d_conics[g, 1] += np.sum(-xs * ys * dpower)
        d_conics[g, 2] += np.sum(-0.5 * ys * ys * dpower)
    return d_means2d, d_conics, d_alphas, d_colors, d_zcam


def nn_points(queries, points, block=256):
    """Exact nearest neighbor by blocked brute force."""
    queries = np.asarray(queries, np.float64)
    points = np.asarray(points, np.float64)
    q_n = queries.shape[0]
    idx = np.empty(q_n, np.int64)
    d2 = np.empty(q_n, np.float64)
    for s in range(0, q_n, block):
        chunk = queries[s:s + block]
        dist = ((chunk[:, None, :] - points[None, :, :]) ** 2).sum(axis=2)
        best = np.argmin(dist, axis=1)  # first minimum: lowest index wins
        idx[s:s + block] = best
        d2[s:s + block] = dist[np.arange(chunk.shape[0]), best]
    return idx, d2


def nn_points_brute(queries, points):
    return nn_points(queries, points)
