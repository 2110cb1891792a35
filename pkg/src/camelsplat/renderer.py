"""Differentiable splat rasterization.

The projection/covariance setup runs in numpy; the per-pixel composite
loops live in the kernel backends. Everything needed by the backward
pass is kept in an opaque ctx so render_backward can chain image-space
gradients all the way to world-space splat parameters.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from camelsplat import kernels
from camelsplat.errors import DataError


@dataclass
class RenderConfig:
    znear: float = 0.05
    power_cutoff: float = 4.5  # keep pixels within 3 sigma of the center
    stop_transmittance: float = 1e-4
    eps_alpha: float = 1e-4  # depth is reported only where coverage exceeds it
    eps_visible: float = 1e-6  # a splat counts as seen above this weight sum
    blur: float = 0.3  # screen-space dilation added to both 2D variances

    @classmethod
    def fd_safe(cls):
        """Settings that keep the render finite-difference friendly.

        The Gaussian tail cutoff moves far out and early termination is
        disabled, so tiny parameter nudges never flip a pixel's
        contribution set.
        """
        return cls(power_cutoff=35.0, stop_transmittance=0.0)


@dataclass
class RenderResult:
    color: np.ndarray  # (H, W, 3)
    depth: np.ndarray  # (H, W) alpha-weighted mean camera depth, 0 = empty
    alpha: np.ndarray  # (H, W) accumulated weight
    wsum: np.ndarray  # (N,) per-splat total compositing weight
    visible: np.ndarray  # (N,) bool, wsum above the visibility floor
    ctx: tuple


def _prepare(posed, camera, config):
    """Project splats to screen space and build compositing inputs."""
    centers = posed.centers
    rot_w = posed.rot
    cloud = posed.cloud
    n = centers.shape[0]
    w_rot = camera.rot
    p_cam = centers @ w_rot.T + camera.trans
    x, y, z = p_cam[:, 0], p_cam[:, 1], p_cam[:, 2]
    in_front = z > config.znear
    zs = np.where(in_front, z, 1.0)  # benign placeholder for culled rows

    u = camera.fx * x / zs + camera.cx
    v = camera.fy * y / zs + camera.cy
    means2d = np.stack([u, v], axis=1)

    scales = np.exp(cloud.log_scales)
    cov_w = np.einsum('nij,nj,nkj->nik', rot_w, scales ** 2, rot_w)
    cov_c = np.einsum('ij,njk,lk->nil', w_rot, cov_w, w_rot)

    jac = np.zeros((n, 2, 3))
    jac[:, 0, 0] = camera.fx / zs
    jac[:, 0, 2] = -camera.fx * x / zs ** 2
    jac[:, 1, 1] = camera.fy / zs
    jac[:, 1, 2] = -camera.fy * y / zs ** 2
    cov2d = np.einsum('nab,nbc,ndc->nad', jac, cov_c, jac)
    cov2d[:, 0, 0] += config.blur
    cov2d[:, 1, 1] += config.blur

    det = cov2d[:, 0, 0] * cov2d[:, 1, 1] - cov2d[:, 0, 1] ** 2
    ok = in_front & (det > 1e-12)
    det_s = np.where(ok, det, 1.0)
    conics = np.stack([cov2d[:, 1, 1] / det_s,
                       -cov2d[:, 0, 1] / det_s,
                       cov2d[:, 0, 0] / det_s], axis=1)

    # Conservative pixel box around the power-cutoff ellipse; the cutoff
    # test in the kernel is the real support boundary.
    rx = np.sqrt(np.maximum(2.0 * config.power_cutoff * cov2d[:, 0, 0], 0.0))
    ry = np.sqrt(np.maximum(2.0 * config.power_cutoff * cov2d[:, 1, 1], 0.0))
    x0 = np.maximum(np.floor(u - rx - 1.0), 0).astype(np.int64)
    x1 = np.minimum(np.ceil(u + rx + 1.0), camera.width - 1).astype(np.int64)
    y0 = np.maximum(np.floor(v - ry - 1.0), 0).astype(np.int64)
    y1 = np.minimum(np.ceil(v + ry + 1.0), camera.height - 1).astype(np.int64)
    onscreen = (x0 <= x1) & (y0 <= y1) & (u - rx - 1.0 < camera.width) \
        & (u + rx + 1.0 > -1.0) & (v - ry - 1.0 < camera.height) \
        & (v + ry + 1.0 > -1.0)
    ok = ok & onscreen
    bbox = np.stack([x0, x1, y0, y1], axis=1)

    alphas = 1.0 / (1.0 + np.exp(-cloud.opacity_logits))

    view_dir = None
    pre_colors = cloud.colors
    if cloud.sh1 is not None:
        d = centers - camera.position
        norm = np.linalg.norm(d, axis=1, keepdims=True)
        norm = np.where(norm < 1e-12, 1.0, norm)
        view_dir = d / norm
        pre_colors = cloud.colors + np.einsum('nij,nj->ni', cloud.sh1,
                                              view_dir)
    colors = np.clip(pre_colors, 0.0, 1.0)

    order = np.nonzero(ok)[0]
    order = order[np.argsort(z[order], kind='stable')]
    prep = {
        "p_cam": p_cam, "zs": zs, "ok": ok, "means2d": means2d,
        "scales": scales, "cov_w": cov_w, "cov_c": cov_c, "jac": jac,
        "cov2d": cov2d, "conics": conics, "bbox": bbox, "alphas": alphas,
        "colors": colors, "pre_colors": pre_colors, "view_dir": view_dir,
        "order": order, "rot_w": rot_w,
    }
    return prep


def render(posed, camera, config=None):
    """Rasterize posed Gaussians into color, depth and coverage images."""
    if config is None:
        config = RenderConfig()
    prep = _prepare(posed, camera, config)
    color, depth, alpha, wsum, kctx = kernels.splat_composite(
        prep["order"], prep["means2d"], prep["conics"], prep["alphas"],
        prep["colors"], prep["p_cam"][:, 2].copy(), prep["bbox"],
        camera.height, camera.width, config.power_cutoff,
        config.stop_transmittance, config.eps_alpha)
    visible = wsum > config.eps_visible
    ctx = (posed, camera, config, prep, kctx)
    return RenderResult(color, depth, alpha, wsum, visible, ctx)


def render_backward(result, d_color=None, d_depth=None, d_alpha=None):
    """Chain image gradients back to world-space splat parameters.

    Returns a dict with gradients for posed centers (world), posed
    rotations (world), log_scales, opacity_logits, colors and sh1.
    """
    posed, camera, config, prep, kctx = result.ctx
    cloud = posed.cloud
    n = posed.centers.shape[0]
    h, w = camera.height, camera.width
    if d_color is None:
        d_color = np.zeros((h, w, 3))
    if d_depth is None:
        d_depth = np.zeros((h, w))
    if d_alpha is None:
        d_alpha = np.zeros((h, w))
    d_means2d, d_conics, d_alphas, d_colors_k, d_zcam = \
        kernels.splat_composite_vjp(kctx, d_color, d_depth, d_alpha)

    ok = prep["ok"]
    zs = prep["zs"]
    x, y = prep["p_cam"][:, 0], prep["p_cam"][:, 1]

    # conic = inv(cov2d): full-matrix gradient of the packed conic.
    ga, gb, gc = d_conics[:, 0], d_conics[:, 1], d_conics[:, 2]
    g_full = np.empty((n, 2, 2))
    g_full[:, 0, 0] = ga
    g_full[:, 0, 1] = 0.5 * gb
    g_full[:, 1, 0] = 0.5 * gb
    g_full[:, 1, 1] = gc
    conic_full = np.empty((n, 2, 2))
    conic_full[:, 0, 0] = prep["conics"][:, 0]
    conic_full[:, 0, 1] = prep["conics"][:, 1]
    conic_full[:, 1, 0] = prep["conics"][:, 1]
    conic_full[:, 1, 1] = prep["conics"][:, 2]
    g_cov2d = -np.einsum('nab,nbc,ncd->nad', conic_full, g_full, conic_full)
    g_cov2d = np.where(ok[:, None, None], g_cov2d, 0.0)

    jac = prep["jac"]
    cov_c = prep["cov_c"]
    g_jac = np.einsum('nab,nbc->nac', g_cov2d + np.swapaxes(g_cov2d, 1, 2),
                      np.einsum('nab,nbc->nac', jac, cov_c))
    g_cov_c = np.einsum('nba,nbc,ncd->nad', jac, g_cov2d, jac)
    g_cov_w = np.einsum('ba,nbc,cd->nad', camera.rot, g_cov_c, camera.rot)

    rot_w = prep["rot_w"]
    scales = prep["scales"]
    sym = g_cov_w + np.swapaxes(g_cov_w, 1, 2)
    d_rot_w = np.einsum('nab,nbc,nc->nac', sym, rot_w, scales ** 2)
    d_s2 = np.einsum('nba,nbc,nca->na', rot_w, g_cov_w, rot_w)
    d_log_scales = 2.0 * scales ** 2 * d_s2

    fx, fy = camera.fx, camera.fy
    d_u = np.where(ok, d_means2d[:, 0], 0.0)
    d_v = np.where(ok, d_means2d[:, 1], 0.0)
    d_x = d_u * fx / zs - g_jac[:, 0, 2] * fx / zs ** 2
    d_y = d_v * fy / zs - g_jac[:, 1, 2] * fy / zs ** 2
    d_z = (-d_u * fx * x / zs ** 2 - d_v * fy * y / zs ** 2
           - g_jac[:, 0, 0] * fx / zs ** 2
           + g_jac[:, 0, 2] * 2.0 * fx * x / zs ** 3
           - g_jac[:, 1, 1] * fy / zs ** 2
           + g_jac[:, 1, 2] * 2.0 * fy * y / zs ** 3
           + np.where(ok, d_zcam, 0.0))
    d_p_cam = np.stack([d_x, d_y, d_z], axis=1) * ok[:, None]
    d_centers = d_p_cam @ camera.rot

    sig = prep["alphas"]
    d_logits = d_alphas * sig * (1.0 - sig)

    clip_open = (prep["pre_colors"] > 0.0) & (prep["pre_colors"] < 1.0)
    d_pre = d_colors_k * clip_open
    d_base_colors = d_pre
    d_sh1 = None
    if cloud.sh1 is not None:
        vd = prep["view_dir"]
        d_sh1 = np.einsum('ni,nj->nij', d_pre, vd)
        d_vd = np.einsum('nij,ni->nj', cloud.sh1, d_pre)
        off = posed.centers - camera.position
        norm = np.linalg.norm(off, axis=1, keepdims=True)
        norm = np.where(norm < 1e-12, 1.0, norm)
        d_dir_to_p = (d_vd - vd * np.sum(vd * d_vd, axis=1,
                                         keepdims=True)) / norm
        d_centers = d_centers + d_dir_to_p

    return {
        "centers": d_centers,
        "rot": np.where(ok[:, None, None], d_rot_w, 0.0),
        "log_scales": np.where(ok[:, None], d_log_scales, 0.0),
        "opacity_logits": d_logits,
        "colors": d_base_colors,
        "sh1": d_sh1,
    }
