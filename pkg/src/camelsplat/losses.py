"""Training losses and their hand-derived gradients.

Three families: photometric (L1 plus an SSIM term on a mask-derived
crop), depth supervision (masked depth-map L1 and a robust
center-to-depth-cloud distance), and geometric surface constraints
tying Gaussians to the posed mesh. total_loss runs the whole
forward/backward once for one frame and returns per-term values plus
gradients for every trainable group.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import correlate1d

from camelsplat import kernels
from camelsplat.body import forward_kinematics, forward_kinematics_vjp
from camelsplat.gaussians import deform_backward, deform_forward
from camelsplat.geometry import quat_to_rotmat, quat_to_rotmat_vjp
from camelsplat.renderer import RenderConfig, render, render_backward

SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2


@dataclass
class LossWeights:
    """Term weights and the knobs of the individual losses."""

    lam_ssim: float = 0.2
    lam_depth: float = 0.5
    lam_camel: float = 1.0
    lam_p2mesh: float = 1.0
    lam_coverage: float = 1.0
    lam_flat: float = 0.1
    lam_align: float = 0.1
    delta_p2mesh: float = 0.02  # meters of allowed off-surface drift
    delta_coverage: float = 0.02
    log_flat_ratio: float = math.log(4.0)  # target tangent/normal scale gap
    eps_huber: float = 0.01  # meters; softening of the depth-cloud distance
    depth3d_visibility: float = 0.05  # weight sum above which a splat is
    # considered seen and pulled toward the frame's depth cloud
    mask_dilation: int = 8  # pixels the photometric crop extends past the mask
    use_depth: bool = True
    use_depth3d: bool = True

    @classmethod
    def from_dict(cls, d):
        w = cls()
        for k, v in d.items():
            if not hasattr(w, k):
                raise KeyError(f"unknown loss weight {k!r}")
            setattr(w, k, type(getattr(w, k))(v))
        return w


@dataclass
class LossReport:
    photometric: float = 0.0
    l1: float = 0.0
    ssim: float = 1.0  # similarity of the rendered crop, 1 = identical
    depth2d: float = 0.0
    depth3d: float = 0.0
    p2mesh: float = 0.0
    coverage: float = 0.0
    flatness: float = 0.0
    align: float = 0.0
    total: float = 0.0

    def terms(self):
        return {
            "photometric": self.photometric, "depth2d": self.depth2d,
            "depth3d": self.depth3d, "p2mesh": self.p2mesh,
            "coverage": self.coverage, "flatness": self.flatness,
            "align": self.align,
        }


def gaussian_window(size=11, sigma=1.5):
    r = np.arange(size) - (size - 1) / 2.0
    k = np.exp(-0.5 * (r / sigma) ** 2)
    return k / k.sum()


def _filt(img, kernel):
    """Separable symmetric correlation with zero padding (self-adjoint)."""
    out = correlate1d(img, kernel, axis=0, mode='constant', cval=0.0)
    return correlate1d(out, kernel, axis=1, mode='constant', cval=0.0)


def ssim_images(x, y, kernel=None, grad=False, weight=None):
    """SSIM map of two images plus, optionally, d(sum(weight*map))/dx.

    x and y are (H, W) or (H, W, C) in [0, 1]; statistics use an 11x11
    Gaussian window with zero padding. y is treated as constant.
    """
    if kernel is None:
        kernel = gaussian_window()
    x = np.asarray(x, np.float64)
    y = np.asarray(y, np.float64)
    mu_x = _filt(x, kernel)
    mu_y = _filt(y, kernel)
    sxx = _filt(x * x, kernel) - mu_x * mu_x
    syy = _filt(y * y, kernel) - mu_y * mu_y
    sxy = _filt(x * y, kernel) - mu_x * mu_y
    a1 = 2.0 * mu_x * mu_y + SSIM_C1
    a2 = 2.0 * sxy + SSIM_C2
    b1 = mu_x * mu_x + mu_y * mu_y + SSIM_C1
    b2 = sxx + syy + SSIM_C2
    smap = (a1 * a2) / (b1 * b2)
    if not grad:
        return smap
    g = weight if weight is not None else np.ones_like(smap)
    den = b1 * b2
    d_a1 = g * a2 / den
    d_a2 = g * a1 / den
    d_b1 = -g * smap / b1
    d_b2 = -g * smap / b2
    d_mu_x = 2.0 * mu_y * d_a1 + 2.0 * mu_x * d_b1 \
        - 2.0 * mu_y * d_a2 - 2.0 * mu_x * d_b2
    d_x = _filt(d_mu_x, kernel) + 2.0 * x * _filt(d_b2, kernel) \
        + 2.0 * y * _filt(d_a2, kernel)
    return smap, d_x


def _mask_crop(mask, dilation, shape):
    """Row/col slice covering the mask grown by `dilation` pixels."""
    rows = np.any(mask, axis=1)
    cols = np.any(mask, axis=0)
    if not rows.any():
        return slice(0, shape[0]), slice(0, shape[1])
    r = np.nonzero(rows)[0]
    c = np.nonzero(cols)[0]
    return (slice(max(r[0] - dilation, 0), min(r[-1] + dilation + 1, shape[0])),
            slice(max(c[0] - dilation, 0), min(c[-1] + dilation + 1, shape[1])))


def photometric_loss(pred, target, mask, weights):
    """L1 + lam_ssim * (1 - SSIM) over the dilated-mask crop.

    Returns (l1, ssim, d_pred). Bitwise-equal images short-circuit to an
    exactly zero gradient: both terms sit at their global optimum there,
    so zero is the true (sub)gradient and optimizers hold still.
    """
    d_pred = np.zeros_like(pred)
    if np.array_equal(pred, target):
        return 0.0, 1.0, d_pred
    rs, cs = _mask_crop(mask, weights.mask_dilation, pred.shape[:2])
    px = pred[rs, cs]
    tx = target[rs, cs]
    n = px.size
    diff = px - tx
    l1 = float(np.abs(diff).sum() / n)
    d_crop = np.sign(diff) / n
    smap, d_ssim = ssim_images(px, tx, grad=True,
                               weight=np.full(px.shape, -weights.lam_ssim / n))
    ssim_val = float(smap.mean())
    d_pred[rs, cs] = d_crop + d_ssim
    return l1, ssim_val, d_pred


def depth_map_loss(pred_depth, gt_depth, mask):
    """Mean |predicted - stored| camera depth over valid masked pixels."""
    region = mask & (gt_depth > 0.0)
    n = int(region.sum())
    if n == 0:
        return 0.0, np.zeros_like(pred_depth)
    diff = np.where(region, pred_depth - gt_depth, 0.0)
    loss = float(np.abs(diff).sum() / n)
    d_pred = np.sign(diff) / n
    return loss, d_pred


def depth_cloud_loss(centers, visible, cloud_points, eps):
    """Robust distance from visible centers to the frame's depth cloud.

    rho(u) = sqrt(u + eps^2) - eps on squared distances u; the loss is
    the mean over visible centers, halved. Gradient goes to the centers;
    the matched cloud point is constant.
    """
    d_centers = np.zeros_like(centers)
    vis_idx = np.nonzero(visible)[0]
    if vis_idx.size == 0 or cloud_points.shape[0] == 0:
        return 0.0, d_centers
    q = centers[vis_idx]
    nn, d2 = kernels.nn_points(q, cloud_points)
    rho = np.sqrt(d2 + eps * eps) - eps
    loss = float(rho.sum() / (2.0 * vis_idx.size))
    drho = 0.5 / np.sqrt(d2 + eps * eps)
    d_centers[vis_idx] = (drho / vis_idx.size)[:, None] * (q - cloud_points[nn])
    return loss, d_centers


def p2mesh_loss(centers, verts, normals, delta):
    """Hinged distance of centers to the nearest vertex tangent plane."""
    nn, _ = kernels.nn_points(centers, verts)
    off = centers - verts[nn]
    s = np.einsum('ni,ni->n', off, normals[nn])
    excess = np.abs(s) - delta
    active = excess > 0.0
    n = centers.shape[0]
    loss = float(np.where(active, excess, 0.0).sum() / n)
    d_centers = (active * np.sign(s) / n)[:, None] * normals[nn]
    return loss, d_centers


def coverage_loss(verts, centers, delta):
    """Hinged distance from each vertex to its nearest Gaussian center."""
    nn, d2 = kernels.nn_points(verts, centers)
    dist = np.sqrt(d2)
    excess = dist - delta
    active = excess > 0.0
    nv = verts.shape[0]
    loss = float(np.where(active, excess, 0.0).sum() / nv)
    d_centers = np.zeros_like(centers)
    safe = np.where(dist > 0.0, dist, 1.0)
    contrib = (active / (nv * safe))[:, None] * (centers[nn] - verts)
    np.add.at(d_centers, nn, contrib)
    return loss, d_centers


def flatness_loss(log_scales, log_ratio):
    """Push the two larger axes to `log_ratio` above the smallest one."""
    order = np.argsort(log_scales, axis=1)
    srt = np.take_along_axis(log_scales, order, axis=1)
    r1 = srt[:, 1] - srt[:, 0] - log_ratio
    r2 = srt[:, 2] - srt[:, 0] - log_ratio
    n = log_scales.shape[0]
    loss = float((np.abs(r1) + np.abs(r2)).sum() / n)
    d_srt = np.zeros_like(log_scales)
    s1 = np.sign(r1) / n
    s2 = np.sign(r2) / n
    d_srt[:, 1] = s1
    d_srt[:, 2] = s2
    d_srt[:, 0] = -(s1 + s2)
    d_ls = np.zeros_like(log_scales)
    np.put_along_axis(d_ls, order, d_srt, axis=1)
    return loss, d_ls


def align_loss(rot_world, log_scales, verts, normals, centers):
    """Misalignment of each splat's thinnest axis with the surface normal.

    The axis choice (smallest scale) and the matched vertex are
    piecewise constant; gradient flows only into the world rotation.
    """
    n = rot_world.shape[0]
    axis = np.argmin(log_scales, axis=1)
    e_n = rot_world[np.arange(n), :, axis]  # column of the smallest axis
    nn, _ = kernels.nn_points(centers, verts)
    vn = normals[nn]
    dots = np.einsum('ni,ni->n', e_n, vn)
    # Unit vectors keep 1 - |dot| >= 0; the max() only strips the
    # negative roundoff dust of perfectly aligned splats.
    loss = float(max(0.0, (1.0 - np.abs(dots)).sum() / n))
    if loss == 0.0:
        # Every splat is aligned to machine precision.  |dot| = 1 is the
        # maximum of dot over rotations, so the true derivative vanishes;
        # emitting the VJP's roundoff dust instead would hand an adaptive
        # optimizer a sign to amplify and kick a converged run off its
        # fixed point.
        return 0.0, np.zeros_like(rot_world)
    d_en = (-np.sign(dots) / n)[:, None] * vn
    d_rot = np.zeros_like(rot_world)
    d_rot[np.arange(n), :, axis] = d_en
    return loss, d_rot


@dataclass
class GradientBundle:
    """Gradients for every trainable group, keyed like the optimizer."""

    centers: np.ndarray
    quats: np.ndarray
    log_scales: np.ndarray
    opacity_logits: np.ndarray
    colors: np.ndarray
    skin_deltas: np.ndarray
    joint_rotations: np.ndarray
    global_translation: np.ndarray
    sh1: np.ndarray | None = None

    def as_dict(self):
        d = {
            "centers": self.centers, "quats": self.quats,
            "log_scales": self.log_scales,
            "opacity_logits": self.opacity_logits, "colors": self.colors,
            "skin_deltas": self.skin_deltas,
            "joint_rotations": self.joint_rotations,
            "global_translation": self.global_translation,
        }
        if self.sh1 is not None:
            d["sh1"] = self.sh1
        return d


def total_loss(frame, body, cloud, pose, weights=None, render_config=None,
               mode="camel", want_grad=True):
    """Full forward/backward for one frame.

    `frame` must carry color (H,W,3), depth (H,W), mask (H,W) and camera;
    depth_points() should return the frame's depth cloud in world space.
    Returns (LossReport, GradientBundle | None, RenderResult).

    The geometric constraints compare the canonical cloud against the
    rest-pose template, so they regularize the splat's shape without
    exerting any pull on the per-frame pose; a splat riding its bones
    perfectly pays the same penalty in every frame. Image and depth terms
    are the only pose evidence.
    """
    if weights is None:
        weights = LossWeights()
    if render_config is None:
        render_config = RenderConfig()

    transforms, fk_ctx = forward_kinematics(body, pose)
    posed, d_ctx = deform_forward(cloud, transforms, mode)
    result = render(posed, frame.camera, render_config)

    rep = LossReport()
    n = cloud.n_gaussians
    d_color = None
    d_depth = None
    d_centers_w = np.zeros((n, 3))
    d_rot_w = np.zeros((n, 3, 3))
    d_log_scales = np.zeros((n, 3))

    rep.l1, rep.ssim, d_color = photometric_loss(
        result.color, frame.color, frame.mask, weights)
    rep.photometric = rep.l1 + weights.lam_ssim * (1.0 - rep.ssim)

    if weights.use_depth:
        rep.depth2d, d_depth_raw = depth_map_loss(
            result.depth, frame.depth, frame.mask)
        d_depth = weights.lam_depth * d_depth_raw
        if weights.use_depth3d:
            seen = result.wsum > weights.depth3d_visibility
            rep.depth3d, g = depth_cloud_loss(
                posed.centers, seen, frame.depth_points(),
                weights.eps_huber)
            d_centers_w += weights.lam_depth * g

    apply_camel = mode == "camel" and weights.lam_camel > 0.0
    d_centers_c = None
    d_quats_c = None
    if apply_camel:
        verts = body.mesh.vertices
        normals = body.mesh.vertex_normals
        d_centers_c = np.zeros((n, 3))
        rep.p2mesh, g = p2mesh_loss(cloud.centers, verts, normals,
                                    weights.delta_p2mesh)
        d_centers_c += weights.lam_camel * weights.lam_p2mesh * g
        rep.coverage, g = coverage_loss(verts, cloud.centers,
                                        weights.delta_coverage)
        d_centers_c += weights.lam_camel * weights.lam_coverage * g
        rep.flatness, g = flatness_loss(cloud.log_scales,
                                        weights.log_flat_ratio)
        d_log_scales += weights.lam_camel * weights.lam_flat * g
        rot_c = quat_to_rotmat(cloud.quats)
        rep.align, g = align_loss(rot_c, cloud.log_scales, verts,
                                  normals, cloud.centers)
        d_quats_c = quat_to_rotmat_vjp(
            cloud.quats, weights.lam_camel * weights.lam_align * g)

    rep.total = (rep.photometric
                 + weights.lam_depth * (rep.depth2d + rep.depth3d)
                 + weights.lam_camel * (weights.lam_p2mesh * rep.p2mesh
                                        + weights.lam_coverage * rep.coverage
                                        + weights.lam_flat * rep.flatness
                                        + weights.lam_align * rep.align))
    if not want_grad:
        return rep, None, result

    rg = render_backward(result, d_color, d_depth, None)
    d_centers_w += rg["centers"]
    d_rot_w += rg["rot"]
    d_log_scales += rg["log_scales"]

    dg = deform_backward(d_ctx, d_centers_w, d_rot_w)
    d_jr, d_gt = forward_kinematics_vjp(fk_ctx, dg["bone_rot"],
                                        dg["bone_trans"])
    if d_centers_c is not None:
        dg["centers"] = dg["centers"] + d_centers_c
    if d_quats_c is not None:
        dg["quats"] = dg["quats"] + d_quats_c
    grads = GradientBundle(
        centers=dg["centers"], quats=dg["quats"],
        log_scales=d_log_scales,
        opacity_logits=rg["opacity_logits"], colors=rg["colors"],
        skin_deltas=dg["skin_deltas"],
        joint_rotations=d_jr, global_translation=d_gt,
        sh1=rg["sh1"])
    return rep, grads, result
