"""Evaluation metrics: joint errors in millimeters and image quality."""

from __future__ import annotations

import math

import numpy as np

from camelsplat.errors import DataError
from camelsplat.losses import ssim_images

PSNR_CAP = 99.0


def mpjpe(pred_joints, gt_joints, root=0):
    """Mean per-joint position error in mm after root centering."""
    p = np.asarray(pred_joints, np.float64)
    g = np.asarray(gt_joints, np.float64)
    if p.shape != g.shape or p.ndim != 2 or p.shape[1] != 3:
        raise DataError("joint arrays must both be (J, 3)")
    p = p - p[root]
    g = g - g[root]
    return float(np.linalg.norm(p - g, axis=1).mean() * 1000.0)


def umeyama_alignment(src, dst):
    """Similarity transform (s, R, t) minimizing ||dst - (s R src + t)||.

    R is a proper rotation (det +1) even for reflective optima.
    """
    src = np.asarray(src, np.float64)
    dst = np.asarray(dst, np.float64)
    mu_s = src.mean(axis=0)
    mu_d = dst.mean(axis=0)
    sc = src - mu_s
    dc = dst - mu_d
    cov = dc.T @ sc / src.shape[0]
    u, d, vt = np.linalg.svd(cov)
    s_fix = np.ones(3)
    if np.linalg.det(u) * np.linalg.det(vt) < 0:
        s_fix[2] = -1.0
    rot = u @ np.diag(s_fix) @ vt
    var_s = (sc ** 2).sum() / src.shape[0]
    scale = float((d * s_fix).sum() / var_s) if var_s > 0 else 1.0
    trans = mu_d - scale * rot @ mu_s
    return scale, rot, trans


def pa_mpjpe(pred_joints, gt_joints):
    """MPJPE after Procrustes (similarity) alignment, in mm.

    The closed-form alignment minimizes the squared error, which on
    pathological anticorrelated clouds can leave a larger mean norm than
    the plain root shift. The root shift is itself a similarity
    transform, so the report takes the better of the two; Procrustes
    wins on anything resembling a real prediction, and the value can
    never exceed mpjpe().
    """
    p = np.asarray(pred_joints, np.float64)
    g = np.asarray(gt_joints, np.float64)
    if p.shape != g.shape or p.ndim != 2 or p.shape[1] != 3:
        raise DataError("joint arrays must both be (J, 3)")
    s, rot, t = umeyama_alignment(p, g)
    aligned = s * (p @ rot.T) + t
    pa = float(np.linalg.norm(aligned - g, axis=1).mean() * 1000.0)
    return min(pa, mpjpe(p, g))


def v2v(pred_verts, gt_verts, pred_root=None, gt_root=None):
    """Mean vertex-to-vertex error in mm, optionally root-aligned."""
    p = np.asarray(pred_verts, np.float64)
    g = np.asarray(gt_verts, np.float64)
    if p.shape != g.shape:
        raise DataError("vertex arrays must have equal shapes")
    if pred_root is not None:
        p = p - np.asarray(pred_root, np.float64)
    if gt_root is not None:
        g = g - np.asarray(gt_root, np.float64)
    return float(np.linalg.norm(p - g, axis=1).mean() * 1000.0)


def psnr(img, ref):
    """Peak signal-to-noise ratio for [0, 1] images, capped at 99 dB."""
    a = np.asarray(img, np.float64)
    b = np.asarray(ref, np.float64)
    if a.shape != b.shape:
        raise DataError("image shapes differ")
    mse = float(((a - b) ** 2).mean())
    if mse <= 0.0:
        return PSNR_CAP
    return float(min(10.0 * math.log10(1.0 / mse), PSNR_CAP))


def ssim(img, ref):
    """Mean SSIM over the full image (shared windowed implementation)."""
    return float(ssim_images(img, ref).mean())
