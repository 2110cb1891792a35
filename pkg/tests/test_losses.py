"""Loss terms: closed forms, reference implementations, gradients."""

import numpy as np
import pytest

from camelsplat.losses import (LossWeights, align_loss, coverage_loss,
                               depth_cloud_loss, depth_map_loss,
                               flatness_loss, gaussian_window, p2mesh_loss,
                               photometric_loss, ssim_images)

from helpers import central_diff, max_abs, rel_err


# ----------------------------------------------------------------- window

def test_gaussian_window_normalized():
    k = gaussian_window()
    assert k.shape == (11,)
    assert abs(k.sum() - 1.0) < 1e-12
    assert np.array_equal(k, k[::-1])
    assert k[5] == k.max()


def test_gaussian_window_formula():
    k = gaussian_window(size=7, sigma=2.0)
    r = np.arange(7) - 3.0
    want = np.exp(-0.5 * (r / 2.0) ** 2)
    want /= want.sum()
    assert np.allclose(k, want, atol=1e-15)


# ------------------------------------------------------------------- ssim

def ssim_reference(x, y, size=11, sigma=1.5):
    """Direct sliding-window SSIM with zero padding, nested loops."""
    from camelsplat.losses import SSIM_C1, SSIM_C2
    k = gaussian_window(size, sigma)
    w2 = np.outer(k, k)
    h, w = x.shape
    r = size // 2
    xp = np.zeros((h + 2 * r, w + 2 * r))
    yp = np.zeros_like(xp)
    xp[r:r + h, r:r + w] = x
    yp[r:r + h, r:r + w] = y
    out = np.empty((h, w))
    for i in range(h):
        for j in range(w):
            wx = xp[i:i + size, j:j + size]
            wy = yp[i:i + size, j:j + size]
            mx = (w2 * wx).sum()
            my = (w2 * wy).sum()
            sxx = (w2 * wx * wx).sum() - mx * mx
            syy = (w2 * wy * wy).sum() - my * my
            sxy = (w2 * wx * wy).sum() - mx * my
            out[i, j] = ((2 * mx * my + SSIM_C1) * (2 * sxy + SSIM_C2)
                         / ((mx * mx + my * my + SSIM_C1)
                            * (sxx + syy + SSIM_C2)))
    return out


def test_ssim_identical_is_one(rng):
    x = rng.random((16, 16))
    smap = ssim_images(x, x)
    assert max_abs(smap - 1.0) < 1e-12


def test_ssim_matches_sliding_window_reference(rng):
    x = rng.random((10, 12))
    y = np.clip(x + rng.standard_normal((10, 12)) * 0.15, 0, 1)
    got = ssim_images(x, y)
    want = ssim_reference(x, y)
    assert max_abs(got - want) < 1e-6


def test_ssim_symmetric(rng):
    x = rng.random((12, 12))
    y = rng.random((12, 12))
    assert max_abs(ssim_images(x, y) - ssim_images(y, x)) < 1e-12


def test_ssim_checkerboard_negative():
    x = np.indices((16, 16)).sum(axis=0) % 2 * 1.0
    y = 1.0 - x
    assert ssim_images(x, y).mean() < 0


def test_ssim_grad_matches_fd(rng):
    x = rng.random((9, 9))
    y = rng.random((9, 9))
    w = rng.standard_normal((9, 9))

    def scalar():
        return float(np.sum(ssim_images(x, y) * w))

    _, d_x = ssim_images(x, y, grad=True, weight=w)
    fd = central_diff(scalar, x)
    assert rel_err(d_x, fd, floor=1e-6) < 1e-6


def test_ssim_multichannel(rng):
    x = rng.random((8, 8, 3))
    y = rng.random((8, 8, 3))
    smap = ssim_images(x, y)
    assert smap.shape == (8, 8, 3)
    for c in range(3):
        assert max_abs(smap[:, :, c]
                       - ssim_images(x[:, :, c], y[:, :, c])) < 1e-12


# ------------------------------------------------------------- photometric

def test_photometric_identical_short_circuits(rng):
    img = rng.random((12, 12, 3))
    mask = np.ones((12, 12), bool)
    l1, s, g = photometric_loss(img, img.copy(), mask, LossWeights())
    assert l1 == 0.0 and s == 1.0
    assert max_abs(g) == 0.0


def test_photometric_value_composition(rng):
    w = LossWeights()
    pred = rng.random((14, 14, 3))
    target = rng.random((14, 14, 3))
    mask = np.ones((14, 14), bool)
    l1, s, _ = photometric_loss(pred, target, mask, w)
    assert abs(l1 - np.abs(pred - target).mean()) < 1e-12
    assert abs(s - ssim_images(pred, target).mean()) < 1e-12


def test_photometric_crop_limits_support(rng):
    w = LossWeights(mask_dilation=2)
    target = rng.random((20, 20, 3))
    pred = target.copy()
    mask = np.zeros((20, 20), bool)
    mask[8:11, 8:11] = True
    pred[0, 0] += 0.5  # corruption far outside the dilated crop
    l1, s, g = photometric_loss(pred, target, mask, w)
    assert l1 == 0.0 and abs(s - 1.0) < 1e-12
    # The corrupted pixel sits outside the loss support: exactly no
    # gradient there, only roundoff inside the (identical) crop.
    assert max_abs(g[0, 0]) == 0.0
    assert max_abs(g) < 1e-15
    # The same corruption inside the crop is seen.
    pred2 = target.copy()
    pred2[9, 9] += 0.5
    l1b, _, g2 = photometric_loss(pred2, target, mask, w)
    assert l1b > 0
    assert max_abs(g2[:6]) == 0.0 and max_abs(g2[:, :6]) == 0.0


def test_photometric_grad_matches_fd(rng):
    w = LossWeights()
    pred = rng.random((10, 10, 3))
    target = rng.random((10, 10, 3))
    mask = np.ones((10, 10), bool)

    def scalar():
        l1, s, _ = photometric_loss(pred, target, mask, w)
        return l1 + w.lam_ssim * (1.0 - s)

    _, _, g = photometric_loss(pred, target, mask, w)
    fd = central_diff(scalar, pred)
    assert rel_err(g, fd, floor=1e-6) < 1e-6


# ------------------------------------------------------------------ depth

def test_depth_map_loss_closed_form():
    pred = np.array([[1.0, 2.0], [3.0, 4.0]])
    gt = np.array([[1.5, 0.0], [2.0, 4.0]])
    mask = np.array([[True, True], [False, True]])
    # Valid pixels: (0,0) diff -0.5 and (1,1) diff 0; gt==0 excluded.
    loss, g = depth_map_loss(pred, gt, mask)
    assert abs(loss - 0.25) < 1e-15
    assert g[0, 0] == -0.5 and g[1, 1] == 0.0
    assert g[0, 1] == 0.0 and g[1, 0] == 0.0


def test_depth_map_loss_empty_mask():
    z = np.zeros((3, 3))
    loss, g = depth_map_loss(z + 1, z, np.zeros((3, 3), bool))
    assert loss == 0.0 and max_abs(g) == 0.0


def test_depth_cloud_loss_closed_form():
    centers = np.array([[0.0, 0, 0], [1.0, 0, 0], [9.0, 9, 9]])
    visible = np.array([True, True, False])
    pts = np.array([[0.3, 0, 0], [5.0, 5, 5]])
    eps = 0.01
    loss, g = depth_cloud_loss(centers, visible, pts, eps)
    d2 = np.array([0.09, 0.49])  # both visible centers match pts[0]
    want = float(np.sum(np.sqrt(d2 + eps * eps) - eps) / 4.0)
    assert abs(loss - want) < 1e-12
    assert max_abs(g[2]) == 0.0  # invisible center takes no gradient


def test_depth_cloud_loss_grad_matches_fd(rng):
    centers = rng.standard_normal((6, 3))
    visible = np.array([True, True, False, True, True, True])
    pts = rng.standard_normal((15, 3)) * 1.3

    def scalar():
        return depth_cloud_loss(centers, visible, pts, 0.01)[0]

    _, g = depth_cloud_loss(centers, visible, pts, 0.01)
    fd = central_diff(scalar, centers)
    assert rel_err(g, fd, floor=1e-7) < 1e-5


def test_depth_cloud_loss_empty():
    c = np.zeros((2, 3))
    loss, g = depth_cloud_loss(c, np.zeros(2, bool), np.ones((4, 3)), 0.01)
    assert loss == 0.0 and max_abs(g) == 0.0
    loss, g = depth_cloud_loss(c, np.ones(2, bool), np.zeros((0, 3)), 0.01)
    assert loss == 0.0 and max_abs(g) == 0.0


# -------------------------------------------------------------- geometric

def plane_verts():
    xs, ys = np.meshgrid(np.linspace(-1, 1, 5), np.linspace(-1, 1, 5))
    verts = np.stack([xs.ravel(), ys.ravel(), np.zeros(25)], axis=1)
    normals = np.tile([0.0, 0.0, 1.0], (25, 1))
    return verts, normals


def test_p2mesh_inside_band_is_zero():
    verts, normals = plane_verts()
    centers = verts[:4] + [0, 0, 0.015]  # below the 0.02 band
    loss, g = p2mesh_loss(centers, verts, normals, 0.02)
    assert loss == 0.0 and max_abs(g) == 0.0


def test_p2mesh_hinge_value():
    verts, normals = plane_verts()
    centers = np.array([[0.0, 0, 0.05], [0.0, 0, -0.05]])
    loss, g = p2mesh_loss(centers, verts, normals, 0.02)
    assert abs(loss - 0.03) < 1e-12  # mean of |0.05| - 0.02 on both sides
    assert np.allclose(g[0], [0, 0, 0.5], atol=1e-12)
    assert np.allclose(g[1], [0, 0, -0.5], atol=1e-12)


def test_coverage_zero_when_centers_on_verts():
    verts, _ = plane_verts()
    loss, g = coverage_loss(verts, verts.copy(), 0.02)
    assert loss == 0.0 and max_abs(g) == 0.0


def test_coverage_hinge_value():
    verts = np.array([[0.0, 0, 0]])
    centers = np.array([[0.5, 0, 0], [3.0, 0, 0]])
    loss, g = coverage_loss(verts, centers, 0.02)
    assert abs(loss - 0.48) < 1e-12  # nearest center is 0.5 away
    assert np.allclose(g[0], [1.0, 0, 0], atol=1e-12)
    assert max_abs(g[1]) == 0.0  # not the nearest: no pull


def test_coverage_grad_matches_fd(rng):
    verts = rng.standard_normal((8, 3))
    centers = rng.standard_normal((5, 3)) * 1.5

    def scalar():
        return coverage_loss(verts, centers, 0.02)[0]

    _, g = coverage_loss(verts, centers, 0.02)
    fd = central_diff(scalar, centers)
    assert rel_err(g, fd, floor=1e-7) < 1e-5


def test_flatness_closed_form():
    r = np.log(4.0)
    ls = np.array([
        [0.0, r, r],  # exactly at target: zero
        [0.0, 0.0, 0.0],  # both gaps zero: 2r
        [-1.0, -1.0 + r, -1.0 + 2 * r],  # one at target, one r over
    ])
    loss, _ = flatness_loss(ls, r)
    assert abs(loss - (0.0 + 2 * r + r) / 3.0) < 1e-12


def test_flatness_zero_at_target_any_order():
    r = np.log(4.0)
    ls = np.array([[r, 0.0, r], [r, r, 0.0]])
    loss, g = flatness_loss(ls, r)
    assert loss == 0.0
    assert max_abs(g) == 0.0


def test_flatness_grad_matches_fd(rng):
    ls = rng.standard_normal((7, 3))
    r = 0.7

    def scalar():
        return flatness_loss(ls, r)[0]

    _, g = flatness_loss(ls, r)
    fd = central_diff(scalar, ls)
    assert rel_err(g, fd, floor=1e-7) < 1e-6


def test_align_aligned_is_zero():
    from camelsplat.geometry import quat_to_rotmat_vjp

    verts, normals = plane_verts()
    n = 3
    rot = np.tile(np.eye(3), (n, 1, 1))
    ls = np.tile([0.0, 0.0, -2.0], (n, 1))  # thin axis = z = normal
    centers = verts[:n].copy()
    loss, g = align_loss(rot, ls, verts, normals, centers)
    assert loss == 0.0
    # The ambient matrix gradient is normal to the rotation manifold at
    # the optimum; chaining into quaternions must annihilate it.
    quats = np.tile([1.0, 0, 0, 0], (n, 1))
    d_q = quat_to_rotmat_vjp(quats, g)
    assert max_abs(d_q) < 1e-15


def test_align_orthogonal_is_one():
    verts, normals = plane_verts()
    rot = np.eye(3)[None]
    ls = np.array([[-2.0, 0.0, 0.0]])  # thin axis = x, normal = z
    loss, _ = align_loss(rot, ls, verts, normals, verts[:1].copy())
    assert abs(loss - 1.0) < 1e-12


def test_align_sign_invariant():
    verts, normals = plane_verts()
    rot = np.eye(3)[None]
    ls = np.array([[0.0, 0.0, -2.0]])
    a = align_loss(rot, ls, verts, normals, verts[:1].copy())[0]
    b = align_loss(rot, ls, verts, -normals, verts[:1].copy())[0]
    assert a == b == 0.0


# ------------------------------------------------------------------ config

def test_weights_from_dict_roundtrip():
    w = LossWeights.from_dict({"lam_ssim": 0.3, "mask_dilation": 4,
                               "use_depth": False})
    assert w.lam_ssim == 0.3
    assert w.mask_dilation == 4
    assert w.use_depth is False
    assert isinstance(w.mask_dilation, int)


def test_weights_from_dict_unknown_key():
    with pytest.raises(KeyError):
        LossWeights.from_dict({"lam_nope": 1.0})
