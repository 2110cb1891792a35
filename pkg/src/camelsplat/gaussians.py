"""Surface-bound Gaussian cloud: parameters, mesh binding, deformation.

Each Gaussian carries a center, an orientation quaternion, per-axis log
scales, an opacity logit, RGB color (optionally degree-1 directional
coefficients), and a row of skinning weights tied to the body's bones.
Deformation applies the same blended bone transforms as the mesh; the
orientation is rotated by the nearest rotation to the blended matrix.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from camelsplat.errors import ConfigError, DataError
from camelsplat.geometry import quat_to_rotmat, quat_to_rotmat_vjp, \
    rotmat_to_quat, skew

BINDING_MODES = ("none", "lsw", "gom", "camel")


@dataclass
class GaussianCloud:
    """Parameter arrays of the splat cloud (canonical, rest pose)."""

    centers: np.ndarray  # (N, 3)
    quats: np.ndarray  # (N, 4), (w, x, y, z)
    log_scales: np.ndarray  # (N, 3)
    opacity_logits: np.ndarray  # (N,)
    colors: np.ndarray  # (N, 3) RGB in [0, 1]
    skin_weights: np.ndarray  # (N, n_b)
    skin_deltas: np.ndarray  # (N, n_b), used by the 'lsw' binding mode
    anchor_vertices: np.ndarray  # (N,) mesh vertex each Gaussian started on
    sh1: np.ndarray | None = None  # (N, 3, 3) optional degree-1 coefficients

    def __post_init__(self):
        self.centers = np.asarray(self.centers, np.float64)
        self.quats = np.asarray(self.quats, np.float64)
        self.log_scales = np.asarray(self.log_scales, np.float64)
        self.opacity_logits = np.asarray(self.opacity_logits, np.float64)
        self.colors = np.asarray(self.colors, np.float64)
        self.skin_weights = np.asarray(self.skin_weights, np.float64)
        self.skin_deltas = np.asarray(self.skin_deltas, np.float64)
        self.anchor_vertices = np.asarray(self.anchor_vertices, np.int64)
        n = self.centers.shape[0]
        for name, arr, shape in [
                ("centers", self.centers, (n, 3)),
                ("quats", self.quats, (n, 4)),
                ("log_scales", self.log_scales, (n, 3)),
                ("opacity_logits", self.opacity_logits, (n,)),
                ("colors", self.colors, (n, 3)),
                ("anchor_vertices", self.anchor_vertices, (n,))]:
            if arr.shape != shape:
                raise DataError(f"{name} must have shape {shape}")
        if self.skin_weights.shape != self.skin_deltas.shape \
                or self.skin_weights.ndim != 2 \
                or self.skin_weights.shape[0] != n:
            raise DataError("skin weights/deltas must be (N, n_bones)")
        if self.sh1 is not None:
            self.sh1 = np.asarray(self.sh1, np.float64)
            if self.sh1.shape != (n, 3, 3):
                raise DataError("sh1 must be (N, 3, 3)")

    @property
    def n_gaussians(self):
        return self.centers.shape[0]

    @property
    def opacities(self):
        return 1.0 / (1.0 + np.exp(-self.opacity_logits))

    def copy(self):
        return GaussianCloud(
            self.centers.copy(), self.quats.copy(), self.log_scales.copy(),
            self.opacity_logits.copy(), self.colors.copy(),
            self.skin_weights.copy(), self.skin_deltas.copy(),
            self.anchor_vertices.copy(),
            None if self.sh1 is None else self.sh1.copy())


def covariance(quats, scales):
    """World covariance R diag(s^2) R^T from quaternions and scales."""
    scales = np.asarray(scales, np.float64)
    if np.any(scales <= 0):
        raise DataError("scales must be positive")
    rot = quat_to_rotmat(quats)
    return np.einsum('...ij,...j,...kj->...ik', rot, scales ** 2, rot)


def init_on_mesh(body, scale_factor=0.5):
    """One isotropic mid-gray Gaussian per mesh vertex.

    Scales start at scale_factor times the mean edge length; skin
    weights are copied from the underlying vertex.
    """
    mesh = body.mesh
    n = mesh.vertices.shape[0]
    s_iso = scale_factor * mesh.mean_edge_length()
    quats = np.zeros((n, 4))
    quats[:, 0] = 1.0
    return GaussianCloud(
        centers=mesh.vertices.copy(),
        quats=quats,
        log_scales=np.full((n, 3), np.log(s_iso)),
        opacity_logits=np.zeros(n),
        colors=np.full((n, 3), 0.5),
        skin_weights=body.skin_weights.copy(),
        skin_deltas=np.zeros_like(body.skin_weights),
        anchor_vertices=np.arange(n, dtype=np.int64),
    )


def _inv3x3(m):
    """Batched closed-form 3x3 inverse (adjugate over determinant)."""
    a, b, c = m[..., 0, 0], m[..., 0, 1], m[..., 0, 2]
    d, e, f = m[..., 1, 0], m[..., 1, 1], m[..., 1, 2]
    g, h, i = m[..., 2, 0], m[..., 2, 1], m[..., 2, 2]
    co = np.empty_like(m)
    co[..., 0, 0] = e * i - f * h
    co[..., 0, 1] = c * h - b * i
    co[..., 0, 2] = b * f - c * e
    co[..., 1, 0] = f * g - d * i
    co[..., 1, 1] = a * i - c * g
    co[..., 1, 2] = c * d - a * f
    co[..., 2, 0] = d * h - e * g
    co[..., 2, 1] = b * g - a * h
    co[..., 2, 2] = a * e - b * d
    det = a * co[..., 0, 0] + b * co[..., 1, 0] + c * co[..., 2, 0]
    # Singular input: return junk instead of inf; callers branch on det.
    safe = np.where(det == 0.0, 1.0, det)
    return co / safe[..., None, None], det


def polar_project(m):
    """Nearest rotation (Frobenius) to each 3x3 matrix in the batch.

    Newton iteration X <- (X + X^-T)/2, which converges quadratically
    for well-conditioned input; near-singular or reflecting matrices
    fall back to an SVD with a determinant sign fix.
    """
    m = np.asarray(m, np.float64)
    single = m.ndim == 2
    x = m.reshape(-1, 3, 3).copy()
    _, det = _inv3x3(x)
    bad = ~(det > 1e-8)
    good = ~bad
    xg = x[good]
    if xg.shape[0]:
        for _ in range(24):
            inv, _ = _inv3x3(xg)
            xn = 0.5 * (xg + np.swapaxes(inv, -1, -2))
            delta = np.max(np.abs(xn - xg))
            xg = xn
            if delta < 1e-15:
                break
        x[good] = xg
    if np.any(bad):
        u, _, vt = np.linalg.svd(x[bad])
        fix = np.sign(np.linalg.det(u @ vt))
        u[..., :, 2] *= fix[..., None]
        x[bad] = u @ vt
    return x[0] if single else x.reshape(m.shape)


def polar_project_vjp(m, r, d_r):
    """Backward of polar_project: d(loss)/dM from d(loss)/dR.

    With S = R^T M the differential satisfies the skew Sylvester
    identity (tr(S) I - S) w = vec-skew(R^T dM - dM^T R); inverting it
    gives dL/dM = R [b]_x with b = (tr(S) I - S)^-1 vec-skew(R^T G).
    """
    s = np.swapaxes(r, -1, -2) @ m
    a_mat = np.swapaxes(r, -1, -2) @ d_r
    a_vec = np.stack([
        a_mat[..., 2, 1] - a_mat[..., 1, 2],
        a_mat[..., 0, 2] - a_mat[..., 2, 0],
        a_mat[..., 1, 0] - a_mat[..., 0, 1],
    ], axis=-1)
    tr = np.trace(s, axis1=-2, axis2=-1)
    w_mat = tr[..., None, None] * np.eye(3) - s
    # Ridge keeps degenerate blends (rank-deficient M) finite.
    w_mat = w_mat + 1e-12 * np.eye(3)
    b = np.linalg.solve(w_mat, a_vec[..., None])[..., 0]
    return r @ skew(b)


@dataclass
class PosedGaussians:
    """World-space pose of the cloud used by the renderer and losses."""

    centers: np.ndarray  # (N, 3) world centers
    rot: np.ndarray  # (N, 3, 3) world orientation
    cloud: GaussianCloud = field(repr=False)  # canonical parameters

    @property
    def scales(self):
        return np.exp(self.cloud.log_scales)


def effective_weights(cloud, mode):
    """Skinning weights after the learned-delta adjustment (lsw mode).

    Returns (weights, fallback_rows): rows whose adjusted weights all
    clamped to zero fall back to the base weights and take no gradient.
    """
    if mode not in BINDING_MODES:
        raise ConfigError(f"unknown binding mode {mode!r}")
    if mode != "lsw":
        return cloud.skin_weights, np.zeros(0, np.int64)
    m = np.maximum(cloud.skin_weights + cloud.skin_deltas, 0.0)
    sums = m.sum(axis=1)
    fallback = np.nonzero(sums <= 0.0)[0]
    w = np.where((sums > 0.0)[:, None],
                 m / np.where(sums > 0.0, sums, 1.0)[:, None],
                 cloud.skin_weights)
    return w, fallback


def deform_forward(cloud, transforms, mode):
    """Pose the cloud by blended bone transforms.

    Centers follow the same linear blend as mesh vertices; orientations
    are rotated by the nearest rotation to the blended matrix. Returns
    (PosedGaussians, ctx) for deform_backward.
    """
    what, fallback = effective_weights(cloud, mode)
    a = np.einsum('nk,kij->nij', what, transforms.rot)
    b = what @ transforms.trans
    centers = np.einsum('nij,nj->ni', a, cloud.centers) + b
    r_hat = polar_project(a)
    rot_local = quat_to_rotmat(cloud.quats)
    rot_world = r_hat @ rot_local
    posed = PosedGaussians(centers, rot_world, cloud)
    ctx = (cloud, transforms, mode, what, fallback, a, r_hat, rot_local)
    return posed, ctx


def deform_backward(ctx, d_centers, d_rot_world):
    """Backward of deform_forward.

    Returns a dict with gradients for the cloud (centers, quats,
    skin_deltas) and for the bone transforms (rot, trans); the latter
    feed forward_kinematics_vjp. The anchor mode 'gom' freezes canonical
    centers, so their gradient is zeroed there.
    """
    cloud, transforms, mode, what, fallback, a, r_hat, rot_local = ctx
    d_r_hat = d_rot_world @ np.swapaxes(rot_local, -1, -2)
    d_rot_local = np.swapaxes(r_hat, -1, -2) @ d_rot_world
    d_quats = quat_to_rotmat_vjp(cloud.quats, d_rot_local)
    d_a = polar_project_vjp(a, r_hat, d_r_hat)
    d_a += np.einsum('ni,nj->nij', d_centers, cloud.centers)
    d_canon_centers = np.einsum('nij,ni->nj', a, d_centers)
    d_what = (np.einsum('nij,kij->nk', d_a, transforms.rot)
              + d_centers @ transforms.trans.T)
    d_bone_rot = np.einsum('nk,nij->kij', what, d_a)
    d_bone_trans = what.T @ d_centers
    if mode == "lsw":
        m = np.maximum(cloud.skin_weights + cloud.skin_deltas, 0.0)
        sums = m.sum(axis=1)
        ok = sums > 0.0
        inner = np.sum(d_what * what, axis=1, keepdims=True)
        d_m = (d_what - inner) / np.where(ok, sums, 1.0)[:, None]
        d_deltas = d_m * (m > 0.0) * ok[:, None]
    else:
        d_deltas = np.zeros_like(cloud.skin_deltas)
    if mode == "gom":
        d_canon_centers = np.zeros_like(d_canon_centers)
    return {
        "centers": d_canon_centers,
        "quats": d_quats,
        "skin_deltas": d_deltas,
        "bone_rot": d_bone_rot,
        "bone_trans": d_bone_trans,
    }


def deform_cloud(cloud, transforms, mode="camel"):
    """Public deformation: returns the posed cloud as a GaussianCloud."""
    posed, _ = deform_forward(cloud, transforms, mode)
    out = cloud.copy()
    out.centers = posed.centers
    out.quats = rotmat_to_quat(posed.rot)
    return out
