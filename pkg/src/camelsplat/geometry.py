"""3D geometry: quaternions, axis-angle rotations, meshes, pinhole cameras.

Rotation helpers come with hand-written vector-Jacobian products so the
rest of the pipeline can backpropagate without an autodiff framework.
Quaternions use (w, x, y, z) ordering.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from camelsplat import kernels
from camelsplat.errors import DegenerateInputError, DataError


def normalize_rows(v, eps=0.0):
    """Normalize along the last axis; rows with norm <= eps raise."""
    v = np.asarray(v, np.float64)
    n = np.linalg.norm(v, axis=-1, keepdims=True)
    if np.any(n <= eps):
        raise DegenerateInputError("cannot normalize zero-length vector")
    return v / n


def quat_to_rotmat(q):
    """Rotation matrices from quaternions, normalizing the input.

    Args:
        q: (..., 4) array, (w, x, y, z); need not be unit length.

    Returns:
        (..., 3, 3) rotation matrices.
    """
    q = np.asarray(q, np.float64)
    norm = np.linalg.norm(q, axis=-1)
    if np.any(norm < 1e-12):
        raise DegenerateInputError("zero-norm quaternion")
    w, x, y, z = np.moveaxis(q / norm[..., None], -1, 0)
    out = np.empty(q.shape[:-1] + (3, 3), np.float64)
    out[..., 0, 0] = 1 - 2 * (y * y + z * z)
    out[..., 0, 1] = 2 * (x * y - w * z)
    out[..., 0, 2] = 2 * (x * z + w * y)
    out[..., 1, 0] = 2 * (x * y + w * z)
    out[..., 1, 1] = 1 - 2 * (x * x + z * z)
    out[..., 1, 2] = 2 * (y * z - w * x)
    out[..., 2, 0] = 2 * (x * z - w * y)
    out[..., 2, 1] = 2 * (y * z + w * x)
    out[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return out


def quat_to_rotmat_vjp(q, d_rot):
    """Gradient of quat_to_rotmat: maps d(loss)/dR back to d(loss)/dq.

    Includes the input normalization, so the returned gradient is with
    respect to the raw (possibly non-unit) quaternion.
    """
    q = np.asarray(q, np.float64)
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    r = q / norm
    w, x, y, z = np.moveaxis(r, -1, 0)
    g = d_rot

    def G(i, j):
        return g[..., i, j]

    dr = np.empty_like(r)
    dr[..., 0] = 2 * (-z * G(0, 1) + y * G(0, 2) + z * G(1, 0) - x * G(1, 2)
                      - y * G(2, 0) + x * G(2, 1))
    dr[..., 1] = 2 * (y * G(0, 1) + z * G(0, 2) + y * G(1, 0)
                      - 2 * x * G(1, 1) - w * G(1, 2) + z * G(2, 0)
                      + w * G(2, 1) - 2 * x * G(2, 2))
    dr[..., 2] = 2 * (-2 * y * G(0, 0) + x * G(0, 1) + w * G(0, 2)
                      + x * G(1, 0) + z * G(1, 2) - w * G(2, 0)
                      + z * G(2, 1) - 2 * y * G(2, 2))
    dr[..., 3] = 2 * (-2 * z * G(0, 0) - w * G(0, 1) + x * G(0, 2)
                      + w * G(1, 0) - 2 * z * G(1, 1) + y * G(1, 2)
                      + x * G(2, 0) + y * G(2, 1))
    # Through the normalization: project out the radial component.
    radial = np.sum(dr * r, axis=-1, keepdims=True)
    return (dr - r * radial) / norm


def rotmat_to_quat(rot):
    """Quaternions (w, x, y, z) from rotation matrices. Not differentiated."""
    rot = np.asarray(rot, np.float64)
    single = rot.ndim == 2
    m = rot.reshape(-1, 3, 3)
    q = np.empty((m.shape[0], 4), np.float64)
    for i in range(m.shape[0]):
        r = m[i]
        tr = r[0, 0] + r[1, 1] + r[2, 2]
        if tr > 0:
            s = np.sqrt(tr + 1.0) * 2
            q[i] = [0.25 * s, (r[2, 1] - r[1, 2]) / s,
                    (r[0, 2] - r[2, 0]) / s, (r[1, 0] - r[0, 1]) / s]
        elif r[0, 0] > r[1, 1] and r[0, 0] > r[2, 2]:
            s = np.sqrt(1.0 + r[0, 0] - r[1, 1] - r[2, 2]) * 2
            q[i] = [(r[2, 1] - r[1, 2]) / s, 0.25 * s,
                    (r[0, 1] + r[1, 0]) / s, (r[0, 2] + r[2, 0]) / s]
        elif r[1, 1] > r[2, 2]:
            s = np.sqrt(1.0 + r[1, 1] - r[0, 0] - r[2, 2]) * 2
            q[i] = [(r[0, 2] - r[2, 0]) / s, (r[0, 1] + r[1, 0]) / s,
                    0.25 * s, (r[1, 2] + r[2, 1]) / s]
        else:
            s = np.sqrt(1.0 + r[2, 2] - r[0, 0] - r[1, 1]) * 2
            q[i] = [(r[1, 0] - r[0, 1]) / s, (r[0, 2] + r[2, 0]) / s,
                    (r[1, 2] + r[2, 1]) / s, 0.25 * s]
        if q[i, 0] < 0:
            q[i] = -q[i]
    return q[0] if single else q.reshape(rot.shape[:-2] + (4,))


def skew(v):
    """Cross-product matrices [v]x for (..., 3) input."""
    v = np.asarray(v, np.float64)
    out = np.zeros(v.shape[:-1] + (3, 3), np.float64)
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


_AA_TINY = 1e-9


def axis_angle_to_matrix(v):
    """Rodrigues rotation from axis-angle vectors (angle = |v|, radians)."""
    v = np.asarray(v, np.float64)
    theta2 = np.sum(v * v, axis=-1)
    theta = np.sqrt(theta2)
    small = theta < _AA_TINY
    with np.errstate(invalid="ignore", divide="ignore"):
        a = np.where(small, 1.0 - theta2 / 6.0, np.sin(theta) / np.where(small, 1.0, theta))
        b = np.where(small, 0.5 - theta2 / 24.0,
                     (1.0 - np.cos(theta)) / np.where(small, 1.0, theta2))
    k = skew(v)
    eye = np.broadcast_to(np.eye(3), k.shape)
    return eye + a[..., None, None] * k + b[..., None, None] * (k @ k)


def axis_angle_to_matrix_vjp(v, d_rot):
    """Gradient of axis_angle_to_matrix.

    Uses the closed form dR/dv_i = (v_i [v]x + [v x ((I - R) e_i)]x) / |v|^2 R,
    which degenerates to [e_i]x at the identity.
    """
    v = np.asarray(v, np.float64)
    g = np.asarray(d_rot, np.float64)
    rot = axis_angle_to_matrix(v)
    theta2 = np.sum(v * v, axis=-1)
    out = np.empty_like(v)
    small = theta2 < _AA_TINY * _AA_TINY
    eye = np.eye(3)
    imr = eye - rot  # (..., 3, 3)
    for i in range(3):
        e = eye[i]
        cross = np.cross(v, imr[..., :, i])  # v x ((I - R) e_i)
        basis = skew(np.broadcast_to(e, v.shape))
        with np.errstate(invalid="ignore", divide="ignore"):
            full = (v[..., i, None, None] * skew(v) + skew(cross)) \
                / np.where(small, 1.0, theta2)[..., None, None]
        d_r_dvi = np.where(small[..., None, None], basis, full @ rot)
        out[..., i] = np.sum(g * d_r_dvi, axis=(-2, -1))
    return out


def compute_vertex_normals(vertices, faces):
    """Area-weighted vertex normals.

    Degenerate faces contribute nothing; vertices without any face area
    default to +z. Output rows are unit length.
    """
    vertices = np.asarray(vertices, np.float64)
    faces = np.asarray(faces, np.int64)
    normals = np.zeros_like(vertices)
    if faces.size:
        v0 = vertices[faces[:, 0]]
        fn = np.cross(vertices[faces[:, 1]] - v0, vertices[faces[:, 2]] - v0)
        for k in range(3):
            np.add.at(normals, faces[:, k], fn)
    norm = np.linalg.norm(normals, axis=-1)
    bad = norm < 1e-20
    normals[bad] = (0.0, 0.0, 1.0)
    norm = np.where(bad, 1.0, norm)
    return normals / norm[:, None]


@dataclass
class TriangleMesh:
    """Triangle mesh with lazily computed area-weighted vertex normals."""

    vertices: np.ndarray
    faces: np.ndarray
    _normals: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, np.float64)
        self.faces = np.asarray(self.faces, np.int64)
        if self.vertices.ndim != 2 or self.vertices.shape[1] != 3:
            raise DataError("mesh vertices must be (V, 3)")
        if self.faces.ndim != 2 or self.faces.shape[1] != 3:
            raise DataError("mesh faces must be (F, 3)")
        if self.faces.size and (self.faces.min() < 0
                                or self.faces.max() >= len(self.vertices)):
            raise DataError("face indices out of range")

    @property
    def vertex_normals(self):
        if self._normals is None:
            self._normals = compute_vertex_normals(self.vertices, self.faces)
        return self._normals

    def with_vertices(self, vertices):
        """Same connectivity, new vertex positions (normals recomputed)."""
        return TriangleMesh(vertices, self.faces)

    def mean_edge_length(self):
        e = np.concatenate([
            self.vertices[self.faces[:, 1]] - self.vertices[self.faces[:, 0]],
            self.vertices[self.faces[:, 2]] - self.vertices[self.faces[:, 1]],
            self.vertices[self.faces[:, 0]] - self.vertices[self.faces[:, 2]],
        ])
        return float(np.mean(np.linalg.norm(e, axis=1)))


def nearest_vertex(points, vertices):
    """Exact nearest vertex per query point.

    Returns (indices, distances). Accepts a TriangleMesh or an (V, 3)
    array; ties resolve to the lowest vertex index.
    """
    if isinstance(vertices, TriangleMesh):
        vertices = vertices.vertices
    vertices = np.asarray(vertices, np.float64)
    points = np.asarray(points, np.float64).reshape(-1, 3)
    if vertices.shape[0] == 0:
        raise DataError("nearest_vertex needs a non-empty vertex set")
    idx, d2 = kernels.nn_points(points, vertices)
    return idx, np.sqrt(d2)


@dataclass
class Camera:
    """Pinhole camera: intrinsics plus a world-to-camera rigid transform.

    Camera frame: x right, y down, z forward; u = fx * x / z + cx.
    """

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    rot: np.ndarray  # (3, 3) world-to-camera rotation
    trans: np.ndarray  # (3,) world-to-camera translation

    def __post_init__(self):
        self.rot = np.asarray(self.rot, np.float64).reshape(3, 3)
        self.trans = np.asarray(self.trans, np.float64).reshape(3)
        if not (self.fx > 0 and self.fy > 0):
            raise DataError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise DataError("principal point outside the image")
        if abs(np.linalg.det(self.rot) - 1.0) > 1e-6:
            raise DataError("camera rotation is not special orthogonal")

    def world_to_cam(self, points):
        points = np.asarray(points, np.float64)
        return points @ self.rot.T + self.trans

    def cam_to_world(self, points):
        points = np.asarray(points, np.float64)
        return (points - self.trans) @ self.rot

    @property
    def position(self):
        """Camera center in world coordinates."""
        return -self.rot.T @ self.trans

    @classmethod
    def look_at(cls, eye, target, up, fx, fy, cx, cy, width, height):
        eye = np.asarray(eye, np.float64)
        z = np.asarray(target, np.float64) - eye
        zn = np.linalg.norm(z)
        if zn < 1e-12:
            raise DegenerateInputError("look_at eye equals target")
        z = z / zn
        x = np.cross(z, np.asarray(up, np.float64))
        xn = np.linalg.norm(x)
        if xn < 1e-12:
            raise DegenerateInputError("look_at direction parallel to up")
        x = x / xn
        y = np.cross(z, x)
        rot = np.stack([x, y, z])
        return cls(fx, fy, cx, cy, width, height, rot, -rot @ eye)

    def to_dict(self):
        return {
            "fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
            "width": self.width, "height": self.height,
            "rot": self.rot.tolist(), "trans": self.trans.tolist(),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(d["fx"], d["fy"], d["cx"], d["cy"], d["width"],
                   d["height"], np.array(d["rot"]), np.array(d["trans"]))


def project_point(points, camera, eps=1e-8):
    """Project world points through a pinhole camera.

    Args:
        points: (..., 3) world coordinates.
        camera: Camera.
        eps: minimum camera-frame depth treated as in front.

    Returns:
        (uv, depth, valid): pixel coordinates (..., 2), camera-frame z,
        and a boolean flag; points at or behind the camera plane get
        valid=False and zeroed uv.
    """
    pts = np.asarray(points, np.float64)
    cam_pts = camera.world_to_cam(pts)
    z = cam_pts[..., 2]
    valid = z > eps
    zs = np.where(valid, z, 1.0)
    u = camera.fx * cam_pts[..., 0] / zs + camera.cx
    v = camera.fy * cam_pts[..., 1] / zs + camera.cy
    uv = np.stack([np.where(valid, u, 0.0), np.where(valid, v, 0.0)], axis=-1)
    return uv, z, valid


def inverse_project(depth, camera, world=False):
    """Lift a depth image to 3D points, skipping non-positive depths.

    Returns an (M, 3) array in the camera frame, or in world coordinates
    when world=True. Pixel (row, col) maps through u=col, v=row.
    """
    depth = np.asarray(depth, np.float64)
    rows, cols = np.nonzero(depth > 0)
    d = depth[rows, cols]
    x = (cols - camera.cx) / camera.fx * d
    y = (rows - camera.cy) / camera.fy * d
    pts = np.stack([x, y, d], axis=-1)
    if world:
        return camera.cam_to_world(pts)
    return pts
