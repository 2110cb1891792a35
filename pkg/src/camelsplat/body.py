"""Articulated body model: kinematic tree, skinning, and a toy body.

The body is a triangle mesh rigged to a bone tree. Poses are per-joint
axis-angle rotations plus a global translation; bone k's world transform
maps its rest joint to the posed joint. Linear blend skinning moves
vertices (and, elsewhere, Gaussians) by weighted bone transforms.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from camelsplat.errors import DataError
from camelsplat.geometry import (TriangleMesh, axis_angle_to_matrix,
                                 axis_angle_to_matrix_vjp)


@dataclass
class PoseState:
    """Axis-angle joint rotations (radians) and a global translation."""

    joint_rotations: np.ndarray  # (n_b, 3)
    global_translation: np.ndarray  # (3,)

    def __post_init__(self):
        self.joint_rotations = np.asarray(self.joint_rotations, np.float64)
        self.global_translation = np.asarray(self.global_translation,
                                             np.float64).reshape(3)

    @classmethod
    def identity(cls, n_bones):
        return cls(np.zeros((n_bones, 3)), np.zeros(3))

    def copy(self):
        return PoseState(self.joint_rotations.copy(),
                         self.global_translation.copy())

    def wrap(self):
        """Re-wrap axis-angle magnitudes into [0, pi) in place."""
        mag = np.linalg.norm(self.joint_rotations, axis=1)
        for k in np.nonzero(mag >= np.pi)[0]:
            m = mag[k]
            while m >= np.pi:
                self.joint_rotations[k] *= 1.0 - 2.0 * np.pi / m
                m = abs(m - 2.0 * np.pi)
        return self


@dataclass
class BoneTransforms:
    """World transforms per bone: posed = rot @ rest + trans."""

    rot: np.ndarray  # (n_b, 3, 3)
    trans: np.ndarray  # (n_b, 3)


@dataclass
class BodyModel:
    """Rest-pose mesh, joints, kinematic tree, and skinning weights."""

    mesh: TriangleMesh
    joints: np.ndarray  # (n_b, 3) rest joint positions
    parents: np.ndarray  # (n_b,) parent indices, root = -1
    skin_weights: np.ndarray  # (V, n_b), rows sum to 1

    def __post_init__(self):
        self.joints = np.asarray(self.joints, np.float64)
        self.parents = np.asarray(self.parents, np.int64)
        self.skin_weights = np.asarray(self.skin_weights, np.float64)
        n_b = self.joints.shape[0]
        if self.parents.shape != (n_b,):
            raise DataError("parents length must match joint count")
        if n_b == 0:
            raise DataError("body needs at least one bone")
        if self.parents[0] != -1:
            raise DataError("joint 0 must be the root (parent -1)")
        for k in range(1, n_b):
            if not 0 <= self.parents[k] < k:
                raise DataError(
                    f"parent of joint {k} must precede it in the tree")
        v = self.mesh.vertices.shape[0]
        if self.skin_weights.shape != (v, n_b):
            raise DataError("skin weights must be (V, n_bones)")
        sums = self.skin_weights.sum(axis=1)
        bad = np.nonzero(np.abs(sums - 1.0) > 1e-4)[0]
        if bad.size:
            raise DataError(
                f"skin weight row {bad[0]} sums to {sums[bad[0]]:.6f}, not 1")
        # Normalize exactly so identity-pose translation is exact.
        self.skin_weights = self.skin_weights / sums[:, None]

    @property
    def n_bones(self):
        return self.joints.shape[0]


def forward_kinematics(body, pose):
    """Bone transforms for a pose.

    The root's local transform carries the global rotation and
    translation. Returns (BoneTransforms, ctx) where ctx feeds
    forward_kinematics_vjp.
    """
    n_b = body.n_bones
    if pose.joint_rotations.shape != (n_b, 3):
        raise DataError(
            f"pose has {pose.joint_rotations.shape[0]} joint rotations, "
            f"body has {n_b} bones")
    local_rot = axis_angle_to_matrix(pose.joint_rotations)
    a_rot = np.empty((n_b, 3, 3))
    a_trans = np.empty((n_b, 3))
    a_rot[0] = local_rot[0]
    a_trans[0] = body.joints[0] + pose.global_translation
    for k in range(1, n_b):
        p = body.parents[k]
        a_rot[k] = a_rot[p] @ local_rot[k]
        a_trans[k] = a_rot[p] @ (body.joints[k] - body.joints[p]) + a_trans[p]
    b_rot = a_rot.copy()
    b_trans = a_trans - np.einsum('kij,kj->ki', a_rot, body.joints)
    ctx = (body, pose, local_rot, a_rot, a_trans)
    return BoneTransforms(b_rot, b_trans), ctx


def forward_kinematics_vjp(ctx, d_rot, d_trans):
    """Backward of forward_kinematics.

    Args:
        ctx: context from forward_kinematics.
        d_rot: (n_b, 3, 3) upstream gradient on BoneTransforms.rot.
        d_trans: (n_b, 3) upstream gradient on BoneTransforms.trans.

    Returns:
        (d_joint_rotations, d_global_translation).
    """
    body, pose, local_rot, a_rot, a_trans = ctx
    n_b = body.n_bones
    # B.rot = A.rot, B.trans = A.trans - A.rot @ j  =>  pull back into A.
    da_rot = np.array(d_rot, np.float64, copy=True)
    da_trans = np.array(d_trans, np.float64, copy=True)
    da_rot -= np.einsum('ki,kj->kij', da_trans, body.joints)
    d_joint_rot = np.empty((n_b, 3))
    for k in range(n_b - 1, 0, -1):
        p = body.parents[k]
        offset = body.joints[k] - body.joints[p]
        # A_k = A_p @ L_k (rotation), A_k.t = A_p.R @ offset + A_p.t
        d_local = a_rot[p].T @ da_rot[k]
        da_rot[p] += da_rot[k] @ local_rot[k].T
        da_rot[p] += np.outer(da_trans[k], offset)
        da_trans[p] += da_trans[k]
        d_joint_rot[k] = axis_angle_to_matrix_vjp(pose.joint_rotations[k],
                                                  d_local)
    d_joint_rot[0] = axis_angle_to_matrix_vjp(pose.joint_rotations[0],
                                              da_rot[0])
    return d_joint_rot, da_trans[0].copy()


def joint_positions(body, pose):
    """Posed world positions of all joints."""
    transforms, ctx = forward_kinematics(body, pose)
    return ctx[4].copy()


def blend_transforms(weights, transforms):
    """Per-point blended affine maps: A = sum_k w_k R_k, b = sum_k w_k t_k."""
    a = np.einsum('nk,kij->nij', weights, transforms.rot)
    b = weights @ transforms.trans
    return a, b


def blend_apply(a, b, points):
    """Apply per-point affine maps: out = A @ p + b."""
    return np.einsum('nij,nj->ni', a, points) + b


def blend_apply_vjp(a, points, weights, transforms, d_out):
    """Backward of blend_transforms + blend_apply for posed points.

    Returns gradients for (points, weights, transforms.rot,
    transforms.trans).
    """
    d_points = np.einsum('nij,ni->nj', a, d_out)
    d_a = np.einsum('ni,nj->nij', d_out, points)
    d_weights = (np.einsum('nij,kij->nk', d_a, transforms.rot)
                 + d_out @ transforms.trans.T)
    d_rot = np.einsum('nk,nij->kij', weights, d_a)
    d_trans = weights.T @ d_out
    return d_points, d_weights, d_rot, d_trans


def lbs_vertices(body, transforms):
    """Pose the template mesh by linear blend skinning."""
    a, b = blend_transforms(body.skin_weights, transforms)
    return body.mesh.with_vertices(blend_apply(a, b, body.mesh.vertices))


# ---------------------------------------------------------------------------
# Toy body
# ---------------------------------------------------------------------------

# name, parent, start, end, radius
_DEFAULT_SKELETON = [
    ("torso", -1, (0.00, 1.00, 0.00), (0.00, 1.58, 0.00), 0.130),
    ("l_upper_arm", 0, (0.19, 1.52, 0.00), (0.45, 1.44, 0.00), 0.045),
    ("l_forearm", 1, (0.45, 1.44, 0.00), (0.70, 1.34, 0.00), 0.040),
    ("r_upper_arm", 0, (-0.19, 1.52, 0.00), (-0.45, 1.44, 0.00), 0.045),
    ("r_forearm", 3, (-0.45, 1.44, 0.00), (-0.70, 1.34, 0.00), 0.040),
    ("l_thigh", 0, (0.10, 1.00, 0.00), (0.12, 0.55, 0.00), 0.065),
    ("l_shin", 5, (0.12, 0.55, 0.00), (0.13, 0.10, 0.00), 0.050),
    ("r_thigh", 0, (-0.10, 1.00, 0.00), (-0.12, 0.55, 0.00), 0.065),
    ("r_shin", 7, (-0.12, 0.55, 0.00), (-0.13, 0.10, 0.00), 0.050),
]


def _orthonormal_frame(d):
    ref = np.array([0.0, 0.0, 1.0]) if abs(d[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
    u = np.cross(d, ref)
    u /= np.linalg.norm(u)
    return u, np.cross(d, u)


def _point_segment_distance(points, seg_a, seg_b):
    ab = seg_b - seg_a
    denom = float(ab @ ab)
    t = np.clip((points - seg_a) @ ab / denom, 0.0, 1.0) if denom > 0 else 0.0
    closest = seg_a + np.outer(np.atleast_1d(t), ab)
    return np.linalg.norm(points - closest, axis=-1)


def make_toy_body(n_rings=9, n_seg=7, seed=0, jitter=0.015,
                  skeleton=None):
    """Procedural articulated body of capsule-sampled bones, ~1.7 m tall.

    Each bone contributes a capsule of ring-sampled vertices with a tiny
    seeded radial jitter. Skinning weights fall off with inverse squared
    distance to the two nearest bone segments.
    """
    skeleton = skeleton if skeleton is not None else _DEFAULT_SKELETON
    rng = np.random.default_rng(seed)
    n_cap = max(1, n_rings // 3)
    n_cyl = n_rings - 2 * n_cap
    if n_cyl < 1:
        raise DataError("n_rings too small for capsule sampling")
    verts = []
    faces = []
    joints = []
    parents = []
    for name, parent, start, end, radius in skeleton:
        start = np.asarray(start, np.float64)
        end = np.asarray(end, np.float64)
        joints.append(start)
        parents.append(parent)
        d = end - start
        length = np.linalg.norm(d)
        d = d / length
        u, w = _orthonormal_frame(d)
        stations = []
        for i in range(1, n_cap + 1):
            ang = 0.5 * np.pi * i / (n_cap + 1)
            stations.append((-radius * np.cos(ang), radius * np.sin(ang)))
        for j in range(n_cyl):
            stations.append((length * (j + 1) / (n_cyl + 1), radius))
        for i in range(n_cap, 0, -1):
            ang = 0.5 * np.pi * i / (n_cap + 1)
            stations.append((length + radius * np.cos(ang),
                             radius * np.sin(ang)))
        base = len(verts)
        verts.append(start - radius * d)  # start pole
        ring_start = len(verts)
        for axial, rad in stations:
            phase = rng.uniform(0, 2 * np.pi / n_seg)
            for s in range(n_seg):
                ang = 2 * np.pi * s / n_seg + phase
                rr = rad * (1.0 + jitter * rng.standard_normal())
                verts.append(start + axial * d
                             + rr * (np.cos(ang) * u + np.sin(ang) * w))
        verts.append(end + radius * d)  # end pole
        end_pole = len(verts) - 1
        n_st = len(stations)
        for s in range(n_seg):
            s2 = (s + 1) % n_seg
            faces.append((base, ring_start + s2, ring_start + s))
        for i in range(n_st - 1):
            r0 = ring_start + i * n_seg
            r1 = r0 + n_seg
            for s in range(n_seg):
                s2 = (s + 1) % n_seg
                faces.append((r0 + s, r0 + s2, r1 + s2))
                faces.append((r0 + s, r1 + s2, r1 + s))
        last = ring_start + (n_st - 1) * n_seg
        for s in range(n_seg):
            s2 = (s + 1) % n_seg
            faces.append((end_pole, last + s, last + s2))
    vertices = np.asarray(verts)
    mesh = TriangleMesh(vertices, np.asarray(faces, np.int64))
    # Fix winding so normals point away from the owning bone axis.
    joints_arr = np.asarray(joints)
    segs = [(np.asarray(s[2], np.float64), np.asarray(s[3], np.float64))
            for s in skeleton]
    n_b = len(skeleton)
    dist = np.stack([_point_segment_distance(vertices, a, b)
                     for a, b in segs], axis=1)  # (V, n_b)
    weights = np.zeros((len(vertices), n_b))
    order = np.argsort(dist, axis=1)
    rows = np.arange(len(vertices))
    for col in (0, 1):
        k = order[:, col]
        weights[rows, k] = 1.0 / (dist[rows, k] + 0.01) ** 2
    weights /= weights.sum(axis=1, keepdims=True)
    return BodyModel(mesh, joints_arr, np.asarray(parents, np.int64), weights)


# ---------------------------------------------------------------------------
# Template file format
# ---------------------------------------------------------------------------


def save_body_template(body, path):
    """Write the body as JSON: vertices, faces, joints, parents, weights."""
    payload = {
        "vertices": body.mesh.vertices.tolist(),
        "faces": body.mesh.faces.tolist(),
        "joints": body.joints.tolist(),
        "parents": body.parents.tolist(),
        "weights": body.skin_weights.tolist(),
    }
    with open(path, "w") as fh:
        json.dump(payload, fh)


def load_body_template(path):
    """Load a body template; unknown keys are ignored.

    Raises DataError with the offending row/index for malformed trees,
    out-of-range faces, or non-stochastic weight rows.
    """
    try:
        with open(path) as fh:
            data = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read body template {path}: {exc}") from exc
    missing = [k for k in ("vertices", "faces", "joints", "parents", "weights")
               if k not in data]
    if missing:
        raise DataError(f"body template missing keys: {missing}")
    mesh = TriangleMesh(np.asarray(data["vertices"], np.float64),
                        np.asarray(data["faces"], np.int64))
    return BodyModel(mesh,
                     np.asarray(data["joints"], np.float64),
                     np.asarray(data["parents"], np.int64),
                     np.asarray(data["weights"], np.float64))
