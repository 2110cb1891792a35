import json

import numpy as np
import pytest

from camelsplat.body import BodyModel, BoneTransforms, PoseState, \
    forward_kinematics, joint_positions, lbs_vertices, load_body_template, \
    make_toy_body, save_body_template
from camelsplat.errors import DataError
from camelsplat.geometry import TriangleMesh, axis_angle_to_matrix
from helpers import CHAIN_SKELETON, central_diff, rel_err, small_body


def _identity_pose(body, trans=(0, 0, 0)):
    p = PoseState.identity(body.n_bones)
    p.global_translation = np.asarray(trans, np.float64)
    return p


def test_fk_identity_keeps_rest_joints(body_small):
    pose = _identity_pose(body_small)
    assert np.allclose(joint_positions(body_small, pose), body_small.joints,
                       atol=1e-12)


def test_fk_global_translation(body_small):
    pose = _identity_pose(body_small, trans=(0, 0, 1.0))
    assert np.allclose(joint_positions(body_small, pose),
                       body_small.joints + [0, 0, 1.0], atol=1e-12)


def test_fk_chain_matches_hand_composition():
    """Two rotated bones on a 3-bone chain, composed by hand."""
    body = make_toy_body(n_rings=3, n_seg=5, seed=0, skeleton=CHAIN_SKELETON)
    pose = _identity_pose(body)
    rx = axis_angle_to_matrix(np.array([np.pi / 2, 0, 0]))
    pose.joint_rotations[0] = [np.pi / 2, 0, 0]
    pose.joint_rotations[1] = [np.pi / 2, 0, 0]

    # Each bone rotates about its own rest joint inside the parent frame.
    def rot_at(c, r, p):
        return r @ (p - c) + c

    j_b, j_c = body.joints[1], body.joints[2]
    expect_c = rot_at(body.joints[0], rx, rot_at(j_b, rx, j_c))
    got = joint_positions(body, pose)
    assert np.allclose(got[2], expect_c, atol=1e-12)


def test_lbs_identity_transforms(body_small):
    tf = BoneTransforms(
        rot=np.tile(np.eye(3), (body_small.n_bones, 1, 1)),
        trans=np.zeros((body_small.n_bones, 3)))
    posed = lbs_vertices(body_small, tf)
    assert np.allclose(posed.vertices, body_small.mesh.vertices, atol=1e-12)


def test_lbs_pure_translation(body_small):
    t = np.array([0.3, -0.1, 2.0])
    tf = BoneTransforms(
        rot=np.tile(np.eye(3), (body_small.n_bones, 1, 1)),
        trans=np.tile(t, (body_small.n_bones, 1)))
    posed = lbs_vertices(body_small, tf)
    assert np.allclose(posed.vertices, body_small.mesh.vertices + t,
                       atol=1e-12)


def test_lbs_half_weight_blend():
    """Vertex split 50/50 between a fixed and a translated bone."""
    mesh = TriangleMesh(np.array([[0.0, 0.5, 0], [1, 0, 0], [0, 1, 0]]),
                        np.array([[0, 1, 2]]))
    body = BodyModel(mesh, joints=np.array([[0.0, 0, 0], [0, 1, 0]]),
                     parents=np.array([-1, 0]),
                     skin_weights=np.array([[0.5, 0.5], [1.0, 0],
                                            [1.0, 0]]))
    tf = BoneTransforms(rot=np.tile(np.eye(3), (2, 1, 1)),
                        trans=np.array([[0.0, 0, 0], [2.0, 0, 0]]))
    posed = lbs_vertices(body, tf)
    assert np.allclose(posed.vertices[0], [1.0, 0.5, 0], atol=1e-12)


def test_lbs_commutes_with_rigid_motion(body_small, rng):
    pose = _identity_pose(body_small)
    pose.joint_rotations = rng.normal(scale=0.3,
                                      size=(body_small.n_bones, 3))
    tf, _ = forward_kinematics(body_small, pose)
    r = axis_angle_to_matrix(np.array([0.4, -0.2, 0.9]))
    t = np.array([0.5, 1.0, -0.3])

    posed_then_rigid = lbs_vertices(body_small, tf).vertices @ r.T + t
    tf_rigid = BoneTransforms(rot=np.einsum('ij,njk->nik', r, tf.rot),
                              trans=tf.trans @ r.T + t)
    rigid_then_posed = lbs_vertices(body_small, tf_rigid).vertices
    assert rel_err(posed_then_rigid, rigid_then_posed) < 1e-9


def test_posed_vertices_gradient_matches_fd(rng):
    """Vertex positions vs pose parameters, central differences."""
    from camelsplat.body import blend_apply, blend_apply_vjp, \
        blend_transforms, forward_kinematics_vjp

    body = make_toy_body(n_rings=3, n_seg=5, seed=0,
                         skeleton=CHAIN_SKELETON)
    pose = _identity_pose(body)
    pose.joint_rotations = rng.normal(scale=0.4, size=(body.n_bones, 3))
    pose.global_translation = rng.normal(scale=0.1, size=3)
    w = rng.normal(size=body.mesh.vertices.shape)
    pts = body.mesh.vertices

    def scalar():
        tf2, _ = forward_kinematics(body, pose)
        a2, b2 = blend_transforms(body.skin_weights, tf2)
        return float(np.sum(w * blend_apply(a2, b2, pts)))

    tf, ctx = forward_kinematics(body, pose)
    a, b = blend_transforms(body.skin_weights, tf)
    _, _, d_rot, d_trans = blend_apply_vjp(a, pts, body.skin_weights, tf, w)
    g_rot, g_trans = forward_kinematics_vjp(ctx, d_rot, d_trans)

    fd_rot = central_diff(scalar, pose.joint_rotations, eps=1e-6)
    fd_trans = central_diff(scalar, pose.global_translation, eps=1e-6)
    assert rel_err(g_rot, fd_rot) < 1e-5
    assert rel_err(g_trans, fd_trans) < 1e-5


def test_joint_positions_match_bone_transforms(body_small, rng):
    pose = _identity_pose(body_small)
    pose.joint_rotations = rng.normal(scale=0.5,
                                      size=(body_small.n_bones, 3))
    pose.global_translation = rng.normal(size=3)
    tf, _ = forward_kinematics(body_small, pose)
    direct = np.einsum('nij,nj->ni', tf.rot, body_small.joints) + tf.trans
    assert np.allclose(joint_positions(body_small, pose), direct, atol=1e-12)


def test_fk_rotation_count_mismatch(body_small):
    pose = PoseState(np.zeros((2, 3)), np.zeros(3))
    with pytest.raises(DataError):
        forward_kinematics(body_small, pose)


# ---------------------------------------------------------------------------
# Toy body construction
# ---------------------------------------------------------------------------

def test_toy_body_default_shape():
    body = make_toy_body()
    assert body.n_bones == 9
    assert body.mesh.vertices.shape[0] >= 300
    sums = body.skin_weights.sum(axis=1)
    assert np.allclose(sums, 1.0, atol=1e-9)
    assert body.parents[0] == -1
    assert all(0 <= body.parents[k] < k for k in range(1, body.n_bones))


def test_toy_body_deterministic():
    a = make_toy_body(seed=3)
    b = make_toy_body(seed=3)
    assert np.array_equal(a.mesh.vertices, b.mesh.vertices)
    assert np.array_equal(a.skin_weights, b.skin_weights)


def test_toy_body_weight_falloff():
    """Vertices at a bone's far end belong almost fully to that bone."""
    two = [("a", -1, (0.0, 0, 0), (0.0, 1.0, 0), 0.06),
           ("b", 0, (0.0, 1.0, 0), (0.0, 2.0, 0), 0.06)]
    body = make_toy_body(n_rings=7, n_seg=6, seed=0, skeleton=two)
    v = body.mesh.vertices
    far_a = v[:, 1] < 0.15
    far_b = v[:, 1] > 1.85
    assert far_a.any() and far_b.any()
    assert np.all(body.skin_weights[far_a, 0] >= 0.9)
    assert np.all(body.skin_weights[far_b, 1] >= 0.9)
    near_joint = np.abs(v[:, 1] - 1.0) < 0.08
    if near_joint.any():
        assert np.all(body.skin_weights[near_joint].max(axis=1) < 0.99)


def test_pose_wrap_preserves_rotation(rng):
    pose = PoseState(rng.normal(scale=3.0, size=(4, 3)), np.zeros(3))
    before = [axis_angle_to_matrix(v) for v in pose.joint_rotations]
    pose.wrap()
    mags = np.linalg.norm(pose.joint_rotations, axis=1)
    assert np.all(mags < np.pi)
    after = [axis_angle_to_matrix(v) for v in pose.joint_rotations]
    assert all(np.allclose(x, y, atol=1e-9) for x, y in zip(before, after))


# ---------------------------------------------------------------------------
# Template files
# ---------------------------------------------------------------------------

def test_template_round_trip(tmp_path, body_small):
    path = tmp_path / "body.json"
    save_body_template(body_small, path)
    loaded = load_body_template(path)
    assert np.array_equal(loaded.mesh.vertices, body_small.mesh.vertices)
    assert np.array_equal(loaded.mesh.faces, body_small.mesh.faces)
    assert np.array_equal(loaded.joints, body_small.joints)
    assert np.array_equal(loaded.parents, body_small.parents)
    assert np.allclose(loaded.skin_weights, body_small.skin_weights,
                       atol=1e-12)


def test_template_bad_weight_row_named(tmp_path, body_small):
    path = tmp_path / "body.json"
    save_body_template(body_small, path)
    data = json.loads(path.read_text())
    data["weights"][3] = [w * 0.5 for w in data["weights"][3]]
    path.write_text(json.dumps(data))
    with pytest.raises(DataError, match="row 3"):
        load_body_template(path)


def test_template_missing_key(tmp_path):
    path = tmp_path / "body.json"
    path.write_text(json.dumps({"vertices": []}))
    with pytest.raises(DataError, match="missing"):
        load_body_template(path)


def test_template_full_scale_dimensions(tmp_path):
    """A 6890-vertex, 13776-face, 24-joint template loads cleanly."""
    r = np.random.default_rng(0)
    nv, nf, nb = 6890, 13776, 24
    verts = r.normal(size=(nv, 3))
    faces = r.integers(0, nv, size=(nf, 3))
    joints = r.normal(size=(nb, 3))
    parents = np.arange(nb) - 1
    weights = np.zeros((nv, nb))
    weights[np.arange(nv), r.integers(0, nb, size=nv)] = 1.0
    path = tmp_path / "big.json"
    with open(path, "w") as f:
        json.dump({"vertices": verts.tolist(), "faces": faces.tolist(),
                   "joints": joints.tolist(), "parents": parents.tolist(),
                   "weights": weights.tolist(), "extra_key": "ignored"}, f)
    body = load_body_template(path)
    assert body.mesh.vertices.shape == (nv, 3)
    assert body.mesh.faces.shape == (nf, 3)
    assert body.n_bones == nb
