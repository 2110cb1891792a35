"""Joint appearance/pose optimization, gradient checking, evaluation.

The training loop visits frames round-robin, computes the full loss
backward, and steps a per-group Adam. Pose states are per-frame;
quaternions are renormalized and axis-angle magnitudes rewrapped after
each step, colors and log scales are projected back into sane boxes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from camelsplat.body import PoseState, forward_kinematics, joint_positions, \
    lbs_vertices
from camelsplat.errors import ConfigError, DivergenceError
from camelsplat.gaussians import deform_forward, init_on_mesh
from camelsplat.geometry import quat_to_rotmat
from camelsplat.losses import LossWeights, total_loss
from camelsplat.metrics import mpjpe, pa_mpjpe, psnr, ssim, v2v
from camelsplat.renderer import RenderConfig, render

DEFAULT_LRS = {
    # Hot enough that a frozen-pose run can still drag the cloud onto the
    # image evidence; the canonical-space constraints keep the camel arm
    # from paying for that mobility in pose accuracy.
    "centers": 8e-4,
    "quats": 1e-3,
    "log_scales": 5e-3,
    "opacity_logits": 5e-2,
    "colors": 2.5e-3,
    "sh1": 2.5e-3,
    "skin_deltas": 1e-4,
    # Each frame's pose is visited once per round-robin sweep, so pose
    # groups see few Adam steps and need a hotter rate than the cloud.
    "joint_rotations": 5e-3,
    "global_translation": 5e-3,
}

LOG_SCALE_BOUNDS = (math.log(1e-4), math.log(0.5))


class Adam:
    """Adam over named arrays updated in place; groups may step sparsely."""

    def __init__(self, lrs, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lrs = dict(lrs)
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = {}
        self.v = {}
        self.t = {}

    def step(self, params, grads, lr_scale=1.0):
        """params: name -> array, grads: name -> same-shaped gradient."""
        for name, g in grads.items():
            p = params[name]
            if name not in self.m:
                self.m[name] = np.zeros_like(p)
                self.v[name] = np.zeros_like(p)
                self.t[name] = 0
            self.t[name] += 1
            t = self.t[name]
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            mhat = m / (1.0 - self.beta1 ** t)
            vhat = v / (1.0 - self.beta2 ** t)
            lr = self.lrs[self._group(name)] * lr_scale
            p -= lr * mhat / (np.sqrt(vhat) + self.eps)

    @staticmethod
    def _group(name):
        return name.split("@", 1)[0]

    def state_arrays(self):
        out = {}
        for k in self.m:
            out[f"m__{k}"] = self.m[k]
            out[f"v__{k}"] = self.v[k]
            out[f"t__{k}"] = np.int64(self.t[k])
        return out

    def load_state_arrays(self, arrays):
        for k, v in arrays.items():
            tag, name = k.split("__", 1)
            if tag == "m":
                self.m[name] = np.asarray(v, np.float64)
            elif tag == "v":
                self.v[name] = np.asarray(v, np.float64)
            elif tag == "t":
                self.t[name] = int(v)


@dataclass
class OptimizeConfig:
    iters: int = 2000
    mode: str = "camel"
    pose_opt: bool = True
    pose_unfreeze: int = 0  # first iteration at which pose may move
    lrs: dict = field(default_factory=dict)  # overrides of DEFAULT_LRS
    log_every: int = 25
    checkpoint_every: int = 0  # 0 disables periodic checkpoints
    divergence_factor: float = 50.0
    seed: int = 0


@dataclass
class RunResult:
    cloud: object
    poses: list
    history: list
    iterations: int
    lsw_fallbacks: int = 0


def _project_params(cloud, poses, mode):
    """Keep parameters in their valid sets after an Adam step.

    Every projection here is a bitwise no-op on parameters already in
    their set: a run sitting at a fixed point must stay there exactly,
    or the L1 image term's unit-sized subgradient would kick it off over
    a one-ulp wobble.
    """
    np.clip(cloud.colors, 0.0, 1.0, out=cloud.colors)
    np.clip(cloud.log_scales, *LOG_SCALE_BOUNDS, out=cloud.log_scales)
    norms = np.linalg.norm(cloud.quats, axis=1)
    off = np.abs(norms - 1.0) > 1e-12
    if np.any(off):
        safe = np.where(norms[off] < 1e-12, 1.0, norms[off])
        cloud.quats[off] /= safe[:, None]
    for p in poses:
        p.wrap()


def optimize_scene(scene, train_idx, config=None, weights=None,
                   render_config=None, cloud=None, callback=None,
                   resume=None, checkpoint_fn=None):
    """Fit a cloud plus per-frame poses to the scene's training frames.

    Poses start from each frame's recorded noisy initialization. Raises
    DivergenceError when the loss blows up or goes non-finite.

    resume takes the dict returned by scene_io.load_checkpoint; the run
    continues from the stored iteration and reproduces a straight-through
    run bit for bit (optimizer moments, divergence reference and history
    are all restored). checkpoint_fn(done, snapshot) is invoked every
    config.checkpoint_every iterations and once more after the final one;
    the snapshot dict carries cloud / poses / opt_state / history /
    first_total, ready for scene_io.save_checkpoint.
    """
    config = config or OptimizeConfig()
    weights = weights or LossWeights()
    render_config = render_config or RenderConfig()
    if config.mode not in ("none", "lsw", "gom", "camel"):
        raise ConfigError(f"unknown binding mode {config.mode!r}")
    train_idx = np.asarray(train_idx, int)
    if train_idx.size == 0:
        raise ConfigError("no training frames selected")

    if cloud is None:
        cloud = init_on_mesh(scene.body)
    else:
        cloud = cloud.copy()
    poses = {}
    for t in train_idx:
        fr = scene.frames[t]
        base = fr.init_pose if fr.init_pose is not None else \
            PoseState.identity(scene.body.n_bones)
        poses[int(t)] = base.copy()

    lrs = dict(DEFAULT_LRS)
    lrs.update(config.lrs)
    opt = Adam(lrs)
    history = []
    first_total = None
    fallbacks = 0
    start = 0

    if resume is not None:
        if len(resume["poses"]) != train_idx.size:
            raise ConfigError(
                "checkpoint holds poses for "
                f"{len(resume['poses'])} frames, split selects "
                f"{train_idx.size}")
        cloud = resume["cloud"].copy()
        for t, p in zip(train_idx, resume["poses"]):
            poses[int(t)] = p.copy()
        if resume.get("opt_state"):
            opt.load_state_arrays(resume["opt_state"])
        history = list(resume.get("history") or [])
        start = int(resume["iteration"])
        first_total = (resume.get("meta") or {}).get("first_total")

    def snapshot(done):
        return {"iteration": done, "cloud": cloud,
                "poses": [poses[int(t)] for t in train_idx],
                "opt_state": opt.state_arrays(),
                "history": list(history), "first_total": first_total}

    for it in range(start, config.iters):
        t = int(train_idx[it % train_idx.size])
        frame = scene.frames[t]
        pose = poses[t]
        rep, grads, _ = total_loss(frame, scene.body, cloud, pose,
                                   weights, render_config, mode=config.mode)
        if not np.isfinite(rep.total):
            raise DivergenceError(
                f"non-finite loss at iteration {it}", iteration=it)
        if first_total is None:
            first_total = rep.total
        elif rep.total > config.divergence_factor * first_total + 10.0:
            raise DivergenceError(
                f"loss exploded at iteration {it}: {rep.total:.3g}",
                iteration=it)

        gd = grads.as_dict()
        params = {
            "centers": cloud.centers, "quats": cloud.quats,
            "log_scales": cloud.log_scales,
            "opacity_logits": cloud.opacity_logits, "colors": cloud.colors,
        }
        step_grads = {k: gd[k] for k in params}
        if cloud.sh1 is not None and gd.get("sh1") is not None:
            params["sh1"] = cloud.sh1
            step_grads["sh1"] = gd["sh1"]
        if config.mode == "lsw":
            params["skin_deltas"] = cloud.skin_deltas
            step_grads["skin_deltas"] = gd["skin_deltas"]
        if config.mode == "gom":
            del params["centers"], step_grads["centers"]
        if config.pose_opt and it >= config.pose_unfreeze:
            params[f"joint_rotations@{t}"] = pose.joint_rotations
            params[f"global_translation@{t}"] = pose.global_translation
            step_grads[f"joint_rotations@{t}"] = gd["joint_rotations"]
            step_grads[f"global_translation@{t}"] = gd["global_translation"]

        opt.step(params, step_grads)
        _project_params(cloud, [pose], config.mode)

        # Purely periodic so a checkpointed run replays the same history
        # as a straight one regardless of where the split falls.
        if config.log_every and it % config.log_every == 0:
            entry = {"iter": it, "frame": t, "total": rep.total}
            entry.update(rep.terms())
            if config.mode == "lsw":
                from camelsplat.gaussians import effective_weights
                fallbacks = int(effective_weights(cloud, "lsw")[1].size)
                entry["lsw_fallback_rows"] = fallbacks
            history.append(entry)
            if callback is not None:
                callback(it, rep)

        done = it + 1
        if checkpoint_fn is not None and (
                (config.checkpoint_every
                 and done % config.checkpoint_every == 0)
                or done == config.iters):
            checkpoint_fn(done, snapshot(done))

    if checkpoint_fn is not None and start >= config.iters:
        # Resumed past the end: still emit the final state.
        checkpoint_fn(config.iters, snapshot(config.iters))
    result = RunResult(cloud=cloud, poses=[poses[int(t)] for t in train_idx],
                       history=history, iterations=config.iters,
                       lsw_fallbacks=fallbacks)
    return result


# ---------------------------------------------------------------------------
# Gradient check
# ---------------------------------------------------------------------------

def _margin_audit(parts):
    """True when nothing sits near a branch boundary of the render/loss.

    Guards every non-smooth switch finite differences could straddle:
    depth-sort ties, scale-order ties, color clipping, hinge activation
    edges, visibility-threshold crossings, nearest-point ties, alignment
    sign flips and clamped skinning weights.
    """
    # Margins are sized to what one finite-difference step (1e-4) can
    # move the quantity, with slack; value continuity at the switches
    # means only parameters straddling one are affected.
    if np.min(np.abs(parts["pose_mags"])) < 1e-3:
        return "pose_mags"
    z = np.sort(parts["zcam"])
    if z.size > 1 and np.min(np.diff(z)) < 2.5e-4:
        return "z_ties"
    ls = np.sort(parts["log_scales"], axis=1)
    if np.min(ls[:, 1:] - ls[:, :-1]) < 1e-3:
        return "scale_ties"
    c = parts["colors"]
    if np.min(c) < 0.02 or np.max(c) > 0.98:
        return "color_clip"
    for ex in parts["excesses"]:
        if ex.size and np.min(np.abs(ex)) < 1e-4:
            return "hinges"
    if np.min(np.abs(parts["wsum"] - parts["vis_threshold"])) < 1.5e-3:
        return "visibility"
    if parts["nn_gap"].size and np.min(parts["nn_gap"]) < 5e-5:
        return "depth_nn_ties"
    for gap in (parts["p2m_gap"], parts["cov_gap"]):
        if gap.size and np.min(gap) < 5e-5:
            return "vertex_nn_ties"
    if np.min(np.abs(parts["align_dots"])) < 1e-3:
        return "align_sign"
    if np.min(np.abs(parts["lsw_margins"])) < 1e-3:
        return "lsw_clamp"
    return None


def build_gradcheck_problem(seed=0, n_gaussians=40, mode="camel"):
    """Small, margin-audited scene for finite-difference verification.

    Reseeds until no branch boundary (depth ties, scale order, color
    clipping, hinge activation) sits within finite-difference reach,
    with the cloud posed exactly as the given binding mode will pose it.
    """
    from camelsplat.body import make_toy_body
    from camelsplat.scene_io import generate_synthetic_scene

    reasons = []
    for attempt in range(200):
        rng = np.random.default_rng(seed + 1000 * attempt)
        body = make_toy_body(n_rings=5, n_seg=5, seed=seed,
                             skeleton=_GRADCHECK_SKELETON)
        scene = generate_synthetic_scene(
            n_frames=2, width=32, height=32, seed=seed + attempt,
            body=body, fx=40.0, radius=2.8)
        frame = scene.frames[0]
        cloud = init_on_mesh(body)
        keep = np.linspace(0, cloud.n_gaussians - 1, n_gaussians).astype(int)
        keep = np.unique(keep)
        for name in ("centers", "quats", "log_scales", "opacity_logits",
                     "colors", "skin_weights", "skin_deltas",
                     "anchor_vertices"):
            setattr(cloud, name, getattr(cloud, name)[keep].copy())
        cloud.centers += rng.normal(scale=0.03, size=cloud.centers.shape)
        cloud.colors = rng.uniform(0.15, 0.85, size=cloud.colors.shape)
        cloud.log_scales += rng.normal(scale=0.03, size=cloud.log_scales.shape)
        cloud.log_scales += np.array([0.0, 0.25, 0.5])
        cloud.opacity_logits = rng.uniform(0.5, 2.0,
                                           size=cloud.opacity_logits.shape)
        q = cloud.quats + rng.normal(scale=0.1, size=cloud.quats.shape)
        cloud.quats = q / np.linalg.norm(q, axis=1, keepdims=True)
        cloud.skin_deltas = rng.normal(scale=0.02,
                                       size=cloud.skin_deltas.shape)
        # Push adjusted weights off the clamp boundary so differences
        # never flip a max(w + dw, 0) branch.
        m = cloud.skin_weights + cloud.skin_deltas
        near = np.abs(m) < 1.5e-3
        cloud.skin_deltas[near] += np.where(m[near] >= 0, 1, -1) \
            * (2e-3 - np.abs(m[near]))
        pose = frame.gt_pose.copy()
        pose.joint_rotations = pose.joint_rotations + rng.normal(
            scale=0.05, size=pose.joint_rotations.shape)
        pose.global_translation = pose.global_translation + rng.normal(
            scale=0.02, size=3)

        weights = LossWeights()
        cfg = RenderConfig.fd_safe()
        transforms, _ = forward_kinematics(scene.body, pose)
        posed, _ = deform_forward(cloud, transforms, mode)
        # Constraint terms live in canonical space, so their switch
        # margins are measured against the rest template.
        verts = scene.body.mesh.vertices
        normals = scene.body.mesh.vertex_normals
        from camelsplat import kernels
        nn, _ = kernels.nn_points(cloud.centers, verts)
        off = cloud.centers - verts[nn]
        p2m_excess = np.abs(np.einsum('ni,ni->n', off, normals[nn])) \
            - weights.delta_p2mesh
        nnv, d2v = kernels.nn_points(verts, cloud.centers)
        cov_excess = np.sqrt(d2v) - weights.delta_coverage
        res = render(posed, frame.camera, cfg)
        pts = frame.depth_points()
        seen = res.wsum > weights.depth3d_visibility

        def second_gap(q, p):
            d = np.sum((q[:, None, :] - p[None, :, :]) ** 2, axis=2)
            d.sort(axis=1)
            return d[:, 1] - d[:, 0] if d.shape[1] > 1 else np.empty(0)

        nn_gap = second_gap(posed.centers[seen], pts)
        p2m_gap = second_gap(cloud.centers, verts)
        cov_gap = second_gap(verts, cloud.centers)
        axis = np.argmin(cloud.log_scales, axis=1)
        rot_c = quat_to_rotmat(cloud.quats)
        e_n = rot_c[np.arange(cloud.n_gaussians), :, axis]
        align_dots = np.einsum('ni,ni->n', e_n, normals[nn])
        parts = {
            "pose_mags": np.linalg.norm(pose.joint_rotations, axis=1),
            "zcam": frame.camera.world_to_cam(posed.centers)[:, 2],
            "log_scales": cloud.log_scales,
            "colors": cloud.colors,
            "excesses": [p2m_excess, cov_excess],
            "wsum": res.wsum,
            "vis_threshold": weights.depth3d_visibility,
            "nn_gap": nn_gap,
            "p2m_gap": p2m_gap,
            "cov_gap": cov_gap,
            "align_dots": align_dots,
            "lsw_margins": cloud.skin_weights + cloud.skin_deltas,
        }
        why = _margin_audit(parts)
        if why is None:
            return scene, frame, cloud, pose, weights, cfg
        reasons.append(why)
    raise RuntimeError("could not build a margin-safe gradcheck scene; "
                       f"boundary hits: {sorted(set(reasons))}")


# 4-bone body keeps the gradcheck cheap but exercises the kinematic chain.
_GRADCHECK_SKELETON = [
    ("torso", -1, (0.0, 1.0, 0.0), (0.0, 1.58, 0.0), 0.13),
    ("l_upper_arm", 0, (0.19, 1.52, 0.0), (0.45, 1.44, 0.0), 0.045),
    ("l_forearm", 1, (0.45, 1.44, 0.0), (0.70, 1.34, 0.0), 0.04),
    ("r_thigh", 0, (-0.10, 1.0, 0.0), (-0.12, 0.55, 0.0), 0.065),
]


def gradcheck(seed=0, mode="camel", tol=1e-3, fd_eps=1e-4, grad_floor=1e-8,
              max_per_group=None, grad_scale=1.0):
    """Compare analytic loss gradients with central differences.

    Returns a report dict with per-group worst relative error.
    grad_scale multiplies the analytic side and exists so self-tests can
    confirm the check rejects wrong gradients.
    """
    scene, frame, cloud, pose, weights, cfg = \
        build_gradcheck_problem(seed, mode=mode)
    rng = np.random.default_rng(seed + 77)

    def run(want_grad):
        return total_loss(frame, scene.body, cloud, pose, weights, cfg,
                          mode=mode, want_grad=want_grad)

    rep, grads, _ = run(True)
    gd = grads.as_dict()
    arrays = {
        "centers": cloud.centers, "quats": cloud.quats,
        "log_scales": cloud.log_scales,
        "opacity_logits": cloud.opacity_logits, "colors": cloud.colors,
        "joint_rotations": pose.joint_rotations,
        "global_translation": pose.global_translation,
    }
    if mode == "lsw":
        arrays["skin_deltas"] = cloud.skin_deltas

    groups = {}
    passed = True
    for name, arr in arrays.items():
        flat = arr.reshape(-1)
        gflat = gd[name].reshape(-1)
        idxs = np.arange(flat.size)
        if max_per_group is not None and flat.size > max_per_group:
            idxs = rng.choice(flat.size, size=max_per_group, replace=False)
        worst = 0.0
        checked = 0
        for k in idxs:
            old = flat[k]
            flat[k] = old + fd_eps
            lp = run(False)[0].total
            flat[k] = old - fd_eps
            lm = run(False)[0].total
            flat[k] = old
            fd = (lp - lm) / (2.0 * fd_eps)
            an = gflat[k] * grad_scale
            if max(abs(fd), abs(an)) <= grad_floor:
                continue
            checked += 1
            worst = max(worst, abs(fd - an) / max(abs(fd), abs(an), 1e-8))
        groups[name] = {"max_rel_err": worst, "checked": checked,
                        "size": int(flat.size)}
        passed = passed and worst <= tol
    return {"passed": bool(passed), "tol": tol, "fd_eps": fd_eps,
            "mode": mode, "seed": seed, "groups": groups,
            "loss_at_point": rep.total}


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------

def evaluate_run(scene, result, train_idx, test_idx, mode="camel",
                 render_config=None):
    """Pose accuracy on training frames, image quality on held-out ones.

    Held-out frames measure view generalization: the camera is unseen
    but the body pose is given, so they render at the frame's reference
    pose (falling back to the recorded initial pose when no reference
    exists); image metrics compare against the stored images.
    """
    render_config = render_config or RenderConfig()
    body = scene.body
    out = {"train": {}, "test": {}}
    mp, pa, vv = [], [], []
    for pose, t in zip(result.poses, train_idx):
        fr = scene.frames[int(t)]
        if fr.gt_pose is None:
            continue
        pj = joint_positions(body, pose)
        gj = joint_positions(body, fr.gt_pose)
        mp.append(mpjpe(pj, gj))
        pa.append(pa_mpjpe(pj, gj))
        tf_p, _ = forward_kinematics(body, pose)
        tf_g, _ = forward_kinematics(body, fr.gt_pose)
        vv.append(v2v(lbs_vertices(body, tf_p).vertices,
                      lbs_vertices(body, tf_g).vertices,
                      pred_root=pj[0], gt_root=gj[0]))
    if mp:
        out["train"] = {
            "mpjpe_mm": float(np.mean(mp)),
            "pa_mpjpe_mm": float(np.mean(pa)),
            "v2v_mm": float(np.mean(vv)),
            "init_mpjpe_mm": float(np.mean(
                [scene.frames[int(t)].init_mpjpe_mm for t in train_idx
                 if scene.frames[int(t)].init_mpjpe_mm is not None])),
        }
    ps, ss = [], []
    for t in np.asarray(test_idx, int):
        fr = scene.frames[int(t)]
        pose = fr.gt_pose if fr.gt_pose is not None else fr.init_pose
        tf, _ = forward_kinematics(body, pose)
        posed, _ = deform_forward(result.cloud, tf, mode)
        res = render(posed, fr.camera, render_config)
        ps.append(psnr(res.color, fr.color))
        ss.append(ssim(res.color, fr.color))
    if ps:
        out["test"] = {"psnr_db": float(np.mean(ps)),
                       "ssim": float(np.mean(ss)),
                       "n_frames": len(ps)}
    return out
