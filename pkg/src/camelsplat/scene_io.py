"""Synthetic scene generation and on-disk formats.

A scene directory holds manifest.json (cameras, poses, checksums,
generation settings), body.json, the ground-truth cloud, and per-frame
images. Color and depth are canonical as float64 .npy; an 8-bit PNG and
a float32 PFM of each are written alongside for quick viewing and
interchange. All binary files are sha256-checked on load.
"""

from __future__ import annotations

import hashlib
import json
import os
import zipfile
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from camelsplat.body import BodyModel, PoseState, forward_kinematics, \
    joint_positions, load_body_template, make_toy_body, save_body_template
from camelsplat.errors import ConfigError, DataError
from camelsplat.gaussians import GaussianCloud, deform_forward, init_on_mesh
from camelsplat.geometry import Camera, inverse_project, rotmat_to_quat
from camelsplat.metrics import mpjpe
from camelsplat.renderer import RenderConfig, render

FORMAT_VERSION = 1


@dataclass
class Frame:
    """One observation: images, camera, true pose and its noisy start."""

    index: int
    camera: Camera
    color: np.ndarray  # (H, W, 3) float64 in [0, 1]
    depth: np.ndarray  # (H, W) float64 camera-frame depth, 0 where empty
    mask: np.ndarray  # (H, W) bool
    gt_pose: PoseState | None = None
    init_pose: PoseState | None = None
    init_mpjpe_mm: float | None = None
    _depth_points: np.ndarray | None = field(default=None, repr=False)

    def depth_points(self):
        """World-space point cloud of the masked depth map (cached)."""
        if self._depth_points is None:
            d = np.where(self.mask, self.depth, 0.0)
            self._depth_points = inverse_project(d, self.camera, world=True)
        return self._depth_points


@dataclass
class Scene:
    body: BodyModel
    frames: list
    gt_cloud: GaussianCloud | None = None
    meta: dict = field(default_factory=dict)

    @property
    def n_frames(self):
        return len(self.frames)


# ---------------------------------------------------------------------------
# Procedural scene
# ---------------------------------------------------------------------------

def orbit_cameras(n, center, radius=3.2, fx=70.0, fy=70.0,
                  width=64, height=64, phase=0.7, bob=0.18):
    """Cameras circling `center` with a little vertical bob."""
    center = np.asarray(center, np.float64)
    cams = []
    for k in range(n):
        ang = 2.0 * np.pi * k / max(n, 1) + phase
        eye = center + np.array([radius * np.sin(ang),
                                 bob * np.sin(2.0 * ang + 1.0),
                                 radius * np.cos(ang)])
        cams.append(Camera.look_at(
            eye=eye, target=center, up=np.array([0.0, 1.0, 0.0]),
            fx=fx, fy=fy, cx=(width - 1) / 2.0, cy=(height - 1) / 2.0,
            width=width, height=height))
    return cams


def _procedural_colors(points, rng):
    """Smooth per-point RGB held inside [0.15, 0.85]."""
    freqs = rng.uniform(2.0, 5.0, size=(3, 3))
    phases = rng.uniform(0.0, 2.0 * np.pi, size=3)
    c = 0.5 + 0.35 * np.sin(points @ freqs.T + phases)
    return c


def _tangent_frame(normals):
    """Right-handed frames whose first column is the given normal."""
    n = normals / np.linalg.norm(normals, axis=1, keepdims=True)
    ref = np.where((np.abs(n[:, 2]) < 0.9)[:, None],
                   np.array([0.0, 0.0, 1.0]), np.array([1.0, 0.0, 0.0]))
    t1 = np.cross(ref, n)
    t1 /= np.linalg.norm(t1, axis=1, keepdims=True)
    t2 = np.cross(n, t1)
    return np.stack([n, t1, t2], axis=2)  # columns n, t1, t2


def make_gt_cloud(body, rng, flat_log_ratio=np.log(4.0), exact_grid=False,
                  tangent_scale=0.5):
    """Ground-truth cloud: flattened splats lying on the mesh skin.

    Smallest axis (index 0 of log_scales) points along the vertex
    normal; the two tangent axes sit `flat_log_ratio` above it in log
    scale. With exact_grid the log scales snap to a half-integer grid so
    the tangent/normal gap equals the ratio bit-exactly (only useful
    when the ratio itself is exactly representable, e.g. 1.0).
    """
    cloud = init_on_mesh(body)
    mesh = body.mesh
    ls_t = np.log(tangent_scale * mesh.mean_edge_length())
    if exact_grid:
        ls_t = np.round(ls_t * 2.0) / 2.0
    ls_n = ls_t - flat_log_ratio
    cloud.log_scales = np.tile([ls_n, ls_t, ls_t], (cloud.n_gaussians, 1))
    frames = _tangent_frame(mesh.vertex_normals)
    cloud.quats = rotmat_to_quat(frames)
    cloud.colors = _procedural_colors(mesh.vertices, rng)
    cloud.opacity_logits = rng.uniform(2.0, 4.0, size=cloud.n_gaussians)
    return cloud


def _animation(body, rng, n_frames, amplitude):
    """Per-frame smooth sinusoidal poses for every bone."""
    n_b = body.n_bones
    amp = rng.uniform(0.06, 0.28, size=(n_b, 3)) * amplitude
    amp[0] *= 0.3  # keep the root gentle so the body stays in frame
    freq = rng.integers(1, 3, size=(n_b, 3)).astype(np.float64)
    ph = rng.uniform(0.0, 2.0 * np.pi, size=(n_b, 3))
    t_amp = rng.uniform(0.01, 0.03, size=3) * amplitude
    t_ph = rng.uniform(0.0, 2.0 * np.pi, size=3)
    poses = []
    for t in range(n_frames):
        u = 2.0 * np.pi * t / max(n_frames, 1)
        pose = PoseState(
            amp * np.sin(freq * u + ph),
            t_amp * np.sin(u + t_ph))
        poses.append(pose)
    return poses


def generate_synthetic_scene(n_frames=30, width=64, height=64, seed=0,
                             sigma_rot=0.1, sigma_trans=0.05, amplitude=1.0,
                             body=None, radius=3.2, fx=70.0,
                             flat_log_ratio=None, exact_grid=False,
                             render_config=None):
    """Animated body orbit-captured into frames with noisy pose starts.

    Ground truth images come from rendering the ground-truth cloud at
    the true pose; the mask is coverage above one half. Initial poses
    add zero-mean noise to the truth and the measured starting joint
    error is recorded per frame.
    """
    rng = np.random.default_rng(seed)
    if body is None:
        body = make_toy_body(seed=seed)
    if flat_log_ratio is None:
        flat_log_ratio = float(np.log(4.0))
    if render_config is None:
        render_config = RenderConfig()
    gt_cloud = make_gt_cloud(body, rng, flat_log_ratio, exact_grid)
    gt_poses = _animation(body, rng, n_frames, amplitude)
    center = body.mesh.vertices.mean(axis=0)
    cams = orbit_cameras(n_frames, center, radius=radius, fx=fx, fy=fx,
                         width=width, height=height)
    frames = []
    for t in range(n_frames):
        transforms, _ = forward_kinematics(body, gt_poses[t])
        posed, _ = deform_forward(gt_cloud, transforms, "none")
        res = render(posed, cams[t], render_config)
        init_pose = gt_poses[t].copy()
        init_pose.joint_rotations = init_pose.joint_rotations + rng.normal(
            scale=sigma_rot, size=init_pose.joint_rotations.shape)
        init_pose.global_translation = init_pose.global_translation + \
            rng.normal(scale=sigma_trans, size=3)
        err = mpjpe(joint_positions(body, init_pose),
                    joint_positions(body, gt_poses[t]))
        frames.append(Frame(
            index=t, camera=cams[t], color=res.color,
            depth=res.depth, mask=res.alpha > 0.5,
            gt_pose=gt_poses[t], init_pose=init_pose, init_mpjpe_mm=err))
    meta = {
        "seed": int(seed), "n_frames": int(n_frames),
        "width": int(width), "height": int(height),
        "sigma_rot": float(sigma_rot), "sigma_trans": float(sigma_trans),
        "amplitude": float(amplitude), "radius": float(radius),
        "fx": float(fx), "flat_log_ratio": float(flat_log_ratio),
        "exact_grid": bool(exact_grid),
    }
    return Scene(body=body, frames=frames, gt_cloud=gt_cloud, meta=meta)


# ---------------------------------------------------------------------------
# PNG / PFM
# ---------------------------------------------------------------------------

def write_png(path, img):
    """Save a uint8 image, (H,W) grayscale or (H,W,3) RGB."""
    img = np.asarray(img)
    if img.dtype != np.uint8 or img.ndim not in (2, 3):
        raise DataError("write_png expects a uint8 (H,W[,3]) array")
    Image.fromarray(img).save(path)


def read_png(path):
    try:
        with Image.open(path) as im:
            return np.asarray(im)
    except OSError as e:
        raise DataError(f"cannot read image {path}: {e}") from e


def write_pfm(path, data):
    """Grayscale PFM, float32 little-endian, rows bottom-up."""
    data = np.asarray(data, np.float32)
    if data.ndim != 2:
        raise DataError("write_pfm expects a 2D array")
    h, w = data.shape
    with open(path, 'wb') as f:
        f.write(b'Pf\n')
        f.write(f"{w} {h}\n".encode())
        f.write(b'-1.0\n')
        f.write(np.ascontiguousarray(data[::-1]).tobytes())


def read_pfm(path):
    with open(path, 'rb') as f:
        if f.readline().strip() != b'Pf':
            raise DataError(f"{path}: not a grayscale PFM")
        w, h = map(int, f.readline().split())
        scale = float(f.readline())
        buf = f.read(w * h * 4)
    arr = np.frombuffer(buf, '<f4' if scale < 0 else '>f4').reshape(h, w)
    return arr[::-1].astype(np.float64)


# ---------------------------------------------------------------------------
# Cloud and checkpoint files
# ---------------------------------------------------------------------------

def save_cloud(path, cloud):
    arrays = {
        "centers": cloud.centers, "quats": cloud.quats,
        "log_scales": cloud.log_scales,
        "opacity_logits": cloud.opacity_logits, "colors": cloud.colors,
        "skin_weights": cloud.skin_weights, "skin_deltas": cloud.skin_deltas,
        "anchor_vertices": cloud.anchor_vertices,
    }
    if cloud.sh1 is not None:
        arrays["sh1"] = cloud.sh1
    np.savez(path, format_version=np.int64(FORMAT_VERSION), **arrays)


def load_cloud(path):
    try:
        with np.load(path, allow_pickle=False) as z:
            kw = {k: z[k] for k in z.files if k != "format_version"}
    except (OSError, ValueError, KeyError, zipfile.BadZipFile) as e:
        raise DataError(f"cannot read cloud file {path}: {e}") from e
    sh1 = kw.pop("sh1", None)
    try:
        return GaussianCloud(sh1=sh1, **kw)
    except TypeError as e:
        raise DataError(f"{path}: unexpected cloud contents: {e}") from e


def save_checkpoint(path, cloud, poses, iteration, opt_state=None,
                    history=None, meta=None):
    """Single-file training state: cloud, per-frame poses, optimizer."""
    arrays = {
        "format_version": np.int64(FORMAT_VERSION),
        "iteration": np.int64(iteration),
        "poses_rot": np.stack([p.joint_rotations for p in poses]),
        "poses_trans": np.stack([p.global_translation for p in poses]),
    }
    for k, v in {
            "centers": cloud.centers, "quats": cloud.quats,
            "log_scales": cloud.log_scales,
            "opacity_logits": cloud.opacity_logits, "colors": cloud.colors,
            "skin_weights": cloud.skin_weights,
            "skin_deltas": cloud.skin_deltas,
            "anchor_vertices": cloud.anchor_vertices}.items():
        arrays["cloud__" + k] = v
    if cloud.sh1 is not None:
        arrays["cloud__sh1"] = cloud.sh1
    if opt_state:
        for k, v in opt_state.items():
            arrays["opt__" + k] = v
    blob = {"history": history or [], "meta": meta or {}}
    arrays["json_blob"] = np.frombuffer(
        json.dumps(blob).encode(), dtype=np.uint8)
    np.savez(path, **arrays)


def load_checkpoint(path):
    """Returns dict: cloud, poses, iteration, opt_state, history, meta."""
    try:
        with np.load(path, allow_pickle=False) as z:
            data = {k: z[k] for k in z.files}
    except (OSError, ValueError, KeyError, zipfile.BadZipFile) as e:
        raise DataError(f"cannot read checkpoint {path}: {e}") from e
    if int(data.get("format_version", -1)) != FORMAT_VERSION:
        raise DataError(f"{path}: unsupported checkpoint version")
    ck = {k[len("cloud__"):]: v for k, v in data.items()
          if k.startswith("cloud__")}
    sh1 = ck.pop("sh1", None)
    cloud = GaussianCloud(sh1=sh1, **ck)
    poses = [PoseState(r, t) for r, t in
             zip(data["poses_rot"], data["poses_trans"])]
    opt_state = {k[len("opt__"):]: v for k, v in data.items()
                 if k.startswith("opt__")}
    blob = json.loads(bytes(data["json_blob"]).decode()) \
        if "json_blob" in data else {}
    return {
        "cloud": cloud, "poses": poses,
        "iteration": int(data["iteration"]),
        "opt_state": opt_state or None,
        "history": blob.get("history", []),
        "meta": blob.get("meta", {}),
    }


# ---------------------------------------------------------------------------
# Scene directory
# ---------------------------------------------------------------------------

def _sha256(path):
    h = hashlib.sha256()
    with open(path, 'rb') as f:
        for block in iter(lambda: f.read(1 << 20), b''):
            h.update(block)
    return h.hexdigest()


def _pose_dict(pose):
    return None if pose is None else {
        "joint_rotations": pose.joint_rotations.tolist(),
        "global_translation": pose.global_translation.tolist(),
    }


def _pose_from(d):
    return None if d is None else PoseState(
        np.array(d["joint_rotations"]), np.array(d["global_translation"]))


def save_scene(scene, out_dir):
    """Write the scene directory; returns the manifest path."""
    os.makedirs(out_dir, exist_ok=True)
    fdir = os.path.join(out_dir, "frames")
    os.makedirs(fdir, exist_ok=True)
    body_path = os.path.join(out_dir, "body.json")
    save_body_template(scene.body, body_path)
    files = {"body.json": _sha256(body_path)}
    if scene.gt_cloud is not None:
        cpath = os.path.join(out_dir, "gt_cloud.npz")
        save_cloud(cpath, scene.gt_cloud)
        files["gt_cloud.npz"] = _sha256(cpath)
    frame_entries = []
    for fr in scene.frames:
        stem = f"frame_{fr.index:04d}"
        names = {
            "color_npy": f"frames/{stem}.color.npy",
            "color_png": f"frames/{stem}.color.png",
            "depth_npy": f"frames/{stem}.depth.npy",
            "depth_pfm": f"frames/{stem}.depth.pfm",
            "mask_png": f"frames/{stem}.mask.png",
        }
        np.save(os.path.join(out_dir, names["color_npy"]), fr.color)
        write_png(os.path.join(out_dir, names["color_png"]),
                  (np.clip(fr.color, 0, 1) * 255).round().astype(np.uint8))
        np.save(os.path.join(out_dir, names["depth_npy"]), fr.depth)
        write_pfm(os.path.join(out_dir, names["depth_pfm"]), fr.depth)
        write_png(os.path.join(out_dir, names["mask_png"]),
                  fr.mask.astype(np.uint8) * 255)
        for rel in names.values():
            files[rel] = _sha256(os.path.join(out_dir, rel))
        frame_entries.append({
            "index": fr.index,
            "camera": fr.camera.to_dict(),
            "gt_pose": _pose_dict(fr.gt_pose),
            "init_pose": _pose_dict(fr.init_pose),
            "init_mpjpe_mm": fr.init_mpjpe_mm,
            **names,
        })
    manifest = {
        "format_version": FORMAT_VERSION,
        "meta": scene.meta,
        "frames": frame_entries,
        "files": files,
    }
    mpath = os.path.join(out_dir, "manifest.json")
    with open(mpath, 'w') as f:
        json.dump(manifest, f, indent=1)
    return mpath


def load_scene(scene_dir, verify=True):
    mpath = os.path.join(scene_dir, "manifest.json")
    try:
        with open(mpath) as f:
            manifest = json.load(f)
    except OSError as e:
        raise DataError(f"cannot open scene manifest {mpath}: {e}") from e
    except json.JSONDecodeError as e:
        raise DataError(f"{mpath}: invalid JSON: {e}") from e
    if manifest.get("format_version") != FORMAT_VERSION:
        raise DataError(f"{mpath}: unsupported scene format")
    if verify:
        for rel, digest in manifest.get("files", {}).items():
            p = os.path.join(scene_dir, rel)
            if not os.path.exists(p):
                raise DataError(f"scene file missing: {rel}")
            if _sha256(p) != digest:
                raise DataError(f"checksum mismatch for {rel}")
    body = load_body_template(os.path.join(scene_dir, "body.json"))
    gt_cloud = None
    cpath = os.path.join(scene_dir, "gt_cloud.npz")
    if os.path.exists(cpath):
        gt_cloud = load_cloud(cpath)
    frames = []
    for e in manifest["frames"]:
        color_p = os.path.join(scene_dir, e["color_npy"])
        if os.path.exists(color_p):
            color = np.load(color_p)
        else:
            color = read_png(
                os.path.join(scene_dir, e["color_png"])) / 255.0
        depth_p = os.path.join(scene_dir, e["depth_npy"])
        if os.path.exists(depth_p):
            depth = np.load(depth_p)
        else:
            depth = read_pfm(os.path.join(scene_dir, e["depth_pfm"]))
        mask = read_png(os.path.join(scene_dir, e["mask_png"])) > 127
        frames.append(Frame(
            index=int(e["index"]),
            camera=Camera.from_dict(e["camera"]),
            color=np.asarray(color, np.float64),
            depth=np.asarray(depth, np.float64),
            mask=mask,
            gt_pose=_pose_from(e.get("gt_pose")),
            init_pose=_pose_from(e.get("init_pose")),
            init_mpjpe_mm=e.get("init_mpjpe_mm")))
    return Scene(body=body, frames=frames, gt_cloud=gt_cloud,
                 meta=manifest.get("meta", {}))


# ---------------------------------------------------------------------------
# Train/test splits
# ---------------------------------------------------------------------------

def parse_split(spec, n_frames):
    """Train/held-out frame indices for 'uniform80', 'first80', 'views:N'."""
    idx = np.arange(n_frames)
    if spec == "uniform80":
        test = idx[idx % 5 == 2] if n_frames >= 5 else idx[:0]
        train = np.setdiff1d(idx, test)
    elif spec == "first80":
        cut = max(1, int(round(n_frames * 0.8)))
        train, test = idx[:cut], idx[cut:]
    elif spec.startswith("views:"):
        try:
            n = int(spec.split(":", 1)[1])
        except ValueError:
            raise ConfigError(f"bad split {spec!r}")
        if not 0 < n <= n_frames:
            raise ConfigError(f"split {spec!r} out of range for "
                              f"{n_frames} frames")
        train = np.unique(np.linspace(0, n_frames - 1, n).round().astype(int))
        test = np.setdiff1d(idx, train)
    else:
        raise ConfigError(f"unknown split {spec!r}")
    return train, test
