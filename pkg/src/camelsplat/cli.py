"""Command line interface.

Subcommands:
    gen-scene   write a synthetic scene directory with ground truth
    optimize    fit a Gaussian cloud plus per-frame poses to a scene
    gradcheck   finite-difference audit of the full objective's gradients
    render      render frames or a novel orbit from a checkpoint
    evaluate    pose / image metric report for a checkpoint
    ablate      binding-mode and loss-switch comparison grid

Exit codes: 0 success, 1 usage or configuration error, 2 data error
(unreadable scene/checkpoint, bad index), 3 numerical failure (diverged
optimization or a failed gradient check).

Environment: CAMELSPLAT_NUMBA=0 selects the pure-numpy kernels,
CAMELSPLAT_THREADS caps compiled-kernel threads. The kernels run
sequentially either way, so identical invocations produce bit-identical
outputs.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys

import numpy as np

from camelsplat.body import forward_kinematics, joint_positions, lbs_vertices
from camelsplat.errors import CamelSplatError, ConfigError, DataError, \
    DivergenceError
from camelsplat.gaussians import BINDING_MODES, deform_forward
from camelsplat.losses import LossWeights
from camelsplat.metrics import mpjpe, pa_mpjpe, psnr, ssim, v2v
from camelsplat.optim import OptimizeConfig, evaluate_run, gradcheck, \
    optimize_scene
from camelsplat.renderer import RenderConfig, render
from camelsplat.scene_io import generate_synthetic_scene, load_checkpoint, \
    load_scene, orbit_cameras, parse_split, save_checkpoint, save_scene, \
    write_pfm, write_png


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse exits with 2 on bad flags; we reserve 2 for data errors."""

    def error(self, message):
        raise _UsageError(message)


# ---------------------------------------------------------------------------
# Shared helpers
# ---------------------------------------------------------------------------

def _load_config(path):
    """Read the optional JSON config: {"loss": {...}, "optim": {...}}."""
    if path is None:
        return {}
    try:
        with open(path) as f:
            cfg = json.load(f)
    except OSError as e:
        raise DataError(f"cannot open config {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise DataError(f"{path}: invalid JSON: {e}") from e
    if not isinstance(cfg, dict):
        raise ConfigError(f"{path}: top level must be an object")
    unknown = set(cfg) - {"loss", "optim", "render"}
    if unknown:
        raise ConfigError(f"{path}: unknown config sections {sorted(unknown)}")
    return cfg


def _make_weights(cfg, no_depth_loss):
    try:
        weights = LossWeights.from_dict(cfg.get("loss", {}))
    except KeyError as e:
        raise ConfigError(str(e)) from e
    if no_depth_loss:
        weights.use_depth = False
        weights.use_depth3d = False
    return weights


def _make_render_config(cfg):
    rc = RenderConfig()
    for k, v in cfg.get("render", {}).items():
        if not hasattr(rc, k):
            raise ConfigError(f"unknown render option {k!r}")
        setattr(rc, k, type(getattr(rc, k))(v))
    return rc


def _make_opt_config(cfg, args):
    oc = OptimizeConfig()
    for k, v in cfg.get("optim", {}).items():
        if not hasattr(oc, k):
            raise ConfigError(f"unknown optimizer option {k!r}")
        if k == "lrs":
            oc.lrs = dict(v)
        else:
            setattr(oc, k, type(getattr(oc, k))(v))
    # Explicit flags beat the config file.
    if getattr(args, "iters", None) is not None:
        oc.iters = args.iters
    if getattr(args, "binding_mode", None) is not None:
        oc.mode = args.binding_mode
    if getattr(args, "no_pose_opt", False):
        oc.pose_opt = False
    if getattr(args, "seed", None) is not None:
        oc.seed = args.seed
    if getattr(args, "checkpoint_every", None) is not None:
        oc.checkpoint_every = args.checkpoint_every
    if getattr(args, "log_every", None) is not None:
        oc.log_every = args.log_every
    return oc


def _format_table(headers, rows):
    cells = [list(headers)] + [[str(c) for c in r] for r in rows]
    widths = [max(len(row[i]) for row in cells) for i in range(len(headers))]
    lines = []
    for j, row in enumerate(cells):
        lines.append("  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip())
        if j == 0:
            lines.append("  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def _fmt(x, nd=3):
    if isinstance(x, float):
        return f"{x:.{nd}f}"
    return str(x)


def _pose_records(scene, poses_by_frame):
    """Per-frame pose errors against ground truth; [] when gt is absent."""
    records = []
    body = scene.body
    for t in sorted(poses_by_frame):
        fr = scene.frames[t]
        if fr.gt_pose is None:
            continue
        pose = poses_by_frame[t]
        pj = joint_positions(body, pose)
        gj = joint_positions(body, fr.gt_pose)
        tf_p, _ = forward_kinematics(body, pose)
        tf_g, _ = forward_kinematics(body, fr.gt_pose)
        records.append({
            "frame": int(t),
            "mpjpe_mm": float(mpjpe(pj, gj)),
            "pa_mpjpe_mm": float(pa_mpjpe(pj, gj)),
            "v2v_mm": float(v2v(lbs_vertices(body, tf_p).vertices,
                                lbs_vertices(body, tf_g).vertices,
                                pred_root=pj[0], gt_root=gj[0])),
            "init_mpjpe_mm": fr.init_mpjpe_mm,
        })
    return records


def _render_frame(scene, cloud, pose, camera, mode, rc):
    tf, _ = forward_kinematics(scene.body, pose)
    posed, _ = deform_forward(cloud, tf, mode)
    return render(posed, camera, rc)


def _image_records(scene, cloud, idx, poses_by_frame, mode, rc):
    """Render the listed frames and score them against stored images."""
    records = []
    for t in idx:
        fr = scene.frames[int(t)]
        pose = poses_by_frame.get(int(t)) or fr.gt_pose or fr.init_pose
        res = _render_frame(scene, cloud, pose, fr.camera, mode, rc)
        records.append({"frame": int(t),
                        "psnr_db": float(psnr(res.color, fr.color)),
                        "ssim": float(ssim(res.color, fr.color))})
    return records


def _write_report(out_dir, stem, headers, records, means):
    """Twin report files: aligned text table and JSON."""
    rows = [[_fmt(r.get(h, "")) for h in headers] for r in records]
    if means:
        rows.append(["mean" if h == headers[0] else _fmt(means.get(h, ""))
                     for h in headers])
    text = _format_table(headers, rows)
    with open(os.path.join(out_dir, stem + ".txt"), "w") as f:
        f.write(text)
    with open(os.path.join(out_dir, stem + ".json"), "w") as f:
        json.dump({"records": records, "mean": means}, f, indent=1)
    return text


def _mean_of(records, keys):
    out = {}
    for k in keys:
        vals = [r[k] for r in records if isinstance(r.get(k), (int, float))]
        if vals:
            out[k] = float(np.mean(vals))
    return out


def _checkpoint_poses(scene, ck, train_idx):
    """Map frame index -> pose: optimized on train frames, reference
    (else initial) on held-out ones, whose camera is the unseen part."""
    if len(ck["poses"]) != len(train_idx):
        raise DataError(
            f"checkpoint holds {len(ck['poses'])} poses but the split "
            f"selects {len(train_idx)} training frames; pass the --split "
            "the run was trained with")
    poses = {}
    for fr in scene.frames:
        if fr.gt_pose is not None:
            poses[fr.index] = fr.gt_pose
        elif fr.init_pose is not None:
            poses[fr.index] = fr.init_pose
    for t, p in zip(train_idx, ck["poses"]):
        poses[int(t)] = p
    return poses


# ---------------------------------------------------------------------------
# gen-scene
# ---------------------------------------------------------------------------

def cmd_gen_scene(args):
    scene = generate_synthetic_scene(
        n_frames=args.frames, width=args.width, height=args.height,
        seed=args.seed if args.seed is not None else 0,
        sigma_rot=args.sigma_rot, sigma_trans=args.sigma_trans,
        amplitude=args.amplitude, exact_grid=args.exact_grid,
        flat_log_ratio=args.flat_log_ratio)
    path = save_scene(scene, args.out)
    errs = [fr.init_mpjpe_mm for fr in scene.frames
            if fr.init_mpjpe_mm is not None]
    print(f"wrote {len(scene.frames)} frames to {args.out}")
    print(f"manifest: {path}")
    if errs:
        print(f"initial pose error: min {min(errs):.1f} / "
              f"median {float(np.median(errs)):.1f} / "
              f"max {max(errs):.1f} mm")
    return 0


# ---------------------------------------------------------------------------
# optimize
# ---------------------------------------------------------------------------

def cmd_optimize(args):
    cfg = _load_config(args.config)
    scene = load_scene(args.scene)
    weights = _make_weights(cfg, args.no_depth_loss)
    rc = _make_render_config(cfg)
    oc = _make_opt_config(cfg, args)
    train_idx, test_idx = parse_split(args.split, len(scene.frames))

    resume = None
    if args.resume:
        resume = load_checkpoint(args.resume)
        stored = resume.get("meta", {}).get("train_idx")
        if stored is not None and list(stored) != [int(t) for t in train_idx]:
            raise DataError(
                f"{args.resume} was written for a different training split")

    os.makedirs(args.out, exist_ok=True)

    def ckpt(done, snap):
        name = ("checkpoint_final.npz" if done == oc.iters
                else f"checkpoint_{done:06d}.npz")
        meta = {"first_total": snap["first_total"],
                "train_idx": [int(t) for t in train_idx],
                "mode": oc.mode, "split": args.split,
                "iters": oc.iters, "seed": oc.seed}
        save_checkpoint(os.path.join(args.out, name), snap["cloud"],
                        snap["poses"], snap["iteration"],
                        opt_state=snap["opt_state"],
                        history=snap["history"], meta=meta)

    result = optimize_scene(scene, train_idx, oc, weights=weights,
                            render_config=rc, resume=resume,
                            checkpoint_fn=ckpt)

    if result.history:
        keys = []
        for entry in result.history:
            for k in entry:
                if k not in keys:
                    keys.append(k)
        with open(os.path.join(args.out, "loss_history.csv"), "w",
                  newline="") as f:
            w = csv.DictWriter(f, fieldnames=keys, restval="")
            w.writeheader()
            w.writerows(result.history)

    rdir = os.path.join(args.out, "renders")
    os.makedirs(rdir, exist_ok=True)
    ck = load_checkpoint(os.path.join(args.out, "checkpoint_final.npz"))
    poses_by_frame = _checkpoint_poses(scene, ck, train_idx)
    for fr in scene.frames:
        res = _render_frame(scene, result.cloud, poses_by_frame[fr.index],
                            fr.camera, oc.mode, rc)
        img = (np.clip(res.color, 0, 1) * 255).round().astype(np.uint8)
        write_png(os.path.join(rdir, f"frame_{fr.index:04d}.png"), img)

    pose_text = None
    records = _pose_records(scene, {int(t): p for t, p in
                                    zip(train_idx, result.poses)})
    if records:
        means = _mean_of(records, ["mpjpe_mm", "pa_mpjpe_mm", "v2v_mm",
                                   "init_mpjpe_mm"])
        pose_text = _write_report(
            args.out, "pose_report",
            ["frame", "mpjpe_mm", "pa_mpjpe_mm", "v2v_mm", "init_mpjpe_mm"],
            records, means)

    ev = evaluate_run(scene, result, train_idx, test_idx, mode=oc.mode,
                      render_config=rc)
    meta = {"scene": args.scene, "split": args.split, "mode": oc.mode,
            "iters": oc.iters, "seed": oc.seed, "pose_opt": oc.pose_opt,
            "no_depth_loss": bool(args.no_depth_loss),
            "final_total": result.history[-1]["total"] if result.history
            else None,
            "eval": ev}
    with open(os.path.join(args.out, "run_meta.json"), "w") as f:
        json.dump(meta, f, indent=1)

    if result.history:
        print(f"optimized {oc.iters} iterations, final loss "
              f"{result.history[-1]['total']:.5f}")
    if pose_text:
        print(pose_text, end="")
    if ev.get("test"):
        print(f"held-out ({len(test_idx)} frames): "
              f"psnr {ev['test']['psnr_db']:.2f} dB, "
              f"ssim {ev['test']['ssim']:.4f}")
    print(f"outputs in {args.out}")
    return 0


# ---------------------------------------------------------------------------
# gradcheck
# ---------------------------------------------------------------------------

def cmd_gradcheck(args):
    mode = args.binding_mode or "camel"
    report = gradcheck(seed=args.seed if args.seed is not None else 0,
                       mode=mode, tol=args.gradcheck_tol,
                       max_per_group=args.max_per_group)
    rows = [[name, f"{g['max_rel_err']:.3e}", g["checked"], g["size"]]
            for name, g in report["groups"].items()]
    print(_format_table(["group", "max_rel_err", "checked", "size"], rows),
          end="")
    print(f"{'PASS' if report['passed'] else 'FAIL'} "
          f"(tol {report['tol']:g}, mode {mode}, "
          f"loss {report['loss_at_point']:.6f})")
    if args.out:
        with open(args.out, "w") as f:
            json.dump(report, f, indent=1)
        print(f"report written to {args.out}")
    return 0 if report["passed"] else 3


# ---------------------------------------------------------------------------
# render
# ---------------------------------------------------------------------------

def _parse_frames(spec, train_idx, test_idx, n_frames):
    if spec == "all":
        return list(range(n_frames)), None
    if spec == "train":
        return [int(t) for t in train_idx], None
    if spec == "test":
        return [int(t) for t in test_idx], None
    if spec.startswith("novel:"):
        try:
            n = int(spec.split(":", 1)[1])
        except ValueError:
            raise ConfigError(f"bad frame selection {spec!r}")
        if n <= 0:
            raise ConfigError("novel view count must be positive")
        return None, n
    try:
        idx = [int(s) for s in spec.split(",")]
    except ValueError:
        raise ConfigError(f"bad frame selection {spec!r}")
    for i in idx:
        if not 0 <= i < n_frames:
            raise DataError(f"frame {i} out of range (scene has "
                            f"{n_frames} frames)")
    return idx, None


def cmd_render(args):
    scene = load_scene(args.scene)
    ck = load_checkpoint(args.checkpoint)
    mode = args.binding_mode or ck.get("meta", {}).get("mode") or "camel"
    split = args.split or ck.get("meta", {}).get("split") or "uniform80"
    train_idx, test_idx = parse_split(split, len(scene.frames))
    frames, n_novel = _parse_frames(args.frames, train_idx, test_idx,
                                    len(scene.frames))
    poses_by_frame = _checkpoint_poses(scene, ck, train_idx)
    rc = RenderConfig()
    os.makedirs(args.out, exist_ok=True)

    if n_novel is not None:
        # Novel orbit: offset the azimuth so no camera coincides with a
        # training view; the avatar holds the first training frame's pose.
        meta = scene.meta
        center = scene.body.mesh.vertices.mean(axis=0)
        cams = orbit_cameras(n_novel, center,
                             radius=meta.get("radius", 3.2),
                             fx=meta.get("fx", 70.0),
                             fy=meta.get("fx", 70.0),
                             width=meta.get("width", 64),
                             height=meta.get("height", 64),
                             phase=0.7 + np.pi / max(n_novel, 1))
        pose = poses_by_frame[int(train_idx[0])]
        for k, cam in enumerate(cams):
            res = _render_frame(scene, ck["cloud"], pose, cam, mode, rc)
            img = (np.clip(res.color, 0, 1) * 255).round().astype(np.uint8)
            write_png(os.path.join(args.out, f"novel_{k:04d}.png"), img)
        print(f"rendered {n_novel} novel views to {args.out}")
        return 0

    records = []
    for t in frames:
        fr = scene.frames[t]
        res = _render_frame(scene, ck["cloud"], poses_by_frame[t],
                            fr.camera, mode, rc)
        img = (np.clip(res.color, 0, 1) * 255).round().astype(np.uint8)
        write_png(os.path.join(args.out, f"frame_{t:04d}.png"), img)
        if args.depth:
            write_pfm(os.path.join(args.out, f"frame_{t:04d}.depth.pfm"),
                      res.depth)
        if fr.color is not None:
            records.append({"frame": t,
                            "psnr_db": float(psnr(res.color, fr.color)),
                            "ssim": float(ssim(res.color, fr.color))})
    print(f"rendered {len(frames)} frames to {args.out}")
    if records:
        means = _mean_of(records, ["psnr_db", "ssim"])
        text = _write_report(args.out, "render_report",
                             ["frame", "psnr_db", "ssim"], records, means)
        print(text, end="")
    return 0


# ---------------------------------------------------------------------------
# evaluate
# ---------------------------------------------------------------------------

def cmd_evaluate(args):
    scene = load_scene(args.scene)
    ck = load_checkpoint(args.checkpoint)
    mode = args.binding_mode or ck.get("meta", {}).get("mode") or "camel"
    split = args.split or ck.get("meta", {}).get("split") or "uniform80"
    train_idx, test_idx = parse_split(split, len(scene.frames))
    poses_by_frame = _checkpoint_poses(scene, ck, train_idx)
    rc = RenderConfig()
    out_dir = args.out or "."
    os.makedirs(out_dir, exist_ok=True)

    pose_recs = _pose_records(
        scene, {int(t): poses_by_frame[int(t)] for t in train_idx})
    img_recs = _image_records(scene, ck["cloud"], test_idx, poses_by_frame,
                              mode, rc)
    if pose_recs:
        means = _mean_of(pose_recs, ["mpjpe_mm", "pa_mpjpe_mm", "v2v_mm",
                                     "init_mpjpe_mm"])
        print("pose errors on training frames:")
        print(_write_report(out_dir, "pose_report",
                            ["frame", "mpjpe_mm", "pa_mpjpe_mm", "v2v_mm",
                             "init_mpjpe_mm"], pose_recs, means), end="")
    if img_recs:
        means = _mean_of(img_recs, ["psnr_db", "ssim"])
        print("image quality on held-out frames (reference poses):")
        print(_write_report(out_dir, "render_report",
                            ["frame", "psnr_db", "ssim"], img_recs, means),
              end="")
    if not pose_recs and not img_recs:
        print("nothing to evaluate: scene has no ground truth and the "
              "split holds out no frames")
    else:
        print(f"reports written to {out_dir}")
    return 0


# ---------------------------------------------------------------------------
# ablate
# ---------------------------------------------------------------------------

# (row label, binding mode, pose opt, depth losses)
ABLATION_ARMS = [
    ("full", "camel", True, True),
    ("no_pose_opt", "camel", False, True),
    ("no_depth_loss", "camel", True, False),
    ("lsw_skinning", "lsw", True, True),
    ("bind_none", "none", True, True),
    ("bind_lsw", "lsw", True, True),
    ("bind_gom", "gom", True, True),
    ("bind_camel", "camel", True, True),
]

METRIC_COLS = ["psnr_db", "ssim", "mpjpe_mm", "pa_mpjpe_mm", "v2v_mm"]


def _ablate_cell(job):
    """One (config, seed) run; returns metric dict or {'error': ...}.

    Module-level so the opt-in process pool can pickle it. Scenes are
    regenerated per seed from the manifest's generation parameters.
    """
    scene_dir, gen_meta, seed, mode, pose_opt, depth, iters, split = job
    try:
        if gen_meta.get("seed") == seed and scene_dir is not None:
            scene = load_scene(scene_dir)
        else:
            keys = ("n_frames", "width", "height", "sigma_rot",
                    "sigma_trans", "amplitude", "radius", "fx")
            missing = [k for k in keys if k not in gen_meta]
            if missing:
                raise DataError(
                    "scene manifest lacks generation parameters "
                    f"{missing}; multi-seed ablation needs a generated "
                    "scene")
            scene = generate_synthetic_scene(
                seed=seed, **{k: gen_meta[k] for k in keys})
        train_idx, test_idx = parse_split(split, len(scene.frames))
        weights = LossWeights()
        if not depth:
            weights.use_depth = False
            weights.use_depth3d = False
        oc = OptimizeConfig(iters=iters, mode=mode, pose_opt=pose_opt,
                            seed=seed)
        result = optimize_scene(scene, train_idx, oc, weights=weights)
        ev = evaluate_run(scene, result, train_idx, test_idx, mode=mode)
        cell = {}
        cell.update(ev.get("test", {}))
        cell.update(ev.get("train", {}))
        cell.pop("n_frames", None)
        return cell
    except Exception as e:  # record the failure, keep the grid running
        return {"error": f"{type(e).__name__}: {e}"}


def cmd_ablate(args):
    scene = load_scene(args.scene)
    try:
        seeds = [int(s) for s in args.seeds.split(",")]
    except ValueError:
        raise ConfigError(f"bad seed list {args.seeds!r}")
    iters = args.iters if args.iters is not None else 2000
    split = args.split or "first80"
    os.makedirs(args.out, exist_ok=True)

    # Duplicate rows (full/bind_camel, lsw_skinning/bind_lsw) share one
    # deterministic run per seed.
    configs = {}
    for _, mode, pose_opt, depth in ABLATION_ARMS:
        for seed in seeds:
            configs.setdefault((mode, pose_opt, depth, seed), None)
    jobs = [(args.scene, scene.meta, seed, mode, pose_opt, depth, iters,
             split) for (mode, pose_opt, depth, seed) in configs]

    if args.parallel > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=args.parallel) as pool:
            results = list(pool.map(_ablate_cell, jobs))
    else:
        results = []
        for job in jobs:
            results.append(_ablate_cell(job))
            mode, pose_opt, depth, seed = job[3], job[4], job[5], job[2]
            tag = results[-1].get("error", "ok")
            print(f"  ran mode={mode} pose_opt={pose_opt} "
                  f"depth={depth} seed={seed}: {tag}")
    for key, res in zip(configs, results):
        configs[key] = res

    arms = {}
    medians = {}
    for name, mode, pose_opt, depth in ABLATION_ARMS:
        cells = {seed: configs[(mode, pose_opt, depth, seed)]
                 for seed in seeds}
        arms[name] = cells
        med = {}
        for col in METRIC_COLS:
            vals = [c[col] for c in cells.values()
                    if "error" not in c and col in c]
            if vals:
                med[col] = float(np.median(vals))
        medians[name] = med

    rows = []
    for name, *_ in ABLATION_ARMS:
        med = medians[name]
        failed = sum("error" in c for c in arms[name].values())
        row = [name] + [_fmt(med[c]) if c in med else "failed"
                        for c in METRIC_COLS]
        if failed:
            row[0] += f" ({failed}/{len(seeds)} failed)"
        rows.append(row)
    table = _format_table(["arm"] + METRIC_COLS, rows)

    orderings = {}
    if all("mpjpe_mm" in medians[a] for a in
           ("bind_camel", "bind_lsw", "bind_none", "full", "no_pose_opt")):
        orderings = {
            "camel_lt_lsw_mpjpe":
                medians["bind_camel"]["mpjpe_mm"]
                < medians["bind_lsw"]["mpjpe_mm"],
            "camel_lt_none_mpjpe":
                medians["bind_camel"]["mpjpe_mm"]
                < medians["bind_none"]["mpjpe_mm"],
            "no_pose_opt_gt_full_mpjpe":
                medians["no_pose_opt"]["mpjpe_mm"]
                > medians["full"]["mpjpe_mm"],
        }
        if "psnr_db" in medians["full"] and "psnr_db" in medians["no_pose_opt"]:
            orderings["full_gt_no_pose_opt_psnr"] = \
                medians["full"]["psnr_db"] > medians["no_pose_opt"]["psnr_db"]

    with open(os.path.join(args.out, "ablation.txt"), "w") as f:
        f.write(table)
        if orderings:
            f.write("\norderings (median mpjpe unless noted):\n")
            for k, v in orderings.items():
                f.write(f"  {k}: {v}\n")
    with open(os.path.join(args.out, "ablation.json"), "w") as f:
        json.dump({"seeds": seeds, "iters": iters, "split": split,
                   "arms": arms, "medians": medians,
                   "orderings": orderings}, f, indent=1)

    print(table, end="")
    for k, v in orderings.items():
        print(f"{k}: {v}")
    print(f"reports written to {args.out}")
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def build_parser():
    p = _Parser(prog="camelsplat", description=__doc__.split("\n\n")[0],
                formatter_class=argparse.RawDescriptionHelpFormatter,
                epilog="exit codes: 0 ok, 1 usage, 2 data, 3 numerical")
    sub = p.add_subparsers(dest="command", required=True,
                           parser_class=_Parser)

    g = sub.add_parser("gen-scene", help="write a synthetic scene directory")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--frames", type=int, default=30)
    g.add_argument("--width", type=int, default=64)
    g.add_argument("--height", type=int, default=64)
    g.add_argument("--sigma-rot", type=float, default=0.1,
                   help="per-joint-component init noise, radians")
    g.add_argument("--sigma-trans", type=float, default=0.05,
                   help="global translation init noise, meters")
    g.add_argument("--amplitude", type=float, default=1.0,
                   help="animation amplitude scale; 0 freezes the body")
    g.add_argument("--exact-grid", action="store_true",
                   help="snap ground-truth log scales to the flatness grid")
    g.add_argument("--flat-log-ratio", type=float, default=None,
                   help="ground-truth tangent/normal log scale gap")
    g.set_defaults(func=cmd_gen_scene)

    o = sub.add_parser("optimize", help="fit cloud and poses to a scene")
    o.add_argument("--scene", required=True)
    o.add_argument("--out", required=True)
    o.add_argument("--config", default=None,
                   help='JSON: {"loss": {...}, "optim": {...}, "render": {...}}')
    o.add_argument("--seed", type=int, default=None)
    o.add_argument("--binding-mode", choices=BINDING_MODES, default=None)
    o.add_argument("--no-pose-opt", action="store_true")
    o.add_argument("--no-depth-loss", action="store_true")
    o.add_argument("--split", default="uniform80",
                   help="uniform80 | first80 | views:N")
    o.add_argument("--iters", type=int, default=None)
    o.add_argument("--checkpoint-every", type=int, default=None)
    o.add_argument("--log-every", type=int, default=None)
    o.add_argument("--resume", default=None, metavar="CHECKPOINT")
    o.set_defaults(func=cmd_optimize)

    c = sub.add_parser("gradcheck",
                       help="finite-difference check of the objective")
    c.add_argument("--seed", type=int, default=None)
    c.add_argument("--binding-mode", choices=BINDING_MODES, default=None)
    c.add_argument("--gradcheck-tol", type=float, default=1e-3)
    c.add_argument("--max-per-group", type=int, default=None,
                   help="sample this many coordinates per group")
    c.add_argument("--out", default=None, help="write the JSON report here")
    c.set_defaults(func=cmd_gradcheck)

    r = sub.add_parser("render", help="render frames from a checkpoint")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--scene", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--frames", default="all",
                   help="all | train | test | i,j,k | novel:N")
    r.add_argument("--split", default=None,
                   help="defaults to the split stored in the checkpoint")
    r.add_argument("--binding-mode", choices=BINDING_MODES, default=None)
    r.add_argument("--depth", action="store_true",
                   help="also write PFM depth rasters")
    r.set_defaults(func=cmd_render)

    e = sub.add_parser("evaluate", help="metric report for a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--scene", required=True)
    e.add_argument("--out", default=None)
    e.add_argument("--split", default=None)
    e.add_argument("--binding-mode", choices=BINDING_MODES, default=None)
    e.set_defaults(func=cmd_evaluate)

    a = sub.add_parser("ablate",
                       help="binding-mode / loss-switch comparison grid")
    a.add_argument("--scene", required=True)
    a.add_argument("--out", required=True)
    a.add_argument("--seeds", default="0", help="comma-separated list")
    a.add_argument("--iters", type=int, default=None)
    a.add_argument("--split", default=None)
    a.add_argument("--parallel", type=int, default=0, metavar="N",
                   help="run grid cells in N worker processes")
    a.set_defaults(func=cmd_ablate)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 1
    except SystemExit as e:  # --help
        return int(e.code or 0)
    try:
        return args.func(args)
    except _UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 1
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 1
    except DivergenceError as e:
        print(f"diverged: {e}", file=sys.stderr)
        return 3
    except CamelSplatError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
