"""Compare the compiled and pure-numpy kernel backends.

The backend is chosen at import time from CAMELSPLAT_NUMBA, so this
script re-executes itself in a subprocess per backend and prints a
side-by-side table. Timed pieces: the compositing kernel forward and
backward, the nearest-neighbor query, and one full loss+gradient
evaluation on a synthetic frame.

Usage: python3 benchmarks/kernel_benchmark.py [--reps N] [--frames N]
"""

import argparse
import json
import os
import subprocess
import sys
import time


def _time(fn, reps):
    # One untimed call absorbs jit compilation.
    fn()
    t0 = time.perf_counter()
    for _ in range(reps):
        fn()
    return (time.perf_counter() - t0) / reps * 1e3


def run_workload(reps):
    import numpy as np

    from camelsplat import kernels
    from camelsplat.body import forward_kinematics
    from camelsplat.gaussians import deform_forward, init_on_mesh
    from camelsplat.losses import LossWeights, total_loss
    from camelsplat.renderer import RenderConfig, render, render_backward
    from camelsplat.scene_io import generate_synthetic_scene

    scene = generate_synthetic_scene(n_frames=2, seed=0)
    frame = scene.frames[0]
    cloud = init_on_mesh(scene.body)
    tf, _ = forward_kinematics(scene.body, frame.gt_pose)
    posed, _ = deform_forward(cloud, tf, "camel")
    rc = RenderConfig()
    res = render(posed, frame.camera, rc)

    dC = np.ones_like(res.color)
    dD = np.ones_like(res.depth)
    dA = np.ones_like(res.alpha)
    rng = np.random.default_rng(0)
    queries = rng.normal(size=(600, 3))
    points = rng.normal(size=(1500, 3))
    weights = LossWeights()

    out = {
        "backend": kernels.active_backend(),
        "n_gaussians": cloud.n_gaussians,
        "image": f"{frame.camera.width}x{frame.camera.height}",
        "ms": {
            "render_forward": _time(
                lambda: render(posed, frame.camera, rc), reps),
            "render_backward": _time(
                lambda: render_backward(res, dC, dD, dA), reps),
            "nn_points_600x1500": _time(
                lambda: kernels.nn_points(queries, points), reps),
            "loss_with_grad": _time(
                lambda: total_loss(frame, scene.body, cloud, frame.gt_pose,
                                   weights, rc, mode="camel"), reps),
        },
    }
    return out


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--reps", type=int, default=20)
    ap.add_argument("--_child", action="store_true", help=argparse.SUPPRESS)
    args = ap.parse_args()

    if args._child:
        print(json.dumps(run_workload(args.reps)))
        return

    results = []
    for flag in ("1", "0"):
        env = dict(os.environ, CAMELSPLAT_NUMBA=flag)
        proc = subprocess.run(
            [sys.executable, os.path.abspath(__file__), "--_child",
             "--reps", str(args.reps)],
            env=env, capture_output=True, text=True)
        if proc.returncode != 0:
            sys.stderr.write(proc.stderr)
            raise SystemExit(f"backend run failed (CAMELSPLAT_NUMBA={flag})")
        results.append(json.loads(proc.stdout.strip().splitlines()[-1]))

    a, b = results
    print(f"workload: {a['n_gaussians']} gaussians, {a['image']} image, "
          f"{args.reps} reps")
    name_w = max(len(k) for k in a["ms"])
    print(f"{'kernel'.ljust(name_w)}  {a['backend']:>10}  {b['backend']:>10}"
          f"  {'speedup':>8}")
    for k in a["ms"]:
        ta, tb = a["ms"][k], b["ms"][k]
        print(f"{k.ljust(name_w)}  {ta:8.2f}ms  {tb:8.2f}ms  "
              f"{tb / ta:7.1f}x")


if __name__ == "__main__":
    main()
