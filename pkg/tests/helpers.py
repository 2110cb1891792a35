"""Shared fixtures-in-code for the test suite."""

import numpy as np

from camelsplat.body import make_toy_body

# (name, parent, start, end, radius) rows, same layout the toy body uses.
SMALL_SKELETON = [
    ("torso", -1, (0.00, 1.00, 0.00), (0.00, 1.58, 0.00), 0.130),
    ("l_upper_arm", 0, (0.19, 1.52, 0.00), (0.45, 1.44, 0.00), 0.045),
    ("l_forearm", 1, (0.45, 1.44, 0.00), (0.70, 1.34, 0.00), 0.040),
    ("r_thigh", 0, (-0.10, 1.00, 0.00), (-0.12, 0.55, 0.00), 0.065),
]

# Three colinear bones along +y, joints at y = 0, 1, 2, tip at 3.
CHAIN_SKELETON = [
    ("a", -1, (0.0, 0.0, 0.0), (0.0, 1.0, 0.0), 0.05),
    ("b", 0, (0.0, 1.0, 0.0), (0.0, 2.0, 0.0), 0.05),
    ("c", 1, (0.0, 2.0, 0.0), (0.0, 3.0, 0.0), 0.05),
]


def small_body():
    return make_toy_body(n_rings=5, n_seg=5, seed=1, skeleton=SMALL_SKELETON)


def central_diff(f, arr, eps=1e-6):
    """Dense central differences of zero-arg scalar f over arr, in place."""
    g = np.zeros_like(arr)
    flat = arr.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        hi = f()
        flat[i] = old - eps
        lo = f()
        flat[i] = old
        gf[i] = (hi - lo) / (2 * eps)
    return g


def rel_err(a, b, floor=1e-10):
    a = np.asarray(a, np.float64)
    b = np.asarray(b, np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom))


def max_abs(a):
    return float(np.max(np.abs(a)))
