"""Kernel backend selection.

The numba backend is the default; set CAMELSPLAT_NUMBA=0 to force the
pure-numpy fallback. CAMELSPLAT_THREADS caps the numba threading layer.
Both backends expose the same functions and are compared by the
benchmark script and the backend-equivalence tests.
"""

import os

_flag = os.environ.get("CAMELSPLAT_NUMBA", "1").strip().lower()
_want_numba = _flag not in ("0", "false", "no", "off")

_backend_name = "numpy"
if _want_numba:
    try:
        from camelsplat.kernels import numba_backend as _impl
        _backend_name = "numba"
    except ImportError:
        from camelsplat.kernels import numpy_backend as _impl
else:
    from camelsplat.kernels import numpy_backend as _impl

if _backend_name == "numba":
    _threads = os.environ.get("CAMELSPLAT_THREADS", "").strip()
    if _threads:
        import numba

        try:
            numba.set_num_threads(max(1, min(int(_threads),
                                             numba.config.NUMBA_NUM_THREADS)))
        except ValueError:
            pass  # malformed value: keep numba's default

splat_composite = _impl.splat_composite
splat_composite_vjp = _impl.splat_composite_vjp
nn_points = _impl.nn_points
nn_points_brute = _impl.nn_points_brute


def active_backend():
    """Name of the kernel backend in use: 'numba' or 'numpy'."""
    return _backend_name


__all__ = [
    "splat_composite",
    "splat_composite_vjp",
    "nn_points",
    "nn_points_brute",
    "active_backend",
]
