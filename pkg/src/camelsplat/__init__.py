"""Joint human pose and surface-bound Gaussian splat optimization.

A body-aware splatting toolkit: an articulated toy body poses a cloud of
surface-bound 3D Gaussians, a differentiable CPU rasterizer renders them,
and photometric, masked-depth and mesh-binding losses drive pose and
appearance refinement on synthetic desk-scale scenes.
"""

from camelsplat.kernels import active_backend

__version__ = "0.1.0"

__all__ = ["__version__", "active_backend"]
