"""Differentiable direct volume rendering of tetrahedral meshes.

The main entry points are :func:`tetvr.forward.render`,
:func:`tetvr.backward.backward_render` and :func:`tetvr.optim.train`.
"""

__version__ = "0.1.0"

from .assets import Camera, ImageBuffer  # noqa: E402,F401
from .tetmesh import TetMesh, build_regular_grid, load_mesh, save_mesh, validate  # noqa: E402,F401
