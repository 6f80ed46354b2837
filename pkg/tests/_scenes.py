"""Shared scene builders for the test suite."""

import numpy as np

from tetvr.assets import Camera
from tetvr.raycast import generate_fragments, pair_segments, sort_front_to_back
from tetvr.tetmesh import TetMesh, build_regular_grid

UNIT_TET = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1]], dtype=np.float64)


def single_ray_segment(rng, opacity_range=(0.0, 5.0), scale=1.0):
    """Random attributes on a scaled unit tet and one ray crossing it.

    Returns ``(mesh, segment, origin, direction)``.
    """
    mesh = TetMesh(UNIT_TET * scale, [[0, 1, 2, 3]])
    mesh.colors = rng.random((4, 3))
    mesh.opacities = rng.uniform(*opacity_range, 4)
    w = rng.dirichlet(np.ones(4) * 3)
    target = w @ mesh.positions
    eye = target + (np.array([-0.6, -0.4, -2.0]) + rng.normal(0, 0.3, 3)) * scale
    cam = Camera.look_at(eye, target, [0, 1, 0], 0.01, 1, 1, near=1e-6)
    frags = sort_front_to_back(generate_fragments(mesh, cam)).pixel(0, 0)
    segs, _ = pair_segments(frags)
    assert len(segs) == 1
    return mesh, segs[0], cam.origin, cam.ray(0.5, 0.5)


def gradient_grid(dims=(3, 3, 3), opacity_scale=2.0):
    """Unit cube grid with colors and extinction varying smoothly in space."""
    mesh = build_regular_grid(dims, ((0, 0, 0), (1, 1, 1)))
    p = mesh.positions
    mesh.colors = 0.5 + 0.4 * np.sin(np.pi * p)
    mesh.opacities = opacity_scale * (0.2 + p[:, 0] + 0.5 * p[:, 1] ** 2)
    return mesh


def oblique_camera(res=24):
    return Camera.look_at([1.6, 1.3, 2.4], [0.5, 0.5, 0.5], [0, 1, 0], np.radians(40), res, res)
