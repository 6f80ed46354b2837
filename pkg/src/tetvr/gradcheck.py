"""Central finite-difference verification of the adjoint renderer."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .assets import Camera, ImageBuffer
from .backward import backward_render, loss_and_adjoint
from .forward import composite_background, render_states
from .raycast import ViewSetup, tile_ranges, tile_segments
from .tetmesh import TetMesh, build_regular_grid

#: Denominator floor for relative errors (well above finite-difference noise).
REL_FLOOR = 1e-7


@dataclass
class ClassResult:
    name: str
    max_abs_err: float
    max_rel_err: float
    checked: int
    skipped: int  # perturbations that changed the fragment pairing

    def passed(self, rel_tol=1e-3, abs_tol=1e-4) -> bool:
        return self.max_rel_err <= rel_tol or self.max_abs_err <= abs_tol


def image_loss(mesh, camera, target, n_sub, background, kind="l2"):
    states, _ = render_states(mesh, camera, n_sub)
    img = composite_background(states, background, camera.width, camera.height)
    return loss_and_adjoint(img, target, kind)[0]


def pairing_signature(mesh: TetMesh, camera: Camera):
    """Concatenated per-pixel segment lists; equal signatures mean equal pairing."""
    view = ViewSetup(mesh, camera)
    parts = []
    for rows in tile_ranges(camera.height):
        s = tile_segments(view, *rows)
        parts.append((np.diff(s.offsets), s.tet, s.f0, s.f1))
    return tuple(np.concatenate(p) for p in zip(*parts))


def _same(a, b):
    return all(np.array_equal(x, y) for x, y in zip(a, b))


def check_gradients(mesh: TetMesh, camera: Camera, target: ImageBuffer, n_sub=4,
                    background=None, kind="l2", rel_step=1e-5, classes=None, limit=None,
                    rng=None):
    """Compare adjoint gradients with central differences of the image loss.

    ``rel_step`` scales the perturbation by ``max(1, |x|)``.  Position
    perturbations that change which faces a ray enters and exits are skipped
    (the loss is not differentiable across such events).  ``limit`` caps the
    number of checked entries per class (sampled with ``rng``).

    Returns
    -------
    dict of ClassResult keyed by ``color``, ``opacity``, ``position``.
    """
    classes = classes or ("color", "opacity", "position")
    states, _ = render_states(mesh, camera, n_sub)
    img = composite_background(states, background, camera.width, camera.height)
    _, adj = loss_and_adjoint(img, target, kind)
    grads = backward_render(mesh, camera, adj, states, n_sub, background)
    base_sig = pairing_signature(mesh, camera) if "position" in classes else None
    arrays = {"color": ("colors", grads.grad_color), "opacity": ("opacities", grads.grad_opacity),
              "position": ("positions", grads.grad_position)}
    rng = np.random.default_rng(0) if rng is None else rng
    out = {}
    for name in classes:
        attr, analytic = arrays[name]
        work = mesh.copy()
        flat = getattr(work, attr).reshape(-1)
        an = analytic.reshape(-1)
        idx = np.arange(flat.size)
        if limit is not None and limit < flat.size:
            idx = np.sort(rng.choice(flat.size, limit, replace=False))
        max_abs = max_rel = 0.0
        checked = skipped = 0
        for i in idx:
            x = flat[i]
            h = rel_step * max(1.0, abs(x))
            vals = []
            ok = True
            for sgn in (1.0, -1.0):
                flat[i] = x + sgn * h
                if name == "position" and not _same(pairing_signature(work, camera), base_sig):
                    ok = False
                    break
                vals.append(image_loss(work, camera, target, n_sub, background, kind))
            flat[i] = x
            if not ok:
                skipped += 1
                continue
            fd = (vals[0] - vals[1]) / (2.0 * h)
            err = abs(fd - an[i])
            max_abs = max(max_abs, err)
            max_rel = max(max_rel, err / max(abs(fd), REL_FLOOR))
            checked += 1
        out[name] = ClassResult(name, max_abs, max_rel, checked, skipped)
    return out


def random_test_scene(seed=0, size=32):
    """Small perturbed 2x1x1 grid (12 tets), a camera and a random target."""
    rng = np.random.default_rng(seed)
    mesh = build_regular_grid((2, 1, 1), ((0, 0, 0), (1, 0.5, 0.5)))
    mesh.positions += rng.normal(0.0, 0.02, mesh.positions.shape)
    mesh.colors = rng.random((mesh.n_vertices, 3))
    mesh.opacities = rng.uniform(0.5, 4.0, mesh.n_vertices)
    eye = np.array([0.5, 0.25, 0.25]) + rng.normal(0, 1, 3) * np.array([0.4, 0.4, 0.4]) \
        + np.array([0.0, 1.2, 1.8])
    cam = Camera.look_at(eye, [0.5, 0.25, 0.25], [0, 1, 0], np.radians(40), size, size)
    target = ImageBuffer(rng.random((size, size, 4)))
    return mesh, cam, target
