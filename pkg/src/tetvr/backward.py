"""Adjoint rendering: image-space loss gradients to per-vertex gradients.

The backward pass re-generates fragments, walks each ray back to front, and
reconstructs every intermediate ray state from the final one by inverting the
compositing step, so no per-step forward data needs to be stored.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import _kernels as K
from .assets import Camera, ImageBuffer
from .forward import (DEFAULT_NSUB, RayState, FinalStates, _check_domain, _check_nsub,
                      _map_tiles, parse_background)
from .raycast import ViewSetup, tile_ranges, tile_segments
from .tetmesh import TetMesh

#: Segment lengths at or below this suppress depth gradients.
EPS_T = 1e-12


@dataclass
class AdjointImage:
    """d(loss)/d(rendered RGB) and d(loss)/d(rendered alpha), per pixel."""

    c_adj: np.ndarray  # (H, W, 3)
    alpha_adj: np.ndarray  # (H, W)

    @classmethod
    def zeros(cls, width, height):
        return cls(np.zeros((height, width, 3)), np.zeros((height, width)))

    def __add__(self, other):
        return AdjointImage(self.c_adj + other.c_adj, self.alpha_adj + other.alpha_adj)

    def __mul__(self, s):
        return AdjointImage(self.c_adj * s, self.alpha_adj * s)

    __rmul__ = __mul__


class GradientBuffer:
    """Per-vertex gradients of colors, opacities and positions."""

    def __init__(self, n_vertices: int):
        self.grad_color = np.zeros((n_vertices, 3))
        self.grad_opacity = np.zeros(n_vertices)
        self.grad_position = np.zeros((n_vertices, 3))
        self.abs_grad_color = np.zeros(n_vertices)

    def __len__(self):
        return len(self.grad_opacity)

    def zero(self):
        for a in (self.grad_color, self.grad_opacity, self.grad_position, self.abs_grad_color):
            a[...] = 0.0

    def add(self, other: "GradientBuffer") -> "GradientBuffer":
        self.grad_color += other.grad_color
        self.grad_opacity += other.grad_opacity
        self.grad_position += other.grad_position
        self.abs_grad_color += other.abs_grad_color
        return self

    def scale(self, s: float) -> "GradientBuffer":
        """Scale the loss gradients (``abs_grad_color`` is left untouched)."""
        self.grad_color *= s
        self.grad_opacity *= s
        self.grad_position *= s
        return self

    def save(self, path):
        np.savez(path, grad_color=self.grad_color, grad_opacity=self.grad_opacity,
                 grad_position=self.grad_position, abs_grad_color=self.abs_grad_color)


def loss_and_adjoint(rendered: ImageBuffer, target: ImageBuffer, kind: str = "l2"):
    """Mean image loss over the RGB channels and its adjoint.

    The alpha channel does not enter the loss, so its adjoint is zero.  For
    ``l1`` the subgradient at ties is 0.
    """
    if rendered.data.shape != target.data.shape:
        raise ValueError(f"image size mismatch: {rendered.data.shape} vs {target.data.shape}")
    diff = rendered.rgb - target.rgb
    n = diff.size
    if kind == "l2":
        loss = float(np.sum(diff * diff) / n)
        adj = 2.0 * diff / n
    elif kind == "l1":
        loss = float(np.sum(np.abs(diff)) / n)
        adj = np.sign(diff) / n
    else:
        raise ValueError(f"unknown loss kind {kind!r}")
    return loss, AdjointImage(adj, np.zeros(diff.shape[:2]))


def accum_segment_grad(t, c0, c1, alpha, dc_acc, dalpha_acc=0.0):
    """Contract the partials of ``accum_segment`` with upstream adjoints.

    Returns
    -------
    dc0, dc1 : (3,) ndarray
    dalpha, dt : float
    """
    _check_domain(t, alpha)
    big_a, oma, g, gp = K.seg_coeffs(float(t), float(alpha))
    c0 = np.asarray(c0, dtype=np.float64)
    c1 = np.asarray(c1, dtype=np.float64)
    dc = np.asarray(dc_acc, dtype=np.float64)
    bracket = float(dc @ (c0 * big_a + (c1 - c0) * gp)) + dalpha_acc * big_a
    return (oma - g) * dc, g * dc, t * bracket, alpha * bracket


def accum_segment_partials(t, alpha):
    """Per-channel ``(dc/dc0, dc/dc1)`` weights and ``(da/dalpha, da/dt)``."""
    _check_domain(t, alpha)
    big_a, oma, g, _ = K.seg_coeffs(float(t), float(alpha))
    return oma - g, g, t * big_a, alpha * big_a


def invert_ray_state(state_after: RayState, c_acc, alpha_acc) -> RayState:
    """Undo one front-to-back compositing step."""
    if alpha_acc >= 1.0:
        raise ValueError("cannot invert a fully opaque step (alpha_acc >= 1)")
    alpha_before = (alpha_acc - state_after.alpha_ray) / (alpha_acc - 1.0)
    c_before = state_after.c_ray - (1.0 - alpha_before) * np.asarray(c_acc, dtype=np.float64)
    return RayState(c_before, alpha_before)


def invert_log_state(c_ray, log_t, c_acc, alpha_acc):
    """Undo :func:`tetvr.forward.compose_log`; returns ``(color, log_t)`` before the step."""
    if alpha_acc >= 1.0:
        raise ValueError("cannot invert a fully opaque step (alpha_acc >= 1)")
    log_before = log_t - math.log1p(-alpha_acc)
    c = np.asarray(c_ray, dtype=np.float64) - math.exp(log_before) * np.asarray(c_acc,
                                                                                 np.float64)
    return c, log_before


@dataclass
class BaryGrad:
    dcolor_v: np.ndarray  # (3, 3) per face vertex
    dopacity_v: np.ndarray  # (3,)
    dposition_v: np.ndarray  # (3, 3)
    dquery: np.ndarray  # (3,)
    degenerate: bool = False


def _face_frame(mesh, face_id):
    idx = mesh.faces[face_id]
    p = mesh.positions[idx]
    e1 = p[1] - p[0]
    e2 = p[2] - p[0]
    n = np.cross(e1, e2)
    return idx, p, e1, e2, n, float(n @ n)


def bary_grad(face_id: int, query, mesh: TetMesh, dcolor=None, dopacity=0.0,
              dposition=None) -> BaryGrad:
    """Backpropagate through :func:`bary_interp` at a fixed query point.

    Upstream adjoints are on the interpolated color, opacity and position.
    Position gradients include the dependence of the barycentric weights on
    the face vertices; the query point is assumed to lie on the face plane.
    """
    dcolor = np.zeros(3) if dcolor is None else np.asarray(dcolor, dtype=np.float64)
    dposition = np.zeros(3) if dposition is None else np.asarray(dposition, np.float64)
    idx, p, e1, e2, n, nn = _face_frame(mesh, face_id)
    if nn <= K.AREA_EPS2:
        z = np.zeros((3, 3))
        return BaryGrad(z, np.zeros(3), z.copy(), np.zeros(3), degenerate=True)
    r = np.asarray(query, dtype=np.float64) - p[0]
    row_u = np.cross(e2, n) / nn
    row_v = np.cross(n, e1) / nn
    u = r @ row_u
    v = r @ row_v
    w = np.array([1.0 - u - v, u, v])
    col = mesh.colors[idx]
    opa = mesh.opacities[idx]
    g_u = dcolor @ (col[1] - col[0]) + dopacity * (opa[1] - opa[0]) + dposition @ e1
    g_v = dcolor @ (col[2] - col[0]) + dopacity * (opa[2] - opa[0]) + dposition @ e2
    dq = g_u * row_u + g_v * row_v
    dpos = w[:, None] * (dposition - dq)
    return BaryGrad(np.outer(w, dcolor), w * dopacity, dpos, dq)


def _ray_hit(mesh, origin, direction, face_id):
    """``(s, weights, M^-1 row for s)`` of the ray/face-plane intersection."""
    idx, p, e1, e2, n, _ = _face_frame(mesh, face_id)
    d = np.asarray(direction, dtype=np.float64)
    det = -(d @ n)
    if det == 0.0:
        return None
    rhs = np.asarray(origin, dtype=np.float64) - p[0]
    row_s = n / det
    s = rhs @ row_s
    u = rhs @ (np.cross(e2, -d) / det)
    v = rhs @ (np.cross(-d, e1) / det)
    return idx, s, np.array([1.0 - u - v, u, v]), row_s


def segment_depth_grad(origin, direction, f0: int, f1: int, mesh: TetMesh, dt: float):
    """Gradient of ``t = |q1 - q0|`` on the 6 face-vertex positions.

    ``q0``/``q1`` are the intersections of the ray with the planes of faces
    ``f0``/``f1``.

    Returns
    -------
    vertices : (6,) int ndarray
        Face ``f0`` vertices then face ``f1`` vertices.
    grads : (6, 3) ndarray
        ``dt * dt/dp`` per listed vertex; all zero when ``t <= EPS_T`` or the
        ray is parallel to a face.
    """
    o = np.asarray(origin, dtype=np.float64)
    d = np.asarray(direction, dtype=np.float64)
    h0 = _ray_hit(mesh, o, d, f0)
    h1 = _ray_hit(mesh, o, d, f1)
    verts = np.concatenate([mesh.faces[f0], mesh.faces[f1]])
    grads = np.zeros((6, 3))
    if h0 is None or h1 is None:
        return verts, grads
    q0 = o + h0[1] * d
    q1 = o + h1[1] * d
    t = np.linalg.norm(q1 - q0)
    if t <= EPS_T:
        return verts, grads
    dir_dot = (q1 - q0) @ d / t  # dt/ds1; dt/ds0 is its negative
    for side, (_, _, w, row_s) in enumerate((h0, h1)):
        ds = dt * dir_dot * (1.0 if side else -1.0)
        grads[3 * side:3 * side + 3] = -ds * w[:, None] * row_s[None, :]
    return verts, grads


def image_adjoint_to_state(adjoint: AdjointImage, states: FinalStates, background):
    """Map output-pixel adjoints to adjoints of the final ray state (C, alpha)."""
    bg = parse_background(background)
    c_adj = adjoint.c_adj.reshape(-1, 3)
    a_adj = adjoint.alpha_adj.reshape(-1)
    # out_rgb = C + T bg_rgb bg_a, out_a = 1 - T (1 - bg_a), alpha_ray = 1 - T
    d_alpha = -(c_adj @ (bg[:3] * bg[3])) + a_adj * (1.0 - bg[3])
    return np.ascontiguousarray(c_adj), np.ascontiguousarray(d_alpha)


def backward_render(mesh: TetMesh, camera: Camera, adjoint: AdjointImage,
                    states: FinalStates, n_sub: int = DEFAULT_NSUB, background=None,
                    workers=1, positions: bool = True) -> GradientBuffer:
    """Per-vertex gradients of one view.

    Tiles of rows accumulate into private buffers that are summed in tile
    order, so the result does not depend on ``workers``.
    ``abs_grad_color`` receives the per-vertex norm of this view's color
    gradient.
    """
    n_sub = _check_nsub(n_sub)
    out = GradientBuffer(mesh.n_vertices)
    if mesh.n_tets == 0:
        return out
    view = ViewSetup(mesh, camera)
    adj_c, adj_a = image_adjoint_to_state(adjoint, states, background)
    colors = np.ascontiguousarray(mesh.colors)
    opac = np.ascontiguousarray(mesh.opacities)
    fin_c = np.ascontiguousarray(states.color)
    fin_t = np.ascontiguousarray(states.log_transmittance)
    w = camera.width

    def run(rows):
        p0, p1 = rows[0] * w, rows[1] * w
        buf = GradientBuffer(mesh.n_vertices)
        if not (np.any(adj_c[p0:p1]) or np.any(adj_a[p0:p1])):
            return buf
        segs = tile_segments(view, *rows)
        K.backward_pixels(view.origin, view.dirs[p0:p1], 0, p1 - p0, camera.near, n_sub,
                          view.positions, colors, opac, view.faces, segs.offsets, segs.f0,
                          segs.f1, segs.d0, segs.d1, fin_c[p0:p1], fin_t[p0:p1],
                          adj_c[p0:p1], adj_a[p0:p1], buf.grad_color, buf.grad_opacity,
                          buf.grad_position, positions)
        return buf

    for buf in _map_tiles(run, tile_ranges(camera.height), workers):
        out.add(buf)
    out.abs_grad_color = np.linalg.norm(out.grad_color, axis=1)
    return out
