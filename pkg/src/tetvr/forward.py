"""Front-to-back volume accumulation through tet segments and image compositing."""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import integrate

from . import _kernels as K
from .assets import Camera, ImageBuffer
from .raycast import Segment, ViewSetup, tile_ranges, tile_segments
from .tetmesh import TetMesh

DEFAULT_NSUB = 8
ALPHA_MAX = K.ALPHA_MAX


class DegenerateFaceError(ValueError):
    """Raised when interpolating on a face with (near) zero area."""


@dataclass
class RayState:
    """Accumulated premultiplied color and opacity of a ray."""

    c_ray: np.ndarray = field(default_factory=lambda: np.zeros(3))
    alpha_ray: float = 0.0

    def copy(self) -> "RayState":
        return RayState(np.array(self.c_ray, dtype=np.float64), float(self.alpha_ray))


@dataclass(frozen=True)
class BaryResult:
    position: np.ndarray
    color: np.ndarray
    opacity: float
    weights: np.ndarray  # per face vertex, in face order


def bary_interp(query, face_id: int, mesh: TetMesh) -> BaryResult:
    """Interpolate vertex attributes at a point on (or projected onto) a face."""
    q = np.asarray(query, dtype=np.float64)
    i0, i1, i2 = (int(i) for i in mesh.faces[face_id])
    u, v, nn = K.bary_weights(q[0], q[1], q[2], mesh.positions, i0, i1, i2)
    if nn <= K.AREA_EPS2:
        raise DegenerateFaceError(f"face {face_id} is degenerate")
    w = np.array([1.0 - u - v, u, v])
    idx = [i0, i1, i2]
    return BaryResult(w @ mesh.positions[idx], w @ mesh.colors[idx],
                      float(w @ mesh.opacities[idx]), w)


def _check_domain(t, alpha):
    if not (t >= 0 and alpha >= 0):
        raise ValueError(f"segment length and extinction must be >= 0 (t={t}, alpha={alpha})")


def accum_segment(t, c0, c1, alpha):
    """Color and opacity of a segment with a linear color ramp and constant extinction.

    The color ramps from ``c0`` at the entry to ``c1`` at the exit over the
    length ``t``.  The returned color is premultiplied by opacity.

    Returns
    -------
    c_acc : (3,) ndarray
    alpha_acc : float
        ``1 - exp(-alpha * t)``, before any clamping.
    """
    _check_domain(t, alpha)
    _, oma, g, _ = K.seg_coeffs(float(t), float(alpha))
    c0 = np.asarray(c0, dtype=np.float64)
    c1 = np.asarray(c1, dtype=np.float64)
    return (oma - g) * c0 + g * c1, oma


def accum_segment_const(t, c, alpha):
    """Constant-color segment: ``((1 - exp(-alpha t)) c, 1 - exp(-alpha t))``."""
    _check_domain(t, alpha)
    a = -math.expm1(-float(alpha) * float(t))
    return a * np.asarray(c, dtype=np.float64), a


def compose(state: RayState, c_acc, alpha_acc) -> RayState:
    """Front-to-back over operator for one accumulated step."""
    one_minus = 1.0 - state.alpha_ray
    return RayState(state.c_ray + one_minus * np.asarray(c_acc, dtype=np.float64),
                    state.alpha_ray + one_minus * alpha_acc)


def compose_log(c_ray, log_t, c_acc, alpha_acc):
    """:func:`compose` on ``(color, log transmittance)``, the renderer's ray state.

    Stays exact when the opacity rounds to 1 in floating point.
    """
    c = np.asarray(c_ray, dtype=np.float64) + math.exp(log_t) * np.asarray(c_acc, np.float64)
    return c, log_t + math.log1p(-alpha_acc)


def accum_tet(segment: Segment, state: RayState, n_sub: int, mesh: TetMesh, origin,
              direction, near: float = 0.0) -> RayState:
    """Accumulate one tet segment onto a ray state with ``n_sub`` sub-intervals.

    Straightforward per-step implementation used as a reference for the
    compiled renderer.  Raises :class:`DegenerateFaceError` for segments whose
    entry or exit face is degenerate.
    """
    if n_sub < 1:
        raise ValueError("n_sub must be >= 1")
    o = np.asarray(origin, dtype=np.float64)
    d = np.asarray(direction, dtype=np.float64)
    s0, s1 = segment.d0, segment.d1
    if s1 <= near:
        return state.copy()
    b0 = bary_interp(o + s0 * d, segment.f0, mesh)
    b1 = bary_interp(o + s1 * d, segment.f1, mesh)
    c0, a0 = b0.color, b0.opacity
    c1, a1 = b1.color, b1.opacity
    if s0 < near:
        f = (near - s0) / (s1 - s0)
        c0 = c0 + f * (c1 - c0)
        a0 = a0 + f * (a1 - a0)
        s0 = near
    t = (s1 - s0) / n_sub
    out = state.copy()
    for i in range(n_sub):
        ci0 = c0 + i / n_sub * (c1 - c0)
        ci1 = c0 + (i + 1) / n_sub * (c1 - c0)
        ai = a0 + (i + 0.5) / n_sub * (a1 - a0)
        c_acc, a_acc = accum_segment(t, ci0, ci1, ai)
        out = compose(out, c_acc, min(a_acc, ALPHA_MAX))
    return out


@dataclass(frozen=True)
class AccumCoeffs:
    """Polynomial-times-Gaussian form of the exact segment integrand.

    With colors and extinction varying linearly from entry to exit over the
    length ``t``, the color integrand equals
    ``(r0 + r1 x + r2 x^2) * exp(q1 x + q2 x^2)``.
    """

    r0: np.ndarray
    r1: np.ndarray
    r2: np.ndarray
    q1: float
    q2: float

    @classmethod
    def from_endpoints(cls, t, c0, c1, alpha0, alpha1):
        c0 = np.asarray(c0, dtype=np.float64)
        dc = np.asarray(c1, dtype=np.float64) - c0
        da = alpha1 - alpha0
        return cls(r0=c0 * alpha0, r1=(c0 * da + alpha0 * dc) / t, r2=dc * da / t ** 2,
                   q1=-alpha0, q2=-da / (2.0 * t))


def reference_quadrature(t, c0, c1, alpha0, alpha1, tol=1e-12):
    """Exact segment color/opacity by adaptive quadrature (reference oracle)."""
    if t < 0 or alpha0 < 0 or alpha1 < 0:
        raise ValueError("t and extinctions must be >= 0")
    if t == 0:
        return np.zeros(3), 0.0
    k = AccumCoeffs.from_endpoints(t, c0, c1, alpha0, alpha1)

    def trans(x):
        return math.exp(k.q1 * x + k.q2 * x * x)

    color = np.array([
        integrate.quad(lambda x, ch=ch: (k.r0[ch] + k.r1[ch] * x + k.r2[ch] * x * x)
                       * trans(x), 0.0, t, epsabs=tol, epsrel=tol, limit=200)[0]
        for ch in range(3)])
    alpha = integrate.quad(lambda x: (alpha0 + (alpha1 - alpha0) * x / t) * trans(x),
                           0.0, t, epsabs=tol, epsrel=tol, limit=200)[0]
    return color, alpha


# -- image rendering ------------------------------------------------------------

@dataclass
class FinalStates:
    """Per-pixel final ray state: premultiplied color and log transmittance."""

    color: np.ndarray  # (H*W, 3)
    log_transmittance: np.ndarray  # (H*W,)

    @property
    def alpha(self) -> np.ndarray:
        return -np.expm1(self.log_transmittance)


@dataclass
class RenderStats:
    dropped_tets: int = 0
    degenerate_segments: int = 0
    segments: int = 0


def parse_background(bg) -> np.ndarray:
    if bg is None:
        return np.array([0.0, 0.0, 0.0, 1.0])
    if isinstance(bg, str):
        bg = [float(x) for x in bg.split(",")]
    bg = np.asarray(bg, dtype=np.float64).ravel()
    if bg.size == 3:
        bg = np.append(bg, 1.0)
    if bg.size != 4:
        raise ValueError("background must have 3 or 4 components")
    return bg


def composite_background(states: FinalStates, background, width, height) -> ImageBuffer:
    bg = parse_background(background)
    trans = np.exp(states.log_transmittance)
    rgb = states.color + trans[:, None] * bg[:3] * bg[3]
    a = 1.0 - trans * (1.0 - bg[3])
    return ImageBuffer(np.concatenate([rgb, a[:, None]], axis=1).reshape(height, width, 4))


def _map_tiles(fn, tiles, workers):
    if workers is None or workers <= 1 or len(tiles) <= 1:
        return [fn(t) for t in tiles]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, tiles))


def _check_nsub(n_sub):
    if int(n_sub) != n_sub or n_sub < 1:
        raise ValueError("n_sub must be a positive integer")
    return int(n_sub)


def render_states(mesh: TetMesh, camera: Camera, n_sub: int = DEFAULT_NSUB, workers=1):
    """Run the forward pass and return ``(FinalStates, RenderStats)``."""
    n_sub = _check_nsub(n_sub)
    n_pix = camera.width * camera.height
    color = np.zeros((n_pix, 3))
    logt = np.zeros(n_pix)
    stats = RenderStats()
    if mesh.n_tets == 0:
        return FinalStates(color, logt), stats
    view = ViewSetup(mesh, camera)
    colors = np.ascontiguousarray(mesh.colors)
    opac = np.ascontiguousarray(mesh.opacities)

    def run(rows):
        segs = tile_segments(view, *rows)
        p0 = rows[0] * camera.width
        p1 = rows[1] * camera.width
        skipped = np.zeros(1, dtype=np.int64)
        # segment offsets are tile-local: shift ray directions accordingly
        K.forward_pixels(view.origin, view.dirs[p0:p1], 0, p1 - p0, camera.near, n_sub,
                         view.positions, colors, opac, view.faces, segs.offsets, segs.f0,
                         segs.f1, segs.d0, segs.d1, color[p0:p1], logt[p0:p1], skipped)
        return int(segs.dropped.sum()), int(skipped[0]), len(segs.tet)

    for dropped, skipped, n_seg in _map_tiles(run, tile_ranges(camera.height), workers):
        stats.dropped_tets += dropped
        stats.degenerate_segments += skipped
        stats.segments += n_seg
    return FinalStates(color, logt), stats


def render(mesh: TetMesh, camera: Camera, n_sub: int = DEFAULT_NSUB, background=None,
           workers=1) -> ImageBuffer:
    """Render ``mesh`` from ``camera`` composited over ``background`` (RGBA)."""
    states, _ = render_states(mesh, camera, n_sub, workers)
    return composite_background(states, background, camera.width, camera.height)
