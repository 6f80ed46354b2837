"""Per-pixel fragment lists: ray/face intersections, sorting and segment pairing.

A fragment is one intersection of a pixel ray with a tet face, emitted once
for every tet incident to that face.  Sorting fragments by depth and pairing
them per tet yields the (entry, exit) segments consumed by the renderer.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import _kernels as K
from .assets import Camera
from .tetmesh import TetMesh

#: Image rows processed together; gradient buffers are private per tile.
TILE_ROWS = 16


@dataclass(frozen=True)
class Fragment:
    face_id: int
    tet_id: int
    depth_world: float
    depth_ndc: float


@dataclass(frozen=True)
class Segment:
    tet_id: int
    f0: int
    f1: int
    d0: float
    d1: float


class ViewSetup:
    """Per-camera data shared by all tiles: ray directions and face pixel bounds."""

    def __init__(self, mesh: TetMesh, camera: Camera):
        self.mesh = mesh
        self.camera = camera
        self.width = camera.width
        self.height = camera.height
        self.origin = np.ascontiguousarray(camera.origin, dtype=np.float64)
        self.dirs = np.ascontiguousarray(camera.pixel_rays())
        self.positions = np.ascontiguousarray(mesh.positions)
        self.faces = np.ascontiguousarray(mesh.faces)
        self.face_tets = np.ascontiguousarray(mesh.face_tets)
        self.bx0, self.bx1, self.by0, self.by1 = _face_pixel_bounds(mesh, camera)


def _face_pixel_bounds(mesh: TetMesh, camera: Camera):
    """Inclusive candidate pixel ranges per face, padded by one pixel.

    Faces straddling the eye plane get the whole viewport; faces entirely
    behind it get an empty range.
    """
    nf = mesh.n_faces
    w_img, h_img = camera.width, camera.height
    if nf == 0:
        e = np.zeros(0, dtype=np.int64)
        return e, e.copy(), e.copy(), e.copy()
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        pix, _, w = camera.project(mesh.positions)
        fp = pix[mesh.faces]  # (F, 3, 2)
        lo = np.floor(fp.min(axis=1) - 0.5) - 1
        hi = np.ceil(fp.max(axis=1) - 0.5) + 1
    fw = w[mesh.faces]
    front = (fw > 0).all(axis=1)
    behind = (fw <= 0).all(axis=1)
    straddle = ~(front | behind) | ~np.isfinite(lo).all(axis=1) | ~np.isfinite(hi).all(axis=1)
    size = np.array([w_img, h_img], dtype=np.float64)
    lo = np.clip(np.nan_to_num(lo), 0, size).astype(np.int64)
    hi = np.clip(np.nan_to_num(hi), -1, size - 1).astype(np.int64)
    lo[straddle] = 0
    hi[straddle] = (w_img - 1, h_img - 1)
    hi[behind] = -1
    return (np.ascontiguousarray(lo[:, 0]), np.ascontiguousarray(hi[:, 0]),
            np.ascontiguousarray(lo[:, 1]), np.ascontiguousarray(hi[:, 1]))


def _tile_fragments(view: ViewSetup, row0: int, row1: int):
    """Unsorted fragments of the rows ``[row0, row1)`` in CSR form."""
    n_pix = (row1 - row0) * view.width
    counts = np.zeros(n_pix, dtype=np.int64)
    K.count_fragments(view.origin, view.dirs, view.width, row0, row1, view.positions,
                      view.faces, view.face_tets, view.bx0, view.bx1, view.by0, view.by1,
                      counts)
    offsets = np.zeros(n_pix + 1, dtype=np.int64)
    np.cumsum(counts, out=offsets[1:])
    total = int(offsets[-1])
    face = np.empty(total, dtype=np.int64)
    tet = np.empty(total, dtype=np.int64)
    depth = np.empty(total, dtype=np.float64)
    K.fill_fragments(view.origin, view.dirs, view.width, row0, row1, view.positions,
                     view.faces, view.face_tets, view.bx0, view.bx1, view.by0, view.by1,
                     offsets, face, tet, depth)
    return offsets, face, tet, depth


@dataclass
class TileSegments:
    """Front-to-back segments of a block of rows, CSR-indexed by local pixel."""

    row0: int
    row1: int
    offsets: np.ndarray
    tet: np.ndarray
    f0: np.ndarray
    f1: np.ndarray
    d0: np.ndarray
    d1: np.ndarray
    dropped: np.ndarray  # odd-count tets dropped, per pixel


def tile_segments(view: ViewSetup, row0: int, row1: int) -> TileSegments:
    offsets, face, tet, depth = _tile_fragments(view, row0, row1)
    K.sort_fragments(offsets, face, tet, depth)
    n_pix = len(offsets) - 1
    cap = len(face) // 2
    seg_offsets = np.zeros(n_pix + 1, dtype=np.int64)
    s_tet = np.empty(cap, dtype=np.int64)
    s_f0 = np.empty(cap, dtype=np.int64)
    s_f1 = np.empty(cap, dtype=np.int64)
    s_d0 = np.empty(cap, dtype=np.float64)
    s_d1 = np.empty(cap, dtype=np.float64)
    dropped = np.zeros(n_pix, dtype=np.int64)
    n = K.pair_fragments(offsets, face, tet, depth, seg_offsets, s_tet, s_f0, s_f1, s_d0,
                         s_d1, dropped)
    return TileSegments(row0, row1, seg_offsets, s_tet[:n], s_f0[:n], s_f1[:n], s_d0[:n],
                        s_d1[:n], dropped)


def tile_ranges(height: int, tile_rows: int = TILE_ROWS):
    return [(r, min(r + tile_rows, height)) for r in range(0, height, tile_rows)]


class FragmentListImage:
    """Per-pixel fragment arrays for one camera and mesh (CSR layout).

    Pixel ``p = y * width + x`` owns entries ``offsets[p]:offsets[p + 1]``.
    """

    def __init__(self, width, height, offsets, face, tet, depth, depth_ndc, order=None):
        self.width = int(width)
        self.height = int(height)
        self.offsets = offsets
        self.face = face
        self.tet = tet
        self.depth = depth
        self.depth_ndc = depth_ndc
        self.order = order  # None, "front_to_back" or "back_to_front"

    def counts(self) -> np.ndarray:
        """Fragment count per pixel as an (H, W) array."""
        return np.diff(self.offsets).reshape(self.height, self.width)

    def pixel(self, x: int, y: int) -> list[Fragment]:
        p = y * self.width + x
        sl = slice(self.offsets[p], self.offsets[p + 1])
        return [Fragment(int(f), int(t), float(d), float(z)) for f, t, d, z in
                zip(self.face[sl], self.tet[sl], self.depth[sl], self.depth_ndc[sl])]

    def copy(self) -> "FragmentListImage":
        return FragmentListImage(self.width, self.height, self.offsets.copy(),
                                 self.face.copy(), self.tet.copy(), self.depth.copy(),
                                 self.depth_ndc.copy(), self.order)

    def dump(self) -> str:
        """Text listing ``x y : (tet,face,d_world,d_ndc)*`` for non-empty pixels."""
        lines = []
        for p in range(self.width * self.height):
            lo, hi = self.offsets[p], self.offsets[p + 1]
            if lo == hi:
                continue
            items = " ".join(f"({self.tet[k]},{self.face[k]},{self.depth[k]:.9g},"
                             f"{self.depth_ndc[k]:.9g})" for k in range(lo, hi))
            lines.append(f"{p % self.width} {p // self.width} : {items}")
        return "\n".join(lines)


def generate_fragments(mesh: TetMesh, camera: Camera) -> FragmentListImage:
    """Intersect every pixel-center ray with every mesh face.

    Fragments are in generation order (unsorted).  Only hits with positive
    ray parameter are kept; hits inside the near plane are kept so segments
    straddling it can be clipped later.
    """
    if mesh.n_tets and (mesh.volumes() <= 0).any():
        warnings.warn("mesh contains inverted or flat tets", RuntimeWarning, stacklevel=2)
    view = ViewSetup(mesh, camera)
    offsets, face, tet, depth = _tile_fragments(view, 0, camera.height)
    pix = np.repeat(np.arange(len(offsets) - 1), np.diff(offsets))
    pts = view.origin + depth[:, None] * view.dirs[pix]
    ndc = camera.ndc_depth(pts) if len(pts) else np.zeros(0)
    return FragmentListImage(camera.width, camera.height, offsets, face, tet, depth, ndc)


def _sorted_order(flist: FragmentListImage) -> np.ndarray:
    pix = np.repeat(np.arange(len(flist.offsets) - 1), np.diff(flist.offsets))
    return np.lexsort((flist.face, flist.tet, flist.depth, pix))


def _reordered(flist, order, label):
    return FragmentListImage(flist.width, flist.height, flist.offsets.copy(),
                             flist.face[order], flist.tet[order], flist.depth[order],
                             flist.depth_ndc[order], label)


def sort_front_to_back(flist: FragmentListImage) -> FragmentListImage:
    """Per-pixel ascending order by ``(depth_world, tet_id, face_id)``."""
    return _reordered(flist, _sorted_order(flist), "front_to_back")


def sort_back_to_front(flist: FragmentListImage) -> FragmentListImage:
    """Exact per-pixel reverse of :func:`sort_front_to_back`."""
    order = _sorted_order(flist)
    counts = np.diff(flist.offsets)
    pix = np.repeat(np.arange(len(counts)), counts)
    # position within pixel, mirrored
    rank = np.arange(len(order)) - flist.offsets[pix]
    mirrored = flist.offsets[pix] + (counts[pix] - 1 - rank)
    return _reordered(flist, order[mirrored], "back_to_front")


def pair_segments(fragments) -> tuple[list[Segment], int]:
    """Pair one pixel's front-to-back fragments into per-tet segments.

    Parameters
    ----------
    fragments : sequence of Fragment
        Sorted front to back.

    Returns
    -------
    segments : list of Segment
        Sorted by entry depth, then tet id.
    dropped : int
        Number of tets discarded because they had an odd fragment count.
    """
    open_frags: dict[int, Fragment] = {}
    segs = []
    for frag in fragments:
        entry = open_frags.pop(frag.tet_id, None)
        if entry is None:
            open_frags[frag.tet_id] = frag
        else:
            segs.append(Segment(frag.tet_id, entry.face_id, frag.face_id, entry.depth_world,
                                frag.depth_world))
    bad = set(open_frags)
    segs = [s for s in segs if s.tet_id not in bad]
    segs.sort(key=lambda s: (s.d0, s.tet_id))
    return segs, len(bad)
