"""Indexed tetrahedral meshes with per-vertex color and extinction.

Attributes are stored struct-of-arrays (``positions``, ``colors``,
``opacities``) so that gradient buffers can be indexed with the same vertex
ids.  The face table (``faces``, ``face_tets``, ``tet_faces``) is derived data;
it is built on construction and only rebuilt by :meth:`TetMesh.rebuild_topology`,
which lets :func:`validate` detect a stale table after manual edits.
"""

from __future__ import annotations

import dataclasses
import itertools
from pathlib import Path

import numpy as np

#: Local vertex triples of the face opposite to local vertex ``i``.
FACE_LOCAL = np.array([(1, 2, 3), (0, 3, 2), (0, 1, 3), (0, 2, 1)], dtype=np.int64)


class MeshError(ValueError):
    """Raised for malformed mesh input or mesh files."""


def signed_volume(p0, p1, p2, p3):
    """Signed volume of the tetrahedron ``(p0, p1, p2, p3)``.

    Equals one sixth of ``<p3 - p0, (p1 - p0) x (p2 - p0)>``; positive for
    positively oriented tets, zero for coplanar points.  Broadcasts over
    leading dimensions.
    """
    p0 = np.asarray(p0, dtype=np.float64)
    e1 = np.asarray(p1, dtype=np.float64) - p0
    e2 = np.asarray(p2, dtype=np.float64) - p0
    e3 = np.asarray(p3, dtype=np.float64) - p0
    return np.einsum("...i,...i->...", e3, np.cross(e1, e2)) / 6.0


class TetMesh:
    """Tetrahedral mesh with per-vertex position, color and opacity.

    Parameters
    ----------
    positions : (V, 3) array_like
    tets : (T, 4) array_like of int
    colors : (V, 3) array_like, optional
        Linear RGB, defaults to mid-gray.
    opacities : (V,) array_like, optional
        Extinction coefficients per world unit, defaults to zero.
    """

    def __init__(self, positions, tets, colors=None, opacities=None):
        self.positions = np.array(positions, dtype=np.float64).reshape(-1, 3)
        self.tets = np.array(tets, dtype=np.int64).reshape(-1, 4)
        nv = len(self.positions)
        if colors is None:
            colors = np.full((nv, 3), 0.5)
        if opacities is None:
            opacities = np.zeros(nv)
        self.colors = np.array(colors, dtype=np.float64).reshape(nv, 3)
        self.opacities = np.array(opacities, dtype=np.float64).reshape(nv)
        if len(self.tets) and (self.tets.min() < 0 or self.tets.max() >= nv):
            raise MeshError("tet vertex index out of range")
        self.rebuild_topology()

    # -- topology ---------------------------------------------------------

    def rebuild_topology(self):
        """Recompute the face table from ``tets``."""
        self.faces, self.face_tets, self.tet_faces = _face_table(self.tets)
        self._incidence = None

    @property
    def n_vertices(self) -> int:
        return len(self.positions)

    @property
    def n_tets(self) -> int:
        return len(self.tets)

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    def boundary_faces(self):
        return np.flatnonzero(self.face_tets[:, 1] < 0)

    def incident_tets(self, vertex: int) -> np.ndarray:
        """Tets containing ``vertex`` (built lazily, rebuilt with topology)."""
        if self._incidence is None:
            flat = self.tets.ravel()
            order = np.argsort(flat, kind="stable")
            counts = np.bincount(flat, minlength=self.n_vertices)
            offsets = np.concatenate([[0], np.cumsum(counts)])
            self._incidence = (offsets, order // 4)
        offsets, tet_ids = self._incidence
        return tet_ids[offsets[vertex]:offsets[vertex + 1]]

    def edges(self) -> np.ndarray:
        """Unique undirected edges as sorted vertex pairs, shape (E, 2)."""
        pairs = self.tets[:, list(itertools.combinations(range(4), 2))].reshape(-1, 2)
        return np.unique(np.sort(pairs, axis=1), axis=0)

    # -- geometry ---------------------------------------------------------

    def tet_positions(self) -> np.ndarray:
        """Vertex positions per tet, shape (T, 4, 3)."""
        return self.positions[self.tets]

    def volumes(self) -> np.ndarray:
        p = self.tet_positions()
        return signed_volume(p[:, 0], p[:, 1], p[:, 2], p[:, 3])

    def bbox(self):
        return self.positions.min(axis=0), self.positions.max(axis=0)

    @property
    def diagonal(self) -> float:
        lo, hi = self.bbox()
        return float(np.linalg.norm(hi - lo))

    def copy(self) -> "TetMesh":
        return TetMesh(self.positions.copy(), self.tets.copy(), self.colors.copy(),
                       self.opacities.copy())

    def __repr__(self):
        return f"TetMesh(vertices={self.n_vertices}, tets={self.n_tets})"


def _face_table(tets):
    t = len(tets)
    if t == 0:
        return (np.zeros((0, 3), np.int64), np.zeros((0, 2), np.int64),
                np.zeros((0, 4), np.int64))
    tris = np.sort(tets[:, FACE_LOCAL].reshape(-1, 3), axis=1)
    faces, inverse = np.unique(tris, axis=0, return_inverse=True)
    inverse = inverse.ravel()
    tet_faces = inverse.reshape(t, 4)
    owner = np.repeat(np.arange(t), 4)
    order = np.argsort(inverse, kind="stable")
    sorted_faces = inverse[order]
    first = np.ones(len(order), dtype=bool)
    first[1:] = sorted_faces[1:] != sorted_faces[:-1]
    face_tets = np.full((len(faces), 2), -1, dtype=np.int64)
    face_tets[sorted_faces[first], 0] = owner[order[first]]
    second = ~first
    # a third incidence (non-manifold) overwrites slot 1; validate() recounts
    face_tets[sorted_faces[second], 1] = owner[order[second]]
    return faces, face_tets, tet_faces


# -- construction ----------------------------------------------------------

def _kuhn_cube():
    """Six tets splitting the unit cube around its main diagonal.

    Returns corner offsets (4, 3) per tet, positively oriented.
    """
    tets = []
    for perm in itertools.permutations(range(3)):
        corner = np.zeros(3, dtype=np.int64)
        path = [corner.copy()]
        for axis in perm:
            corner[axis] = 1
            path.append(corner.copy())
        path = np.array(path)
        if signed_volume(*path.astype(float)) < 0:
            path[[1, 2]] = path[[2, 1]]
        tets.append(path)
    return np.array(tets)


def build_regular_grid(dims, bbox, color=0.5, opacity=0.0) -> TetMesh:
    """Tetrahedralize an axis-aligned box as ``dims`` cubes of 6 tets each.

    Parameters
    ----------
    dims : 3 ints
        Cells per axis.
    bbox : sequence
        Either ``(xmin, ymin, zmin, xmax, ymax, zmax)`` or ``(lo, hi)``.
    """
    dims = tuple(int(d) for d in dims)
    if len(dims) != 3 or min(dims) < 1:
        raise ValueError(f"grid dims must be three positive integers, got {dims}")
    lo, hi = _parse_bbox(bbox)
    nx, ny, nz = dims
    axes = [np.linspace(lo[a], hi[a], dims[a] + 1) for a in range(3)]
    gx, gy, gz = np.meshgrid(*axes, indexing="ij")
    # x-fastest vertex numbering
    positions = np.stack([gx.transpose(2, 1, 0).ravel(), gy.transpose(2, 1, 0).ravel(),
                          gz.transpose(2, 1, 0).ravel()], axis=1)

    def vid(i, j, k):
        return i + (nx + 1) * (j + (ny + 1) * k)

    ci, cj, ck = np.meshgrid(np.arange(nx), np.arange(ny), np.arange(nz), indexing="ij")
    ci, cj, ck = (a.transpose(2, 1, 0).ravel() for a in (ci, cj, ck))
    kuhn = _kuhn_cube()
    tets = np.empty((len(ci), 6, 4), dtype=np.int64)
    for t in range(6):
        for v in range(4):
            off = kuhn[t, v]
            tets[:, t, v] = vid(ci + off[0], cj + off[1], ck + off[2])
    nv = len(positions)
    colors = np.broadcast_to(np.asarray(color, dtype=np.float64), (nv, 3))
    return TetMesh(positions, tets.reshape(-1, 4), colors, np.full(nv, float(opacity)))


def _parse_bbox(bbox):
    arr = np.asarray(bbox, dtype=np.float64)
    if arr.shape == (6,):
        lo, hi = arr[:3], arr[3:]
    elif arr.shape == (2, 3):
        lo, hi = arr
    else:
        raise ValueError("bbox must be (xmin, ymin, zmin, xmax, ymax, zmax)")
    if not np.all(hi > lo):
        raise ValueError("bbox is degenerate")
    return lo, hi


# -- validation ------------------------------------------------------------

@dataclasses.dataclass
class ValidationReport:
    """Mesh defects found by :func:`validate`; empty means valid."""

    inverted_tets: list = dataclasses.field(default_factory=list)
    nonconforming_faces: list = dataclasses.field(default_factory=list)
    inconsistent_faces: list = dataclasses.field(default_factory=list)
    nan_vertices: list = dataclasses.field(default_factory=list)

    @property
    def empty(self) -> bool:
        return not (self.inverted_tets or self.nonconforming_faces
                    or self.inconsistent_faces or self.nan_vertices)

    def counts(self) -> dict:
        return {f.name: len(getattr(self, f.name)) for f in dataclasses.fields(self)}


def validate(mesh: TetMesh) -> ValidationReport:
    """Check orientation, conformity, face-table consistency and NaNs.

    ``inconsistent_faces`` indexes the *stored* face table and lists faces
    whose recorded incident tets disagree with a fresh recount from ``tets``.
    ``nonconforming_faces`` indexes the recounted table: faces shared by more
    than two tets, and boundary faces that overlap an opposite-facing coplanar
    boundary face (a crack left by incompatible splits).
    """
    report = ValidationReport()
    bad = ~(np.isfinite(mesh.positions).all(1) & np.isfinite(mesh.colors).all(1)
            & np.isfinite(mesh.opacities))
    report.nan_vertices = np.flatnonzero(bad).tolist()
    if mesh.n_tets == 0:
        return report
    report.inverted_tets = np.flatnonzero(~(mesh.volumes() > 0)).tolist()

    faces, face_tets, _ = _face_table(mesh.tets)
    tris = np.sort(mesh.tets[:, FACE_LOCAL].reshape(-1, 3), axis=1)
    _, inverse, counts = np.unique(tris, axis=0, return_inverse=True, return_counts=True)
    report.nonconforming_faces = np.flatnonzero(counts > 2).tolist()
    report.nonconforming_faces += _crack_faces(mesh, faces, face_tets)
    report.nonconforming_faces = sorted(set(report.nonconforming_faces))

    # stored table vs recount, keyed by vertex triple
    fresh = {tuple(f): set(ft[ft >= 0].tolist()) for f, ft in zip(faces.tolist(), face_tets)}
    for i, (f, ft) in enumerate(zip(mesh.faces.tolist(), mesh.face_tets)):
        stored = set(ft[ft >= 0].tolist())
        if fresh.get(tuple(f), set()) != stored:
            report.inconsistent_faces.append(i)
    return report


def _crack_faces(mesh, faces, face_tets, tol=1e-9):
    bnd = np.flatnonzero(face_tets[:, 1] < 0)
    if len(bnd) == 0:
        return []
    tri = mesh.positions[faces[bnd]]
    n = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    norm = np.linalg.norm(n, axis=1)
    ok = (norm > 0) & np.isfinite(norm)
    n[ok] /= norm[ok, None]
    # orient outward: away from the owning tet's opposite vertex
    owner = mesh.tets[face_tets[bnd, 0]]
    centroid = mesh.positions[owner].mean(axis=1)
    flip = np.einsum("ij,ij->i", n, tri[:, 0] - centroid) < 0
    n[flip] *= -1
    offset = np.einsum("ij,ij->i", n, tri[:, 0])
    scale = mesh.diagonal
    scale = scale if np.isfinite(scale) and scale > 0 else 1.0
    q = 1e6
    keys = {}
    for i in range(len(bnd)):
        if not ok[i]:
            continue
        key = (tuple(np.round(n[i] * q).astype(np.int64)), int(round(offset[i] / scale * q)))
        keys.setdefault(key, []).append(i)
    flagged = set()
    for (nk, ok_), group in keys.items():
        opposite = keys.get((tuple(-x for x in nk), -ok_))
        if not opposite:
            continue
        for i in group:
            for j in opposite:
                if _coplanar_overlap(tri[i], tri[j], n[i], tol * scale):
                    flagged.add(int(bnd[i]))
                    flagged.add(int(bnd[j]))
    return sorted(flagged)


def _coplanar_overlap(a, b, normal, eps):
    """Separating-axis test for interior overlap of two coplanar triangles."""
    u = a[1] - a[0]
    u = u / np.linalg.norm(u)
    v = np.cross(normal, u)
    a2 = np.stack([a @ u, a @ v], axis=1)
    b2 = np.stack([b @ u, b @ v], axis=1)
    for poly in (a2, b2):
        for k in range(3):
            e = poly[(k + 1) % 3] - poly[k]
            axis = np.array([-e[1], e[0]])
            pa, pb = a2 @ axis, b2 @ axis
            length = np.linalg.norm(axis)
            if min(pa.max(), pb.max()) - max(pa.min(), pb.min()) <= eps * length:
                return False
    return True


# -- file io ---------------------------------------------------------------

_SECTIONS = (("positions", "<f8", 3), ("colors", "<f8", 3), ("opacities", "<f8", 1),
             ("tets", "<u4", 4))


def save_mesh(path, mesh: TetMesh, binary: bool = True):
    """Write a mesh file (binary container or its plain-text mirror)."""
    arrays = {"positions": mesh.positions, "colors": mesh.colors,
              "opacities": mesh.opacities, "tets": mesh.tets}
    lines = [f"TETMESH {'binary' if binary else 'ascii'}",
             f"vertices {mesh.n_vertices}", f"tets {mesh.n_tets}"]
    payload = []
    offset = 0
    for name, dtype, width in _SECTIONS:
        data = np.ascontiguousarray(arrays[name], dtype=dtype)
        typename = "float64" if dtype == "<f8" else "uint32"
        lines.append(f"{name} {typename} {width} {offset}" if binary
                     else f"{name} {typename} {width}")
        payload.append(data)
        offset += data.nbytes
    lines.append("end")
    path = Path(path)
    if binary:
        with open(path, "wb") as fh:
            fh.write(("\n".join(lines) + "\n").encode("ascii"))
            for data in payload:
                fh.write(data.tobytes())
    else:
        with open(path, "w") as fh:
            fh.write("\n".join(lines) + "\n")
            for (name, dtype, width), data in zip(_SECTIONS, payload):
                fh.write(name + "\n")
                for row in data.reshape(len(data), -1):
                    fh.write(" ".join(repr(x.item()) for x in row) + "\n")


def load_mesh(path) -> TetMesh:
    """Read a mesh written by :func:`save_mesh` (either variant)."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise MeshError(f"cannot read mesh file {path}: {exc.strerror}") from exc
    end = raw.find(b"\nend\n")
    if not raw.startswith(b"TETMESH ") or end < 0:
        raise MeshError(f"{path}: not a TETMESH file")
    header = raw[:end].decode("ascii").split("\n")
    kind = header[0].split()[1]
    counts = {}
    sections = {}
    for line in header[1:]:
        parts = line.split()
        if parts[0] in ("vertices", "tets") and len(parts) == 2:
            counts[parts[0]] = int(parts[1])
        else:
            sections[parts[0]] = parts[1:]
    nv, nt = counts.get("vertices"), counts.get("tets")
    if nv is None or nt is None:
        raise MeshError(f"{path}: header lacks vertex/tet counts")
    rows = {"positions": nv, "colors": nv, "opacities": nv, "tets": nt}
    body = raw[end + len(b"\nend\n"):]
    out = {}
    if kind == "binary":
        for name, dtype, width in _SECTIONS:
            if name not in sections:
                raise MeshError(f"{path}: missing section {name}")
            offset = int(sections[name][2])
            count = rows[name] * width
            nbytes = count * np.dtype(dtype).itemsize
            if offset + nbytes > len(body):
                raise MeshError(f"{path}: section {name} truncated")
            out[name] = np.frombuffer(body, dtype=dtype, count=count, offset=offset)
    elif kind == "ascii":
        lines = body.decode("ascii").split("\n")
        pos = 0
        for name, dtype, width in _SECTIONS:
            if lines[pos].strip() != name:
                raise MeshError(f"{path}: expected section {name}")
            block = lines[pos + 1:pos + 1 + rows[name]]
            pos += 1 + rows[name]
            values = [float(x) for ln in block for x in ln.split()]
            out[name] = np.array(values, dtype=np.float64)
    else:
        raise MeshError(f"{path}: unknown variant {kind!r}")
    return TetMesh(out["positions"].reshape(nv, 3), out["tets"].astype(np.int64).reshape(nt, 4),
                   out["colors"].reshape(nv, 3), out["opacities"].reshape(nv))

