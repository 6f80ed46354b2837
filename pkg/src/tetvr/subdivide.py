"""Conforming refinement around selected vertices.

Splitting vertex ``a`` inserts a new vertex on every edge incident to ``a``.
Each incident tet ``(a, b, c, d)`` becomes a small apex tet ``(a, b', c', d')``
plus a triangular prism ``(b, c, d, b', c', d')``.  Each of the prism's three
quad faces must be cut along one diagonal, and neighbouring prisms must agree
on the cut of the quad they share.  Labeling each cut as rising (R) or
falling (F) relative to the prism's own winding turns this into a small
constraint problem: a prism cannot be cut FFF or RRR, and a shared quad is F
on one side and R on the other.
"""

from __future__ import annotations

import math
import sys
import warnings
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .tetmesh import MeshError, TetMesh, signed_volume, validate

# (pattern -> tets over prism vertex ids); bottom 0,1,2 and top 3,4,5.
SPLIT_TABLE = {
    "FRR": ((0, 1, 3, 2), (3, 4, 5, 1), (1, 2, 5, 3)),
    "RFR": ((0, 1, 4, 2), (3, 4, 5, 2), (0, 2, 4, 3)),
    "FFR": ((0, 1, 3, 2), (3, 4, 5, 2), (1, 2, 4, 3)),
    "RRF": ((0, 1, 5, 2), (3, 4, 5, 0), (0, 1, 4, 5)),
    "FRF": ((0, 1, 5, 2), (3, 4, 5, 1), (0, 1, 3, 5)),
    "RFF": ((0, 1, 4, 2), (3, 4, 5, 0), (0, 2, 4, 5)),
}

# Even permutations of a tet bringing local vertex k to the front.
_APEX_FIRST = ((0, 1, 2, 3), (1, 0, 3, 2), (2, 3, 0, 1), (3, 2, 1, 0))

# Search budget; running out is reported as CSPUnsatisfiable.
_CSP_BUDGET = 200_000


class CSPUnsatisfiable(ValueError):
    """No F/R assignment exists; ``prisms`` lists a conflicting prism set."""

    def __init__(self, prisms):
        super().__init__(f"flip constraints unsatisfiable for prisms {sorted(prisms)}")
        self.prisms = sorted(prisms)


class RefineError(MeshError):
    pass


@dataclass
class PrismCSPGraph:
    """Prisms with three quad slots each and the slot pairs they share.

    ``shared`` maps a slot ``(prism, slot)`` to its partner slot in the
    neighbouring prism; slots missing from it are free.
    """

    n_prisms: int
    shared: dict = field(default_factory=dict)
    assignment: np.ndarray | None = None  # (n, 3) array of "F"/"R"

    @classmethod
    def from_pairs(cls, n_prisms, pairs):
        g = cls(n_prisms)
        for a, b in pairs:
            a, b = tuple(a), tuple(b)
            if a in g.shared or b in g.shared or a == b:
                raise ValueError(f"slot shared more than once: {a}, {b}")
            g.shared[a] = b
            g.shared[b] = a
        return g

    def neighbours(self, p):
        return sorted({self.shared[(p, s)][0] for s in range(3) if (p, s) in self.shared})

    def is_solution(self, assignment) -> bool:
        a = np.asarray(assignment)
        for p in range(self.n_prisms):
            if a[p, 0] == a[p, 1] == a[p, 2]:
                return False
        return all(a[p][s] != a[q][t] for (p, s), (q, t) in self.shared.items())

    def dump(self) -> str:
        """Text dual graph: one line per prism, then one line per shared quad."""
        lines = []
        for p in range(self.n_prisms):
            pat = "".join(self.assignment[p]) if self.assignment is not None else "???"
            lines.append(f"prism {p} {pat}")
        for (p, s), (q, t) in sorted(self.shared.items()):
            if (p, s) < (q, t):
                lines.append(f"quad {p}.{s} -- {q}.{t}")
        return "\n".join(lines)


def _slot_order(graph: PrismCSPGraph):
    """Slots in BFS prism order, shared slots before free ones per prism."""
    seen = [False] * graph.n_prisms
    order = []
    for start in range(graph.n_prisms):
        if seen[start]:
            continue
        seen[start] = True
        queue = deque([start])
        while queue:
            p = queue.popleft()
            slots = [s for s in range(3) if (p, s) in graph.shared]
            slots += [s for s in range(3) if (p, s) not in graph.shared]
            order.extend((p, s) for s in slots)
            for q in graph.neighbours(p):
                if not seen[q]:
                    seen[q] = True
                    queue.append(q)
    return order


def _prism_ok(assign, p):
    a, b, c = assign[p]
    return not (a is not None and a == b == c)


def solve_flip_csp(graph: PrismCSPGraph) -> np.ndarray:
    """Assign F/R to every quad slot (depth-first search with propagation).

    Shared slots are assigned first and force their partner to the
    complement; on each prism's lowest free slot F is tried first, elsewhere
    R.  Deterministic for a given graph.  Raises :class:`CSPUnsatisfiable`.
    """
    n = graph.n_prisms
    assign = [[None, None, None] for _ in range(n)]
    order = _slot_order(graph)
    first_free = {}
    for p in range(n):
        free = [s for s in range(3) if (p, s) not in graph.shared]
        if free:
            first_free[p] = free[0]
    nodes = 0
    conflict = set()

    def values(slot):
        p, s = slot
        return ("F", "R") if first_free.get(p) == s else ("R", "F")

    def search(k):
        nonlocal nodes
        while k < len(order) and assign[order[k][0]][order[k][1]] is not None:
            k += 1
        if k == len(order):
            return True
        nodes += 1
        if nodes > _CSP_BUDGET:
            raise _Budget()
        p, s = order[k]
        partner = graph.shared.get((p, s))
        for val in values((p, s)):
            assign[p][s] = val
            ok = _prism_ok(assign, p)
            if ok and partner is not None:
                q, t = partner
                assign[q][t] = "F" if val == "R" else "R"
                ok = _prism_ok(assign, q)
                if not ok:
                    conflict.add(q)
            if not ok:
                conflict.add(p)
            if ok and search(k + 1):
                return True
            assign[p][s] = None
            if partner is not None:
                assign[partner[0]][partner[1]] = None
        return False

    limit = sys.getrecursionlimit()
    sys.setrecursionlimit(max(limit, 4 * len(order) + 100))
    try:
        solved = search(0)
    except _Budget:
        solved = None
    finally:
        sys.setrecursionlimit(limit)
    if solved is None:
        raise CSPUnsatisfiable(range(n))
    if not solved:
        raise CSPUnsatisfiable(conflict or range(n))
    out = np.array(assign, dtype="<U1")
    graph.assignment = out
    return out


class _Budget(Exception):
    pass


def tessellate_prism(prism, pattern: str):
    """Three tets (as vertex-id tuples) filling a prism for an F/R pattern."""
    if pattern not in SPLIT_TABLE:
        raise ValueError(f"invalid split pattern {pattern!r}")
    ids = tuple(prism)
    if len(ids) != 6:
        raise ValueError("a prism has 6 vertices")
    return [tuple(ids[i] for i in tet) for tet in SPLIT_TABLE[pattern]]


@dataclass(frozen=True)
class SplitSelection:
    vertices: np.ndarray
    parameter: float = 0.5

    def __post_init__(self):
        if not 0.0 < self.parameter < 1.0:
            raise ValueError("split parameter must lie in (0, 1)")


def select_split_vertices(abs_grad_color, fraction: float) -> SplitSelection:
    """The ``ceil(fraction * N)`` vertices with the largest gradient magnitude.

    Ties are broken by ascending vertex index.  The returned ids are sorted.
    """
    mag = np.asarray(abs_grad_color, dtype=np.float64).ravel()
    if mag.size == 0:
        raise ValueError("empty gradient buffer")
    if not 0.0 < fraction <= 1.0:
        raise ValueError("fraction must lie in (0, 1]")
    k = min(mag.size, math.ceil(fraction * mag.size - 1e-9))
    order = np.lexsort((np.arange(mag.size), -mag))
    return SplitSelection(np.sort(order[:k]))


class _Builder:
    """Growable mesh arrays used while splitting."""

    def __init__(self, mesh: TetMesh):
        self.pos = [mesh.positions]
        self.col = [mesh.colors]
        self.opa = [mesh.opacities]
        self.nv = mesh.n_vertices
        self.tets = mesh.tets.copy()
        self._new_pos = []
        self._new_col = []
        self._new_opa = []

    def vertex(self, i):
        base = self.pos[0].shape[0]
        if i < base:
            return self.pos[0][i], self.col[0][i], self.opa[0][i]
        j = i - base
        return self._new_pos[j], self._new_col[j], self._new_opa[j]

    def add_vertex(self, a, b, t):
        pa, ca, oa = self.vertex(a)
        pb, cb, ob = self.vertex(b)
        self._new_pos.append(pa + t * (pb - pa))
        self._new_col.append(ca + t * (cb - ca))
        self._new_opa.append(oa + t * (ob - oa))
        self.nv += 1
        return self.nv - 1

    def position(self, i):
        return self.vertex(i)[0]

    def mesh(self) -> TetMesh:
        pos = np.vstack([self.pos[0]] + [np.array(self._new_pos).reshape(-1, 3)])
        col = np.vstack([self.col[0]] + [np.array(self._new_col).reshape(-1, 3)])
        opa = np.concatenate([self.opa[0], np.array(self._new_opa, dtype=np.float64)])
        return TetMesh(pos, self.tets, col, opa)


@dataclass
class VertexSplit:
    """Result of splitting around one vertex."""

    vertex: int
    new_vertices: list
    graph: PrismCSPGraph
    prisms: list  # 6 vertex ids per prism


def _split_vertex(b: _Builder, a: int, t: float) -> VertexSplit | None:
    inc = np.nonzero((b.tets == a).any(axis=1))[0]
    if len(inc) == 0:
        warnings.warn(f"vertex {a} has no incident tets; nothing to split", RuntimeWarning,
                      stacklevel=3)
        return None
    mids = {}
    new_vertices = []

    def mid(v):
        if v not in mids:
            mids[v] = b.add_vertex(a, v, t)
            new_vertices.append(mids[v])
        return mids[v]

    prisms, apex_tets = [], []
    quad_slots = {}  # unordered bottom edge -> list of (prism, slot, first bottom vertex)
    for pi, ti in enumerate(inc):
        tet = b.tets[ti]
        k = int(np.nonzero(tet == a)[0][0])
        _, v1, v2, v3 = (int(tet[j]) for j in _APEX_FIRST[k])
        bottom = (v1, v2, v3)
        top = tuple(mid(v) for v in bottom)
        apex_tets.append((a,) + top)
        prisms.append(bottom + top)
        for s in range(3):
            x, y = bottom[s], bottom[(s + 1) % 3]
            quad_slots.setdefault((min(x, y), max(x, y)), []).append((pi, s, x))

    pairs = []
    for key, slots in quad_slots.items():
        if len(slots) > 2:
            raise RefineError(f"non-manifold fan around vertex {a} at edge {key}")
        if len(slots) == 2:
            pairs.append(((slots[0][0], slots[0][1]), (slots[1][0], slots[1][1])))
            if slots[0][2] == slots[1][2]:
                raise RefineError(f"inconsistently oriented tets around vertex {a}")
    graph = PrismCSPGraph.from_pairs(len(prisms), pairs)
    try:
        assignment = solve_flip_csp(graph)
    except CSPUnsatisfiable:
        # orienting every cut from the lower vertex id is always acyclic
        assignment = np.array([["R" if pr[s] < pr[(s + 1) % 3] else "F" for s in range(3)]
                               for pr in prisms], dtype="<U1")
        graph.assignment = assignment

    new_tets = list(apex_tets)
    for prism, letters in zip(prisms, assignment):
        new_tets.extend(tessellate_prism(prism, "".join(letters)))
    new_tets = np.array(new_tets, dtype=np.int64)
    p = [np.array([b.position(int(i)) for i in col]) for col in new_tets.T]
    neg = signed_volume(*p) < 0
    new_tets[neg] = new_tets[neg][:, [1, 0, 2, 3]]
    keep = np.ones(len(b.tets), dtype=bool)
    keep[inc] = False
    b.tets = np.vstack([b.tets[keep], new_tets])
    return VertexSplit(a, new_vertices, graph, prisms)


def split_around_vertex(mesh: TetMesh, vertex: int, parameter: float = 0.5):
    """Split every edge incident to ``vertex`` and retessellate its star.

    Returns
    -------
    mesh : TetMesh
        New mesh (the input is not modified).
    split : VertexSplit or None
        Details of the split, ``None`` if the vertex had no incident tets.
    """
    if not 0 <= vertex < mesh.n_vertices:
        raise IndexError(f"vertex {vertex} out of range")
    b = _Builder(mesh)
    info = _split_vertex(b, int(vertex), parameter)
    return (b.mesh() if info is not None else mesh.copy()), info


def refine(mesh: TetMesh, abs_grad_color, fraction: float, parameter: float = 0.5,
           volume_tol: float = 1e-9) -> TetMesh:
    """Split around the vertices with the largest gradient magnitudes.

    Vertices are processed in ascending index order, each on the mesh
    produced by the previous split.  The result is validated; on failure a
    :class:`RefineError` is raised and the input mesh is left untouched.
    ``abs_grad_color`` may be a ``GradientBuffer`` or a per-vertex array.
    """
    mags = getattr(abs_grad_color, "abs_grad_color", abs_grad_color)
    if fraction * mesh.n_vertices < 1.0 - 1e-9 and fraction < 1.0:
        sel = SplitSelection(np.zeros(0, dtype=np.int64), parameter)
    else:
        sel = select_split_vertices(mags, fraction)
        sel = SplitSelection(sel.vertices, parameter)
    if len(sel.vertices) == 0:
        return mesh.copy()
    b = _Builder(mesh)
    try:
        for v in sel.vertices:
            _split_vertex(b, int(v), sel.parameter)
    except CSPUnsatisfiable as exc:
        raise RefineError(f"refinement aborted: {exc}") from exc
    out = b.mesh()
    report = validate(out)
    if not report.empty:
        raise RefineError(f"refinement produced an invalid mesh: {report.counts()}")
    v0 = float(mesh.volumes().sum())
    v1 = float(out.volumes().sum())
    if abs(v1 - v0) > volume_tol * max(abs(v0), 1e-300):
        raise RefineError(f"refinement changed total volume: {v0} -> {v1}")
    return out
