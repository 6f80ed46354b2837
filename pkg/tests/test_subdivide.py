import itertools

import numpy as np
import pytest
from _scenes import UNIT_TET, oblique_camera
from hypothesis import given, strategies as st

from tetvr.backward import GradientBuffer
from tetvr.forward import render
from tetvr.subdivide import (SPLIT_TABLE, CSPUnsatisfiable, PrismCSPGraph, RefineError,
                             select_split_vertices, solve_flip_csp, split_around_vertex,
                             refine, tessellate_prism)
from tetvr.tetmesh import TetMesh, build_regular_grid, signed_volume, validate

# Prism split look-up table (prism vertex ids, bottom 0..2, top 3..5).
TABLE = {
    "FRR": [{0, 1, 3, 2}, {3, 4, 5, 1}, {1, 2, 5, 3}],
    "RFR": [{0, 1, 4, 2}, {3, 4, 5, 2}, {0, 2, 4, 3}],
    "FFR": [{0, 1, 3, 2}, {3, 4, 5, 2}, {1, 2, 4, 3}],
    "RRF": [{0, 1, 5, 2}, {3, 4, 5, 0}, {0, 1, 4, 5}],
    "FRF": [{0, 1, 5, 2}, {3, 4, 5, 1}, {0, 1, 3, 5}],
    "RFF": [{0, 1, 4, 2}, {3, 4, 5, 0}, {0, 2, 4, 5}],
}


def brute_force(graph: PrismCSPGraph):
    """All valid assignments as an (k, n, 3) boolean array (True = F)."""
    n = graph.n_prisms
    bits = ((np.arange(2 ** (3 * n))[:, None] >> np.arange(3 * n)) & 1).astype(bool)
    a = bits.reshape(-1, n, 3)
    ok = ~(a.all(axis=2) | (~a).all(axis=2)).any(axis=1)
    for (p, s), (q, t) in graph.shared.items():
        ok &= a[:, p, s] != a[:, q, t]
    return a[ok]


def _check_solver(graph):
    sols = brute_force(graph)
    if len(sols) == 0:
        with pytest.raises(CSPUnsatisfiable):
            solve_flip_csp(graph)
        return False
    out = solve_flip_csp(graph) == "F"
    assert graph.is_solution(np.where(out, "F", "R"))
    assert (sols == out).all(axis=(1, 2)).any()
    return True


@pytest.mark.parametrize("pattern", sorted(TABLE))
def test_lookup_table(pattern):
    assert [set(t) for t in tessellate_prism(range(6), pattern)] == TABLE[pattern]
    assert [set(t) for t in SPLIT_TABLE[pattern]] == TABLE[pattern]


@pytest.mark.parametrize("pattern", ["FFF", "RRR", "FR", "XYZ"])
def test_invalid_pattern(pattern):
    with pytest.raises(ValueError):
        tessellate_prism(range(6), pattern)


@pytest.mark.parametrize("pattern", sorted(TABLE))
def test_right_prism_volume(pattern):
    base = np.array([[0, 0, 0], [1.3, 0, 0], [0.2, 0.9, 0]])
    pts = np.vstack([base, base + [0, 0, 0.7]])
    vol = 0.5 * abs(np.cross(base[1] - base[0], base[2] - base[0])[2]) * 0.7
    tets = tessellate_prism(range(6), pattern)
    v = [abs(signed_volume(*pts[list(t)])) for t in tets]
    assert min(v) > 0
    assert sum(v) == pytest.approx(vol, abs=1e-12)


def test_single_prism_csp():
    g = PrismCSPGraph(1)
    assert len(brute_force(g)) == 6
    assert "".join(solve_flip_csp(g)[0]) == "FRR"


def test_two_prisms_one_quad():
    g = PrismCSPGraph.from_pairs(2, [((0, 1), (1, 2))])
    assert 0 < len(brute_force(g)) < 2 ** 6
    assert _check_solver(g)


def _all_matchings(slots):
    if not slots:
        yield []
        return
    first, rest = slots[0], slots[1:]
    yield from ([m for m in _all_matchings(rest)])
    for i, other in enumerate(rest):
        if other[0] == first[0]:
            continue
        for m in _all_matchings(rest[:i] + rest[i + 1:]):
            yield [(first, other)] + m


@st.composite
def csp_graphs(draw, max_prisms=6):
    n = draw(st.integers(1, max_prisms))
    slots = [(p, s) for p in range(n) for s in range(3)]
    order = draw(st.permutations(slots))
    pairs = []
    for a, b in zip(order[::2], order[1::2]):
        if a[0] != b[0] and draw(st.booleans()):
            pairs.append((a, b))
    return PrismCSPGraph.from_pairs(n, pairs)


@given(csp_graphs())
def test_csp_matches_brute_force(graph):
    # every instance is solvable: orienting shared quads along an Euler circuit
    # (after joining odd-degree prisms to a dummy node) gives each fully shared
    # prism at least one F and one R
    assert _check_solver(graph)


@pytest.mark.parametrize("n", [1, 2, 3])
def test_csp_exhaustive_small(n):
    slots = [(p, s) for p in range(n) for s in range(3)]
    count = 0
    for pairs in _all_matchings(slots):
        assert _check_solver(PrismCSPGraph.from_pairs(n, pairs))
        count += 1
    assert count >= 1


def test_csp_ring_of_prisms():
    n = 10
    pairs = [((p, 1), ((p + 1) % n, 2)) for p in range(n)]
    g = PrismCSPGraph.from_pairs(n, pairs)
    out = solve_flip_csp(g)
    assert g.is_solution(out)


def test_csp_rejects_double_sharing():
    with pytest.raises(ValueError):
        PrismCSPGraph.from_pairs(3, [((0, 0), (1, 0)), ((0, 0), (2, 0))])


def test_select_split_vertices():
    mags = np.arange(100, dtype=float)[::-1] * 1.0
    assert list(select_split_vertices(mags, 0.05).vertices) == [0, 1, 2, 3, 4]
    assert len(select_split_vertices(mags, 1.0).vertices) == 100
    assert list(select_split_vertices(np.ones(10), 0.3).vertices) == [0, 1, 2]
    rng = np.random.default_rng(0)
    m = rng.random(50)
    sel = select_split_vertices(m, 0.1).vertices
    assert set(sel) == set(np.argsort(-m)[:5])
    with pytest.raises(ValueError):
        select_split_vertices(np.zeros(0), 0.1)
    with pytest.raises(ValueError):
        select_split_vertices(m, 0.0)


def test_split_single_tet():
    mesh = TetMesh(UNIT_TET, [[0, 1, 2, 3]])
    mesh.colors = np.array([[0, 0, 0], [1, 1, 1], [0.5, 0, 1], [0, 1, 0]], dtype=float)
    out, info = split_around_vertex(mesh, 0)
    assert out.n_tets == 4 and out.n_vertices == 7
    assert out.volumes().sum() == pytest.approx(1 / 6, abs=1e-12)
    assert (out.volumes() > 0).all()
    assert "".join(info.graph.assignment[0]) == "FRR"
    # midpoint of edge (0, 1): black to white
    k = [v for v in info.new_vertices if np.allclose(out.positions[v], [0.5, 0, 0])][0]
    np.testing.assert_allclose(out.colors[k], [0.5, 0.5, 0.5])
    assert validate(out).empty


def test_split_shared_face_vertices():
    mesh = TetMesh([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1], [0.6, 0.6, -0.8]],
                   [[0, 1, 2, 3], [0, 2, 1, 4]])
    assert (mesh.volumes() > 0).all()
    out, info = split_around_vertex(mesh, 0)
    # edges 0-1 and 0-2 lie on the shared face and are split once for both tets
    assert len(info.new_vertices) == 4
    on_face = [v for v in info.new_vertices if abs(out.positions[v, 2]) < 1e-15]
    assert len(on_face) == 2
    for v in on_face:
        users = np.nonzero((out.tets == v).any(axis=1))[0]
        above = out.tet_positions()[users][:, :, 2].max(axis=1) > 0
        below = out.tet_positions()[users][:, :, 2].min(axis=1) < 0
        assert above.any() and below.any()
    assert validate(out).empty
    assert out.volumes().sum() == pytest.approx(mesh.volumes().sum(), abs=1e-12)


def test_split_interior_grid_vertex():
    mesh = build_regular_grid((2, 2, 2), ((0, 0, 0), (1, 1, 1)))
    v = int(np.argmin(np.linalg.norm(mesh.positions - 0.5, axis=1)))
    inc = len(mesh.incident_tets(v))
    assert inc == 24
    out, info = split_around_vertex(mesh, v)
    assert out.n_tets == mesh.n_tets + 3 * inc
    assert validate(out).empty
    assert info.graph.is_solution(info.graph.assignment)
    assert len(info.graph.shared) == 2 * 36  # every quad of the closed fan is shared
    assert abs(out.volumes().sum() - 1.0) < 1e-12
    assert (out.volumes() > 0).all()
    assert "prism 0" in info.graph.dump()


def test_split_isolated_vertex_warns():
    mesh = TetMesh(np.vstack([UNIT_TET, [[5, 5, 5]]]), [[0, 1, 2, 3]])
    with pytest.warns(RuntimeWarning):
        out, info = split_around_vertex(mesh, 4)
    assert info is None and out.n_tets == 1


def test_refine_grid():
    rng = np.random.default_rng(0)
    mesh = build_regular_grid((4, 4, 4), ((0, 0, 0), (1, 1, 1)))
    mags = rng.random(mesh.n_vertices)
    out = refine(mesh, mags, 0.3)
    assert out.n_tets > mesh.n_tets
    assert validate(out).empty
    assert abs(out.volumes().sum() - 1.0) < 1e-9
    assert (out.volumes() > 0).all()


def test_refine_accepts_gradient_buffer():
    mesh = build_regular_grid((2, 2, 2), ((0, 0, 0), (1, 1, 1)))
    g = GradientBuffer(mesh.n_vertices)
    g.abs_grad_color[13] = 1.0
    out = refine(mesh, g, 1 / 27)
    assert out.n_tets == mesh.n_tets + 72


def test_refine_nothing_selected():
    mesh = build_regular_grid((2, 2, 2), ((0, 0, 0), (1, 1, 1)))
    out = refine(mesh, np.ones(mesh.n_vertices), 0.01)
    assert np.array_equal(out.tets, mesh.tets)
    assert np.array_equal(out.positions, mesh.positions)


def test_refine_rejects_bad_input_untouched():
    mesh = build_regular_grid((2, 1, 1), ((0, 0, 0), (2, 1, 1)))
    mesh.tets[0] = mesh.tets[0][[1, 0, 2, 3]]  # inverted input cannot validate
    before = mesh.tets.copy()
    with pytest.raises(RefineError):
        refine(mesh, np.ones(mesh.n_vertices), 1.0)
    assert np.array_equal(mesh.tets, before)


def test_refine_render_neutral_constant_extinction():
    # with constant extinction each sub-interval is integrated exactly, so
    # refinement changes the image only by rounding
    rng = np.random.default_rng(1)
    mesh = build_regular_grid((3, 3, 3), ((0, 0, 0), (1, 1, 1)), opacity=1.7)
    mesh.colors = rng.random((mesh.n_vertices, 3))
    out = refine(mesh, rng.random(mesh.n_vertices), 0.2)
    cam = oblique_camera(24)
    a = render(mesh, cam, 2).data
    b = render(out, cam, 2).data
    assert np.abs(a - b).max() < 1e-12
