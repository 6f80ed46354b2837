import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from tetvr.tetmesh import (MeshError, TetMesh, build_regular_grid, load_mesh, save_mesh,
                           signed_volume, validate)

finite = st.floats(-10, 10, allow_nan=False)


def test_unit_cube_grid():
    m = build_regular_grid((1, 1, 1), ((0, 0, 0), (1, 1, 1)))
    assert (m.n_tets, m.n_vertices) == (6, 8)
    assert m.volumes().sum() == pytest.approx(1.0, abs=1e-14)
    assert (m.volumes() > 0).all()


def test_two_cell_grid_face_incidence():
    m = build_regular_grid((2, 1, 1), ((0, 0, 0), (2, 1, 1)))
    assert m.n_tets == 12
    counts = (m.face_tets >= 0).sum(axis=1)
    assert set(counts) == {1, 2}
    # boundary count 2*2*(dx*dy + dy*dz + dx*dz)
    assert (counts == 1).sum() == 4 * (2 + 1 + 2)
    for f in np.nonzero(counts == 2)[0]:
        a, b = m.face_tets[f]
        assert set(m.faces[f]) <= set(m.tets[a]) and set(m.faces[f]) <= set(m.tets[b])


def test_large_grid_volume():
    m = build_regular_grid((16, 16, 16), ((-1, -1, -1), (1, 1, 1)))
    assert m.n_tets == 24576
    assert abs(m.volumes().sum() - 8.0) / 8.0 < 1e-10
    assert len(m.boundary_faces()) == 4 * 3 * 256
    assert validate(m).empty


@pytest.mark.parametrize("dims", [(0, 1, 1), (1, -2, 1), (1, 1)])
def test_grid_rejects_bad_dims(dims):
    with pytest.raises(ValueError):
        build_regular_grid(dims, ((0, 0, 0), (1, 1, 1)))


def test_grid_rejects_flat_bbox():
    with pytest.raises(ValueError):
        build_regular_grid((1, 1, 1), ((0, 0, 0), (1, 0, 1)))


def test_signed_volume_examples():
    p = np.eye(3)
    o = np.zeros(3)
    assert signed_volume(o, p[0], p[1], p[2]) == pytest.approx(1 / 6)
    assert signed_volume(o, p[1], p[0], p[2]) == pytest.approx(-1 / 6)
    assert signed_volume(o, p[0], p[1], p[0] + p[1]) == 0.0


@given(arrays(np.float64, (4, 3), elements=finite))
def test_signed_volume_antisymmetric(p):
    v = signed_volume(*p)
    for i, j in [(0, 1), (1, 2), (2, 3), (0, 3)]:
        q = p.copy()
        q[[i, j]] = q[[j, i]]
        assert signed_volume(*q) == pytest.approx(-v, abs=1e-9)


@given(st.tuples(st.integers(1, 3), st.integers(1, 3), st.integers(1, 3)),
       arrays(np.float64, 3, elements=st.floats(-5, 5)),
       arrays(np.float64, 3, elements=st.floats(0.1, 4)))
def test_grid_tiles_box(dims, lo, size):
    m = build_regular_grid(dims, (lo, lo + size))
    assert m.n_tets == 6 * np.prod(dims)
    assert abs(m.volumes().sum() - np.prod(size)) <= 1e-10 * np.prod(size)
    nb = len(m.boundary_faces())
    dx, dy, dz = dims
    assert nb == 4 * (dx * dy + dy * dz + dx * dz)


def test_validate_flags_inverted_tets():
    m = build_regular_grid((2, 2, 2), ((0, 0, 0), (1, 1, 1)))
    v = int(np.argmin(np.linalg.norm(m.positions - 0.5, axis=1)))
    inc = m.incident_tets(v)
    t = inc[0]
    others = [u for u in m.tets[t] if u != v]
    # reflect the centre vertex through the opposite face of one incident tet
    a, b, c = m.positions[others]
    n = np.cross(b - a, c - a)
    n /= np.linalg.norm(n)
    m.positions[v] -= 2.2 * ((m.positions[v] - a) @ n) * n
    expected = set(inc[m.volumes()[inc] <= 0])
    rep = validate(m)
    assert expected and set(rep.inverted_tets) == expected


def test_validate_flags_deleted_tet():
    m = build_regular_grid((2, 1, 1), ((0, 0, 0), (2, 1, 1)))
    interior = np.nonzero((m.face_tets >= 0).all(axis=1))[0]
    f = interior[0]
    gone = m.face_tets[f, 1]
    faces_before = m.faces.copy()
    m.tets = np.delete(m.tets, gone, axis=0)
    # stale face table still claims two incident tets
    rep = validate(m)
    assert rep.inconsistent_faces
    assert not rep.empty
    m.rebuild_topology()
    assert validate(m).empty or len(m.faces) == len(faces_before)


def test_validate_nan():
    m = build_regular_grid((1, 1, 1), ((0, 0, 0), (1, 1, 1)))
    m.positions[3, 1] = np.nan
    assert validate(m).nan_vertices == [3]


def test_bad_indices_rejected():
    with pytest.raises(MeshError):
        TetMesh(np.zeros((3, 3)), [[0, 1, 2, 3]])


@pytest.mark.parametrize("binary", [True, False])
def test_mesh_round_trip(tmp_path, binary):
    rng = np.random.default_rng(0)
    m = build_regular_grid((2, 2, 1), ((0, 0, 0), (1, 1, 1)))
    m.colors = rng.random((m.n_vertices, 3))
    m.opacities = rng.random(m.n_vertices)
    path = tmp_path / "m.tet"
    save_mesh(path, m, binary=binary)
    r = load_mesh(path)
    for a in ("positions", "colors", "opacities", "tets"):
        np.testing.assert_array_equal(getattr(r, a), getattr(m, a))


def test_load_missing_names_path(tmp_path):
    with pytest.raises(MeshError, match="nope.tet"):
        load_mesh(tmp_path / "nope.tet")


def test_load_garbage(tmp_path):
    p = tmp_path / "bad.tet"
    p.write_bytes(b"hello\n")
    with pytest.raises(MeshError):
        load_mesh(p)
