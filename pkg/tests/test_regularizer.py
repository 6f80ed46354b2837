import math

import numpy as np
import pytest
from conftest import REGULAR_TET
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from tetvr.regularizer import (RegularizerConfig, count_degenerate, improve_tet,
                               regularization_loss, softplus, softplus_grad, tet_quality,
                               tet_quality_grad)
from tetvr.tetmesh import TetMesh, build_regular_grid

coords = arrays(np.float64, (4, 3), elements=st.floats(-3, 3))
POSITIVE_REGULAR = REGULAR_TET
INVERTED_REGULAR = REGULAR_TET[[1, 0, 2, 3]]
STRETCHED = POSITIVE_REGULAR * np.array([1.0, 1.0, 3.0])


def _non_degenerate(p):
    e = p[1:] - p[0]
    return abs(np.linalg.det(e)) > 1e-3 * max(1.0, np.abs(e).max()) ** 3


def test_regular_tet_quality():
    for s in (1e-3, 1.0, 250.0):
        assert tet_quality(*(POSITIVE_REGULAR * s)) == pytest.approx(1.0, abs=1e-12)
    assert tet_quality(*INVERTED_REGULAR) == pytest.approx(-1.0, abs=1e-12)


def test_coplanar_and_coincident():
    assert tet_quality([0, 0, 0], [1, 0, 0], [0, 1, 0], [1, 1, 0]) == 0.0
    q, dq = tet_quality_grad(np.zeros((4, 3)))
    assert q == 0.0 and not dq.any()


@given(coords, st.floats(1e-3, 1e3))
def test_quality_scale_invariant_and_bounded(p, s):
    q = tet_quality(*p)
    assert -1 - 1e-12 <= q <= 1 + 1e-12
    assert tet_quality(*(s * p)) == pytest.approx(q, abs=1e-12)


@given(coords)
def test_quality_grad_orthogonal_to_scaling(p):
    _, dq = tet_quality_grad(p)
    c = p - p.mean(axis=0)
    scale = max(1.0, np.abs(p).max())
    assert abs(np.sum(dq * c)) <= 1e-9 * scale


@given(coords)
def test_quality_grad_fd(p):
    if not _non_degenerate(p):
        return
    _, dq = tet_quality_grad(p)
    h = 1e-6
    for i in range(4):
        for a in range(3):
            pp, pm = p.copy(), p.copy()
            pp[i, a] += h
            pm[i, a] -= h
            fd = (tet_quality(*pp) - tet_quality(*pm)) / (2 * h)
            assert dq[i, a] == pytest.approx(fd, rel=1e-6, abs=1e-6)


def test_softplus_examples():
    assert softplus(0.0, 1.0) == pytest.approx(math.log(2))
    assert softplus_grad(0.0, 1.0) == 0.5
    assert softplus(100.0, 10.0) == pytest.approx(100.0, abs=1e-12)
    assert 0 <= softplus(-100.0, 10.0) < 1e-300
    assert np.isfinite(softplus(np.array([-1e6, 1e6]), 100.0)).all()


@pytest.mark.parametrize("beta", [1.0, 10.0, 100.0])
def test_softplus_grad_fd(beta):
    h = 1e-6
    for x in np.linspace(-5, 5, 41):
        fd = (softplus(x + h, beta) - softplus(x - h, beta)) / (2 * h)
        assert softplus_grad(x, beta) == pytest.approx(fd, abs=1e-8)


def _single(points):
    return TetMesh(points, [[0, 1, 2, 3]])


def test_regular_tet_penalty_tiny():
    loss, grad = regularization_loss(_single(POSITIVE_REGULAR), RegularizerConfig(1.0, 10.0))
    assert loss == pytest.approx(math.log1p(math.exp(-10)) / 10, rel=1e-9)
    assert np.abs(grad).max() < 1e-3


def test_inverted_tet_penalty():
    mesh = _single(INVERTED_REGULAR)
    loss, grad = regularization_loss(mesh, RegularizerConfig(1.0, 10.0))
    assert loss == pytest.approx(1 + math.log1p(math.exp(-10)) / 10, abs=1e-12)
    assert loss == pytest.approx(1.0000045, abs=1e-7)
    _, dq = tet_quality_grad(INVERTED_REGULAR)
    # the gradient points against increasing quality
    assert np.sum(grad * dq) < 0


def test_lambda_zero_is_exactly_zero():
    loss, grad = regularization_loss(_single(STRETCHED), RegularizerConfig(0.0, 10.0))
    assert loss == 0.0 and not grad.any()


@pytest.mark.parametrize("seed", range(4))
def test_mesh_gradient_fd(seed):
    rng = np.random.default_rng(seed)
    mesh = build_regular_grid((2, 1, 1), ((0, 0, 0), (2, 1, 1)))
    mesh.positions += rng.normal(0, 0.2, mesh.positions.shape)
    cfg = RegularizerConfig(3.0, 5.0)
    _, grad = regularization_loss(mesh, cfg)
    h = 1e-6
    for v in range(mesh.n_vertices):
        for a in range(3):
            vals = []
            for s in (h, -h):
                m = mesh.copy()
                m.positions[v, a] += s
                vals.append(regularization_loss(m, cfg)[0])
            fd = (vals[0] - vals[1]) / (2 * h)
            assert grad[v, a] == pytest.approx(fd, rel=1e-6, abs=1e-8)


def test_count_degenerate():
    mesh = build_regular_grid((1, 1, 1), ((0, 0, 0), (1, 1, 1)))
    assert count_degenerate(mesh) == 0
    mesh.tets[0] = mesh.tets[0][[1, 0, 2, 3]]
    assert count_degenerate(mesh) == 1


def test_improve_stretched_tet():
    p, hist = improve_tet(STRETCHED, beta=10.0, step=1e-2, steps=600)
    assert hist[0] < 0.7
    assert hist[-1] > 0.99
    assert np.all(np.diff(hist) >= 0)
    assert tet_quality(*p) == pytest.approx(hist[-1])
