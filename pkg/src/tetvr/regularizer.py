"""Tet shape-quality penalty with analytic position gradients."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tetmesh import TetMesh

_SQRT2_6 = 6.0 * np.sqrt(2.0)


@dataclass(frozen=True)
class RegularizerConfig:
    lam: float = 10.0
    beta: float = 100.0

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("regularizer weight must be >= 0")
        if self.beta <= 0:
            raise ValueError("softplus beta must be > 0")


def tet_quality(p0, p1, p2, p3):
    """Quality ``6 sqrt(2) V / l_rms^3``: 1 for regular tets, <0 when inverted.

    ``V`` is the signed volume and ``l_rms`` the root mean square of the six
    edge lengths.  Coincident points give 0.  Broadcasts over leading axes.
    """
    q, _ = _quality_and_grad(np.stack(np.broadcast_arrays(
        *(np.asarray(p, dtype=np.float64) for p in (p0, p1, p2, p3))), axis=-2), False)
    return q if q.ndim else float(q)


def tet_quality_grad(points):
    """Quality and its gradient for points of shape (..., 4, 3).

    Returns
    -------
    q : (...) ndarray
    dq : (..., 4, 3) ndarray
    """
    return _quality_and_grad(np.asarray(points, dtype=np.float64), True)


def _quality_and_grad(p, want_grad):
    e1 = p[..., 1, :] - p[..., 0, :]
    e2 = p[..., 2, :] - p[..., 0, :]
    e3 = p[..., 3, :] - p[..., 0, :]
    vol = np.einsum("...i,...i->...", np.cross(e1, e2), e3) / 6.0
    l2 = np.zeros(p.shape[:-2])
    for i in range(4):
        for j in range(i + 1, 4):
            d = p[..., i, :] - p[..., j, :]
            l2 = l2 + np.einsum("...i,...i->...", d, d)
    l2 = l2 / 6.0
    ok = l2 > 0
    safe = np.where(ok, l2, 1.0)
    q = np.where(ok, _SQRT2_6 * vol / safe ** 1.5, 0.0)
    if not want_grad:
        return q, None
    dv = np.empty(p.shape)
    dv[..., 1, :] = np.cross(e2, e3) / 6.0
    dv[..., 2, :] = np.cross(e3, e1) / 6.0
    dv[..., 3, :] = np.cross(e1, e2) / 6.0
    dv[..., 0, :] = -(dv[..., 1, :] + dv[..., 2, :] + dv[..., 3, :])
    total = p.sum(axis=-2, keepdims=True)
    dl2 = (4.0 * p - total) / 3.0
    inv3 = (1.0 / safe ** 1.5)[..., None, None]
    inv5 = (1.0 / safe ** 2.5)[..., None, None]
    dq = _SQRT2_6 * (dv * inv3 - 1.5 * vol[..., None, None] * dl2 * inv5)
    dq = np.where(ok[..., None, None], dq, 0.0)
    return q, dq


def softplus(x, beta):
    """``log(1 + exp(beta x)) / beta``, evaluated without overflow."""
    x = np.asarray(x, dtype=np.float64)
    bx = beta * x
    out = np.where(bx > 30, x, np.log1p(np.exp(np.minimum(bx, 30.0))) / beta)
    out = np.where(bx < -30, np.exp(np.clip(bx, -745.0, 30.0)) / beta, out)
    return out if out.ndim else float(out)


def softplus_grad(x, beta):
    """Derivative of :func:`softplus`: the logistic ``1 / (1 + exp(-beta x))``."""
    bx = beta * np.asarray(x, dtype=np.float64)
    e = np.exp(-np.abs(bx))
    out = np.where(bx >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return out if out.ndim else float(out)


def regularization_loss(mesh: TetMesh, config: RegularizerConfig):
    """``lam * sum softplus(-Q, beta)`` over tets and its per-vertex gradient."""
    grad = np.zeros((mesh.n_vertices, 3))
    if config.lam == 0 or mesh.n_tets == 0:
        return 0.0, grad
    q, dq = tet_quality_grad(mesh.tet_positions())
    loss = config.lam * float(np.sum(softplus(-q, config.beta)))
    coef = -config.lam * softplus_grad(-q, config.beta)
    contrib = coef[:, None, None] * dq
    for k in range(4):
        for c in range(3):
            grad[:, c] += np.bincount(mesh.tets[:, k], weights=contrib[:, k, c],
                                      minlength=mesh.n_vertices)
    return loss, grad


def mesh_quality(mesh: TetMesh) -> np.ndarray:
    return tet_quality_grad(mesh.tet_positions())[0] if mesh.n_tets else np.zeros(0)


def count_degenerate(mesh: TetMesh) -> int:
    """Number of tets with quality ``<= 0`` (flat or inverted)."""
    return int(np.count_nonzero(mesh_quality(mesh) <= 0))


def improve_tet(points, beta=10.0, step=1e-2, steps=600):
    """Descend ``softplus(-Q, beta)`` for a single tet with a fixed step length.

    Each step moves the vertices a distance ``step`` (in the stacked 12-vector
    norm) along the negative gradient; steps that would lower the quality are
    rejected and the step length halved.

    Returns
    -------
    points : (4, 3) ndarray
    history : (steps + 1,) ndarray
        Quality after each iteration (first entry is the initial quality).
    """
    p = np.array(points, dtype=np.float64).reshape(4, 3)
    q, dq = tet_quality_grad(p)
    hist = [float(q)]
    h = step
    for _ in range(steps):
        g = -softplus_grad(-q, beta) * dq
        norm = np.linalg.norm(g)
        if norm == 0:
            hist.append(float(q))
            continue
        cand = p - h * g / norm
        q_new, dq_new = tet_quality_grad(cand)
        if q_new >= q:
            p, q, dq = cand, q_new, dq_new
        else:
            h *= 0.5
        hist.append(float(q))
    return p, np.array(hist)
