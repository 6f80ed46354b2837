"""Compiled per-pixel kernels shared by the raycast, forward and backward passes.

Everything here runs in float64 and loops pixels in a fixed order, so results
are bit-reproducible.  Public, validated entry points live in the
``raycast``, ``forward`` and ``backward`` modules.
"""

import math

import numpy as np
from numba import njit

#: Per-segment opacity clamp keeping the compositing inversion non-singular.
ALPHA_MAX = 1.0 - 1e-6
#: |alpha * t| below which the series expansions are used.
X_SERIES = 0.05
#: Squared face-normal length below which a face counts as degenerate.
AREA_EPS2 = 1e-40

# Fixed generic perturbation directions for exact-zero edge tests.
_D1 = np.array([0.5773502691896258, 0.7071067811865476, 0.4082482904638631])
_D2 = np.array([0.2672612419124244, -0.5345224838248488, 0.8017837257372732])


# -- accumulation math ---------------------------------------------------------

@njit(cache=True, nogil=True)
def seg_coeffs(t, alpha):
    """Return ``(A, 1 - A, g, g')`` for optical thickness ``x = alpha * t``.

    ``A = exp(-x)``; ``g(x) = (1 - A) / x - A`` is the weight of the exit
    color in a linear color ramp, ``g'`` its derivative in ``x``.
    """
    x = alpha * t
    big_a = math.exp(-x)
    oma = -math.expm1(-x)
    if abs(x) < X_SERIES:
        # g = sum_k (-1)^(k+1) k x^k / (k+1)!,  g' = sum_k (-1)^(k+1) k^2 x^(k-1) / (k+1)!
        g = 0.0
        gp = 0.0
        xk1 = 1.0  # x^(k-1)
        fact = 1.0  # (k+1)!
        sign = 1.0
        for k in range(1, 14):
            fact *= k + 1
            gp += sign * k * k * xk1 / fact
            g += sign * k * xk1 * x / fact
            xk1 *= x
            sign = -sign
    else:
        g = oma / x - big_a
        gp = big_a / x - oma / (x * x) + big_a
    return big_a, oma, g, gp


# -- geometry -------------------------------------------------------------------

@njit(cache=True, nogil=True, inline="always")
def _cross(ax, ay, az, bx, by, bz):
    return ay * bz - az * by, az * bx - ax * bz, ax * by - ay * bx


@njit(cache=True, nogil=True)
def bary_weights(qx, qy, qz, pos, i0, i1, i2):
    """Barycentric ``(u, v, area2)`` of the projection of ``q`` onto a face.

    ``u`` weights vertex ``i1`` and ``v`` vertex ``i2``; ``area2`` is the squared
    length of the face normal (zero for a degenerate face).
    """
    e1x = pos[i1, 0] - pos[i0, 0]
    e1y = pos[i1, 1] - pos[i0, 1]
    e1z = pos[i1, 2] - pos[i0, 2]
    e2x = pos[i2, 0] - pos[i0, 0]
    e2y = pos[i2, 1] - pos[i0, 1]
    e2z = pos[i2, 2] - pos[i0, 2]
    nx, ny, nz = _cross(e1x, e1y, e1z, e2x, e2y, e2z)
    nn = nx * nx + ny * ny + nz * nz
    if nn <= AREA_EPS2:
        return 0.0, 0.0, nn
    rx = qx - pos[i0, 0]
    ry = qy - pos[i0, 1]
    rz = qz - pos[i0, 2]
    ax, ay, az = _cross(e2x, e2y, e2z, nx, ny, nz)
    bx, by, bz = _cross(nx, ny, nz, e1x, e1y, e1z)
    u = (rx * ax + ry * ay + rz * az) / nn
    v = (rx * bx + ry * by + rz * bz) / nn
    return u, v, nn


@njit(cache=True, nogil=True)
def _edge_sign(dx, dy, dz, nx, ny, nz):
    e = dx * nx + dy * ny + dz * nz
    if e > 0.0:
        return 1
    if e < 0.0:
        return -1
    e = _D1[0] * nx + _D1[1] * ny + _D1[2] * nz
    if e > 0.0:
        return 1
    if e < 0.0:
        return -1
    e = _D2[0] * nx + _D2[1] * ny + _D2[2] * nz
    if e > 0.0:
        return 1
    if e < 0.0:
        return -1
    return 0


@njit(cache=True, nogil=True)
def _face_hit(o, dx, dy, dz, pos, faces, f):
    """Watertight ray/face test; returns ``(hit, s)`` with ``s`` the ray parameter.

    Edge functions are evaluated per mesh edge in ascending vertex order (face
    vertices are sorted), so faces sharing an edge see bit-identical values
    and exact ties are broken by the same fixed perturbation.
    """
    a = faces[f, 0]
    b = faces[f, 1]
    c = faces[f, 2]
    ax = pos[a, 0] - o[0]
    ay = pos[a, 1] - o[1]
    az = pos[a, 2] - o[2]
    bx = pos[b, 0] - o[0]
    by = pos[b, 1] - o[1]
    bz = pos[b, 2] - o[2]
    cx = pos[c, 0] - o[0]
    cy = pos[c, 1] - o[1]
    cz = pos[c, 2] - o[2]
    nabx, naby, nabz = _cross(ax, ay, az, bx, by, bz)
    nbcx, nbcy, nbcz = _cross(bx, by, bz, cx, cy, cz)
    nacx, nacy, nacz = _cross(ax, ay, az, cx, cy, cz)
    s_ab = _edge_sign(dx, dy, dz, nabx, naby, nabz)
    s_bc = _edge_sign(dx, dy, dz, nbcx, nbcy, nbcz)
    s_ca = -_edge_sign(dx, dy, dz, nacx, nacy, nacz)
    if s_ab == 0 or s_ab != s_bc or s_bc != s_ca:
        return False, 0.0
    e_ab = dx * nabx + dy * naby + dz * nabz
    e_bc = dx * nbcx + dy * nbcy + dz * nbcz
    e_ca = -(dx * nacx + dy * nacy + dz * nacz)
    den = e_ab + e_bc + e_ca
    if den == 0.0:
        return False, 0.0
    wa = e_bc / den
    wb = e_ca / den
    wc = e_ab / den
    qx = wa * ax + wb * bx + wc * cx
    qy = wa * ay + wb * by + wc * cy
    qz = wa * az + wb * bz + wc * cz
    return True, qx * dx + qy * dy + qz * dz


# -- fragment generation ---------------------------------------------------------

@njit(cache=True, nogil=True)
def count_fragments(o, dirs, width, row0, row1, pos, faces, face_tets, bx0, bx1, by0, by1,
                    counts):
    """Count fragments of pixels in rows ``[row0, row1)`` into ``counts``."""
    for f in range(faces.shape[0]):
        j0 = max(by0[f], row0)
        j1 = min(by1[f], row1 - 1)
        if j0 > j1:
            continue
        mult = 1 if face_tets[f, 1] < 0 else 2
        for j in range(j0, j1 + 1):
            for i in range(bx0[f], bx1[f] + 1):
                p = j * width + i
                hit, s = _face_hit(o, dirs[p, 0], dirs[p, 1], dirs[p, 2], pos, faces, f)
                if hit and s > 0.0:
                    counts[p - row0 * width] += mult


@njit(cache=True, nogil=True)
def fill_fragments(o, dirs, width, row0, row1, pos, faces, face_tets, bx0, bx1, by0, by1,
                   offsets, out_face, out_tet, out_depth):
    cursor = offsets[:-1].copy()
    for f in range(faces.shape[0]):
        j0 = max(by0[f], row0)
        j1 = min(by1[f], row1 - 1)
        if j0 > j1:
            continue
        for j in range(j0, j1 + 1):
            for i in range(bx0[f], bx1[f] + 1):
                p = j * width + i
                hit, s = _face_hit(o, dirs[p, 0], dirs[p, 1], dirs[p, 2], pos, faces, f)
                if hit and s > 0.0:
                    lp = p - row0 * width
                    for side in range(2):
                        tet = face_tets[f, side]
                        if tet < 0:
                            continue
                        k = cursor[lp]
                        out_face[k] = f
                        out_tet[k] = tet
                        out_depth[k] = s
                        cursor[lp] = k + 1


@njit(cache=True, nogil=True)
def sort_fragments(offsets, face, tet, depth):
    """In-place per-pixel insertion sort by ``(depth, tet, face)``."""
    for p in range(offsets.shape[0] - 1):
        lo = offsets[p]
        hi = offsets[p + 1]
        for k in range(lo + 1, hi):
            d = depth[k]
            t = tet[k]
            fc = face[k]
            m = k - 1
            while m >= lo and (depth[m] > d or (depth[m] == d and (
                    tet[m] > t or (tet[m] == t and face[m] > fc)))):
                depth[m + 1] = depth[m]
                tet[m + 1] = tet[m]
                face[m + 1] = face[m]
                m -= 1
            depth[m + 1] = d
            tet[m + 1] = t
            face[m + 1] = fc


@njit(cache=True, nogil=True)
def pair_fragments(offsets, face, tet, depth, seg_offsets, seg_tet, seg_f0, seg_f1, seg_d0,
                   seg_d1, dropped):
    """Pair sorted fragments into (entry, exit) segments by tet id.

    Writes at most ``len(fragments) // 2`` segments; ``seg_offsets`` receives
    per-pixel CSR offsets.  Tets with an odd fragment count on a ray are
    dropped entirely and counted per pixel in ``dropped``.
    """
    n_seg = 0
    open_idx = np.empty(64, dtype=np.int64)
    for p in range(offsets.shape[0] - 1):
        lo = offsets[p]
        hi = offsets[p + 1]
        seg_offsets[p] = n_seg
        n_open = 0
        for k in range(lo, hi):
            found = -1
            for m in range(n_open):
                if tet[open_idx[m]] == tet[k]:
                    found = m
                    break
            if found >= 0:
                e = open_idx[found]
                seg_tet[n_seg] = tet[k]
                seg_f0[n_seg] = face[e]
                seg_f1[n_seg] = face[k]
                seg_d0[n_seg] = depth[e]
                seg_d1[n_seg] = depth[k]
                n_seg += 1
                n_open -= 1
                open_idx[found] = open_idx[n_open]
            else:
                if n_open == open_idx.shape[0]:
                    grown = np.empty(2 * n_open, dtype=np.int64)
                    grown[:n_open] = open_idx[:n_open]
                    open_idx = grown
                open_idx[n_open] = k
                n_open += 1
        dropped[p] = n_open
        # a tet left open has an odd count: drop its paired segments too
        for m in range(n_open):
            bad = tet[open_idx[m]]
            w = seg_offsets[p]
            for s in range(seg_offsets[p], n_seg):
                if seg_tet[s] != bad:
                    seg_tet[w] = seg_tet[s]
                    seg_f0[w] = seg_f0[s]
                    seg_f1[w] = seg_f1[s]
                    seg_d0[w] = seg_d0[s]
                    seg_d1[w] = seg_d1[s]
                    w += 1
            n_seg = w
        # order segments front to back by entry depth, then tet id
        for s in range(seg_offsets[p] + 1, n_seg):
            t = seg_tet[s]
            f0 = seg_f0[s]
            f1 = seg_f1[s]
            d0 = seg_d0[s]
            d1 = seg_d1[s]
            m = s - 1
            while m >= seg_offsets[p] and (seg_d0[m] > d0 or (seg_d0[m] == d0
                                                               and seg_tet[m] > t)):
                seg_tet[m + 1] = seg_tet[m]
                seg_f0[m + 1] = seg_f0[m]
                seg_f1[m + 1] = seg_f1[m]
                seg_d0[m + 1] = seg_d0[m]
                seg_d1[m + 1] = seg_d1[m]
                m -= 1
            seg_tet[m + 1] = t
            seg_f0[m + 1] = f0
            seg_f1[m + 1] = f1
            seg_d0[m + 1] = d0
            seg_d1[m + 1] = d1
    seg_offsets[offsets.shape[0] - 1] = n_seg
    return n_seg


# -- forward ----------------------------------------------------------------------

@njit(cache=True, nogil=True)
def _endpoint(o, dx, dy, dz, s, pos, col, opa, faces, f, out):
    """Interpolate color/opacity at the hit of face ``f``; returns face validity."""
    i0 = faces[f, 0]
    i1 = faces[f, 1]
    i2 = faces[f, 2]
    u, v, nn = bary_weights(o[0] + s * dx, o[1] + s * dy, o[2] + s * dz, pos, i0, i1, i2)
    if nn <= AREA_EPS2:
        return False
    w0 = 1.0 - u - v
    for ch in range(3):
        out[ch] = w0 * col[i0, ch] + u * col[i1, ch] + v * col[i2, ch]
    out[3] = w0 * opa[i0] + u * opa[i1] + v * opa[i2]
    out[4] = u
    out[5] = v
    return True


@njit(cache=True, nogil=True)
def forward_pixels(o, dirs, p0, p1, near, n_sub, pos, col, opa, faces, seg_offsets, seg_f0,
                   seg_f1, seg_d0, seg_d1, out_color, out_logt, skipped):
    """Front-to-back accumulation for pixels ``[p0, p1)``.

    Writes premultiplied color and log-transmittance per pixel (local index
    ``p - p0``); ``skipped`` counts segments with a degenerate face.
    """
    e0 = np.empty(6)
    e1 = np.empty(6)
    for p in range(p0, p1):
        dx = dirs[p, 0]
        dy = dirs[p, 1]
        dz = dirs[p, 2]
        cr = 0.0
        cg = 0.0
        cb = 0.0
        trans = 1.0
        logt = 0.0
        for s in range(seg_offsets[p], seg_offsets[p + 1]):
            s0 = seg_d0[s]
            s1 = seg_d1[s]
            if s1 <= near:
                continue
            if not (_endpoint(o, dx, dy, dz, s0, pos, col, opa, faces, seg_f0[s], e0)
                    and _endpoint(o, dx, dy, dz, s1, pos, col, opa, faces, seg_f1[s], e1)):
                skipped[0] += 1
                continue
            if s0 < near:
                fr = (near - s0) / (s1 - s0)
                for ch in range(4):
                    e0[ch] = e0[ch] + fr * (e1[ch] - e0[ch])
                s0 = near
            t = (s1 - s0) / n_sub
            for i in range(n_sub):
                fa = i / n_sub
                fb = (i + 1) / n_sub
                alpha = e0[3] + (i + 0.5) / n_sub * (e1[3] - e0[3])
                big_a, oma, g, gp = seg_coeffs(t, alpha)
                a_acc = min(oma, ALPHA_MAX)
                w0 = oma - g
                c0r = e0[0] + fa * (e1[0] - e0[0])
                c1r = e0[0] + fb * (e1[0] - e0[0])
                c0g = e0[1] + fa * (e1[1] - e0[1])
                c1g = e0[1] + fb * (e1[1] - e0[1])
                c0b = e0[2] + fa * (e1[2] - e0[2])
                c1b = e0[2] + fb * (e1[2] - e0[2])
                cr += trans * (w0 * c0r + g * c1r)
                cg += trans * (w0 * c0g + g * c1g)
                cb += trans * (w0 * c0b + g * c1b)
                trans *= 1.0 - a_acc
                logt += math.log1p(-a_acc)
        lp = p - p0
        out_color[lp, 0] = cr
        out_color[lp, 1] = cg
        out_color[lp, 2] = cb
        out_logt[lp] = logt


# -- backward ---------------------------------------------------------------------

@njit(cache=True, nogil=True)
def _scatter_face(o, dx, dy, dz, pos, col, opa, faces, f, u, v, dcol, dopa, g_s, grad_col,
                  grad_opa, grad_pos, want_pos):
    """Scatter endpoint adjoints to the 3 vertices of face ``f``.

    Position adjoints use the total derivative of the ray hit ``(s, u, v)``:
    ``d(s, u, v)/dp_k = -w_k M^-1`` with ``M = [-d | p1 - p0 | p2 - p0]``.
    """
    i0 = faces[f, 0]
    i1 = faces[f, 1]
    i2 = faces[f, 2]
    w0 = 1.0 - u - v
    g_u = dopa * (opa[i1] - opa[i0])
    g_v = dopa * (opa[i2] - opa[i0])
    for ch in range(3):
        grad_col[i0, ch] += w0 * dcol[ch]
        grad_col[i1, ch] += u * dcol[ch]
        grad_col[i2, ch] += v * dcol[ch]
        g_u += dcol[ch] * (col[i1, ch] - col[i0, ch])
        g_v += dcol[ch] * (col[i2, ch] - col[i0, ch])
    grad_opa[i0] += w0 * dopa
    grad_opa[i1] += u * dopa
    grad_opa[i2] += v * dopa
    if not want_pos:
        return
    e1x = pos[i1, 0] - pos[i0, 0]
    e1y = pos[i1, 1] - pos[i0, 1]
    e1z = pos[i1, 2] - pos[i0, 2]
    e2x = pos[i2, 0] - pos[i0, 0]
    e2y = pos[i2, 1] - pos[i0, 1]
    e2z = pos[i2, 2] - pos[i0, 2]
    # rows of M^-1 for columns (-d, e1, e2)
    r0x, r0y, r0z = _cross(e1x, e1y, e1z, e2x, e2y, e2z)
    det = -(dx * r0x + dy * r0y + dz * r0z)
    if det == 0.0:
        return
    r1x, r1y, r1z = _cross(e2x, e2y, e2z, -dx, -dy, -dz)
    r2x, r2y, r2z = _cross(-dx, -dy, -dz, e1x, e1y, e1z)
    yx = (g_s * r0x + g_u * r1x + g_v * r2x) / det
    yy = (g_s * r0y + g_u * r1y + g_v * r2y) / det
    yz = (g_s * r0z + g_u * r1z + g_v * r2z) / det
    grad_pos[i0, 0] -= w0 * yx
    grad_pos[i0, 1] -= w0 * yy
    grad_pos[i0, 2] -= w0 * yz
    grad_pos[i1, 0] -= u * yx
    grad_pos[i1, 1] -= u * yy
    grad_pos[i1, 2] -= u * yz
    grad_pos[i2, 0] -= v * yx
    grad_pos[i2, 1] -= v * yy
    grad_pos[i2, 2] -= v * yz


@njit(cache=True, nogil=True)
def backward_pixels(o, dirs, p0, p1, near, n_sub, pos, col, opa, faces, seg_offsets, seg_f0,
                    seg_f1, seg_d0, seg_d1, fin_color, fin_logt, adj_color, adj_alpha,
                    grad_col, grad_opa, grad_pos, want_pos):
    """Adjoint pass for pixels ``[p0, p1)`` traversing segments back to front.

    Intermediate ray states are reconstructed from the final state by
    inverting the compositing step; nothing from the forward pass besides
    ``fin_color``/``fin_logt`` (indexed by global pixel) is reused.
    """
    e0 = np.empty(6)
    e1 = np.empty(6)
    dcol = np.empty(3)
    dc0 = np.empty(3)
    dc1 = np.empty(3)
    for p in range(p0, p1):
        lo = seg_offsets[p]
        hi = seg_offsets[p + 1]
        if lo == hi:
            continue
        gr = adj_color[p, 0]
        gg = adj_color[p, 1]
        gb = adj_color[p, 2]
        d_alpha = adj_alpha[p]  # adjoint of the alpha state after the current step
        if gr == 0.0 and gg == 0.0 and gb == 0.0 and d_alpha == 0.0:
            continue
        dx = dirs[p, 0]
        dy = dirs[p, 1]
        dz = dirs[p, 2]
        cr = fin_color[p, 0]
        cg = fin_color[p, 1]
        cb = fin_color[p, 2]
        logt = fin_logt[p]
        for s in range(hi - 1, lo - 1, -1):
            s0 = seg_d0[s]
            s1 = seg_d1[s]
            if s1 <= near:
                continue
            if not (_endpoint(o, dx, dy, dz, s0, pos, col, opa, faces, seg_f0[s], e0)
                    and _endpoint(o, dx, dy, dz, s1, pos, col, opa, faces, seg_f1[s], e1)):
                continue
            u0 = e0[4]
            v0 = e0[5]
            clipped = s0 < near
            fr = 0.0
            a0 = e0[0]
            a1 = e0[1]
            a2 = e0[2]
            a3 = e0[3]
            if clipped:
                fr = (near - s0) / (s1 - s0)
                for ch in range(4):
                    e0[ch] = e0[ch] + fr * (e1[ch] - e0[ch])
                start = near
            else:
                start = s0
            t = (s1 - start) / n_sub
            for ch in range(3):
                dc0[ch] = 0.0
                dc1[ch] = 0.0
            da0 = 0.0
            da1 = 0.0
            dt = 0.0
            for i in range(n_sub - 1, -1, -1):
                fa = i / n_sub
                fb = (i + 1) / n_sub
                fm = (i + 0.5) / n_sub
                alpha = e0[3] + fm * (e1[3] - e0[3])
                big_a, oma, g, gp = seg_coeffs(t, alpha)
                clamp = oma > ALPHA_MAX
                a_acc = ALPHA_MAX if clamp else oma
                w0 = oma - g
                c0r = e0[0] + fa * (e1[0] - e0[0])
                c1r = e0[0] + fb * (e1[0] - e0[0])
                c0g = e0[1] + fa * (e1[1] - e0[1])
                c1g = e0[1] + fb * (e1[1] - e0[1])
                c0b = e0[2] + fa * (e1[2] - e0[2])
                c1b = e0[2] + fb * (e1[2] - e0[2])
                accr = w0 * c0r + g * c1r
                accg = w0 * c0g + g * c1g
                accb = w0 * c0b + g * c1b
                # invert the compositing step: recover the state before it
                logt -= math.log1p(-a_acc)
                trans = math.exp(logt)
                cr -= trans * accr
                cg -= trans * accg
                cb -= trans * accb
                dacc_r = trans * gr
                dacc_g = trans * gg
                dacc_b = trans * gb
                dacc_a = trans * d_alpha
                d_alpha = d_alpha * (1.0 - a_acc) - (gr * accr + gg * accg + gb * accb)
                # through the constant-opacity accumulation
                dc0[0] += w0 * dacc_r * (1.0 - fa) + g * dacc_r * (1.0 - fb)
                dc1[0] += w0 * dacc_r * fa + g * dacc_r * fb
                dc0[1] += w0 * dacc_g * (1.0 - fa) + g * dacc_g * (1.0 - fb)
                dc1[1] += w0 * dacc_g * fa + g * dacc_g * fb
                dc0[2] += w0 * dacc_b * (1.0 - fa) + g * dacc_b * (1.0 - fb)
                dc1[2] += w0 * dacc_b * fa + g * dacc_b * fb
                bracket = (dacc_r * (c0r * big_a + (c1r - c0r) * gp)
                           + dacc_g * (c0g * big_a + (c1g - c0g) * gp)
                           + dacc_b * (c0b * big_a + (c1b - c0b) * gp))
                if not clamp:
                    bracket += dacc_a * big_a
                d_alpha_i = t * bracket
                dt += alpha * bracket / n_sub
                da0 += d_alpha_i * (1.0 - fm)
                da1 += d_alpha_i * fm
            # back to the unclipped entry attributes
            g_s0 = 0.0
            g_s1 = dt
            if clipped:
                dfr = da0 * (e1[3] - a3) + dc0[0] * (e1[0] - a0) + dc0[1] * (e1[1] - a1) \
                    + dc0[2] * (e1[2] - a2)
                for ch in range(3):
                    dc1[ch] += fr * dc0[ch]
                    dc0[ch] *= 1.0 - fr
                da1 += fr * da0
                da0 *= 1.0 - fr
                span = s1 - s0
                g_s0 += dfr * (fr - 1.0) / span
                g_s1 += -dfr * fr / span
            else:
                g_s0 -= dt
            _scatter_face(o, dx, dy, dz, pos, col, opa, faces, seg_f0[s], u0, v0, dc0, da0,
                          g_s0, grad_col, grad_opa, grad_pos, want_pos)
            _scatter_face(o, dx, dy, dz, pos, col, opa, faces, seg_f1[s], e1[4], e1[5], dc1,
                          da1, g_s1, grad_col, grad_opa, grad_pos, want_pos)
