"""Compiled inner loops for the per-step losses.

All kernels accumulate in a fixed sequential order, so results are
bit-reproducible and independent of how callers distribute planes over
threads.
"""

import math

import numpy as np
from numba import njit

_JIT = dict(cache=True, nogil=True, fastmath=False)


@njit(**_JIT)
def edge_loss_kernel(frames, edges, rest):
    n_frames, n_verts, _ = frames.shape
    n_edges = edges.shape[0]
    scale = 1.0 / (n_edges * n_frames)
    grad = np.zeros((n_frames, n_verts, 3))
    loss = 0.0
    for t in range(n_frames):
        for k in range(n_edges):
            i = edges[k, 0]
            j = edges[k, 1]
            ex = frames[t, j, 0] - frames[t, i, 0]
            ey = frames[t, j, 1] - frames[t, i, 1]
            ez = frames[t, j, 2] - frames[t, i, 2]
            length = math.sqrt(ex * ex + ey * ey + ez * ez)
            diff = length - rest[k]
            loss += diff * diff
            c = 2.0 * diff * scale / length
            grad[t, j, 0] += c * ex
            grad[t, j, 1] += c * ey
            grad[t, j, 2] += c * ez
            grad[t, i, 0] -= c * ex
            grad[t, i, 1] -= c * ey
            grad[t, i, 2] -= c * ez
    return loss * scale, grad


@njit(**_JIT)
def normal_loss_kernel(frames, faces, pairs):
    """Returns (loss, grad, bad_face); bad_face >= 0 flags a zero-area face."""
    n_frames, n_verts, _ = frames.shape
    n_faces = faces.shape[0]
    n_pairs = pairs.shape[0]
    scale = 1.0 / (n_pairs * n_frames)
    grad = np.zeros((n_frames, n_verts, 3))
    normals = np.empty((n_faces, 3))
    norms = np.empty(n_faces)
    gn = np.empty((n_faces, 3))
    loss = 0.0
    for t in range(n_frames):
        for f in range(n_faces):
            a0 = faces[f, 0]
            a1 = faces[f, 1]
            a2 = faces[f, 2]
            ax = frames[t, a1, 0] - frames[t, a0, 0]
            ay = frames[t, a1, 1] - frames[t, a0, 1]
            az = frames[t, a1, 2] - frames[t, a0, 2]
            bx = frames[t, a2, 0] - frames[t, a0, 0]
            by = frames[t, a2, 1] - frames[t, a0, 1]
            bz = frames[t, a2, 2] - frames[t, a0, 2]
            cx = ay * bz - az * by
            cy = az * bx - ax * bz
            cz = ax * by - ay * bx
            nrm = math.sqrt(cx * cx + cy * cy + cz * cz)
            if nrm == 0.0:
                return 0.0, grad, f
            norms[f] = nrm
            normals[f, 0] = cx / nrm
            normals[f, 1] = cy / nrm
            normals[f, 2] = cz / nrm
            gn[f, 0] = 0.0
            gn[f, 1] = 0.0
            gn[f, 2] = 0.0
        for k in range(n_pairs):
            f = pairs[k, 0]
            g = pairs[k, 1]
            dot = (
                normals[f, 0] * normals[g, 0]
                + normals[f, 1] * normals[g, 1]
                + normals[f, 2] * normals[g, 2]
            )
            loss += 1.0 - dot
            for c in range(3):
                gn[f, c] -= scale * normals[g, c]
                gn[g, c] -= scale * normals[f, c]
        for f in range(n_faces):
            a0 = faces[f, 0]
            a1 = faces[f, 1]
            a2 = faces[f, 2]
            nx, ny, nz = normals[f, 0], normals[f, 1], normals[f, 2]
            proj = nx * gn[f, 0] + ny * gn[f, 1] + nz * gn[f, 2]
            gcx = (gn[f, 0] - nx * proj) / norms[f]
            gcy = (gn[f, 1] - ny * proj) / norms[f]
            gcz = (gn[f, 2] - nz * proj) / norms[f]
            ax = frames[t, a1, 0] - frames[t, a0, 0]
            ay = frames[t, a1, 1] - frames[t, a0, 1]
            az = frames[t, a1, 2] - frames[t, a0, 2]
            bx = frames[t, a2, 0] - frames[t, a0, 0]
            by = frames[t, a2, 1] - frames[t, a0, 1]
            bz = frames[t, a2, 2] - frames[t, a0, 2]
            # dL/da = b x gc, dL/db = gc x a
            gax = by * gcz - bz * gcy
            gay = bz * gcx - bx * gcz
            gaz = bx * gcy - by * gcx
            gbx = gcy * az - gcz * ay
            gby = gcz * ax - gcx * az
            gbz = gcx * ay - gcy * ax
            grad[t, a1, 0] += gax
            grad[t, a1, 1] += gay
            grad[t, a1, 2] += gaz
            grad[t, a2, 0] += gbx
            grad[t, a2, 1] += gby
            grad[t, a2, 2] += gbz
            grad[t, a0, 0] -= gax + gbx
            grad[t, a0, 1] -= gay + gby
            grad[t, a0, 2] -= gaz + gbz
    return loss * scale, grad, -1


@njit(**_JIT)
def _window(R, h, tau, mu):
    z = (R - h) / tau
    if z >= 0.0:
        e = math.exp(-z)
        ell = e / (1.0 + e)
    else:
        ell = 1.0 / (1.0 + math.exp(z))
    q = -math.expm1(-mu * ell)
    return ell, q


@njit(**_JIT)
def render_plane_kernel(frames, origin, normal, axis_u, axis_v, su, sv, rows, cols,
                        h, tau, mu, cutoff, q_min, sdm, grad):
    """Boundary loss of one plane for every frame; adds its gradient into ``grad``.

    ``sdm`` is (N, rows*cols). Returns per-frame losses (N,). Each active
    vertex receives exactly one ``+=`` into ``grad``.
    """
    n_frames, n_verts, _ = frames.shape
    n_pix = rows * cols
    ox, oy, oz = origin[0], origin[1], origin[2]
    nx, ny, nz = normal[0], normal[1], normal[2]
    ux, uy, uz = axis_u[0], axis_u[1], axis_u[2]
    vx, vy, vz = axis_v[0], axis_v[1], axis_v[2]
    losses = np.zeros(n_frames)
    # per-pixel product of (1 - w q); Q = 1 - keep
    keep = np.ones(n_pix)
    touched = np.empty(4 * n_verts, dtype=np.int64)
    is_touched = np.zeros(n_pix, dtype=np.bool_)
    act_i = np.empty(n_verts, dtype=np.int64)
    act_row = np.empty(n_verts)
    act_col = np.empty(n_verts)
    act_ell = np.empty(n_verts)
    act_q = np.empty(n_verts)
    act_sign = np.empty(n_verts)

    for t in range(n_frames):
        n_act = 0
        n_touched = 0
        for i in range(n_verts):
            rx = frames[t, i, 0] - ox
            ry = frames[t, i, 1] - oy
            rz = frames[t, i, 2] - oz
            d = rx * nx + ry * ny + rz * nz
            R = abs(d)
            if R >= cutoff:
                continue
            ell, q = _window(R, h, tau, mu)
            if q <= q_min:
                continue
            col = (rx * ux + ry * uy + rz * uz) / su
            row = (rx * vx + ry * vy + rz * vz) / sv
            act_i[n_act] = i
            act_row[n_act] = row
            act_col[n_act] = col
            act_ell[n_act] = ell
            act_q[n_act] = q
            act_sign[n_act] = 1.0 if d > 0.0 else (-1.0 if d < 0.0 else 0.0)
            n_act += 1
            r0f = math.floor(row)
            c0f = math.floor(col)
            fr = row - r0f
            fc = col - c0f
            r0 = int(r0f)
            c0 = int(c0f)
            for corner in range(4):
                dr = corner // 2
                dc = corner % 2
                rr = r0 + dr
                cc = c0 + dc
                if rr < 0 or rr >= rows or cc < 0 or cc >= cols:
                    continue
                w = (fr if dr else 1.0 - fr) * (fc if dc else 1.0 - fc)
                p = rr * cols + cc
                if not is_touched[p]:
                    is_touched[p] = True
                    touched[n_touched] = p
                    n_touched += 1
                keep[p] *= 1.0 - w * q

        # touched pixels in first-touch order: deterministic for fixed inputs
        total = 0.0
        for k in range(n_touched):
            p = touched[k]
            total += sdm[t, p] * (1.0 - keep[p])
        losses[t] = total / n_pix

        for k in range(n_act):
            i = act_i[k]
            row = act_row[k]
            col = act_col[k]
            ell = act_ell[k]
            q = act_q[k]
            r0f = math.floor(row)
            c0f = math.floor(col)
            fr = row - r0f
            fc = col - c0f
            r0 = int(r0f)
            c0 = int(c0f)
            dL_dq = 0.0
            dL_drow = 0.0
            dL_dcol = 0.0
            for corner in range(4):
                dr = corner // 2
                dc = corner % 2
                rr = r0 + dr
                cc = c0 + dc
                if rr < 0 or rr >= rows or cc < 0 or cc >= cols:
                    continue
                wr = fr if dr else 1.0 - fr
                wc = fc if dc else 1.0 - fc
                w = wr * wc
                p = rr * cols + cc
                g = sdm[t, p] / n_pix * keep[p] / (1.0 - w * q)
                dL_dq += g * w
                gw = g * q
                dL_drow += gw * (1.0 if dr else -1.0) * wc
                dL_dcol += gw * wr * (1.0 if dc else -1.0)
            dq_dR = mu * (1.0 - q) * (-ell * (1.0 - ell) / tau)
            gR = dL_dq * dq_dR * act_sign[k]
            grow = dL_drow / sv
            gcol = dL_dcol / su
            grad[t, i, 0] += gR * nx + grow * vx + gcol * ux
            grad[t, i, 1] += gR * ny + grow * vy + gcol * uy
            grad[t, i, 2] += gR * nz + grow * vz + gcol * uz

        for k in range(n_touched):
            p = touched[k]
            keep[p] = 1.0
            is_touched[p] = False
    return losses
