"""Pure-numpy implementations of the hot kernels.

Same contract as the compiled backend in ``_fastcore.pyx``; selected at
import by ``triforge.kernels`` when the extension is unavailable (or when
``TRIFORGE_KERNELS=python``).

The soft rasterizer follows the classic profile: per-pixel face influence
w = sigmoid(sign * d^2 / tau) with d the screen-space distance to the face
boundary (positive inside), mask = 1 - prod(1 - w), and depth a
softmax-over-faces blend (weights w * exp((far - z)/gamma)) against a weak
background term.  Faces only touch pixels within ``radius`` (NDC units) of
their bounding box; beyond that sigmoid(-d^2/tau) < 2e-16 and contributions
vanish at double precision.
"""

from __future__ import annotations

import numpy as np
from scipy.special import expit

_LOG_CAP = 1.0 - 1e-12
_EXP_CAP = 600.0


def _f8(a):
    return np.ascontiguousarray(np.asarray(a, dtype=np.float64))


def _i8(a):
    return np.ascontiguousarray(np.asarray(a, dtype=np.int64))


def scatter_add_rows(out: np.ndarray, idx: np.ndarray, src: np.ndarray) -> None:
    """out[idx[j], :] += src[j, :] in index order, in place."""
    np.add.at(out, _i8(idx), src)


def scatter_add_1d(out: np.ndarray, idx: np.ndarray, src: np.ndarray) -> None:
    """out[idx[j]] += src[j] in index order, in place."""
    np.add.at(out, _i8(idx), src)


# ---------------------------------------------------------------------------
# soft rasterizer
# ---------------------------------------------------------------------------


def _pixel_ranges(v2d, faces, h, w, radius):
    """Dilated per-face bounding boxes in pixel indices (inclusive)."""
    fx = v2d[faces, 0]  # (F, 3)
    fy = v2d[faces, 1]
    x_lo, x_hi = fx.min(axis=1) - radius, fx.max(axis=1) + radius
    y_lo, y_hi = fy.min(axis=1) - radius, fy.max(axis=1) + radius
    # pixel centers: x_n(j) = 2(j+0.5)/w - 1, y_n(i) = 1 - 2(i+0.5)/h
    j_lo = np.ceil((x_lo + 1.0) * 0.5 * w - 0.5).astype(np.int64)
    j_hi = np.floor((x_hi + 1.0) * 0.5 * w - 0.5).astype(np.int64)
    i_lo = np.ceil((1.0 - y_hi) * 0.5 * h - 0.5).astype(np.int64)
    i_hi = np.floor((1.0 - y_lo) * 0.5 * h - 0.5).astype(np.int64)
    j_lo, j_hi = np.clip(j_lo, 0, w - 1), np.clip(j_hi, 0, w - 1)
    i_lo, i_hi = np.clip(i_lo, 0, h - 1), np.clip(i_hi, 0, h - 1)
    return i_lo, i_hi, j_lo, j_hi


def _build_pairs(v2d, faces, h, w, radius):
    """Flatten (face, pixel) candidate pairs, face-major, row-major in bbox."""
    i_lo, i_hi, j_lo, j_hi = _pixel_ranges(v2d, faces, h, w, radius)
    rows = np.maximum(i_hi - i_lo + 1, 0)
    cols = np.maximum(j_hi - j_lo + 1, 0)
    counts = rows * cols
    total = int(counts.sum())
    if total == 0:
        return (np.empty(0, np.int64),) * 3
    fidx = np.repeat(np.arange(len(faces), dtype=np.int64), counts)
    offs = np.concatenate(([0], np.cumsum(counts)))[:-1]
    k = np.arange(total, dtype=np.int64) - np.repeat(offs, counts)
    cw = cols[fidx]
    pi = i_lo[fidx] + k // cw
    pj = j_lo[fidx] + k % cw
    return fidx, pi, pj


def _pair_geometry(v2d, z, faces, fidx, pi, pj, h, w, radius=None):
    """Per-pair signed distance, influence ingredients and clamped barycentrics.

    Returns a dict of (P,)-arrays; see keys below.  Everything is computed in
    NDC units; z values are eye-space depths interpolated perspective-correct
    at the in-triangle point nearest to the pixel center.  When ``radius`` is
    given, outside pairs farther than it are dropped (influence < 2e-16 at
    the default 4*sqrt(tau) cut).
    """
    px = 2.0 * (pj + 0.5) / w - 1.0
    py = 1.0 - 2.0 * (pi + 0.5) / h
    tri = faces[fidx]  # (P, 3)
    ax, ay = v2d[tri[:, 0], 0], v2d[tri[:, 0], 1]
    bx, by = v2d[tri[:, 1], 0], v2d[tri[:, 1], 1]
    cx, cy = v2d[tri[:, 2], 0], v2d[tri[:, 2], 1]

    # unnormalized barycentrics (cross products toward each vertex)
    la = (bx - px) * (cy - py) - (by - py) * (cx - px)
    lb = (cx - px) * (ay - py) - (cy - py) * (ax - px)
    lc = (ax - px) * (by - py) - (ay - py) * (bx - px)
    s2 = la + lb + lc  # twice the signed area
    pos = s2 > 0
    inside = np.where(
        pos, (la >= 0) & (lb >= 0) & (lc >= 0), (la <= 0) & (lb <= 0) & (lc <= 0)
    ) & (s2 != 0)

    # squared distance to each edge segment; keep argmin edge and its t
    d2s = np.empty((3, len(px)))
    ts = np.empty((3, len(px)))
    ends = [(ax, ay, bx, by), (bx, by, cx, cy), (cx, cy, ax, ay)]
    for e, (ux, uy, vx, vy) in enumerate(ends):
        ex, ey = vx - ux, vy - uy
        rx, ry = px - ux, py - uy
        ee = ex * ex + ey * ey
        t = np.clip((rx * ex + ry * ey) / np.maximum(ee, 1e-300), 0.0, 1.0)
        qx, qy = ux + t * ex, uy + t * ey
        d2s[e] = (px - qx) ** 2 + (py - qy) ** 2
        ts[e] = t
    emin = np.argmin(d2s, axis=0)
    ar = np.arange(len(px))
    d2 = d2s[emin, ar]
    tmin = ts[emin, ar]

    if radius is not None:
        keep = inside | (d2 <= radius * radius)
        fidx, pi, pj = fidx[keep], pi[keep], pj[keep]
        px, py, tri = px[keep], py[keep], tri[keep]
        ax, ay, bx, by = ax[keep], ay[keep], bx[keep], by[keep]
        cx, cy = cx[keep], cy[keep]
        la, lb, lc, s2 = la[keep], lb[keep], lc[keep], s2[keep]
        inside, d2, emin, tmin = inside[keep], d2[keep], emin[keep], tmin[keep]

    # clamped barycentrics for depth interpolation
    s2safe = np.where(s2 == 0, 1.0, s2)
    ba = np.where(inside, la / s2safe, 0.0)
    bb = np.where(inside, lb / s2safe, 0.0)
    bc = np.where(inside, lc / s2safe, 0.0)
    out = ~inside
    for e, (i0, i1) in enumerate([(0, 1), (1, 2), (2, 0)]):
        sel = out & (emin == e)
        vals = [np.zeros_like(ba) for _ in range(3)]
        vals[i0] = 1.0 - tmin
        vals[i1] = tmin
        ba = np.where(sel, vals[0], ba)
        bb = np.where(sel, vals[1], bb)
        bc = np.where(sel, vals[2], bc)

    za, zb, zc = z[tri[:, 0]], z[tri[:, 1]], z[tri[:, 2]]
    inv_zs = ba / za + bb / zb + bc / zc
    z_surf = 1.0 / inv_zs

    return {
        "px": px, "py": py, "tri": tri, "fidx": fidx, "pi": pi, "pj": pj,
        "la": la, "lb": lb, "lc": lc, "s2": s2, "inside": inside,
        "d2": d2, "emin": emin, "tmin": tmin,
        "ba": ba, "bb": bb, "bc": bc,
        "za": za, "zb": zb, "zc": zc, "z_surf": z_surf,
        "ax": ax, "ay": ay, "bx": bx, "by": by, "cx": cx, "cy": cy,
    }


def softras_forward(v2d, z, faces, h, w, tau, gamma, far, bg_weight, radius):
    """Soft-rasterize triangles into mask/depth accumulators.

    v2d: (M, 2) NDC vertex positions; z: (M,) positive eye depths;
    faces: (F, 3) indices.  Returns (mask, depth, acc_log, acc_num, acc_den)
    with image shapes (h, w); the accumulators feed softras_backward.
    """
    v2d, z, faces = _f8(v2d), _f8(z), _i8(faces)
    acc_log = np.zeros(h * w)
    acc_num = np.zeros(h * w)
    acc_den = np.zeros(h * w)
    if len(faces):
        fidx, pi, pj = _build_pairs(v2d, faces, h, w, radius)
        if len(fidx):
            g = _pair_geometry(v2d, z, faces, fidx, pi, pj, h, w, radius)
            sgn = np.where(g["inside"], 1.0, -1.0)
            wgt = expit(sgn * g["d2"] / tau)
            e = np.exp(np.minimum((far - g["z_surf"]) / gamma, _EXP_CAP))
            u = wgt * e
            lin = g["pi"] * w + g["pj"]
            scatter_add_1d(acc_log, lin, np.log1p(-np.minimum(wgt, _LOG_CAP)))
            scatter_add_1d(acc_num, lin, u * g["z_surf"])
            scatter_add_1d(acc_den, lin, u)
    mask = -np.expm1(acc_log)
    depth = (acc_num + bg_weight * far) / (acc_den + bg_weight)
    return (
        mask.reshape(h, w), depth.reshape(h, w),
        acc_log.reshape(h, w), acc_num.reshape(h, w), acc_den.reshape(h, w),
    )


def softras_backward(
    v2d, z, faces, h, w, tau, gamma, far, bg_weight, radius,
    acc_log, acc_num, acc_den, g_mask, g_depth,
):
    """Gradients of (mask, depth) w.r.t. 2-D vertices and vertex depths."""
    v2d, z, faces = _f8(v2d), _f8(z), _i8(faces)
    g_v2d = np.zeros_like(v2d)
    g_z = np.zeros_like(z)
    if len(faces) == 0:
        return g_v2d, g_z
    fidx, pi, pj = _build_pairs(v2d, faces, h, w, radius)
    if len(fidx) == 0:
        return g_v2d, g_z

    g = _pair_geometry(v2d, z, faces, fidx, pi, pj, h, w, radius)
    fidx = g["fidx"]
    lin = g["pi"] * w + g["pj"]
    acc_log = acc_log.reshape(-1)[lin]
    den = acc_den.reshape(-1)[lin] + bg_weight
    num = acc_num.reshape(-1)[lin] + bg_weight * far
    depth = num / den
    one_minus_mask = np.exp(acc_log)
    gm = g_mask.reshape(-1)[lin]
    gd = g_depth.reshape(-1)[lin]

    sgn = np.where(g["inside"], 1.0, -1.0)
    wgt = expit(sgn * g["d2"] / tau)
    wc = np.minimum(wgt, _LOG_CAP)
    e = np.exp(np.minimum((far - g["z_surf"]) / gamma, _EXP_CAP))
    u = wgt * e
    z_s = g["z_surf"]

    # d mask / d logit, with the product regrouped to stay finite at saturation
    g_logit = gm * one_minus_mask * (wgt * (1.0 - wgt) / (1.0 - wc))
    # depth path: d depth/d w and d depth/d z_surf
    g_w_depth = gd * e * (z_s - depth) / den
    g_logit = g_logit + g_w_depth * wgt * (1.0 - wgt)
    g_zsurf = gd * u * (1.0 - (z_s - depth) / gamma) / den

    # z_surf = 1 / (ba/za + bb/zb + bc/zc)
    zs2 = z_s * z_s
    for b_key, z_arr, corner in (("ba", g["za"], 0), ("bb", g["zb"], 1), ("bc", g["zc"], 2)):
        gz_i = g_zsurf * zs2 * g[b_key] / (z_arr * z_arr)
        scatter_add_1d(g_z, g["tri"][:, corner], gz_i)
    g_ba = -g_zsurf * zs2 / g["za"]
    g_bb = -g_zsurf * zs2 / g["zb"]
    g_bc = -g_zsurf * zs2 / g["zc"]

    gax = np.zeros(len(fidx)); gay = np.zeros(len(fidx))
    gbx = np.zeros(len(fidx)); gby = np.zeros(len(fidx))
    gcx = np.zeros(len(fidx)); gcy = np.zeros(len(fidx))
    px, py = g["px"], g["py"]
    ax, ay, bx, by, cx, cy = g["ax"], g["ay"], g["bx"], g["by"], g["cx"], g["cy"]
    inside = g["inside"]

    # --- barycentric path (inside pixels): b_i = l_i / s2 --------------------
    s2safe = np.where(g["s2"] == 0, 1.0, g["s2"])
    gsum = (g_ba * g["ba"] + g_bb * g["bb"] + g_bc * g["bc"]) / s2safe
    g_la = np.where(inside, g_ba / s2safe - gsum, 0.0)
    g_lb = np.where(inside, g_bb / s2safe - gsum, 0.0)
    g_lc = np.where(inside, g_bc / s2safe - gsum, 0.0)
    # la = cross(B-p, C-p): d/dB = (Cy-py, -(Cx-px)), d/dC = (-(By-py), Bx-px)
    gbx += g_la * (cy - py); gby += g_la * -(cx - px)
    gcx += g_la * -(by - py); gcy += g_la * (bx - px)
    # lb = cross(C-p, A-p)
    gcx += g_lb * (ay - py); gcy += g_lb * -(ax - px)
    gax += g_lb * -(cy - py); gay += g_lb * (cx - px)
    # lc = cross(A-p, B-p)
    gax += g_lc * (by - py); gay += g_lc * -(bx - px)
    gbx += g_lc * -(ay - py); gby += g_lc * (ax - px)

    # --- edge path: distance d2 (all pixels) and edge barycentrics (outside) --
    g_d2 = g_logit * sgn / tau
    edges = [
        ((ax, ay), (bx, by), (gax, gay), (gbx, gby), 0, 1),
        ((bx, by), (cx, cy), (gbx, gby), (gcx, gcy), 1, 2),
        ((cx, cy), (ax, ay), (gcx, gcy), (gax, gay), 2, 0),
    ]
    g_bary = [g_ba, g_bb, g_bc]
    for e_id, ((ux, uy), (vx, vy), (gu_x, gu_y), (gv_x, gv_y), i0, i1) in enumerate(edges):
        sel = g["emin"] == e_id
        if not sel.any():
            continue
        t = g["tmin"]
        exv, eyv = vx - ux, vy - uy
        rxv, ryv = px - ux, py - uy
        ee = np.maximum(exv * exv + eyv * eyv, 1e-300)
        qx, qy = ux + t * exv, uy + t * eyv
        interior = sel & (t > 0.0) & (t < 1.0)
        at0 = sel & (t == 0.0)
        at1 = sel & (t == 1.0)

        # d2 = |p - q|^2
        dqx, dqy = qx - px, qy - py
        gu_x += np.where(interior, g_d2 * 2.0 * dqx * (1.0 - t), 0.0) + np.where(at0, g_d2 * 2.0 * (ux - px), 0.0)
        gu_y += np.where(interior, g_d2 * 2.0 * dqy * (1.0 - t), 0.0) + np.where(at0, g_d2 * 2.0 * (uy - py), 0.0)
        gv_x += np.where(interior, g_d2 * 2.0 * dqx * t, 0.0) + np.where(at1, g_d2 * 2.0 * (vx - px), 0.0)
        gv_y += np.where(interior, g_d2 * 2.0 * dqy * t, 0.0) + np.where(at1, g_d2 * 2.0 * (vy - py), 0.0)

        # outside pixels take barycentrics from this edge: b[i0]=1-t, b[i1]=t
        osel = interior & ~inside
        if osel.any():
            g_t = np.where(osel, g_bary[i1] - g_bary[i0], 0.0)
            # t = (r.e)/(e.e); grad_U t = (2t e - e - r)/ee, grad_V t = (r - 2t e)/ee
            gu_x += g_t * (2.0 * t * exv - exv - rxv) / ee
            gu_y += g_t * (2.0 * t * eyv - eyv - ryv) / ee
            gv_x += g_t * (rxv - 2.0 * t * exv) / ee
            gv_y += g_t * (ryv - 2.0 * t * eyv) / ee

    tri = g["tri"]
    for corner, (gx_arr, gy_arr) in enumerate(((gax, gay), (gbx, gby), (gcx, gcy))):
        scatter_add_rows(g_v2d, tri[:, corner], np.stack([gx_arr, gy_arr], axis=1))
    return g_v2d, g_z
