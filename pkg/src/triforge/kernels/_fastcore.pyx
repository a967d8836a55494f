# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled hot kernels: row scatter-add and the soft rasterizer.

Mirrors triforge.kernels.reference function-for-function; the reference
module documents the math.  Loops are serial so results are deterministic.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport ceil, exp, floor, log1p, sqrt

cnp.import_array()

DEF LOG_CAP = 0.999999999999  # 1 - 1e-12
DEF EXP_CAP = 600.0


cdef inline double _sigmoid(double x) noexcept nogil:
    cdef double e
    if x >= 0.0:
        return 1.0 / (1.0 + exp(-x))
    e = exp(x)
    return e / (1.0 + e)


cdef inline double _clip01(double t) noexcept nogil:
    if t < 0.0:
        return 0.0
    if t > 1.0:
        return 1.0
    return t


def scatter_add_rows(cnp.ndarray[cnp.float64_t, ndim=2] out,
                     idx_in,
                     cnp.ndarray[cnp.float64_t, ndim=2] src):
    """out[idx[j], :] += src[j, :] in index order, in place."""
    cdef cnp.ndarray[cnp.int64_t, ndim=1] idx = np.ascontiguousarray(idx_in, dtype=np.int64)
    cdef Py_ssize_t n = idx.shape[0]
    cdef Py_ssize_t k = src.shape[1]
    cdef Py_ssize_t j, c, row
    for j in range(n):
        row = idx[j]
        for c in range(k):
            out[row, c] += src[j, c]


def scatter_add_1d(cnp.ndarray[cnp.float64_t, ndim=1] out,
                   idx_in,
                   cnp.ndarray[cnp.float64_t, ndim=1] src):
    """out[idx[j]] += src[j] in index order, in place."""
    cdef cnp.ndarray[cnp.int64_t, ndim=1] idx = np.ascontiguousarray(idx_in, dtype=np.int64)
    cdef Py_ssize_t n = idx.shape[0]
    cdef Py_ssize_t j
    for j in range(n):
        out[idx[j]] += src[j]


cdef struct PairGeom:
    double la, lb, lc, s2
    bint inside
    double d2
    int emin
    double tmin
    double ba, bb, bc
    double z_surf


cdef inline void _geom_dist(double px, double py,
                            double ax, double ay, double bx, double by,
                            double cx, double cy,
                            PairGeom* g) noexcept nogil:
    cdef double la, lb, lc, s2
    cdef double ux, uy, vx, vy, ex, ey, rx, ry, ee, t, qx, qy, d2e
    cdef double best, tbest
    cdef int e, ebest

    la = (bx - px) * (cy - py) - (by - py) * (cx - px)
    lb = (cx - px) * (ay - py) - (cy - py) * (ax - px)
    lc = (ax - px) * (by - py) - (ay - py) * (bx - px)
    s2 = la + lb + lc
    g.la = la; g.lb = lb; g.lc = lc; g.s2 = s2
    if s2 > 0.0:
        g.inside = la >= 0.0 and lb >= 0.0 and lc >= 0.0
    elif s2 < 0.0:
        g.inside = la <= 0.0 and lb <= 0.0 and lc <= 0.0
    else:
        g.inside = False

    best = 1e300
    ebest = 0
    tbest = 0.0
    for e in range(3):
        if e == 0:
            ux = ax; uy = ay; vx = bx; vy = by
        elif e == 1:
            ux = bx; uy = by; vx = cx; vy = cy
        else:
            ux = cx; uy = cy; vx = ax; vy = ay
        ex = vx - ux; ey = vy - uy
        rx = px - ux; ry = py - uy
        ee = ex * ex + ey * ey
        if ee < 1e-300:
            ee = 1e-300
        t = _clip01((rx * ex + ry * ey) / ee)
        qx = ux + t * ex; qy = uy + t * ey
        d2e = (px - qx) * (px - qx) + (py - qy) * (py - qy)
        if d2e < best:
            best = d2e
            ebest = e
            tbest = t
    g.d2 = best
    g.emin = ebest
    g.tmin = tbest


cdef inline void _geom_bary(double za, double zb, double zc, PairGeom* g) noexcept nogil:
    cdef double ba, bb, bc, inv_zs
    if g.inside:
        ba = g.la / g.s2; bb = g.lb / g.s2; bc = g.lc / g.s2
    else:
        ba = 0.0; bb = 0.0; bc = 0.0
        if g.emin == 0:
            ba = 1.0 - g.tmin; bb = g.tmin
        elif g.emin == 1:
            bb = 1.0 - g.tmin; bc = g.tmin
        else:
            bc = 1.0 - g.tmin; ba = g.tmin
    g.ba = ba; g.bb = bb; g.bc = bc
    inv_zs = ba / za + bb / zb + bc / zc
    g.z_surf = 1.0 / inv_zs


cdef inline void _bbox(double ax, double ay, double bx, double by,
                       double cx, double cy, double radius,
                       Py_ssize_t h, Py_ssize_t w,
                       Py_ssize_t* i_lo, Py_ssize_t* i_hi,
                       Py_ssize_t* j_lo, Py_ssize_t* j_hi) noexcept nogil:
    cdef double x_lo = ax, x_hi = ax, y_lo = ay, y_hi = ay
    if bx < x_lo: x_lo = bx
    if cx < x_lo: x_lo = cx
    if bx > x_hi: x_hi = bx
    if cx > x_hi: x_hi = cx
    if by < y_lo: y_lo = by
    if cy < y_lo: y_lo = cy
    if by > y_hi: y_hi = by
    if cy > y_hi: y_hi = cy
    x_lo -= radius; x_hi += radius
    y_lo -= radius; y_hi += radius
    j_lo[0] = <Py_ssize_t>ceil((x_lo + 1.0) * 0.5 * w - 0.5)
    j_hi[0] = <Py_ssize_t>floor((x_hi + 1.0) * 0.5 * w - 0.5)
    i_lo[0] = <Py_ssize_t>ceil((1.0 - y_hi) * 0.5 * h - 0.5)
    i_hi[0] = <Py_ssize_t>floor((1.0 - y_lo) * 0.5 * h - 0.5)
    if j_lo[0] < 0: j_lo[0] = 0
    if i_lo[0] < 0: i_lo[0] = 0
    if j_hi[0] > w - 1: j_hi[0] = w - 1
    if i_hi[0] > h - 1: i_hi[0] = h - 1


def softras_forward(v2d_in, z_in, faces_in, Py_ssize_t h, Py_ssize_t w,
                    double tau, double gamma, double far, double bg_weight,
                    double radius):
    cdef cnp.ndarray[cnp.float64_t, ndim=2] v2d = np.ascontiguousarray(v2d_in, dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] z = np.ascontiguousarray(z_in, dtype=np.float64)
    cdef cnp.ndarray[cnp.int64_t, ndim=2] faces = np.ascontiguousarray(faces_in, dtype=np.int64)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] acc_log = np.zeros(h * w)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] acc_num = np.zeros(h * w)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] acc_den = np.zeros(h * w)

    cdef Py_ssize_t f, i, j, lin, i_lo, i_hi, j_lo, j_hi
    cdef Py_ssize_t ia, ib, ic
    cdef double ax, ay, bx, by, cx, cy, za, zb, zc
    cdef double px, py, wgt, wc, u, ez, logit
    cdef PairGeom g

    for f in range(faces.shape[0]):
        ia = faces[f, 0]; ib = faces[f, 1]; ic = faces[f, 2]
        ax = v2d[ia, 0]; ay = v2d[ia, 1]
        bx = v2d[ib, 0]; by = v2d[ib, 1]
        cx = v2d[ic, 0]; cy = v2d[ic, 1]
        za = z[ia]; zb = z[ib]; zc = z[ic]
        _bbox(ax, ay, bx, by, cx, cy, radius, h, w, &i_lo, &i_hi, &j_lo, &j_hi)
        for i in range(i_lo, i_hi + 1):
            py = 1.0 - 2.0 * (i + 0.5) / h
            for j in range(j_lo, j_hi + 1):
                px = 2.0 * (j + 0.5) / w - 1.0
                _geom_dist(px, py, ax, ay, bx, by, cx, cy, &g)
                if not g.inside and g.d2 > radius * radius:
                    continue
                _geom_bary(za, zb, zc, &g)
                logit = g.d2 / tau if g.inside else -g.d2 / tau
                wgt = _sigmoid(logit)
                wc = wgt if wgt < LOG_CAP else LOG_CAP
                ez = (far - g.z_surf) / gamma
                if ez > EXP_CAP:
                    ez = EXP_CAP
                u = wgt * exp(ez)
                lin = i * w + j
                acc_log[lin] += log1p(-wc)
                acc_num[lin] += u * g.z_surf
                acc_den[lin] += u

    mask = -np.expm1(acc_log)
    depth = (acc_num + bg_weight * far) / (acc_den + bg_weight)
    return (mask.reshape(h, w), depth.reshape(h, w),
            np.asarray(acc_log).reshape(h, w),
            np.asarray(acc_num).reshape(h, w),
            np.asarray(acc_den).reshape(h, w))


def softras_backward(v2d_in, z_in, faces_in, Py_ssize_t h, Py_ssize_t w,
                     double tau, double gamma, double far, double bg_weight,
                     double radius,
                     acc_log_in, acc_num_in, acc_den_in,
                     g_mask_in, g_depth_in):
    cdef cnp.ndarray[cnp.float64_t, ndim=2] v2d = np.ascontiguousarray(v2d_in, dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] z = np.ascontiguousarray(z_in, dtype=np.float64)
    cdef cnp.ndarray[cnp.int64_t, ndim=2] faces = np.ascontiguousarray(faces_in, dtype=np.int64)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] acc_log = np.ascontiguousarray(acc_log_in, dtype=np.float64).reshape(-1)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] acc_num = np.ascontiguousarray(acc_num_in, dtype=np.float64).reshape(-1)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] acc_den = np.ascontiguousarray(acc_den_in, dtype=np.float64).reshape(-1)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] gm_img = np.ascontiguousarray(g_mask_in, dtype=np.float64).reshape(-1)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] gd_img = np.ascontiguousarray(g_depth_in, dtype=np.float64).reshape(-1)
    cdef cnp.ndarray[cnp.float64_t, ndim=2] g_v2d = np.zeros_like(v2d)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] g_z = np.zeros_like(z)

    cdef Py_ssize_t f, i, j, lin, i_lo, i_hi, j_lo, j_hi
    cdef Py_ssize_t ia, ib, ic
    cdef double ax, ay, bx, by, cx, cy, za, zb, zc
    cdef double px, py, wgt, wc, u, ez, e_z, logit, sgn
    cdef double den, depth, one_minus_mask, gm, gd
    cdef double g_logit, g_zsurf, zs2, g_ba, g_bb, g_bc, gsum
    cdef double g_la, g_lb, g_lc, s2safe
    cdef double gax, gay, gbx, gby, gcx, gcy
    cdef double g_d2, ux, uy, vx, vy, exv, eyv, rxv, ryv, ee, t, qx, qy
    cdef double dqx, dqy, g_t, gi0, gi1
    cdef PairGeom g

    for f in range(faces.shape[0]):
        ia = faces[f, 0]; ib = faces[f, 1]; ic = faces[f, 2]
        ax = v2d[ia, 0]; ay = v2d[ia, 1]
        bx = v2d[ib, 0]; by = v2d[ib, 1]
        cx = v2d[ic, 0]; cy = v2d[ic, 1]
        za = z[ia]; zb = z[ib]; zc = z[ic]
        _bbox(ax, ay, bx, by, cx, cy, radius, h, w, &i_lo, &i_hi, &j_lo, &j_hi)
        for i in range(i_lo, i_hi + 1):
            py = 1.0 - 2.0 * (i + 0.5) / h
            for j in range(j_lo, j_hi + 1):
                px = 2.0 * (j + 0.5) / w - 1.0
                lin = i * w + j
                gm = gm_img[lin]
                gd = gd_img[lin]
                if gm == 0.0 and gd == 0.0:
                    continue
                _geom_dist(px, py, ax, ay, bx, by, cx, cy, &g)
                if not g.inside and g.d2 > radius * radius:
                    continue
                _geom_bary(za, zb, zc, &g)
                sgn = 1.0 if g.inside else -1.0
                logit = sgn * g.d2 / tau
                wgt = _sigmoid(logit)
                wc = wgt if wgt < LOG_CAP else LOG_CAP
                ez = (far - g.z_surf) / gamma
                if ez > EXP_CAP:
                    ez = EXP_CAP
                e_z = exp(ez)
                u = wgt * e_z
                den = acc_den[lin] + bg_weight
                depth = (acc_num[lin] + bg_weight * far) / den
                one_minus_mask = exp(acc_log[lin])

                g_logit = gm * one_minus_mask * (wgt * (1.0 - wgt) / (1.0 - wc))
                g_logit += gd * e_z * (g.z_surf - depth) / den * wgt * (1.0 - wgt)
                g_zsurf = gd * u * (1.0 - (g.z_surf - depth) / gamma) / den

                zs2 = g.z_surf * g.z_surf
                g_z[ia] += g_zsurf * zs2 * g.ba / (za * za)
                g_z[ib] += g_zsurf * zs2 * g.bb / (zb * zb)
                g_z[ic] += g_zsurf * zs2 * g.bc / (zc * zc)
                g_ba = -g_zsurf * zs2 / za
                g_bb = -g_zsurf * zs2 / zb
                g_bc = -g_zsurf * zs2 / zc

                gax = 0.0; gay = 0.0; gbx = 0.0; gby = 0.0; gcx = 0.0; gcy = 0.0

                if g.inside:
                    s2safe = g.s2 if g.s2 != 0.0 else 1.0
                    gsum = (g_ba * g.ba + g_bb * g.bb + g_bc * g.bc) / s2safe
                    g_la = g_ba / s2safe - gsum
                    g_lb = g_bb / s2safe - gsum
                    g_lc = g_bc / s2safe - gsum
                    gbx += g_la * (cy - py); gby += g_la * -(cx - px)
                    gcx += g_la * -(by - py); gcy += g_la * (bx - px)
                    gcx += g_lb * (ay - py); gcy += g_lb * -(ax - px)
                    gax += g_lb * -(cy - py); gay += g_lb * (cx - px)
                    gax += g_lc * (by - py); gay += g_lc * -(bx - px)
                    gbx += g_lc * -(ay - py); gby += g_lc * (ax - px)

                g_d2 = g_logit * sgn / tau
                t = g.tmin
                if g.emin == 0:
                    ux = ax; uy = ay; vx = bx; vy = by
                elif g.emin == 1:
                    ux = bx; uy = by; vx = cx; vy = cy
                else:
                    ux = cx; uy = cy; vx = ax; vy = ay
                exv = vx - ux; eyv = vy - uy
                rxv = px - ux; ryv = py - uy
                ee = exv * exv + eyv * eyv
                if ee < 1e-300:
                    ee = 1e-300
                qx = ux + t * exv; qy = uy + t * eyv
                dqx = qx - px; dqy = qy - py

                gi0 = 0.0; gi1 = 0.0
                if t > 0.0 and t < 1.0:
                    gi0 = g_d2 * 2.0 * dqx * (1.0 - t)
                    gi1 = g_d2 * 2.0 * dqy * (1.0 - t)
                    if g.emin == 0:
                        gax += gi0; gay += gi1
                        gbx += g_d2 * 2.0 * dqx * t; gby += g_d2 * 2.0 * dqy * t
                    elif g.emin == 1:
                        gbx += gi0; gby += gi1
                        gcx += g_d2 * 2.0 * dqx * t; gcy += g_d2 * 2.0 * dqy * t
                    else:
                        gcx += gi0; gcy += gi1
                        gax += g_d2 * 2.0 * dqx * t; gay += g_d2 * 2.0 * dqy * t
                    if not g.inside:
                        if g.emin == 0:
                            g_t = g_bb - g_ba
                        elif g.emin == 1:
                            g_t = g_bc - g_bb
                        else:
                            g_t = g_ba - g_bc
                        gi0 = g_t * (2.0 * t * exv - exv - rxv) / ee
                        gi1 = g_t * (2.0 * t * eyv - eyv - ryv) / ee
                        if g.emin == 0:
                            gax += gi0; gay += gi1
                        elif g.emin == 1:
                            gbx += gi0; gby += gi1
                        else:
                            gcx += gi0; gcy += gi1
                        gi0 = g_t * (rxv - 2.0 * t * exv) / ee
                        gi1 = g_t * (ryv - 2.0 * t * eyv) / ee
                        if g.emin == 0:
                            gbx += gi0; gby += gi1
                        elif g.emin == 1:
                            gcx += gi0; gcy += gi1
                        else:
                            gax += gi0; gay += gi1
                elif t == 0.0:
                    gi0 = g_d2 * 2.0 * (ux - px)
                    gi1 = g_d2 * 2.0 * (uy - py)
                    if g.emin == 0:
                        gax += gi0; gay += gi1
                    elif g.emin == 1:
                        gbx += gi0; gby += gi1
                    else:
                        gcx += gi0; gcy += gi1
                else:
                    gi0 = g_d2 * 2.0 * (vx - px)
                    gi1 = g_d2 * 2.0 * (vy - py)
                    if g.emin == 0:
                        gbx += gi0; gby += gi1
                    elif g.emin == 1:
                        gcx += gi0; gcy += gi1
                    else:
                        gax += gi0; gay += gi1

                g_v2d[ia, 0] += gax; g_v2d[ia, 1] += gay
                g_v2d[ib, 0] += gbx; g_v2d[ib, 1] += gby
                g_v2d[ic, 0] += gcx; g_v2d[ic, 1] += gcy

    return np.asarray(g_v2d), np.asarray(g_z)
