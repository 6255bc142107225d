# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot loops: RX windows, DP-means passes, SMO."""

import numpy as np
cimport numpy as cnp
from libc.math cimport INFINITY

cnp.import_array()


def rx_lambda(z, int fore, int back):
    cdef cnp.ndarray[cnp.float64_t, ndim=2] zz = np.ascontiguousarray(z, dtype=np.float64)
    cdef Py_ssize_t h = zz.shape[0], w = zz.shape[1]
    out_arr = np.zeros((h, w), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    if h < back or w < back:
        return out_arr
    cdef double[:, ::1] cs = np.zeros((h + 1, w + 1))
    cdef double[:, ::1] cs2 = np.zeros((h + 1, w + 1))
    cdef Py_ssize_t r, c, r0, c0, r1, c1
    cdef double v, rowsum, rowsum2
    for r in range(h):
        rowsum = 0.0
        rowsum2 = 0.0
        for c in range(w):
            v = zz[r, c]
            rowsum += v
            rowsum2 += v * v
            cs[r + 1, c + 1] = cs[r, c + 1] + rowsum
            cs2[r + 1, c + 1] = cs2[r, c + 1] + rowsum2
    cdef int hb = back // 2, hf = fore // 2
    cdef double nf = <double>(fore * fore)
    cdef double nb = <double>(back * back - fore * fore)
    cdef double sb, sb2, sf, sf2, mu_t, mu_b, var_b, d
    for r in range(hb, h - back + hb + 1):
        for c in range(hb, w - back + hb + 1):
            r0 = r - hb
            c0 = c - hb
            r1 = r0 + back
            c1 = c0 + back
            sb = cs[r1, c1] - cs[r0, c1] - cs[r1, c0] + cs[r0, c0]
            sb2 = cs2[r1, c1] - cs2[r0, c1] - cs2[r1, c0] + cs2[r0, c0]
            r0 = r - hf
            c0 = c - hf
            r1 = r0 + fore
            c1 = c0 + fore
            sf = cs[r1, c1] - cs[r0, c1] - cs[r1, c0] + cs[r0, c0]
            sf2 = cs2[r1, c1] - cs2[r0, c1] - cs2[r1, c0] + cs2[r0, c0]
            mu_t = sf / nf
            mu_b = (sb - sf) / nb
            var_b = (sb2 - sf2) / nb - mu_b * mu_b
            if var_b > 0:
                d = mu_t - mu_b
                out[r, c] = d * d / var_b
    return out_arr


def dpmeans(points, double radius, int max_iter):
    cdef double[:, ::1] pts = np.ascontiguousarray(points, dtype=np.float64)
    cdef Py_ssize_t n = pts.shape[0]
    cdef double r2 = radius * radius
    labels_arr = np.full(n, -1, dtype=np.int64)
    cdef long long[::1] labels = labels_arr
    # capacity n: at most one cluster per point
    cen_arr = np.empty((max(n, 1), 2))
    cdef double[:, ::1] cen = cen_arr
    sums_arr = np.zeros((max(n, 1), 2))
    cdef double[:, ::1] sums = sums_arr
    cnt_arr = np.zeros(max(n, 1), dtype=np.int64)
    cdef long long[::1] cnt = cnt_arr
    remap_arr = np.zeros(max(n, 1), dtype=np.int64)
    cdef long long[::1] remap = remap_arr
    cdef Py_ssize_t ncen = 0, i, k, best, it, nkeep
    cdef double dx, dy, d2, bestd, obj
    cdef bint changed
    trace = []
    converged = False
    for it in range(max_iter):
        changed = False
        for i in range(n):
            best = -1
            bestd = INFINITY
            for k in range(ncen):
                dx = cen[k, 0] - pts[i, 0]
                dy = cen[k, 1] - pts[i, 1]
                d2 = dx * dx + dy * dy
                if d2 < bestd:
                    bestd = d2
                    best = k
            if best < 0 or bestd > r2:
                cen[ncen, 0] = pts[i, 0]
                cen[ncen, 1] = pts[i, 1]
                best = ncen
                ncen += 1
            if labels[i] != best:
                changed = True
                labels[i] = best
        for k in range(ncen):
            cnt[k] = 0
            sums[k, 0] = 0.0
            sums[k, 1] = 0.0
        for i in range(n):
            k = labels[i]
            cnt[k] += 1
            sums[k, 0] += pts[i, 0]
            sums[k, 1] += pts[i, 1]
        nkeep = 0
        for k in range(ncen):
            if cnt[k] > 0:
                remap[k] = nkeep
                cen[nkeep, 0] = sums[k, 0] / cnt[k]
                cen[nkeep, 1] = sums[k, 1] / cnt[k]
                nkeep += 1
            else:
                remap[k] = -1
        ncen = nkeep
        obj = 0.0
        for i in range(n):
            labels[i] = remap[labels[i]]
            dx = pts[i, 0] - cen[labels[i], 0]
            dy = pts[i, 1] - cen[labels[i], 1]
            obj += dx * dx + dy * dy
        trace.append(obj + r2 * ncen)
        if not changed:
            converged = True
            break
    return labels_arr, cen_arr[:ncen].copy(), np.asarray(trace), converged


def smo_solve(K, y, double C, double tol, long long max_iter, bint track=False):
    cdef double[:, ::1] Km = np.ascontiguousarray(K, dtype=np.float64)
    cdef double[::1] yv = np.ascontiguousarray(y, dtype=np.float64)
    cdef Py_ssize_t n = yv.shape[0]
    alpha_arr = np.zeros(n)
    cdef double[::1] alpha = alpha_arr
    G_arr = -np.ones(n)
    cdef double[::1] G = G_arr
    cdef double tau = 1e-12
    cdef Py_ssize_t t, i, j
    cdef long long it = 0
    cdef double gmax, gmin, yg, b, a, s, best, gap = INFINITY
    cdef double quad, delta, diff, ssum, ai, aj, ai_old, aj_old, dai, daj, yi, yj
    cdef bint in_up, in_low
    trace = []
    while True:
        i = -1
        gmax = -INFINITY
        gmin = INFINITY
        for t in range(n):
            yg = -yv[t] * G[t]
            if yv[t] > 0:
                in_up = alpha[t] < C
                in_low = alpha[t] > 0
            else:
                in_up = alpha[t] > 0
                in_low = alpha[t] < C
            if in_up and yg > gmax:
                gmax = yg
                i = t
            if in_low and yg < gmin:
                gmin = yg
        if i < 0 or gmin == INFINITY:
            gap = 0.0
            break
        gap = gmax - gmin
        if gap < tol or it >= max_iter:
            break
        j = -1
        best = INFINITY
        for t in range(n):
            if yv[t] > 0:
                in_low = alpha[t] > 0
            else:
                in_low = alpha[t] < C
            if not in_low:
                continue
            yg = -yv[t] * G[t]
            if yg < gmax:
                b = gmax - yg
                a = Km[i, i] + Km[t, t] - 2.0 * Km[i, t]
                if a <= 0:
                    a = tau
                s = -(b * b) / a
                if s < best:
                    best = s
                    j = t
        yi = yv[i]
        yj = yv[j]
        ai_old = alpha[i]
        aj_old = alpha[j]
        quad = Km[i, i] + Km[j, j] - 2.0 * Km[i, j]
        if quad <= 0:
            quad = tau
        if yi != yj:
            delta = (-G[i] - G[j]) / quad
            diff = ai_old - aj_old
            ai = ai_old + delta
            aj = aj_old + delta
            if diff > 0:
                if aj < 0:
                    aj = 0.0
                    ai = diff
            else:
                if ai < 0:
                    ai = 0.0
                    aj = -diff
            if diff > 0:
                if ai > C:
                    ai = C
                    aj = C - diff
            else:
                if aj > C:
                    aj = C
                    ai = C + diff
        else:
            delta = (G[i] - G[j]) / quad
            ssum = ai_old + aj_old
            ai = ai_old - delta
            aj = aj_old + delta
            if ssum > C:
                if ai > C:
                    ai = C
                    aj = ssum - C
            else:
                if aj < 0:
                    aj = 0.0
                    ai = ssum
            if ssum > C:
                if aj > C:
                    aj = C
                    ai = ssum - C
            else:
                if ai < 0:
                    ai = 0.0
                    aj = ssum
        alpha[i] = ai
        alpha[j] = aj
        dai = (ai - ai_old) * yi
        daj = (aj - aj_old) * yj
        for t in range(n):
            G[t] += yv[t] * (Km[i, t] * dai + Km[j, t] * daj)
        it += 1
        if track:
            s = 0.0
            for t in range(n):
                s += alpha[t] * (G[t] - 1.0)
            trace.append(-0.5 * s)

    cdef double acc = 0.0, ub = -INFINITY, lb = INFINITY
    cdef Py_ssize_t nfree = 0
    for t in range(n):
        yg = -yv[t] * G[t]
        if 0 < alpha[t] < C:
            acc += yg
            nfree += 1
        if yv[t] > 0:
            in_up = alpha[t] < C
            in_low = alpha[t] > 0
        else:
            in_up = alpha[t] > 0
            in_low = alpha[t] < C
        if in_up and yg > ub:
            ub = yg
        if in_low and yg < lb:
            lb = yg
    if nfree > 0:
        rho = -acc / nfree
    else:
        rho = -0.5 * (ub + lb)
    return alpha_arr, rho, it, gap, np.asarray(trace)
