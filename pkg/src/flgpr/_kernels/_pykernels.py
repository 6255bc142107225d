"""Pure numpy implementations of the hot loops.

Same signatures and semantics as the compiled ``_ckernels`` module; used
when the extension is unavailable or ``FLGPR_PURE_PYTHON=1``.
"""

import numpy as np


def _window_sums(cs, r0, c0, size, valid_r, valid_c):
    # cs is the zero-padded 2-D cumulative sum; returns box sums for all
    # valid top-left corners (r0 + valid_r, c0 + valid_c).
    r = valid_r[:, None] + r0
    c = valid_c[None, :] + c0
    return cs[r + size, c + size] - cs[r, c + size] - cs[r + size, c] + cs[r, c]


def rx_lambda(z, fore, back):
    """RX statistic ``(mu_t - mu_b)**2 / var_b`` at every pixel of ``z``.

    Pixels whose background window does not fit are 0, as are pixels whose
    ring variance is not positive.
    """
    z = np.ascontiguousarray(z, dtype=np.float64)
    h, w = z.shape
    out = np.zeros((h, w), dtype=np.float64)
    hb, hf = back // 2, fore // 2
    if h < back or w < back:
        return out
    cs = np.zeros((h + 1, w + 1))
    cs[1:, 1:] = z.cumsum(0).cumsum(1)
    cs2 = np.zeros((h + 1, w + 1))
    cs2[1:, 1:] = (z * z).cumsum(0).cumsum(1)

    rows = np.arange(hb, h - back + hb + 1)
    cols = np.arange(hb, w - back + hb + 1)
    sb = _window_sums(cs, -hb, -hb, back, rows, cols)
    sb2 = _window_sums(cs2, -hb, -hb, back, rows, cols)
    sf = _window_sums(cs, -hf, -hf, fore, rows, cols)
    sf2 = _window_sums(cs2, -hf, -hf, fore, rows, cols)

    nf = float(fore * fore)
    nb = float(back * back - fore * fore)
    mu_t = sf / nf
    mu_b = (sb - sf) / nb
    var_b = (sb2 - sf2) / nb - mu_b * mu_b
    lam = np.zeros_like(mu_t)
    ok = var_b > 0
    lam[ok] = (mu_t[ok] - mu_b[ok]) ** 2 / var_b[ok]
    out[rows[0]:rows[-1] + 1, cols[0]:cols[-1] + 1] = lam
    return out


def dpmeans(points, radius, max_iter):
    """DP-means over 2-D points in the given scan order.

    Returns ``(labels, centers, objective_trace, converged)``.
    """
    pts = np.ascontiguousarray(points, dtype=np.float64)
    n = pts.shape[0]
    r2 = float(radius) ** 2
    labels = np.full(n, -1, dtype=np.int64)
    centers = np.empty((0, 2))
    trace = []
    converged = False
    for _ in range(max_iter):
        changed = False
        cur = [c for c in centers]
        for i in range(n):
            p = pts[i]
            if cur:
                c_arr = np.asarray(cur)
                d2 = ((c_arr - p) ** 2).sum(axis=1)
                k = int(np.argmin(d2))
                if d2[k] > r2:
                    cur.append(p.copy())
                    k = len(cur) - 1
            else:
                cur.append(p.copy())
                k = 0
            if labels[i] != k:
                changed = True
                labels[i] = k
        counts = np.bincount(labels, minlength=len(cur))
        keep = np.flatnonzero(counts > 0)
        remap = np.full(len(cur), -1, dtype=np.int64)
        remap[keep] = np.arange(keep.size)
        labels = remap[labels]
        sums = np.zeros((keep.size, 2))
        np.add.at(sums, labels, pts)
        centers = sums / counts[keep][:, None]
        resid = pts - centers[labels]
        trace.append(float((resid ** 2).sum() + r2 * keep.size))
        if not changed:
            converged = True
            break
    return labels, centers, np.asarray(trace), converged


def smo_solve(K, y, C, tol, max_iter, track=False):
    """Soft-margin SVM dual by SMO with second-order working-set selection.

    Minimises ``0.5 a'Qa - e'a`` with ``Q = yy' * K``, ``0 <= a <= C`` and
    ``y'a = 0``. Returns ``(alpha, rho, n_iter, gap, trace)`` where the
    decision function is ``sum(a*y*k) - rho`` and ``trace`` holds the dual
    objective ``e'a - 0.5 a'Qa`` after every update (empty unless ``track``).
    """
    K = np.ascontiguousarray(K, dtype=np.float64)
    y = np.ascontiguousarray(y, dtype=np.float64)
    n = y.size
    alpha = np.zeros(n)
    G = -np.ones(n)
    diag = np.diag(K).copy()
    tau = 1e-12
    trace = []
    it = 0
    gap = np.inf
    while True:
        yg = -y * G
        up = ((y > 0) & (alpha < C)) | ((y < 0) & (alpha > 0))
        low = ((y > 0) & (alpha > 0)) | ((y < 0) & (alpha < C))
        if not up.any() or not low.any():
            gap = 0.0
            break
        i = int(np.flatnonzero(up)[np.argmax(yg[up])])
        gmax = yg[i]
        gmin = yg[low].min()
        gap = gmax - gmin
        if gap < tol:
            break
        if it >= max_iter:
            break
        cand = low & (yg < gmax)
        b = gmax - yg
        a = diag[i] + diag - 2.0 * K[i]
        a = np.where(a > 0, a, tau)
        score = np.where(cand, -(b * b) / a, np.inf)
        j = int(np.argmin(score))

        Ki, Kj = K[i], K[j]
        yi, yj = y[i], y[j]
        ai_old, aj_old = alpha[i], alpha[j]
        quad = diag[i] + diag[j] - 2.0 * K[i, j]
        if quad <= 0:
            quad = tau
        if yi != yj:
            delta = (-G[i] - G[j]) / quad
            diff = ai_old - aj_old
            ai, aj = ai_old + delta, aj_old + delta
            if diff > 0:
                if aj < 0:
                    aj, ai = 0.0, diff
            else:
                if ai < 0:
                    ai, aj = 0.0, -diff
            if diff > 0:
                if ai > C:
                    ai, aj = C, C - diff
            else:
                if aj > C:
                    aj, ai = C, C + diff
        else:
            delta = (G[i] - G[j]) / quad
            s = ai_old + aj_old
            ai, aj = ai_old - delta, aj_old + delta
            if s > C:
                if ai > C:
                    ai, aj = C, s - C
            else:
                if aj < 0:
                    aj, ai = 0.0, s
            if s > C:
                if aj > C:
                    aj, ai = C, s - C
            else:
                if ai < 0:
                    ai, aj = 0.0, s
        alpha[i], alpha[j] = ai, aj
        dai, daj = ai - ai_old, aj - aj_old
        G += y * (Ki * (yi * dai) + Kj * (yj * daj))
        it += 1
        if track:
            trace.append(float(-0.5 * alpha @ (G - 1.0)))

    yg = -y * G
    free = (alpha > 0) & (alpha < C)
    if free.any():
        rho = -float(yg[free].mean())
    else:
        up = ((y > 0) & (alpha < C)) | ((y < 0) & (alpha > 0))
        low = ((y > 0) & (alpha > 0)) | ((y < 0) & (alpha < C))
        ub = yg[up].max() if up.any() else yg.max()
        lb = yg[low].min() if low.any() else yg.min()
        rho = -float(0.5 * (ub + lb))
    return alpha, rho, it, float(gap), np.asarray(trace)
