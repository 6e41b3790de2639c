"""Dual coordinate descent for the L1-loss linear SVM (compiled inner loop)."""

import numpy as np
from numba import njit


@njit(cache=True)
def dual_cd(X, y, upper, alpha, w, tol, kkt_tol, max_iter, seed):
    """Optimize ``alpha`` in place; ``w`` is kept equal to sum(alpha*y*x).

    ``X`` must already carry the constant bias column.  Variables stuck at a
    bound are shrunk out of the active set; the full set is restored before
    every convergence check.  Returns ``(epochs, gap, max_projected_gradient)``.
    """
    n, d = X.shape
    np.random.seed(seed)
    qdiag = np.empty(n)
    for i in range(n):
        s = 0.0
        for j in range(d):
            s += X[i, j] * X[i, j]
        qdiag[i] = s
    index = np.arange(n)
    active = n
    pg_max_old = np.inf
    pg_min_old = -np.inf
    eps_pg = 1.0
    gap = np.inf
    pg_viol = np.inf
    epoch = 0
    while epoch < max_iter:
        epoch += 1
        # shuffle the active prefix
        for k in range(active - 1, 0, -1):
            r = np.random.randint(0, k + 1)
            index[k], index[r] = index[r], index[k]
        pg_max_new = -np.inf
        pg_min_new = np.inf
        k = 0
        while k < active:
            i = index[k]
            s = 0.0
            for j in range(d):
                s += w[j] * X[i, j]
            g = y[i] * s - 1.0
            a = alpha[i]
            pg = 0.0
            if a <= 0.0:
                if g > pg_max_old:
                    active -= 1
                    index[k], index[active] = index[active], index[k]
                    continue
                if g < 0.0:
                    pg = g
            elif a >= upper[i]:
                if g < pg_min_old:
                    active -= 1
                    index[k], index[active] = index[active], index[k]
                    continue
                if g > 0.0:
                    pg = g
            else:
                pg = g
            if pg > pg_max_new:
                pg_max_new = pg
            if pg < pg_min_new:
                pg_min_new = pg
            if abs(pg) > 1e-14 and qdiag[i] > 0.0:
                na = min(max(a - g / qdiag[i], 0.0), upper[i])
                delta = (na - a) * y[i]
                if delta != 0.0:
                    for j in range(d):
                        w[j] += delta * X[i, j]
                alpha[i] = na
            k += 1
        if pg_max_new - pg_min_new <= eps_pg:
            if active < n:
                # restore the full problem before judging convergence
                active = n
                pg_max_old = np.inf
                pg_min_old = -np.inf
                continue
            gap, pg_viol = duality_gap(X, y, upper, alpha, w)
            if gap <= tol and pg_viol <= kkt_tol:
                break
            eps_pg *= 0.1
            pg_max_old = np.inf
            pg_min_old = -np.inf
            continue
        pg_max_old = pg_max_new if pg_max_new > 0.0 else np.inf
        pg_min_old = pg_min_new if pg_min_new < 0.0 else -np.inf
    else:
        gap, pg_viol = duality_gap(X, y, upper, alpha, w)
    return epoch, gap, pg_viol


@njit(cache=True)
def duality_gap(X, y, upper, alpha, w):
    """Relative primal-dual gap and the largest projected-gradient violation."""
    n, d = X.shape
    ww = 0.0
    for j in range(d):
        ww += w[j] * w[j]
    hinge = 0.0
    asum = 0.0
    pg_max = 0.0
    for i in range(n):
        s = 0.0
        for j in range(d):
            s += w[j] * X[i, j]
        m = y[i] * s
        if m < 1.0:
            hinge += upper[i] * (1.0 - m)
        asum += alpha[i]
        g = m - 1.0
        if alpha[i] <= 0.0:
            pg = min(g, 0.0)
        elif alpha[i] >= upper[i]:
            pg = max(g, 0.0)
        else:
            pg = g
        pg_max = max(pg_max, abs(pg))
    primal = 0.5 * ww + hinge
    dual = asum - 0.5 * ww
    return (primal - dual) / max(1.0, abs(primal)), pg_max
