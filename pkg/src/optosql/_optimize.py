"""Small derivative-free helpers shared by the model and limit searches."""

import numpy as np

INV_PHI = (np.sqrt(5.0) - 1.0) / 2.0


def golden_section(func, lo, hi, tol, max_iter=200):
    """Vectorized golden-section minimization.

    `lo` and `hi` may be arrays; `func` must accept and return arrays of the
    same shape. Iterates until every bracket is narrower than `tol`.
    """
    a = np.array(lo, dtype=float, copy=True)
    b = np.array(hi, dtype=float, copy=True)
    c = b - INV_PHI * (b - a)
    d = a + INV_PHI * (b - a)
    fc, fd = func(c), func(d)
    for _ in range(max_iter):
        if np.all(np.abs(b - a) < tol):
            break
        left = fc < fd
        # keep [a, d] where f(c) < f(d), else [c, b]
        b = np.where(left, d, b)
        a = np.where(left, a, c)
        d_new = np.where(left, c, a + INV_PHI * (b - a))
        c_new = np.where(left, b - INV_PHI * (b - a), d)
        fd_new = np.where(left, fc, np.nan)
        fc_new = np.where(left, np.nan, fd)
        c, d = c_new, d_new
        need_c = np.isnan(fc_new)
        need_d = np.isnan(fd_new)
        if np.any(need_c):
            fc_new = np.where(need_c, func(c), fc_new)
        if np.any(need_d):
            fd_new = np.where(need_d, func(d), fd_new)
        fc, fd = fc_new, fd_new
    x = 0.5 * (a + b)
    return x, func(x)
