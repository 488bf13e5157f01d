"""Cyclic Jacobi eigensolver kernel, shared by both backends.

Written against the numpy subset numba's nopython mode supports, so the
exact same source compiles under @njit and runs as plain Python; both paths
therefore produce bitwise-identical results.
"""

import numpy as np

OFF_TOL = 1e-10
# Relative floor: once the off-diagonal mass reaches rounding level for the
# matrix's scale, further sweeps cannot improve it.
FLOOR_REL = 1e-14
MAX_SWEEPS = 100


def jacobi_sweeps(a, v):
    """Diagonalize symmetric `a` in place, accumulating rotations into `v`.

    Returns 1.0 when the off-diagonal Frobenius norm converged below
    OFF_TOL (or the relative rounding floor), else 0.0.
    """
    n = a.shape[0]
    for _ in range(MAX_SWEEPS):
        off2 = 0.0
        fro2 = 0.0
        for i in range(n):
            for j in range(n):
                x = a[i, j]
                fro2 += x * x
                if i != j:
                    off2 += x * x
        if off2 ** 0.5 < OFF_TOL or off2 ** 0.5 < FLOOR_REL * (fro2 ** 0.5):
            return 1.0
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if apq == 0.0:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                if theta >= 0.0:
                    t = 1.0 / (theta + np.sqrt(theta * theta + 1.0))
                else:
                    t = -1.0 / (-theta + np.sqrt(theta * theta + 1.0))
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                for k in range(n):
                    akp = a[k, p]
                    akq = a[k, q]
                    a[k, p] = c * akp - s * akq
                    a[k, q] = s * akp + c * akq
                for k in range(n):
                    apk = a[p, k]
                    aqk = a[q, k]
                    a[p, k] = c * apk - s * aqk
                    a[q, k] = s * apk + c * aqk
                for k in range(n):
                    vkp = v[k, p]
                    vkq = v[k, q]
                    v[k, p] = c * vkp - s * vkq
                    v[k, q] = s * vkp + c * vkq
    # Final convergence check after the sweep budget.
    off2 = 0.0
    fro2 = 0.0
    for i in range(n):
        for j in range(n):
            x = a[i, j]
            fro2 += x * x
            if i != j:
                off2 += x * x
    if off2 ** 0.5 < OFF_TOL or off2 ** 0.5 < FLOOR_REL * (fro2 ** 0.5):
        return 1.0
    return 0.0
