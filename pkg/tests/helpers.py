"""Shared test oracles: finite differences, exact eigenvalues, error metrics.

These stay independent of the engine's backward pass; they only ever call
forward evaluations (or sympy) to produce expected values.
"""

import numpy as np
import sympy as sp

from statdistill.engine import Array, backward

FD_STEP = 1e-5


def rel_err(a, b, floor=1e-12):
    """Norm-relative disagreement between two gradient arrays."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = max(np.linalg.norm(a.ravel()), np.linalg.norm(b.ravel()), floor)
    return np.linalg.norm((a - b).ravel()) / denom


def finite_diff_grad(f, x0, h=FD_STEP):
    """Central-difference gradient of scalar f at x0, elementwise."""
    x0 = np.asarray(x0, dtype=np.float64)
    g = np.zeros_like(x0)
    flat = x0.ravel()
    gf = g.ravel()
    for i in range(flat.size):
        xp = flat.copy()
        xm = flat.copy()
        xp[i] += h
        xm[i] -= h
        gf[i] = (f(xp.reshape(x0.shape)) - f(xm.reshape(x0.shape))) / (2.0 * h)
    return g


def gradcheck(build, x0, rng=None, h=FD_STEP):
    """Compare reverse-mode and central-difference gradients of `build`.

    `build` maps an engine Array to an output Array; the output is reduced
    to a scalar through a fixed random projection so non-scalar ops are
    covered too. Returns (analytic, fd, rel_err).
    """
    x0 = np.asarray(x0, dtype=np.float64)
    rng = rng or np.random.default_rng(0)
    probe = Array(x0, requires_grad=True)
    out = build(probe)
    r = rng.standard_normal(out.data.shape)
    backward(out, seed=r)
    ana = probe.grad.copy()

    def f(xn):
        return float((build(Array(xn)).data * r).sum())

    fd = finite_diff_grad(f, x0, h=h)
    return ana, fd, rel_err(ana, fd)


def charpoly_eigvals(m_int):
    """Exact ascending eigenvalues of an integer symmetric matrix.

    Characteristic polynomial with exact integer coefficients, real roots
    isolated symbolically, then evaluated to 30 digits: immune to the
    repeated-root ill-conditioning numeric root finders suffer.
    """
    mat = sp.Matrix(np.asarray(m_int, dtype=int).tolist())
    lam = sp.symbols("lam")
    poly = sp.Poly(mat.charpoly(lam), lam)
    roots = poly.real_roots()
    vals = sorted(float(r.evalf(30)) for r in roots)
    if len(vals) != mat.shape[0]:
        raise AssertionError("expected an all-real spectrum for a symmetric matrix")
    return np.array(vals)
