"""Numba-compiled hot kernels: grouped 2-D convolution and the Jacobi sweep.

All kernels are single-threaded with fastmath disabled so results are
bitwise-reproducible run to run.
"""

import numpy as np
from numba import njit

from .jacobi import jacobi_sweeps as _jacobi_py

NAME = "numba"

jacobi_sweeps = njit(cache=True)(_jacobi_py)


@njit(cache=True)
def conv2d_forward(xp, w, stride, groups):
    b_n, cin, hp, wp = xp.shape
    cout, cig, kh, kw = w.shape
    cog = cout // groups
    oh = (hp - kh) // stride + 1
    ow = (wp - kw) // stride + 1
    out = np.zeros((b_n, cout, oh, ow), dtype=np.float64)
    for b in range(b_n):
        for g in range(groups):
            for oc_local in range(cog):
                oc = g * cog + oc_local
                for i in range(oh):
                    for j in range(ow):
                        acc = 0.0
                        for ic_local in range(cig):
                            ic = g * cig + ic_local
                            for u in range(kh):
                                for t in range(kw):
                                    acc += xp[b, ic, i * stride + u, j * stride + t] * w[oc, ic_local, u, t]
                        out[b, oc, i, j] = acc
    return out


@njit(cache=True)
def conv2d_backward_input(gout, w, stride, groups, hp, wp):
    b_n, cout, oh, ow = gout.shape
    _, cig, kh, kw = w.shape
    cog = cout // groups
    cin = cig * groups
    gxp = np.zeros((b_n, cin, hp, wp), dtype=np.float64)
    for b in range(b_n):
        for g in range(groups):
            for oc_local in range(cog):
                oc = g * cog + oc_local
                for i in range(oh):
                    for j in range(ow):
                        go = gout[b, oc, i, j]
                        if go == 0.0:
                            continue
                        for ic_local in range(cig):
                            ic = g * cig + ic_local
                            for u in range(kh):
                                for t in range(kw):
                                    gxp[b, ic, i * stride + u, j * stride + t] += go * w[oc, ic_local, u, t]
    return gxp


@njit(cache=True)
def conv2d_backward_weight(gout, xp, stride, groups, kh, kw):
    b_n, cout, oh, ow = gout.shape
    cin = xp.shape[1]
    cig = cin // groups
    cog = cout // groups
    gw = np.zeros((cout, cig, kh, kw), dtype=np.float64)
    for b in range(b_n):
        for g in range(groups):
            for oc_local in range(cog):
                oc = g * cog + oc_local
                for i in range(oh):
                    for j in range(ow):
                        go = gout[b, oc, i, j]
                        if go == 0.0:
                            continue
                        for ic_local in range(cig):
                            ic = g * cig + ic_local
                            for u in range(kh):
                                for t in range(kw):
                                    gw[oc, ic_local, u, t] += go * xp[b, ic, i * stride + u, j * stride + t]
    return gw


def warmup():
    """Trigger compilation of every kernel on toy shapes."""
    x = np.zeros((1, 2, 4, 4))
    w = np.zeros((2, 2, 3, 3))
    out = conv2d_forward(x, w, 1, 1)
    conv2d_backward_input(out, w, 1, 1, 4, 4)
    conv2d_backward_weight(out, x, 1, 1, 3, 3)
    a = np.eye(2)
    v = np.eye(2)
    jacobi_sweeps(a, v)
