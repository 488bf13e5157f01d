"""Pure-numpy fallback kernels: shift-and-gemm convolution, plain Jacobi.

Convolution is expressed as kh*kw strided tensordots so the fallback stays
vectorized; it exists for environments without a working numba and as the
cross-check side of the kernel benchmark.
"""

import numpy as np

from .jacobi import jacobi_sweeps

NAME = "numpy"

__all__ = ["NAME", "jacobi_sweeps", "conv2d_forward", "conv2d_backward_input",
           "conv2d_backward_weight", "warmup"]


def conv2d_forward(xp, w, stride, groups):
    b_n, cin, hp, wp = xp.shape
    cout, cig, kh, kw = w.shape
    cog = cout // groups
    oh = (hp - kh) // stride + 1
    ow = (wp - kw) // stride + 1
    out = np.zeros((b_n, cout, oh, ow), dtype=np.float64)
    for g in range(groups):
        xg = xp[:, g * cig:(g + 1) * cig]
        wg = w[g * cog:(g + 1) * cog]
        og = out[:, g * cog:(g + 1) * cog]
        for u in range(kh):
            for t in range(kw):
                xs = xg[:, :, u:u + (oh - 1) * stride + 1:stride, t:t + (ow - 1) * stride + 1:stride]
                # [B,cig,OH,OW] x [cog,cig] -> [B,OH,OW,cog]
                contrib = np.tensordot(xs, wg[:, :, u, t], axes=([1], [1]))
                og += contrib.transpose(0, 3, 1, 2)
    return out


def conv2d_backward_input(gout, w, stride, groups, hp, wp):
    b_n, cout, oh, ow = gout.shape
    _, cig, kh, kw = w.shape
    cog = cout // groups
    cin = cig * groups
    gxp = np.zeros((b_n, cin, hp, wp), dtype=np.float64)
    for g in range(groups):
        gg = gout[:, g * cog:(g + 1) * cog]
        wg = w[g * cog:(g + 1) * cog]
        tgt = gxp[:, g * cig:(g + 1) * cig]
        for u in range(kh):
            for t in range(kw):
                # [B,cog,OH,OW] x [cog,cig] -> [B,OH,OW,cig]
                contrib = np.tensordot(gg, wg[:, :, u, t], axes=([1], [0]))
                tgt[:, :, u:u + (oh - 1) * stride + 1:stride, t:t + (ow - 1) * stride + 1:stride] += \
                    contrib.transpose(0, 3, 1, 2)
    return gxp


def conv2d_backward_weight(gout, xp, stride, groups, kh, kw):
    b_n, cout, oh, ow = gout.shape
    cin = xp.shape[1]
    cig = cin // groups
    cog = cout // groups
    gw = np.zeros((cout, cig, kh, kw), dtype=np.float64)
    for g in range(groups):
        gg = gout[:, g * cog:(g + 1) * cog]
        xg = xp[:, g * cig:(g + 1) * cig]
        for u in range(kh):
            for t in range(kw):
                xs = xg[:, :, u:u + (oh - 1) * stride + 1:stride, t:t + (ow - 1) * stride + 1:stride]
                # [B,cog,OH,OW] x [B,cig,OH,OW] -> [cog,cig]
                gw[g * cog:(g + 1) * cog, :, u, t] = np.tensordot(gg, xs, axes=([0, 2, 3], [0, 2, 3]))
    return gw


def warmup():
    pass
