"""Compiled inner loops for convolution and max pooling.

The forward convolution accumulates each output element strictly in
(channel, kernel-row, kernel-col) order starting from zero, with the bias
added last. That makes the result bit-identical to a plain quadruple-loop
implementation, which the test suite relies on. Data is shuffled to a
channels-last layout internally because transposes are exact and the
channels-last inner loop vectorizes.
"""

import numpy as np
from numba import config, njit, prange

# The portable threading backend; keeps numba from probing TBB/OMP.
config.THREADING_LAYER = "workqueue"


@njit(parallel=True, cache=True)
def conv2d_forward(xp, wt, bias, stride, out):
    # xp: (N, Hp, Wp, C) padded input, wt: (C, kh, kw, K), out: (N, Ho, Wo, K) zeroed
    n_batch, out_h, out_w, n_out = out.shape
    n_in, k_h, k_w = wt.shape[0], wt.shape[1], wt.shape[2]
    for n in prange(n_batch):
        for p in range(out_h):
            for q in range(out_w):
                acc = out[n, p, q]
                for c in range(n_in):
                    for i in range(k_h):
                        for j in range(k_w):
                            xv = xp[n, p * stride + i, q * stride + j, c]
                            wrow = wt[c, i, j]
                            for k in range(n_out):
                                acc[k] += xv * wrow[k]
                for k in range(n_out):
                    acc[k] += bias[k]


@njit(parallel=True, cache=True)
def conv2d_backward_input(gy, wb, stride, dxp):
    # gy: (N, Ho, Wo, K), wb: (kh, kw, K, C), dxp: (N, Hp, Wp, C) zeroed
    n_batch, out_h, out_w, n_out = gy.shape
    k_h, k_w, _, n_in = wb.shape
    for n in prange(n_batch):
        for p in range(out_h):
            for q in range(out_w):
                g = gy[n, p, q]
                for i in range(k_h):
                    for j in range(k_w):
                        dst = dxp[n, p * stride + i, q * stride + j]
                        for c in range(n_in):
                            acc = 0.0
                            for k in range(n_out):
                                acc += g[k] * wb[i, j, k, c]
                            dst[c] += acc


@njit(parallel=True, cache=True)
def conv2d_backward_weight(gy, xp, stride, dw):
    # gy: (N, Ho, Wo, K), xp: (N, Hp, Wp, C), dw: (K, C, kh, kw) zeroed
    n_batch, out_h, out_w, n_out = gy.shape
    _, n_in, k_h, k_w = dw.shape
    for k in prange(n_out):
        for n in range(n_batch):
            for p in range(out_h):
                for q in range(out_w):
                    g = gy[n, p, q, k]
                    for i in range(k_h):
                        for j in range(k_w):
                            xrow = xp[n, p * stride + i, q * stride + j]
                            for c in range(n_in):
                                dw[k, c, i, j] += g * xrow[c]


@njit(parallel=True, cache=True)
def maxpool2d_forward(x, k, stride, padding, out, arg_i, arg_j):
    # x: (N, C, H, W); out/arg_*: (N, C, Ho, Wo). Padding cells never win:
    # the scan simply skips out-of-range coordinates, and ties go to the
    # first maximal element in row-major window order.
    n_batch, n_chan, height, width = x.shape
    out_h, out_w = out.shape[2], out.shape[3]
    for nc in prange(n_batch * n_chan):
        n = nc // n_chan
        c = nc - n * n_chan
        for p in range(out_h):
            for q in range(out_w):
                best = -np.inf
                bi = -1
                bj = -1
                for i in range(k):
                    y = p * stride + i - padding
                    if y < 0 or y >= height:
                        continue
                    for j in range(k):
                        z = q * stride + j - padding
                        if z < 0 or z >= width:
                            continue
                        v = x[n, c, y, z]
                        if v > best:
                            best = v
                            bi = y
                            bj = z
                out[n, c, p, q] = best
                arg_i[n, c, p, q] = bi
                arg_j[n, c, p, q] = bj


@njit(parallel=True, cache=True)
def maxpool2d_backward(gy, arg_i, arg_j, dx):
    n_batch, n_chan, out_h, out_w = gy.shape
    for nc in prange(n_batch * n_chan):
        n = nc // n_chan
        c = nc - n * n_chan
        for p in range(out_h):
            for q in range(out_w):
                dx[n, c, arg_i[n, c, p, q], arg_j[n, c, p, q]] += gy[n, c, p, q]
