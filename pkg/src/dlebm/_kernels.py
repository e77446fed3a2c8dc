"""numba kernels for the 3x3x3 'same' convolution / 2x2x2 max-pool scorer.

Convolution inputs are stored zero-padded by one voxel on every spatial
side, channels last.  ``_conv_point`` is the single place where an output
voxel is accumulated, so full forward passes and the local recomputation
used by occlusion sweeps produce bit-identical values.
"""
import math

import numpy as np
from numba import njit


@njit(cache=True, inline="always")
def _conv_point(xp, d, h, k, w, b, out):
    # xp: padded (D+2, H+2, K+2, Ci); output voxel (d, h, k) -> out[Co]
    ci_n = xp.shape[3]
    co_n = w.shape[4]
    for co in range(co_n):
        out[co] = b[co]
    for a in range(3):
        for bb in range(3):
            for c in range(3):
                for ci in range(ci_n):
                    xv = xp[d + a, h + bb, k + c, ci]
                    if xv != 0.0:
                        for co in range(co_n):
                            out[co] += xv * w[a, bb, c, ci, co]


@njit(cache=True)
def _conv_relu_forward_general(xp, w, b):
    B = xp.shape[0]
    D, H, K = xp.shape[1] - 2, xp.shape[2] - 2, xp.shape[3] - 2
    co_n = w.shape[4]
    y = np.empty((B, D, H, K, co_n))
    acc = np.empty(co_n)
    for n in range(B):
        xs = xp[n]
        for d in range(D):
            for h in range(H):
                for k in range(K):
                    _conv_point(xs, d, h, k, w, b, acc)
                    for co in range(co_n):
                        y[n, d, h, k, co] = acc[co] if acc[co] > 0.0 else 0.0
    return y


@njit(cache=True)
def _conv_relu_forward_single(xp, w, b):
    # One input channel: row-vectorised along the last axis.  Taps are added in
    # the same (a, b, c) order as _conv_point, so results are bit-identical.
    B = xp.shape[0]
    D, H, K = xp.shape[1] - 2, xp.shape[2] - 2, xp.shape[3] - 2
    co_n = w.shape[4]
    y = np.empty((B, D, H, K, co_n))
    tmp = np.empty((co_n, K))
    row = np.empty(K + 2)
    for n in range(B):
        for d in range(D):
            for h in range(H):
                for co in range(co_n):
                    tmp[co, :] = b[co]
                for a in range(3):
                    for bb in range(3):
                        for q in range(K + 2):
                            row[q] = xp[n, d + a, h + bb, q, 0]
                        for c in range(3):
                            for co in range(co_n):
                                wv = w[a, bb, c, 0, co]
                                for k in range(K):
                                    tmp[co, k] += row[k + c] * wv
                for k in range(K):
                    for co in range(co_n):
                        v = tmp[co, k]
                        y[n, d, h, k, co] = v if v > 0.0 else 0.0
    return y


def conv_relu_forward(xp, w, b):
    """xp: (B, D+2, H+2, K+2, Ci) padded input -> relu(conv) of shape (B, D, H, K, Co)."""
    if xp.shape[4] == 1:
        return _conv_relu_forward_single(xp, w, b)
    return _conv_relu_forward_general(xp, w, b)


@njit(cache=True)
def _conv_backward_general(xp, w, gy, need_gx):
    B = xp.shape[0]
    D, H, K = gy.shape[1], gy.shape[2], gy.shape[3]
    ci_n = xp.shape[4]
    co_n = w.shape[4]
    gw = np.zeros(w.shape)
    gb = np.zeros(co_n)
    gxp = np.zeros(xp.shape) if need_gx else np.zeros((1, 1, 1, 1, 1))
    for n in range(B):
        for d in range(D):
            for h in range(H):
                for k in range(K):
                    nz = False
                    for co in range(co_n):
                        g = gy[n, d, h, k, co]
                        gb[co] += g
                        if g != 0.0:
                            nz = True
                    if not nz:
                        continue
                    for a in range(3):
                        for bb in range(3):
                            for c in range(3):
                                for ci in range(ci_n):
                                    xv = xp[n, d + a, h + bb, k + c, ci]
                                    s = 0.0
                                    for co in range(co_n):
                                        g = gy[n, d, h, k, co]
                                        gw[a, bb, c, ci, co] += xv * g
                                        s += w[a, bb, c, ci, co] * g
                                    if need_gx:
                                        gxp[n, d + a, h + bb, k + c, ci] += s
    return gw, gb, gxp


@njit(cache=True)
def _conv_weight_grad_single(xp, gy):
    B = xp.shape[0]
    D, H, K, co_n = gy.shape[1], gy.shape[2], gy.shape[3], gy.shape[4]
    gw = np.zeros((3, 3, 3, 1, co_n))
    gb = np.zeros(co_n)
    g = np.empty((co_n, K))
    row = np.empty(K + 2)
    for n in range(B):
        for d in range(D):
            for h in range(H):
                nz = False
                for k in range(K):
                    for co in range(co_n):
                        v = gy[n, d, h, k, co]
                        g[co, k] = v
                        if v != 0.0:
                            nz = True
                if not nz:
                    continue
                for co in range(co_n):
                    s = 0.0
                    for k in range(K):
                        s += g[co, k]
                    gb[co] += s
                for a in range(3):
                    for bb in range(3):
                        for q in range(K + 2):
                            row[q] = xp[n, d + a, h + bb, q, 0]
                        for c in range(3):
                            for co in range(co_n):
                                s = 0.0
                                for k in range(K):
                                    s += row[k + c] * g[co, k]
                                gw[a, bb, c, 0, co] += s
    return gw, gb


def conv_backward(xp, w, gy, need_gx):
    """Gradients of a padded 'same' conv given dL/d(pre-activation) ``gy``."""
    if xp.shape[4] == 1 and not need_gx:
        gw, gb = _conv_weight_grad_single(xp, gy)
        return gw, gb, np.zeros((1, 1, 1, 1, 1))
    return _conv_backward_general(xp, w, gy, need_gx)


@njit(cache=True, inline="always")
def _pool_point(a, d, h, k, c):
    m = a[2 * d, 2 * h, 2 * k, c]
    for i in range(2):
        for j in range(2):
            for l in range(2):
                v = a[2 * d + i, 2 * h + j, 2 * k + l, c]
                if v > m:
                    m = v
    return m


@njit(cache=True)
def maxpool_forward(a, pad):
    """2x2x2 max pool (floor) of (B, D, H, K, C); output zero-padded by ``pad``."""
    B, D, H, K, C = a.shape
    D2, H2, K2 = D // 2, H // 2, K // 2
    out = np.zeros((B, D2 + 2 * pad, H2 + 2 * pad, K2 + 2 * pad, C))
    arg = np.zeros((B, D2, H2, K2, C), dtype=np.int8)
    for n in range(B):
        for d in range(D2):
            for h in range(H2):
                for k in range(K2):
                    for c in range(C):
                        best = a[n, 2 * d, 2 * h, 2 * k, c]
                        bi = 0
                        for i in range(2):
                            for j in range(2):
                                for l in range(2):
                                    v = a[n, 2 * d + i, 2 * h + j, 2 * k + l, c]
                                    if v > best:
                                        best = v
                                        bi = 4 * i + 2 * j + l
                        out[n, d + pad, h + pad, k + pad, c] = best
                        arg[n, d, h, k, c] = bi
    return out, arg


@njit(cache=True)
def maxpool_backward(g_out, arg, in_shape):
    g_in = np.zeros(in_shape)
    B, D2, H2, K2, C = arg.shape
    for n in range(B):
        for d in range(D2):
            for h in range(H2):
                for k in range(K2):
                    for c in range(C):
                        bi = arg[n, d, h, k, c]
                        i = bi // 4
                        j = (bi // 2) % 2
                        l = bi % 2
                        g_in[n, 2 * d + i, 2 * h + j, 2 * k + l, c] += g_out[n, d, h, k, c]
    return g_in


@njit(cache=True, inline="always")
def _gap_logit(p2, wd, bd):
    D, H, K, C = p2.shape
    logit = bd
    count = D * H * K
    for c in range(C):
        s = 0.0
        for d in range(D):
            for h in range(H):
                for k in range(K):
                    s += p2[d, h, k, c]
        logit += (s / count) * wd[c]
    return logit


@njit(cache=True)
def gap_logits(p2, wd, bd):
    B = p2.shape[0]
    out = np.empty(B)
    for n in range(B):
        out[n] = _gap_logit(p2[n], wd, bd)
    return out


@njit(cache=True)
def occlusion_logits(x, w1, b1, w2, b2, wd, bd, origins, size, fill):
    """Logit of the scorer for each occluded copy of ``x`` (one per origin).

    Only the activations downstream of the occluded patch are recomputed;
    everything else is reused from the baseline pass, then restored.
    """
    X, Y, Z = x.shape
    c1 = w1.shape[4]
    c2 = w2.shape[4]
    xp = np.zeros((X + 2, Y + 2, Z + 2, 1))
    xp[1:X + 1, 1:Y + 1, 1:Z + 1, 0] = x
    dims0 = np.array([X, Y, Z])
    dims1 = dims0 // 2
    dims2 = dims1 // 2

    # baseline activations
    a1 = np.empty((X, Y, Z, c1))
    acc1 = np.empty(c1)
    for d in range(X):
        for h in range(Y):
            for k in range(Z):
                _conv_point(xp, d, h, k, w1, b1, acc1)
                for c in range(c1):
                    a1[d, h, k, c] = acc1[c] if acc1[c] > 0.0 else 0.0
    p1p = np.zeros((dims1[0] + 2, dims1[1] + 2, dims1[2] + 2, c1))
    for d in range(dims1[0]):
        for h in range(dims1[1]):
            for k in range(dims1[2]):
                for c in range(c1):
                    p1p[d + 1, h + 1, k + 1, c] = _pool_point(a1, d, h, k, c)
    a2 = np.empty((dims1[0], dims1[1], dims1[2], c2))
    acc2 = np.empty(c2)
    for d in range(dims1[0]):
        for h in range(dims1[1]):
            for k in range(dims1[2]):
                _conv_point(p1p, d, h, k, w2, b2, acc2)
                for c in range(c2):
                    a2[d, h, k, c] = acc2[c] if acc2[c] > 0.0 else 0.0
    p2 = np.empty((dims2[0], dims2[1], dims2[2], c2))
    for d in range(dims2[0]):
        for h in range(dims2[1]):
            for k in range(dims2[2]):
                for c in range(c2):
                    p2[d, h, k, c] = _pool_point(a2, d, h, k, c)

    n_pos = origins.shape[0]
    logits = np.empty(n_pos)
    s0, s1, s2 = size[0], size[1], size[2]
    save_x = np.empty(s0 * s1 * s2)
    save_a1 = np.empty((s0 + 2) * (s1 + 2) * (s2 + 2) * c1)
    save_p1 = np.empty(((s0 + 2) // 2 + 2) * ((s1 + 2) // 2 + 2) * ((s2 + 2) // 2 + 2) * c1)
    save_a2 = np.empty(((s0 + 2) // 2 + 4) * ((s1 + 2) // 2 + 4) * ((s2 + 2) // 2 + 4) * c2)
    save_p2 = np.empty(((s0 + 2) // 4 + 4) * ((s1 + 2) // 4 + 4) * ((s2 + 2) // 4 + 4) * c2)
    lo1 = np.empty(3, dtype=np.int64)
    hi1 = np.empty(3, dtype=np.int64)
    lop1 = np.empty(3, dtype=np.int64)
    hip1 = np.empty(3, dtype=np.int64)
    lo2 = np.empty(3, dtype=np.int64)
    hi2 = np.empty(3, dtype=np.int64)
    lop2 = np.empty(3, dtype=np.int64)
    hip2 = np.empty(3, dtype=np.int64)

    for p in range(n_pos):
        o = origins[p]
        # half-open affected ranges per stage
        for ax in range(3):
            lo1[ax] = max(o[ax] - 1, 0)
            hi1[ax] = min(o[ax] + size[ax] + 1, dims0[ax])
            lop1[ax] = lo1[ax] // 2
            hip1[ax] = min((hi1[ax] - 1) // 2 + 1, dims1[ax])
            lo2[ax] = max(lop1[ax] - 1, 0)
            hi2[ax] = min(hip1[ax] + 1, dims1[ax])
            lop2[ax] = lo2[ax] // 2
            hip2[ax] = min((hi2[ax] - 1) // 2 + 1, dims2[ax])

        t = 0
        for d in range(o[0], o[0] + s0):
            for h in range(o[1], o[1] + s1):
                for k in range(o[2], o[2] + s2):
                    save_x[t] = xp[d + 1, h + 1, k + 1, 0]
                    xp[d + 1, h + 1, k + 1, 0] = fill
                    t += 1
        t = 0
        for d in range(lo1[0], hi1[0]):
            for h in range(lo1[1], hi1[1]):
                for k in range(lo1[2], hi1[2]):
                    _conv_point(xp, d, h, k, w1, b1, acc1)
                    for c in range(c1):
                        save_a1[t] = a1[d, h, k, c]
                        a1[d, h, k, c] = acc1[c] if acc1[c] > 0.0 else 0.0
                        t += 1
        t = 0
        for d in range(lop1[0], hip1[0]):
            for h in range(lop1[1], hip1[1]):
                for k in range(lop1[2], hip1[2]):
                    for c in range(c1):
                        save_p1[t] = p1p[d + 1, h + 1, k + 1, c]
                        p1p[d + 1, h + 1, k + 1, c] = _pool_point(a1, d, h, k, c)
                        t += 1
        t = 0
        for d in range(lo2[0], hi2[0]):
            for h in range(lo2[1], hi2[1]):
                for k in range(lo2[2], hi2[2]):
                    _conv_point(p1p, d, h, k, w2, b2, acc2)
                    for c in range(c2):
                        save_a2[t] = a2[d, h, k, c]
                        a2[d, h, k, c] = acc2[c] if acc2[c] > 0.0 else 0.0
                        t += 1
        t = 0
        for d in range(lop2[0], hip2[0]):
            for h in range(lop2[1], hip2[1]):
                for k in range(lop2[2], hip2[2]):
                    for c in range(c2):
                        save_p2[t] = p2[d, h, k, c]
                        p2[d, h, k, c] = _pool_point(a2, d, h, k, c)
                        t += 1

        logits[p] = _gap_logit(p2, wd, bd)

        # restore in the same traversal order
        t = 0
        for d in range(lop2[0], hip2[0]):
            for h in range(lop2[1], hip2[1]):
                for k in range(lop2[2], hip2[2]):
                    for c in range(c2):
                        p2[d, h, k, c] = save_p2[t]
                        t += 1
        t = 0
        for d in range(lo2[0], hi2[0]):
            for h in range(lo2[1], hi2[1]):
                for k in range(lo2[2], hi2[2]):
                    for c in range(c2):
                        a2[d, h, k, c] = save_a2[t]
                        t += 1
        t = 0
        for d in range(lop1[0], hip1[0]):
            for h in range(lop1[1], hip1[1]):
                for k in range(lop1[2], hip1[2]):
                    for c in range(c1):
                        p1p[d + 1, h + 1, k + 1, c] = save_p1[t]
                        t += 1
        t = 0
        for d in range(lo1[0], hi1[0]):
            for h in range(lo1[1], hi1[1]):
                for k in range(lo1[2], hi1[2]):
                    for c in range(c1):
                        a1[d, h, k, c] = save_a1[t]
                        t += 1
        t = 0
        for d in range(o[0], o[0] + s0):
            for h in range(o[1], o[1] + s1):
                for k in range(o[2], o[2] + s2):
                    xp[d + 1, h + 1, k + 1, 0] = save_x[t]
                    t += 1
    return logits


def sigmoid(z):
    z = np.asarray(z, dtype=np.float64)
    return np.where(z >= 0, 1.0 / (1.0 + np.exp(-np.abs(z))),
                    np.exp(-np.abs(z)) / (1.0 + np.exp(-np.abs(z))))


def logistic(z: float) -> float:
    if z >= 0:
        return 1.0 / (1.0 + math.exp(-z))
    e = math.exp(z)
    return e / (1.0 + e)
