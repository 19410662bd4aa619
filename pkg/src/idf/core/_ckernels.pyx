# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot loops: dilated replicate unfold, its adjoint, per-pixel
kernel application, windowed local correlation and Winograd tile
transforms for 3x3 convolution."""

import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt

cnp.import_array()


cdef inline Py_ssize_t _clamp(Py_ssize_t i, Py_ssize_t n) noexcept nogil:
    if i < 0:
        return 0
    if i >= n:
        return n - 1
    return i


def unfold(const double[:, :, ::1] img, int K, int dilation):
    cdef Py_ssize_t C = img.shape[0], H = img.shape[1], W = img.shape[2]
    cdef int r = (K - 1) // 2
    out_arr = np.empty((C, K * K, H * W), dtype=np.float64)
    cdef double[:, :, ::1] out = out_arr
    cdef Py_ssize_t c, y, x, yy, i, x0, x1, base, dv
    cdef int u, v
    with nogil:
        for c in range(C):
            i = 0
            for u in range(-r, r + 1):
                for v in range(-r, r + 1):
                    dv = v * dilation
                    x0 = _clamp(-dv, W + 1)
                    x1 = _clamp(W - dv, W + 1)
                    for y in range(H):
                        yy = _clamp(y + u * dilation, H)
                        base = y * W
                        for x in range(x0):
                            out[c, i, base + x] = img[c, yy, 0]
                        for x in range(x0, x1):
                            out[c, i, base + x] = img[c, yy, x + dv]
                        for x in range(x1, W):
                            out[c, i, base + x] = img[c, yy, W - 1]
                    i += 1
    return out_arr


def unfold_adjoint(const double[:, :, ::1] grad, Py_ssize_t H, Py_ssize_t W,
                   int K, int dilation):
    cdef Py_ssize_t C = grad.shape[0]
    cdef int r = (K - 1) // 2
    out_arr = np.zeros((C, H, W), dtype=np.float64)
    cdef double[:, :, ::1] out = out_arr
    cdef Py_ssize_t c, y, x, yy, i, x0, x1, base, dv
    cdef int u, v
    with nogil:
        for c in range(C):
            i = 0
            for u in range(-r, r + 1):
                for v in range(-r, r + 1):
                    dv = v * dilation
                    x0 = _clamp(-dv, W + 1)
                    x1 = _clamp(W - dv, W + 1)
                    for y in range(H):
                        yy = _clamp(y + u * dilation, H)
                        base = y * W
                        for x in range(x0):
                            out[c, yy, 0] += grad[c, i, base + x]
                        for x in range(x0, x1):
                            out[c, yy, x + dv] += grad[c, i, base + x]
                        for x in range(x1, W):
                            out[c, yy, W - 1] += grad[c, i, base + x]
                    i += 1
    return out_arr


def apply_kernels(const double[:, :, ::1] patches, const double[:, ::1] kernels):
    cdef Py_ssize_t C = patches.shape[0], K2 = patches.shape[1], M = patches.shape[2]
    out_arr = np.zeros((C, M), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef double[::1] s = np.zeros(M, dtype=np.float64)
    cdef Py_ssize_t c, i, j
    with nogil:
        for i in range(K2):
            for j in range(M):
                s[j] += kernels[i, j]
        for c in range(C):
            for i in range(K2):
                for j in range(M):
                    out[c, j] += kernels[i, j] * patches[c, i, j]
            for j in range(M):
                if s[j] > 0:
                    out[c, j] = out[c, j] / s[j]
                else:
                    out[c, j] = 0.0
    return out_arr


cdef void _box(const double[:, ::1] a, double[:, ::1] tmp, double[:, ::1] out,
               int h) noexcept nogil:
    """Replicate-padded (2h+1)^2 window mean via separable running sums."""
    cdef Py_ssize_t H = a.shape[0], W = a.shape[1], y, x
    cdef int k
    cdef double acc, n = (2 * h + 1) * (2 * h + 1)
    for x in range(W):
        tmp[0, x] = 0.0
    for k in range(-h, h + 1):
        for x in range(W):
            tmp[0, x] += a[_clamp(k, H), x]
    for y in range(1, H):
        for x in range(W):
            tmp[y, x] = tmp[y - 1, x] + a[_clamp(y + h, H), x] - a[_clamp(y - h - 1, H), x]
    for y in range(H):
        acc = 0.0
        for k in range(-h, h + 1):
            acc += tmp[y, _clamp(k, W)]
        out[y, 0] = acc / n
        for x in range(1, W):
            acc += tmp[y, _clamp(x + h, W)] - tmp[y, _clamp(x - h - 1, W)]
            out[y, x] = acc / n


def local_correlation(const double[:, :, ::1] img, int K, int dilation,
                      int L, double tau):
    """Windowed Pearson correlation of every tap with the centre, channel-averaged.

    Window moments come from separable running sums on mean-shifted data;
    the three per-tap moments share one vertical and one horizontal pass.
    """
    cdef Py_ssize_t C = img.shape[0], H = img.shape[1], W = img.shape[2]
    cdef int r = (K - 1) // 2, h = (L - 1) // 2
    cdef int K2 = K * K, center = (K * K - 1) // 2
    out_arr = np.zeros((K2, H, W), dtype=np.float64)
    cdef double[:, :, ::1] out = out_arr
    cdef double[:, ::1] xm = np.empty((H, W)), xm2 = np.empty((H, W))
    cdef double[:, ::1] mc = np.empty((H, W)), vc = np.empty((H, W))
    cdef double[:, ::1] t1 = np.empty((H, W)), t2 = np.empty((H, W)), t3 = np.empty((H, W))
    cdef Py_ssize_t[::1] rows = np.empty(H + 2 * h, dtype=np.intp)
    cdef Py_ssize_t[::1] crow = np.empty(H + 2 * h, dtype=np.intp)
    cdef Py_ssize_t[::1] cols = np.empty(W, dtype=np.intp)
    cdef Py_ssize_t[::1] hcol = np.empty(W + 2 * h, dtype=np.intp)
    cdef Py_ssize_t c, y, x, q, ra, rb, ca, cb, xa, xb
    cdef int i, u, v
    cdef double mean, a, b, m1, m2, m3, rr, inv_n = 1.0 / ((2 * h + 1) * (2 * h + 1))
    for q in range(H + 2 * h):
        crow[q] = _clamp(q - h, H)
    for q in range(W + 2 * h):
        hcol[q] = _clamp(q - h, W)
    with nogil:
        for c in range(C):
            mean = 0.0
            for y in range(H):
                for x in range(W):
                    mean += img[c, y, x]
            mean = mean / (H * W)
            for y in range(H):
                for x in range(W):
                    xm[y, x] = img[c, y, x] - mean
                    xm2[y, x] = xm[y, x] * xm[y, x]
            _box(xm, t1, mc, h)
            _box(xm2, t1, vc, h)
            for y in range(H):
                for x in range(W):
                    vc[y, x] = vc[y, x] - mc[y, x] * mc[y, x]
            i = 0
            for u in range(-r, r + 1):
                for v in range(-r, r + 1):
                    if i == center:
                        i += 1
                        continue
                    # source row/col of the shifted plane, replicate-padded twice
                    for q in range(H + 2 * h):
                        rows[q] = _clamp(crow[q] + u * dilation, H)
                    for x in range(W):
                        cols[x] = _clamp(x + v * dilation, W)
                    # vertical window sums of s, s^2 and s * centre
                    for x in range(W):
                        t1[0, x] = 0.0
                        t2[0, x] = 0.0
                        t3[0, x] = 0.0
                    for q in range(2 * h + 1):
                        ra = rows[q]
                        ca = crow[q]
                        for x in range(W):
                            a = xm[ra, cols[x]]
                            t1[0, x] += a
                            t2[0, x] += a * a
                            t3[0, x] += a * xm[ca, x]
                    for y in range(1, H):
                        ra = rows[y + 2 * h]
                        ca = crow[y + 2 * h]
                        rb = rows[y - 1]
                        cb = crow[y - 1]
                        for x in range(W):
                            a = xm[ra, cols[x]]
                            b = xm[rb, cols[x]]
                            t1[y, x] = t1[y - 1, x] + a - b
                            t2[y, x] = t2[y - 1, x] + a * a - b * b
                            t3[y, x] = t3[y - 1, x] + a * xm[ca, x] - b * xm[cb, x]
                    # horizontal running sums, then r at each pixel
                    for y in range(H):
                        m1 = 0.0
                        m2 = 0.0
                        m3 = 0.0
                        for q in range(2 * h + 1):
                            xa = hcol[q]
                            m1 += t1[y, xa]
                            m2 += t2[y, xa]
                            m3 += t3[y, xa]
                        for x in range(W):
                            if x > 0:
                                xa = hcol[x + 2 * h]
                                xb = hcol[x - 1]
                                m1 += t1[y, xa] - t1[y, xb]
                                m2 += t2[y, xa] - t2[y, xb]
                                m3 += t3[y, xa] - t3[y, xb]
                            a = vc[y, x]
                            b = m2 * inv_n - (m1 * inv_n) * (m1 * inv_n)
                            if a >= tau and b >= tau:
                                rr = (m3 * inv_n - mc[y, x] * (m1 * inv_n)) / sqrt(a * b)
                                if rr > 1.0:
                                    rr = 1.0
                                elif rr < -1.0:
                                    rr = -1.0
                                out[i, y, x] += rr
                    i += 1
        for i in range(K2):
            for y in range(H):
                for x in range(W):
                    if i == center:
                        out[i, y, x] = 1.0
                    else:
                        out[i, y, x] = out[i, y, x] / C
    return out_arr


def tap_sum(const double[:, :, ::1] taps, Py_ssize_t H, Py_ssize_t W, int K, int dilation):
    """out[c, p] = sum_i taps[c, i, clamp(p + offset_i)] -- output-side conv gather."""
    cdef Py_ssize_t C = taps.shape[0]
    cdef int r = (K - 1) // 2
    out_arr = np.zeros((C, H * W), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t c, y, x, yy, i, x0, x1, base, src, dv
    cdef int u, v
    with nogil:
        for c in range(C):
            i = 0
            for u in range(-r, r + 1):
                for v in range(-r, r + 1):
                    dv = v * dilation
                    x0 = _clamp(-dv, W + 1)
                    x1 = _clamp(W - dv, W + 1)
                    for y in range(H):
                        yy = _clamp(y + u * dilation, H)
                        base = y * W
                        src = yy * W
                        for x in range(x0):
                            out[c, base + x] += taps[c, i, src]
                        for x in range(x0, x1):
                            out[c, base + x] += taps[c, i, src + x + dv]
                        for x in range(x1, W):
                            out[c, base + x] += taps[c, i, src + W - 1]
                    i += 1
    return out_arr


def tap_sum_adjoint(const double[:, ::1] grad, Py_ssize_t H, Py_ssize_t W, int K, int dilation):
    cdef Py_ssize_t C = grad.shape[0]
    cdef int r = (K - 1) // 2
    out_arr = np.zeros((C, K * K, H * W), dtype=np.float64)
    cdef double[:, :, ::1] out = out_arr
    cdef Py_ssize_t c, y, x, yy, i, x0, x1, base, src, dv
    cdef int u, v
    with nogil:
        for c in range(C):
            i = 0
            for u in range(-r, r + 1):
                for v in range(-r, r + 1):
                    dv = v * dilation
                    x0 = _clamp(-dv, W + 1)
                    x1 = _clamp(W - dv, W + 1)
                    for y in range(H):
                        yy = _clamp(y + u * dilation, H)
                        base = y * W
                        src = yy * W
                        for x in range(x0):
                            out[c, i, src] += grad[c, base + x]
                        for x in range(x0, x1):
                            out[c, i, src + x + dv] += grad[c, base + x]
                        for x in range(x1, W):
                            out[c, i, src + W - 1] += grad[c, base + x]
                    i += 1
    return out_arr


# Winograd F(2x2, 3x3) tile transforms for 3x3 convolution with replicate
# padding. Output tile (i, j) covers pixels [2i, 2i+2) x [2j, 2j+2); its input
# tile is rows/cols 2i-1 .. 2i+2 (clamped). Transformed planes are laid out
# (16, C, tiles) with plane index a*4 + b.

cdef inline void _bt4(double* v, Py_ssize_t s) noexcept nogil:
    cdef double d0 = v[0], d1 = v[s], d2 = v[2 * s], d3 = v[3 * s]
    v[0] = d0 - d2
    v[s] = d1 + d2
    v[2 * s] = d2 - d1
    v[3 * s] = d1 - d3


cdef inline void _bt4_adj(double* v, Py_ssize_t s) noexcept nogil:
    cdef double g0 = v[0], g1 = v[s], g2 = v[2 * s], g3 = v[3 * s]
    v[0] = g0
    v[s] = g1 - g2 + g3
    v[2 * s] = g1 + g2 - g0
    v[3 * s] = -g3


def wino_in(const double[:, :, ::1] img, out_arr=None):
    cdef Py_ssize_t C = img.shape[0], H = img.shape[1], W = img.shape[2]
    cdef Py_ssize_t nH = (H + 1) // 2, nW = (W + 1) // 2, P = nH * nW
    if out_arr is None:
        # pad rows so the 16 planes do not alias in cache
        out_arr = np.empty((16, C, P + 8), dtype=np.float64)[:, :, :P]
    cdef double[:, :, :] out = out_arr
    cdef double d[16]
    cdef Py_ssize_t rows[4]
    cdef Py_ssize_t cols[4]
    cdef Py_ssize_t c, i, j, k, l, p
    with nogil:
        for c in range(C):
            for i in range(nH):
                for k in range(4):
                    rows[k] = _clamp(2 * i - 1 + k, H)
                for j in range(nW):
                    for l in range(4):
                        cols[l] = _clamp(2 * j - 1 + l, W)
                    for k in range(4):
                        for l in range(4):
                            d[k * 4 + l] = img[c, rows[k], cols[l]]
                    for l in range(4):
                        _bt4(&d[l], 4)
                    for k in range(4):
                        _bt4(&d[k * 4], 1)
                    p = i * nW + j
                    for k in range(16):
                        out[k, c, p] = d[k]
    return out_arr


def wino_in_adjoint(const double[:, :, :] grad, Py_ssize_t H, Py_ssize_t W):
    cdef Py_ssize_t C = grad.shape[1]
    cdef Py_ssize_t nH = (H + 1) // 2, nW = (W + 1) // 2
    out_arr = np.zeros((C, H, W), dtype=np.float64)
    cdef double[:, :, ::1] out = out_arr
    cdef double d[16]
    cdef Py_ssize_t rows[4]
    cdef Py_ssize_t cols[4]
    cdef Py_ssize_t c, i, j, k, l, p
    with nogil:
        for c in range(C):
            for i in range(nH):
                for k in range(4):
                    rows[k] = _clamp(2 * i - 1 + k, H)
                for j in range(nW):
                    for l in range(4):
                        cols[l] = _clamp(2 * j - 1 + l, W)
                    p = i * nW + j
                    for k in range(16):
                        d[k] = grad[k, c, p]
                    for k in range(4):
                        _bt4_adj(&d[k * 4], 1)
                    for l in range(4):
                        _bt4_adj(&d[l], 4)
                    for k in range(4):
                        for l in range(4):
                            out[c, rows[k], cols[l]] += d[k * 4 + l]
    return out_arr


def wino_out(const double[:, :, :] m, Py_ssize_t H, Py_ssize_t W):
    cdef Py_ssize_t Co = m.shape[1]
    cdef Py_ssize_t nH = (H + 1) // 2, nW = (W + 1) // 2
    out_arr = np.empty((Co, H, W), dtype=np.float64)
    cdef double[:, :, ::1] out = out_arr
    cdef double t[8]
    cdef double y00, y01, y10, y11
    cdef Py_ssize_t o, i, j, l, p, yy, xx
    with nogil:
        for o in range(Co):
            for i in range(nH):
                yy = 2 * i
                for j in range(nW):
                    xx = 2 * j
                    p = i * nW + j
                    for l in range(4):
                        t[l] = m[l, o, p] + m[4 + l, o, p] + m[8 + l, o, p]
                        t[4 + l] = m[4 + l, o, p] - m[8 + l, o, p] - m[12 + l, o, p]
                    y00 = t[0] + t[1] + t[2]
                    y01 = t[1] - t[2] - t[3]
                    y10 = t[4] + t[5] + t[6]
                    y11 = t[5] - t[6] - t[7]
                    out[o, yy, xx] = y00
                    if xx + 1 < W:
                        out[o, yy, xx + 1] = y01
                    if yy + 1 < H:
                        out[o, yy + 1, xx] = y10
                        if xx + 1 < W:
                            out[o, yy + 1, xx + 1] = y11
    return out_arr


def wino_out_adjoint(const double[:, :, ::1] grad, out_arr=None):
    cdef Py_ssize_t Co = grad.shape[0], H = grad.shape[1], W = grad.shape[2]
    cdef Py_ssize_t nH = (H + 1) // 2, nW = (W + 1) // 2, P = nH * nW
    if out_arr is None:
        # pad rows so the 16 planes do not alias in cache
        out_arr = np.empty((16, Co, P + 8), dtype=np.float64)[:, :, :P]
    cdef double[:, :, :] out = out_arr
    cdef double g00, g01, g10, g11, a, b
    cdef double t[8]
    cdef Py_ssize_t o, i, j, l, p, yy, xx
    with nogil:
        for o in range(Co):
            for i in range(nH):
                yy = 2 * i
                for j in range(nW):
                    xx = 2 * j
                    p = i * nW + j
                    g00 = grad[o, yy, xx]
                    g01 = grad[o, yy, xx + 1] if xx + 1 < W else 0.0
                    g10 = grad[o, yy + 1, xx] if yy + 1 < H else 0.0
                    g11 = grad[o, yy + 1, xx + 1] if (yy + 1 < H and xx + 1 < W) else 0.0
                    # column pass: t[r*4 + l]
                    t[0] = g00
                    t[1] = g00 + g01
                    t[2] = g00 - g01
                    t[3] = -g01
                    t[4] = g10
                    t[5] = g10 + g11
                    t[6] = g10 - g11
                    t[7] = -g11
                    for l in range(4):
                        a = t[l]
                        b = t[4 + l]
                        out[l, o, p] = a
                        out[4 + l, o, p] = a + b
                        out[8 + l, o, p] = a - b
                        out[12 + l, o, p] = -b
    return out_arr
