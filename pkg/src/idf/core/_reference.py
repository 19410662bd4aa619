"""Pure-numpy implementations of the hot kernels.

These are the fallback when the compiled ``_ckernels`` extension is not
available, and the baseline the benchmark compares against.
"""

import numpy as np


def _taps(K, dilation):
    r = (K - 1) // 2
    return [(u * dilation, v * dilation)
            for u in range(-r, r + 1) for v in range(-r, r + 1)]


def unfold(img, K, dilation):
    C, H, W = img.shape
    pad = (K - 1) // 2 * dilation
    padded = np.pad(img, ((0, 0), (pad, pad), (pad, pad)), mode="edge")
    out = np.empty((C, K * K, H * W), dtype=np.float64)
    for i, (du, dv) in enumerate(_taps(K, dilation)):
        out[:, i, :] = padded[:, pad + du:pad + du + H,
                              pad + dv:pad + dv + W].reshape(C, H * W)
    return out


def _fold_border(acc, pad, H, W):
    """Collapse a padded accumulator onto the edge pixels its border replicated."""
    if pad:
        acc[..., pad, :] += acc[..., :pad, :].sum(axis=-2)
        acc[..., pad + H - 1, :] += acc[..., pad + H:, :].sum(axis=-2)
        acc[..., :, pad] += acc[..., :, :pad].sum(axis=-1)
        acc[..., :, pad + W - 1] += acc[..., :, pad + W:].sum(axis=-1)
    return np.ascontiguousarray(acc[..., pad:pad + H, pad:pad + W])


def unfold_adjoint(grad, H, W, K, dilation):
    """Scatter-add a (C, K*K, H*W) field back onto a (C, H, W) image.

    Exact transpose of ``unfold`` including the replicate border: taps that
    were clamped onto an edge pixel accumulate into that pixel.
    """
    C = grad.shape[0]
    pad = (K - 1) // 2 * dilation
    acc = np.zeros((C, H + 2 * pad, W + 2 * pad), dtype=np.float64)
    g = grad.reshape(C, K * K, H, W)
    for i, (du, dv) in enumerate(_taps(K, dilation)):
        acc[:, pad + du:pad + du + H, pad + dv:pad + dv + W] += g[:, i]
    return _fold_border(acc, pad, H, W)


def tap_sum(taps, H, W, K, dilation):
    """out[c, p] = sum_i taps[c, i, clamp(p + offset_i)]."""
    C = taps.shape[0]
    pad = (K - 1) // 2 * dilation
    t = taps.reshape(C, K * K, H, W)
    padded = np.pad(t, ((0, 0), (0, 0), (pad, pad), (pad, pad)), mode="edge")
    out = np.zeros((C, H, W), dtype=np.float64)
    for i, (du, dv) in enumerate(_taps(K, dilation)):
        out += padded[:, i, pad + du:pad + du + H, pad + dv:pad + dv + W]
    return out.reshape(C, H * W)


def tap_sum_adjoint(grad, H, W, K, dilation):
    C = grad.shape[0]
    pad = (K - 1) // 2 * dilation
    g = grad.reshape(C, H, W)
    acc = np.zeros((C, K * K, H + 2 * pad, W + 2 * pad), dtype=np.float64)
    for i, (du, dv) in enumerate(_taps(K, dilation)):
        acc[:, i, pad + du:pad + du + H, pad + dv:pad + dv + W] = g
    return _fold_border(acc, pad, H, W).reshape(C, K * K, H * W)


def apply_kernels(patches, kernels):
    # kernels: (K2, M); zero-sum columns produce 0
    num = np.einsum("im,cim->cm", kernels, patches)
    s = kernels.sum(axis=0)
    out = np.zeros_like(num)
    ok = s > 0
    out[:, ok] = num[:, ok] / s[ok]
    return out


def _box_mean(a, L):
    """Mean over an LxL window with replicate padding, for a (..., H, W) array."""
    r = (L - 1) // 2
    H, W = a.shape[-2:]
    p = np.pad(a, [(0, 0)] * (a.ndim - 2) + [(r, r), (r, r)], mode="edge")
    cs = np.cumsum(np.cumsum(p, axis=-2), axis=-1)
    cs = np.pad(cs, [(0, 0)] * (a.ndim - 2) + [(1, 0), (1, 0)])
    s = (cs[..., L:L + H, L:L + W] - cs[..., :H, L:L + W]
         - cs[..., L:L + H, :W] + cs[..., :H, :W])
    return s / (L * L)


def local_correlation(img, K, dilation, L, tau):
    C, H, W = img.shape
    center = (K * K - 1) // 2
    # per-channel shift to keep the E[x^2] - E[x]^2 cancellation small
    x = img - img.mean(axis=(1, 2), keepdims=True)
    shifted = unfold(x, K, dilation).reshape(C, K * K, H, W)
    xc = x[:, None]
    mc = _box_mean(x, L)[:, None]
    vc = _box_mean(x * x, L)[:, None] - mc * mc
    mo = _box_mean(shifted, L)
    vo = _box_mean(shifted * shifted, L) - mo * mo
    cov = _box_mean(xc * shifted, L) - mc * mo
    vc = np.broadcast_to(vc, vo.shape)
    ok = (vc >= tau) & (vo >= tau)
    r = np.zeros_like(cov)
    r[ok] = cov[ok] / np.sqrt(vc[ok] * vo[ok])
    np.clip(r, -1.0, 1.0, out=r)
    out = r.mean(axis=0)
    out[center] = 1.0
    return out


# Winograd F(2x2, 3x3) tile transforms; see _ckernels for the layout.

def _tiles(H, W):
    return (H + 1) // 2, (W + 1) // 2


def _bt(d0, d1, d2, d3):
    return d0 - d2, d1 + d2, d2 - d1, d1 - d3


def _bt_adj(g0, g1, g2, g3):
    return g0, g1 - g2 + g3, g1 + g2 - g0, -g3


def wino_in(img, out_arr=None):
    C, H, W = img.shape
    nH, nW = _tiles(H, W)
    xp = np.pad(img, ((0, 0), (1, 1 + 2 * nH - H), (1, 1 + 2 * nW - W)), mode="edge")
    s = xp.strides
    d = np.lib.stride_tricks.as_strided(
        xp, (C, nH, nW, 4, 4), (s[0], 2 * s[1], 2 * s[2], s[1], s[2]))
    rows = _bt(*(d[..., k, :] for k in range(4)))
    v = np.stack([np.stack(_bt(*(r[..., l] for l in range(4)))) for r in rows])
    v = v.reshape(16, C, nH * nW)
    if out_arr is None:
        return v
    out_arr[...] = v
    return out_arr


def _clamp_fold(n_pad, n):
    # maps padded row r (offset by one) onto the source row it replicates
    R = np.zeros((n, n_pad))
    R[np.clip(np.arange(n_pad) - 1, 0, n - 1), np.arange(n_pad)] = 1.0
    return R


def wino_in_adjoint(grad, H, W):
    C = grad.shape[1]
    nH, nW = _tiles(H, W)
    g = grad.reshape(4, 4, C, nH, nW)
    rows = [np.stack(_bt_adj(*(g[k, l] for l in range(4)))) for k in range(4)]
    dd = np.stack(_bt_adj(*rows))  # (k, l, C, nH, nW)
    acc = np.zeros((C, 2 * nH + 2, 2 * nW + 2))
    for k in range(4):
        for l in range(4):
            acc[:, k:k + 2 * nH:2, l:l + 2 * nW:2] += dd[k, l]
    return _clamp_fold(2 * nH + 2, H) @ acc @ _clamp_fold(2 * nW + 2, W).T


def wino_out(m, H, W):
    Co = m.shape[1]
    nH, nW = _tiles(H, W)
    m = m.reshape(4, 4, Co, nH, nW)
    t0 = m[0] + m[1] + m[2]
    t1 = m[1] - m[2] - m[3]
    y = np.empty((Co, nH, 2, nW, 2))
    for i, t in enumerate((t0, t1)):
        y[:, :, i, :, 0] = t[0] + t[1] + t[2]
        y[:, :, i, :, 1] = t[1] - t[2] - t[3]
    return np.ascontiguousarray(y.reshape(Co, 2 * nH, 2 * nW)[:, :H, :W])


def wino_out_adjoint(grad, out_arr=None):
    Co, H, W = grad.shape
    nH, nW = _tiles(H, W)
    g = np.zeros((Co, 2 * nH, 2 * nW))
    g[:, :H, :W] = grad
    g = g.reshape(Co, nH, 2, nW, 2)

    def cols(r):
        a, b = g[:, :, r, :, 0], g[:, :, r, :, 1]
        return a, a + b, a - b, -b

    t0, t1 = cols(0), cols(1)
    m = np.stack([np.stack([t0[l], t0[l] + t1[l], t0[l] - t1[l], -t1[l]]) for l in range(4)], axis=1)
    m = m.reshape(16, Co, nH * nW)
    if out_arr is None:
        return m
    out_arr[...] = m
    return out_arr
