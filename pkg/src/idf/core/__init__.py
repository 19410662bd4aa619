"""Dense numeric primitives for per-pixel kernel filtering.

Tensors are plain C-contiguous ``float64`` numpy arrays; images are
``(C, H, W)``. Padding is replicate (edge clamp) everywhere, and taps inside
a ``K x K`` neighbourhood are ordered row-major with the row offset outer, so
the centre tap sits at index ``(K*K - 1) // 2``.
"""

import threading
from dataclasses import dataclass

import numpy as np

from . import _backend

__all__ = [
    "PatchField", "KernelField", "ChannelStats",
    "rms_normalize", "power_normalize", "unfold", "unfold_adjoint",
    "apply_kernels", "conv2d", "conv2d_backward", "channel_stats", "center_index", "backend",
]

RMS_EPS = 1e-4
POWER_ETA = 1e-4


def backend():
    """Name of the active kernel backend ('cython' or 'numpy')."""
    return _backend.name


def center_index(K):
    return (K * K - 1) // 2


def _f64(a):
    return np.ascontiguousarray(a, dtype=np.float64)


@dataclass(frozen=True)
class PatchField:
    """Unfolded neighbourhoods, ``data`` shaped (C, K*K, H*W)."""

    data: np.ndarray
    K: int
    dilation: int
    source_dims: tuple

    @property
    def channels(self):
        return self.data.shape[0]

    @property
    def kernel_area(self):
        return self.data.shape[1]

    @property
    def positions(self):
        return self.data.shape[2]


@dataclass(frozen=True)
class KernelField:
    """Per-pixel kernels, ``data`` shaped (K*K, H*W).

    The singleton channel axis of the (1, K*K, H*W) layout is dropped; the
    same kernel is shared by every image channel.
    """

    data: np.ndarray
    normalized: bool = False

    @property
    def kernel_area(self):
        return self.data.shape[0]

    @property
    def positions(self):
        return self.data.shape[1]

    def center(self):
        return self.data[center_index(int(round(np.sqrt(self.kernel_area))))]

    def degenerate_count(self):
        """Number of positions whose kernel is identically zero."""
        return int(np.count_nonzero(~self.data.any(axis=0)))


@dataclass(frozen=True)
class ChannelStats:
    mean: np.ndarray
    std: np.ndarray


def rms_normalize(t, epsilon=RMS_EPS):
    """Divide by the root-mean-square over *all* elements plus ``epsilon``."""
    t = np.ascontiguousarray(t, dtype=np.float64)
    if t.size == 0:
        raise ValueError("rms_normalize needs a nonempty tensor")
    flat = t.reshape(-1)
    rms = np.sqrt(np.dot(flat, flat) / t.size)
    return t / (rms + epsilon)


def power_normalize(raw, p=3.0, eta=POWER_ETA):
    """|w|^p / (sum_k |w_k|^p + eta) independently at every position.

    Columns that are entirely zero map to zero columns.
    """
    if p < 1:
        raise ValueError(f"power must be >= 1, got {p}")
    if eta <= 0:
        raise ValueError(f"eta must be > 0, got {eta}")
    data = raw.data if isinstance(raw, KernelField) else np.asarray(raw, dtype=np.float64)
    if data.ndim != 2:
        raise ValueError(f"kernel data must be (K*K, M), got shape {data.shape}")
    q = np.abs(data) ** p
    out = q / (q.sum(axis=0) + eta)
    return KernelField(out, normalized=True)


def _check_kernel_params(K, dilation):
    if K < 1 or K % 2 == 0:
        raise ValueError(f"kernel size must be odd and positive, got {K}")
    if dilation not in (1, 2):
        raise ValueError(f"dilation must be 1 or 2, got {dilation}")


def unfold(img, K, dilation=1):
    """Extract every (dilated) K x K neighbourhood with replicate padding."""
    _check_kernel_params(K, dilation)
    img = _f64(img)
    if img.ndim != 3 or min(img.shape) < 1:
        raise ValueError(f"expected a (C, H, W) image, got shape {img.shape}")
    data = _backend.kernels.unfold(img, K, dilation)
    return PatchField(data, K, dilation, img.shape[1:])


def unfold_adjoint(grad, source_dims, K, dilation=1):
    """Transpose of :func:`unfold`: accumulate patch gradients onto pixels."""
    _check_kernel_params(K, dilation)
    H, W = source_dims
    return _backend.kernels.unfold_adjoint(_f64(grad), H, W, K, dilation)


def apply_kernels(patches, kernels):
    """Filter each pixel's patch with its own kernel, shared across channels.

    Each kernel acts as a weighted average: the tap-weighted sum is divided by
    the kernel's own tap sum, so the ``eta`` deficit left by
    :func:`power_normalize` cannot darken the image. Kernels that sum to one
    are applied unchanged; all-zero kernels give 0.
    """
    kd = kernels.data if isinstance(kernels, KernelField) else np.asarray(kernels)
    if patches.kernel_area != kd.shape[0] or patches.positions != kd.shape[1]:
        raise ValueError(
            f"patch field {patches.data.shape} does not match kernel field {kd.shape}")
    out = _backend.kernels.apply_kernels(patches.data, _f64(kd))
    H, W = patches.source_dims
    return out.reshape(patches.channels, H, W)


# Winograd F(2x2, 3x3): weight transform G, as one (16, 9) matrix over taps
_WINO_G = np.array([[1.0, 0.0, 0.0], [0.5, 0.5, 0.5], [0.5, -0.5, 0.5], [0.0, 0.0, 1.0]])
_WINO_GG = np.kron(_WINO_G, _WINO_G)


_scratch_local = threading.local()


def _scratch(tag, shape):
    """Reusable per-thread buffer for large internal temporaries.

    Winograd planes run to megabytes; allocating them fresh on every call
    costs more in page faults than the arithmetic. The last dimension is
    over-allocated so consecutive planes do not alias in cache.
    """
    bufs = getattr(_scratch_local, "bufs", None)
    if bufs is None:
        bufs = _scratch_local.bufs = {}
    key = (tag,) + tuple(shape)
    buf = bufs.get(key)
    if buf is None:
        if len(bufs) > 32:
            bufs.clear()
        buf = bufs[key] = np.empty(tuple(shape[:-1]) + (shape[-1] + 8,))[..., :shape[-1]]
    return buf


def _wino_in(x, tag):
    C, H, W = x.shape
    P = ((H + 1) // 2) * ((W + 1) // 2)
    return _backend.kernels.wino_in(x, _scratch(tag, (16, C, P)))


def _route(C_in, C_out):
    """Pick the cheapest 3x3 conv formulation for a layer shape.

    Wide layers go through Winograd tiles (2.25x fewer multiplies) when the
    tile transforms are compiled; layers that narrow sharply gather after
    the GEMM; the rest use im2col.
    """
    if _backend.name == "cython" and min(C_in, C_out) >= 16:
        return "winograd"
    if C_out < C_in:
        return "output"
    return "im2col"


def _wino_weights(weight):
    C_out, C_in = weight.shape[:2]
    u = _WINO_GG @ weight.reshape(C_out * C_in, 9).T
    return u.reshape(16, C_out, C_in)


def conv2d(x, weight, bias=None, relu=False):
    """Same-size cross-correlation with replicate padding; k in {1, 3}.

    ``relu=True`` applies max(., 0) in place after the bias.
    """
    x = _f64(x)
    weight = np.asarray(weight, dtype=np.float64)
    if x.ndim != 3 or weight.ndim != 4:
        raise ValueError("conv2d expects x (C_in, H, W) and weight (C_out, C_in, k, k)")
    C_out, C_in, kh, kw = weight.shape
    if kh != kw or kh not in (1, 3):
        raise ValueError(f"only 1x1 and 3x3 kernels are supported, got {kh}x{kw}")
    if x.shape[0] != C_in:
        raise ValueError(f"input has {x.shape[0]} channels, weight expects {C_in}")
    if bias is not None and np.shape(bias) != (C_out,):
        raise ValueError(f"bias must have shape ({C_out},), got {np.shape(bias)}")
    _, H, W = x.shape
    k = _backend.kernels
    if kh == 1:
        out = weight.reshape(C_out, C_in) @ x.reshape(C_in, H * W)
    else:
        route = _route(C_in, C_out)
        if route == "winograd":
            v = _wino_in(x, "v")
            m = np.matmul(_wino_weights(weight), v, out=_scratch("m", (16, C_out, v.shape[2])))
            out = k.wino_out(m, H, W).reshape(C_out, H * W)
        elif route == "output":
            wt = weight.transpose(0, 2, 3, 1).reshape(C_out * 9, C_in)
            taps = (wt @ x.reshape(C_in, H * W)).reshape(C_out, 9, H * W)
            out = k.tap_sum(taps, H, W, 3, 1)
        else:
            cols = k.unfold(x, 3, 1).reshape(C_in * 9, H * W)
            out = weight.reshape(C_out, -1) @ cols
    if bias is not None:
        out += np.asarray(bias, dtype=np.float64)[:, None]
    if relu:
        np.maximum(out, 0.0, out=out)
    return out.reshape(C_out, H, W)


def conv2d_backward(x, weight, grad, need_input=True):
    """Adjoint of :func:`conv2d`: returns (d_weight, d_bias, d_x or None)."""
    x = _f64(x)
    weight = np.asarray(weight, dtype=np.float64)
    C_out, C_in, kh, _ = weight.shape
    _, H, W = x.shape
    g = _f64(grad).reshape(C_out, H * W)
    db = g.sum(axis=1)
    dx = None
    k = _backend.kernels
    route = "1x1" if kh == 1 else _route(C_in, C_out)
    if route == "1x1":
        dw = (g @ x.reshape(C_in, H * W).T).reshape(weight.shape)
        if need_input:
            dx = (weight.reshape(C_out, C_in).T @ g).reshape(C_in, H, W)
    elif route == "winograd":
        v = _wino_in(x, "v")
        dm = k.wino_out_adjoint(g.reshape(C_out, H, W), _scratch("dm", (16, C_out, v.shape[2])))
        du = np.matmul(dm, v.transpose(0, 2, 1))
        dw = (_WINO_GG.T @ du.reshape(16, -1)).T.reshape(weight.shape)
        if need_input:
            dv = np.matmul(_wino_weights(weight).transpose(0, 2, 1), dm, out=v)
            dx = k.wino_in_adjoint(dv, H, W)
    elif route == "output":
        dtaps = k.tap_sum_adjoint(g, H, W, 3, 1).reshape(C_out * 9, H * W)
        dw = (dtaps @ x.reshape(C_in, H * W).T).reshape(C_out, 3, 3, C_in).transpose(0, 3, 1, 2)
        if need_input:
            wt = weight.transpose(0, 2, 3, 1).reshape(C_out * 9, C_in)
            dx = (wt.T @ dtaps).reshape(C_in, H, W)
    else:
        cols = k.unfold(x, 3, 1).reshape(C_in * 9, H * W)
        dw = (g @ cols.T).reshape(weight.shape)
        if need_input:
            dcols = weight.reshape(C_out, -1).T @ g
            dx = k.unfold_adjoint(dcols.reshape(C_in, 9, H * W), H, W, 3, 1)
    return np.ascontiguousarray(dw), db, dx


def channel_stats(t):
    """Per-channel mean and population std over the spatial axes."""
    t = np.asarray(t, dtype=np.float64)
    if t.ndim != 3 or t.shape[1] * t.shape[2] < 1:
        raise ValueError(f"expected a nonempty (C, H, W) tensor, got {t.shape}")
    mean = t.mean(axis=(1, 2))
    std = np.sqrt(((t - mean[:, None, None]) ** 2).mean(axis=(1, 2)))
    return ChannelStats(mean, std)
