"""The shared denoising block: feature extraction, global noise statistics,
local correlation and kernel prediction, composed into one filtering step.

A single :class:`ModelWeights` instance serves every iteration. The forward
functions accept an optional ``cache`` dict; when given, intermediate
activations are stored in it for the reverse pass in :mod:`idf.trainer`.
"""

from dataclasses import dataclass

import numpy as np

from . import core
from .core import _backend

LCM_WINDOW = 7
LCM_TAU = 1e-8

PARAM_NAMES = (
    "fem.conv1.w", "fem.conv1.b", "fem.conv2.w", "fem.conv2.b",
    "gsm.conv1.w", "gsm.conv1.b", "gsm.conv2.w", "gsm.conv2.b",
    "kpm.conv.w", "kpm.conv.b",
)


def param_shapes(hidden_width=56, kernel_size=3, channels=3):
    ch, k2, c = hidden_width, kernel_size * kernel_size, channels
    return {
        "fem.conv1.w": (ch, c, 3, 3), "fem.conv1.b": (ch,),
        "fem.conv2.w": (ch, ch, 3, 3), "fem.conv2.b": (ch,),
        "gsm.conv1.w": (ch, 2 * c, 1, 1), "gsm.conv1.b": (ch,),
        "gsm.conv2.w": (ch, ch, 1, 1), "gsm.conv2.b": (ch,),
        "kpm.conv.w": (k2, ch + k2, 3, 3), "kpm.conv.b": (k2,),
    }


def param_count(hidden_width=56, kernel_size=3, channels=3):
    return sum(int(np.prod(s)) for s in param_shapes(hidden_width, kernel_size, channels).values())


@dataclass(frozen=True)
class ModelWeights:
    """Named parameter tensors of the shared block (treated as immutable)."""

    params: dict
    hidden_width: int = 56
    kernel_size: int = 3
    channels: int = 3

    def __post_init__(self):
        if self.kernel_size % 2 == 0:
            raise ValueError(f"kernel_size must be odd, got {self.kernel_size}")
        expected = param_shapes(self.hidden_width, self.kernel_size, self.channels)
        missing = set(expected) - set(self.params)
        extra = set(self.params) - set(expected)
        if missing or extra:
            raise ValueError(f"parameter set mismatch: missing {sorted(missing)}, extra {sorted(extra)}")
        for name, shape in expected.items():
            if tuple(np.shape(self.params[name])) != shape:
                raise ValueError(
                    f"tensor {name} has shape {np.shape(self.params[name])}, expected {shape}")

    @classmethod
    def init(cls, hidden_width=56, kernel_size=3, channels=3, seed=0):
        """Kaiming-uniform (fan-in) weights and zero biases."""
        rng = np.random.default_rng(seed)
        params = {}
        for name, shape in param_shapes(hidden_width, kernel_size, channels).items():
            if name.endswith(".b"):
                params[name] = np.zeros(shape)
            else:
                fan_in = int(np.prod(shape[1:]))
                bound = np.sqrt(6.0 / fan_in)
                params[name] = rng.uniform(-bound, bound, shape)
        return cls(params, hidden_width, kernel_size, channels)

    def with_params(self, params):
        return ModelWeights(dict(params), self.hidden_width, self.kernel_size, self.channels)

    def __getitem__(self, name):
        return self.params[name]

    def count(self):
        return sum(int(v.size) for v in self.params.values())


def relu(a):
    return np.maximum(a, 0.0)


def sigmoid(a):
    out = np.empty_like(a)
    pos = a >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
    e = np.exp(a[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def fem_forward(est, w, cache=None):
    """Two ReLU 3x3 convolutions on the RMS-normalized estimate."""
    a0 = core.rms_normalize(est)
    h1 = core.conv2d(a0, w["fem.conv1.w"], w["fem.conv1.b"], relu=True)
    f = core.conv2d(h1, w["fem.conv2.w"], w["fem.conv2.b"], relu=True)
    if cache is not None:
        cache.update(a0=a0, h1=h1, f=f)
    return f


def gsm_forward(residual, w, cache=None):
    """Per-channel gate from the mean/std of the last iteration's residual."""
    st = core.channel_stats(residual)
    s = np.concatenate([st.mean, st.std])
    sn = core.rms_normalize(s)
    g1 = w["gsm.conv1.w"][:, :, 0, 0] @ sn + w["gsm.conv1.b"]
    h3 = relu(g1)
    g2 = w["gsm.conv2.w"][:, :, 0, 0] @ h3 + w["gsm.conv2.b"]
    gate = sigmoid(g2)
    if cache is not None:
        cache.update(residual=residual, stats=st, s=s, sn=sn, g1=g1, h3=h3, gate=gate)
    return gate


def lcm_forward(est, K, dilation, window=LCM_WINDOW):
    """Windowed Pearson correlation between each tap and the centre pixel.

    Returns a (K*K, H, W) field averaged over channels. Windows whose
    variance is below ``LCM_TAU`` count as uncorrelated; the centre tap is
    always 1.
    """
    if window % 2 == 0 or K % 2 == 0:
        raise ValueError("window and kernel size must be odd")
    core._check_kernel_params(K, dilation)
    est = core._f64(est)
    return _backend.kernels.local_correlation(est, K, dilation, window, LCM_TAU)


def kpm_forward(f_fe, f_gs, f_lc, w, power=3.0, cache=None):
    if f_fe.shape[1:] != f_lc.shape[1:]:
        raise ValueError(f"feature map {f_fe.shape} and correlation field {f_lc.shape} differ spatially")
    if f_gs.shape != (f_fe.shape[0],):
        raise ValueError(f"gate shape {f_gs.shape} does not match {f_fe.shape[0]} feature channels")
    _, H, W = f_fe.shape
    ch = f_fe.shape[0]
    un = np.empty((ch + f_lc.shape[0], H, W))
    if cache is None:
        # rms of the gated concat without materializing it first
        ss = np.dot(np.einsum("chw,chw->c", f_fe, f_fe), f_gs * f_gs) + np.vdot(f_lc, f_lc)
        scale = 1.0 / (np.sqrt(ss / un.size) + core.RMS_EPS)
        np.multiply(f_fe, (f_gs * scale)[:, None, None], out=un[:ch])
        np.multiply(f_lc, scale, out=un[ch:])
    else:
        u = un
        np.multiply(f_fe, f_gs[:, None, None], out=u[:ch])
        u[ch:] = f_lc
        un = core.rms_normalize(u)
    raw = core.conv2d(un, w["kpm.conv.w"], w["kpm.conv.b"])
    raw = raw.reshape(raw.shape[0], H * W)
    kern = core.power_normalize(raw, power)
    if cache is not None:
        cache.update(corr=f_lc, u=u, un=un, raw=raw, kern=kern)
    return kern


def did_forward(est_prev, est_prev2, w, dilation, power=3.0, *,
                corr=None, cache=None, lcm_window=LCM_WINDOW):
    """One filtering step. Returns ``(est_next, kernels)``.

    ``est_prev2=None`` means first iteration (zero residual). ``corr`` may be
    passed to reuse a precomputed correlation field.
    """
    x = core._f64(est_prev)
    K = w.kernel_size
    f = fem_forward(x, w, cache)
    residual = np.zeros_like(x) if est_prev2 is None else x - est_prev2
    gate = gsm_forward(residual, w, cache)
    if corr is None:
        corr = lcm_forward(x, K, dilation, lcm_window)
    kern = kpm_forward(f, gate, corr, w, power, cache)
    patches = core.unfold(x, K, dilation)
    y = core.apply_kernels(patches, kern)
    out = np.clip(y, 0.0, 1.0)
    if cache is not None:
        cache.update(x=x, has_prev2=est_prev2 is not None, dilation=dilation,
                     power=power, patches=patches, y=y)
    return out, kern
