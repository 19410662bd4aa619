"""Supervised training of the shared block with hand-written reverse mode.

The loss is the L1 distance between the last iterate and the clean target,
differentiated through every unrolled step. The local-correlation field is
a stop-gradient: backward treats it as a constant input, and
:func:`grad_check` freezes it the same way when taking finite differences.
"""

import logging
import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import core
from .engine import dilation_for
from .modules import PARAM_NAMES, ModelWeights, did_forward
from .noise import NoiseSpec, make_rng

log = logging.getLogger(__name__)

CLAMP_GRADS = ("straight_through", "hard")


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 2000
    learning_rate: float = 1e-4
    batch_size: int = 8
    patch_size: int = 48
    unroll_T: int = 10
    noise: NoiseSpec = NoiseSpec("gaussian", 15.0)
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    seed: int = 0
    hidden_width: int = 56
    kernel_size: int = 3
    power: float = 3.0
    clamp_grad: str = "straight_through"
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.steps < 0:
            raise ValueError(f"steps must be >= 0, got {self.steps}")
        if self.batch_size < 1 or self.unroll_T < 1:
            raise ValueError("batch_size and unroll_T must be >= 1")
        if self.patch_size < 2 * self.kernel_size + 1:
            raise ValueError(f"patch_size must be >= {2 * self.kernel_size + 1}, got {self.patch_size}")
        if self.clamp_grad not in CLAMP_GRADS:
            raise ValueError(f"clamp_grad must be one of {CLAMP_GRADS}, got {self.clamp_grad!r}")


def l1_loss(pred, target):
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {target.shape}")
    return float(np.mean(np.abs(pred - target)))


class Tape:
    """Saved activations of one batch forward; consumed by :func:`backward`."""

    def __init__(self, weights, batch, cfg, caches, preds, loss):
        self.weights = weights
        self.batch = batch
        self.cfg = cfg
        self.caches = caches  # caches[b][t-1] per sample and iteration
        self.preds = preds
        self.loss = loss
        self.valid = True

    def corr_fields(self):
        return [[c["corr"] for c in per] for per in self.caches]

    def replay(self):
        """Recompute the loss from the recorded inputs with frozen correlations."""
        loss, _ = forward_with_tape(self.batch, self.weights, self.cfg,
                                    frozen_corr=self.corr_fields())
        return loss

    def kink_signature(self):
        """Bytes identifying which side of every non-smooth point the forward took."""
        parts = []
        for per, (_, clean), pred in zip(self.caches, self.batch, self.preds):
            for c in per:
                parts += [c["h1"] > 0, c["f"] > 0, c["g1"] > 0,
                          (c["y"] >= 0) & (c["y"] <= 1)]
            parts.append(np.sign(pred - clean))
        return b"".join(np.packbits(p.ravel() > 0).tobytes() if p.dtype == bool
                        else p.astype(np.int8).tobytes() for p in parts)


def forward_with_tape(batch, weights, cfg, frozen_corr=None):
    """Unrolled fixed-T forward over ``batch`` of (noisy, clean) pairs."""
    caches, preds, losses = [], [], []
    for b, (noisy, clean) in enumerate(batch):
        prev, prev2 = np.asarray(noisy, dtype=np.float64), None
        per = []
        for t in range(1, cfg.unroll_T + 1):
            cache = {}
            corr = None if frozen_corr is None else frozen_corr[b][t - 1]
            est, _ = did_forward(prev, prev2, weights, dilation_for(t), cfg.power,
                                 corr=corr, cache=cache)
            per.append(cache)
            prev2, prev = prev, est
        caches.append(per)
        preds.append(prev)
        losses.append(l1_loss(prev, clean))
    loss = float(np.mean(losses))
    return loss, Tape(weights, batch, cfg, caches, preds, loss)


def _rms_backward(a, g, eps=core.RMS_EPS):
    n = a.size
    r = np.sqrt(np.mean(a * a))
    d = r + eps
    out = g / d
    if r > 0:
        out -= a * (np.sum(g * a) / (d * d * n * r))
    return out


def did_backward(c, g_out, w, grads, clamp_grad="straight_through", need_input=True):
    """Reverse pass of one block; accumulates into ``grads``.

    Returns the gradients w.r.t. the block's two image inputs (the second is
    None when the residual was zero).
    """
    x = c["x"]
    C, H, W = x.shape
    K = w.kernel_size
    g = g_out.reshape(C, H * W)
    if clamp_grad == "hard":
        y = c["y"].reshape(C, H * W)
        g = g * ((y >= 0) & (y <= 1))
    patches = c["patches"].data
    kern = c["kern"].data
    s = kern.sum(axis=0)
    ok = s > 0
    inv = np.where(ok, 1.0 / np.where(ok, s, 1.0), 0.0)
    y_flat = c["y"].reshape(C, H * W)

    # weighted-average application
    dk = np.einsum("cm,cim->im", g, patches) - np.einsum("cm,cm->m", g, y_flat)[None]
    dk *= inv
    dx = None
    if need_input:
        dpatch = kern[None] * (g * inv)[:, None, :]
        dx = core.unfold_adjoint(dpatch, (H, W), K, c["dilation"])

    # power normalization
    raw = c["raw"]
    p = c["power"]
    q_sum = np.sum(np.abs(raw) ** p, axis=0) + core.POWER_ETA
    dq = (dk - np.sum(dk * kern, axis=0)) / q_sum
    draw = dq * p * np.abs(raw) ** (p - 1) * np.sign(raw)

    # kernel prediction conv on the normalized concat
    dw5, db5, dun = core.conv2d_backward(c["un"], w["kpm.conv.w"], draw.reshape(-1, H, W), True)
    grads["kpm.conv.w"] += dw5
    grads["kpm.conv.b"] += db5
    du = _rms_backward(c["u"], dun)
    ch = w.hidden_width
    gate, f = c["gate"], c["f"]
    df = du[:ch] * gate[:, None, None]
    dgate = np.einsum("chw,chw->c", du[:ch], f)

    # global statistics gate
    dg2 = dgate * gate * (1.0 - gate)
    grads["gsm.conv2.w"] += np.outer(dg2, c["h3"])[:, :, None, None]
    grads["gsm.conv2.b"] += dg2
    dg1 = (w["gsm.conv2.w"][:, :, 0, 0].T @ dg2) * (c["g1"] > 0)
    grads["gsm.conv1.w"] += np.outer(dg1, c["sn"])[:, :, None, None]
    grads["gsm.conv1.b"] += dg1
    dx2 = None
    if c["has_prev2"]:
        ds = _rms_backward(c["s"], w["gsm.conv1.w"][:, :, 0, 0].T @ dg1)
        st = c["stats"]
        res = c["residual"]
        n = H * W
        centered = res - st.mean[:, None, None]
        std_safe = np.where(st.std > 0, st.std, 1.0)
        dstd = np.where(st.std > 0, ds[C:] / std_safe, 0.0)
        dres = ds[:C, None, None] / n + centered * (dstd[:, None, None] / n)
        if need_input:
            dx = dx + dres
        dx2 = -dres

    # feature extraction
    dz2 = df * (c["f"] > 0)
    dw2, db2, dh1 = core.conv2d_backward(c["h1"], w["fem.conv2.w"], dz2, True)
    grads["fem.conv2.w"] += dw2
    grads["fem.conv2.b"] += db2
    dz1 = dh1 * (c["h1"] > 0)
    dw1, db1, da0 = core.conv2d_backward(c["a0"], w["fem.conv1.w"], dz1, need_input)
    grads["fem.conv1.w"] += dw1
    grads["fem.conv1.b"] += db1
    if need_input:
        dx = dx + _rms_backward(x, da0)
    return dx, dx2


def backward(tape, loss_scale=1.0):
    """Exact gradients of ``loss_scale * tape.loss`` w.r.t. every weight tensor."""
    if not tape.valid:
        raise RuntimeError("tape already consumed by backward(); run forward_with_tape again")
    w = tape.weights
    grads = {k: np.zeros_like(v) for k, v in w.params.items()}
    B = len(tape.batch)
    for per, (_, clean), pred in zip(tape.caches, tape.batch, tape.preds):
        T = len(per)
        g_est = [None] * (T + 1)
        g_est[T] = loss_scale * np.sign(pred - clean) / (pred.size * B)
        for t in range(T, 0, -1):
            g = g_est[t]
            if g is None:
                continue
            dx, dx2 = did_backward(per[t - 1], g, w, grads, tape.cfg.clamp_grad,
                                   need_input=t > 1)
            if t > 1:
                g_est[t - 1] = dx if g_est[t - 1] is None else g_est[t - 1] + dx
            if dx2 is not None and t > 2:
                g_est[t - 2] = dx2 if g_est[t - 2] is None else g_est[t - 2] + dx2
    tape.valid = False
    tape.caches = None
    return grads


def init_adam_state(weights):
    return {"step": 0,
            "m": {k: np.zeros_like(v) for k, v in weights.params.items()},
            "v": {k: np.zeros_like(v) for k, v in weights.params.items()}}


def adamw_step(weights, grads, state, cfg):
    """Bias-corrected Adam with decoupled weight decay. Returns (weights, state)."""
    for name, g in grads.items():
        if np.shape(g) != weights.params[name].shape:
            raise ValueError(f"gradient {name} has shape {np.shape(g)}, "
                             f"expected {weights.params[name].shape}")
    t = state["step"] + 1
    lr = cfg.learning_rate
    bc1 = 1.0 - cfg.beta1 ** t
    bc2 = 1.0 - cfg.beta2 ** t
    new_params, m_new, v_new = {}, {}, {}
    for name, p in weights.params.items():
        g = grads[name]
        m = cfg.beta1 * state["m"][name] + (1.0 - cfg.beta1) * g
        v = cfg.beta2 * state["v"][name] + (1.0 - cfg.beta2) * g * g
        p = p * (1.0 - lr * cfg.weight_decay)
        p = p - lr * (m / bc1) / (np.sqrt(v / bc2) + cfg.eps)
        new_params[name], m_new[name], v_new[name] = p, m, v
    return weights.with_params(new_params), {"step": t, "m": m_new, "v": v_new}


def _as_rgb(img):
    return np.repeat(img, 3, axis=0) if img.shape[0] == 1 else img


def sample_batch(images, cfg, rng):
    """Random patches with independent horizontal/vertical flips, then noise."""
    ps = cfg.patch_size
    batch = []
    for _ in range(cfg.batch_size):
        img = images[rng.integers(len(images))]
        _, H, W = img.shape
        r = rng.integers(H - ps + 1)
        c = rng.integers(W - ps + 1)
        patch = img[:, r:r + ps, c:c + ps]
        if rng.random() < 0.5:
            patch = patch[:, :, ::-1]
        if rng.random() < 0.5:
            patch = patch[:, ::-1, :]
        clean = np.ascontiguousarray(patch)
        noisy = cfg.noise.apply(clean, rng)
        batch.append((noisy, clean))
    return batch


@dataclass
class TrainResult:
    weights: ModelWeights
    log: list = field(default_factory=list)  # (step, loss, wall_ms)


def train(data, cfg, weights=None, checkpoint=None):
    """Train on a directory of PNGs (or a list of (C, H, W) arrays).

    ``checkpoint(weights, step)`` is called every ``cfg.checkpoint_every``
    steps when both are set.
    """
    if isinstance(data, (str, os.PathLike)):
        from .io import load_dataset
        images = [img for _, img in load_dataset(data)]
    else:
        images = list(data)
    if not images:
        raise ValueError("training set is empty")
    images = [_as_rgb(np.asarray(img, dtype=np.float64)) for img in images]
    for img in images:
        if min(img.shape[1:]) < cfg.patch_size:
            raise ValueError(f"image of size {img.shape[1:]} is smaller than patch_size {cfg.patch_size}")
    if weights is None:
        weights = ModelWeights.init(cfg.hidden_width, cfg.kernel_size, 3, seed=cfg.seed)
    state = init_adam_state(weights)
    rng = make_rng(cfg.seed, stream=1)
    result = TrainResult(weights)
    t0 = time.perf_counter()
    for step in range(1, cfg.steps + 1):
        batch = sample_batch(images, cfg, rng)
        loss, tape = forward_with_tape(batch, weights, cfg)
        grads = backward(tape)
        weights, state = adamw_step(weights, grads, state, cfg)
        wall_ms = (time.perf_counter() - t0) * 1e3
        result.log.append((step, loss, wall_ms))
        if step % 100 == 0:
            log.info("step %d loss %.5f (%.1fs)", step, loss, wall_ms / 1e3)
        if checkpoint is not None and cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
            checkpoint(weights, step)
    result.weights = weights
    return result


def grad_check(weights, sample, cfg, h=1e-5, atol=1e-8):
    """Compare analytic gradients with central differences, per tensor.

    A parameter is excluded (and counted) when nudging it by +-h flips a
    ReLU, clamp or L1 sign somewhere in the forward pass, since the
    difference quotient then straddles a kink.
    """
    batch = [sample]
    loss, tape = forward_with_tape(batch, weights, cfg)
    frozen = tape.corr_fields()
    base_sig = tape.kink_signature()
    analytic = backward(tape)
    report = {"loss": loss, "tensors": {}, "excluded": 0, "total": 0, "max_rel_err": 0.0}
    for name in PARAM_NAMES:
        base = weights.params[name]
        worst = 0.0
        excluded = 0
        for idx in np.ndindex(base.shape):
            vals = []
            sigs = []
            for sgn in (1.0, -1.0):
                p = base.copy()
                p[idx] += sgn * h
                pw = weights.with_params({**weights.params, name: p})
                lv, tp = forward_with_tape(batch, pw, cfg, frozen_corr=frozen)
                vals.append(lv)
                sigs.append(tp.kink_signature())
            if sigs[0] != base_sig or sigs[1] != base_sig:
                excluded += 1
                continue
            num = (vals[0] - vals[1]) / (2 * h)
            a = analytic[name][idx]
            err = abs(a - num) / max(abs(a), abs(num), atol)
            worst = max(worst, err)
        report["tensors"][name] = {"max_rel_err": worst, "excluded": excluded, "size": base.size}
        report["excluded"] += excluded
        report["total"] += base.size
        report["max_rel_err"] = max(report["max_rel_err"], worst)
    return report
