"""Outer denoising loop with fixed or confidence-based stopping."""

import json
import os
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .modules import did_forward

STOP_MODES = ("fixed", "kernel_dic", "image_dic")
TRACE_LEVELS = ("final_only", "kernels", "full")
CONFIDENCE_MODES = ("literal", "mean_abs")


@dataclass(frozen=True)
class EngineConfig:
    max_iterations: int = 10
    stop_mode: str = "kernel_dic"
    kappa: float = 0.015
    kernel_size: int = 3
    power: float = 3.0
    trace_level: str = "final_only"
    # "mean_abs" averages |C| instead of taking |sum C|; off by default
    confidence: str = "literal"

    def __post_init__(self):
        if self.max_iterations < 1:
            raise ValueError(f"max_iterations must be >= 1, got {self.max_iterations}")
        if not self.kappa >= 0:
            raise ValueError(f"kappa must be >= 0, got {self.kappa}")
        if self.stop_mode not in STOP_MODES:
            raise ValueError(f"stop_mode must be one of {STOP_MODES}, got {self.stop_mode!r}")
        if self.trace_level not in TRACE_LEVELS:
            raise ValueError(f"trace_level must be one of {TRACE_LEVELS}, got {self.trace_level!r}")
        if self.confidence not in CONFIDENCE_MODES:
            raise ValueError(f"confidence must be one of {CONFIDENCE_MODES}, got {self.confidence!r}")
        if self.kernel_size % 2 == 0:
            raise ValueError(f"kernel_size must be odd, got {self.kernel_size}")


@dataclass
class DenoiseResult:
    estimate: np.ndarray
    iterations_used: int
    stop_reason: str  # "max_reached" | "confidence_converged"
    confidence_history: list = field(default_factory=list)
    degenerate_kernel_count: int = 0
    dilations: list = field(default_factory=list)
    degenerate_per_iteration: list = field(default_factory=list)
    # estimates[0] is the input; filled only at trace_level="full"
    estimates: list = field(default_factory=list)
    # kernel centre planes (H, W) per iteration; trace_level "kernels" or "full"
    kernel_centers: list = field(default_factory=list)


def dilation_for(t):
    """Odd iterations look wide (dilation 2), even ones local (dilation 1)."""
    return 2 if t % 2 == 1 else 1


def confidence_score(k_t, k_prev, mode="literal"):
    """Spatially averaged change of the kernel centre weight.

    The literal form takes the absolute value of the summed signed
    differences, so opposite changes cancel.
    """
    if k_t.data.shape != k_prev.data.shape:
        raise ValueError(f"kernel fields differ: {k_t.data.shape} vs {k_prev.data.shape}")
    diff = k_t.center() - k_prev.center()
    if mode == "literal":
        return float(abs(diff.sum()) / diff.size)
    if mode == "mean_abs":
        return float(np.abs(diff).mean())
    raise ValueError(f"unknown confidence mode {mode!r}")


def image_score(est_t, est_prev):
    return float(np.mean(np.abs(est_t - est_prev)))


def denoise(img, w, cfg=EngineConfig()):
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3:
        raise ValueError(f"expected a (C, H, W) image, got shape {img.shape}")
    if cfg.kernel_size != w.kernel_size:
        raise ValueError(f"config kernel_size {cfg.kernel_size} != weights kernel_size {w.kernel_size}")
    res = DenoiseResult(estimate=img, iterations_used=0, stop_reason="max_reached")
    if cfg.trace_level == "full":
        res.estimates.append(img)
    prev, prev2, k_prev = img, None, None
    for t in range(1, cfg.max_iterations + 1):
        d = dilation_for(t)
        est, kern = did_forward(prev, prev2, w, d, cfg.power)
        n_deg = kern.degenerate_count()
        res.iterations_used = t
        res.dilations.append(d)
        res.degenerate_per_iteration.append(n_deg)
        res.degenerate_kernel_count += n_deg
        if cfg.trace_level != "final_only":
            H, W = img.shape[1:]
            res.kernel_centers.append(kern.center().reshape(H, W).copy())
        if cfg.trace_level == "full":
            res.estimates.append(est)
        stop = False
        if t >= 2:
            if cfg.stop_mode == "image_dic":
                score = image_score(est, prev)
            else:
                score = confidence_score(kern, k_prev, cfg.confidence)
            res.confidence_history.append(score)
            stop = cfg.stop_mode != "fixed" and score < cfg.kappa
        prev2, prev, k_prev = prev, est, kern
        if stop:
            res.stop_reason = "confidence_converged"
            break
    res.estimate = prev
    return res


def iteration_stats(results):
    """Mean/min/max iterations and stop-reason tallies over a batch of runs."""
    if not results:
        raise ValueError("iteration_stats needs at least one result")
    its = [r.iterations_used for r in results]
    return {
        "count": len(its),
        "mean": float(np.mean(its)),
        "min": int(min(its)),
        "max": int(max(its)),
        "stop_reasons": dict(Counter(r.stop_reason for r in results)),
    }


def dump_trace(result, out_dir, save_image):
    """Write per-iteration estimates and a ``trace.jsonl`` with one object per step."""
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "trace.jsonl"), "w") as fh:
        for t in range(1, result.iterations_used + 1):
            conf = result.confidence_history[t - 2] if t >= 2 else None
            rec = {"t": t, "dilation": result.dilations[t - 1], "confidence": conf,
                   "degenerate_kernels": result.degenerate_per_iteration[t - 1]}
            fh.write(json.dumps(rec) + "\n")
    for t, est in enumerate(result.estimates[1:], start=1):
        save_image(est, os.path.join(out_dir, f"iter_{t:02d}.png"))
    for t, c in enumerate(result.kernel_centers, start=1):
        np.save(os.path.join(out_dir, f"kernel_center_{t:02d}.npy"), c)
