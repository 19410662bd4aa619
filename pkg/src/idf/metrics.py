"""PSNR and SSIM for images in [0, 1]."""

import csv
from dataclasses import dataclass, field

import numpy as np

PSNR_CAP = 100.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def _pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[None], b[None]
    return a, b


def psnr(a, b):
    """10*log10(1/MSE) with peak 1.0, capped at 100 dB for near-identical images."""
    a, b = _pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse < 1e-10:
        return PSNR_CAP
    return float(10.0 * np.log10(1.0 / mse))


def gaussian_window(size=SSIM_WINDOW, sigma=SSIM_SIGMA):
    ax = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(ax ** 2) / (2.0 * sigma ** 2))
    g /= g.sum()
    return g


def _filter_valid(x, g):
    # separable correlation over the last two axes, valid positions only
    n = len(g)
    H, W = x.shape[-2:]
    rows = sum(g[i] * x[..., i:H - n + 1 + i, :] for i in range(n))
    return sum(g[i] * rows[..., :, i:W - n + 1 + i] for i in range(n))


def ssim(a, b, data_range=1.0):
    """Mean SSIM (11x11 Gaussian window, sigma 1.5), averaged over channels."""
    a, b = _pair(a, b)
    if min(a.shape[-2:]) < SSIM_WINDOW:
        raise ValueError(f"images must be at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {a.shape[-2:]}")
    g = gaussian_window()
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    mu_a = _filter_valid(a, g)
    mu_b = _filter_valid(b, g)
    saa = _filter_valid(a * a, g) - mu_a ** 2
    sbb = _filter_valid(b * b, g) - mu_b ** 2
    sab = _filter_valid(a * b, g) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * sab + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (saa + sbb + c2)
    per_channel = (num / den).mean(axis=(-2, -1))
    return float(per_channel.mean())


@dataclass
class MetricReport:
    psnr_db: float
    ssim: float
    rows: list = field(default_factory=list)  # (name, psnr, ssim)


def evaluate(pairs):
    """``pairs`` is an iterable of (name, pred, ref); returns a MetricReport of means."""
    rows = [(name, psnr(p, r), ssim(p, r)) for name, p, r in pairs]
    if not rows:
        raise ValueError("nothing to evaluate")
    return MetricReport(float(np.mean([r[1] for r in rows])),
                        float(np.mean([r[2] for r in rows])), rows)


def write_report_csv(report, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["image", "psnr_db", "ssim"])
        for name, p, s in report.rows:
            w.writerow([name, f"{p:.4f}", f"{s:.6f}"])
        w.writerow(["mean", f"{report.psnr_db:.4f}", f"{report.ssim:.6f}"])


def table_rows_markdown(rows):
    """Markdown table of (noise, dataset, psnr, ssim) rows in PSNR/SSIM layout."""
    lines = ["| Noise | Dataset | PSNR (dB) | SSIM |", "|---|---|---|---|"]
    for noise, dataset, p, s in rows:
        lines.append(f"| {noise} | {dataset} | {p:.2f} | {s:.4f} |")
    return "\n".join(lines) + "\n"
