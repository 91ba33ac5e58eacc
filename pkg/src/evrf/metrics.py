"""Image metrics and the fixed evaluation pipeline (align -> gamma -> metric)."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.signal import convolve2d

PSNR_CAP = 99.0


def gamma_correct(image, gamma: float = 2.2) -> np.ndarray:
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    return np.power(np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0), 1.0 / gamma)


def brightness_scales(rendered, target) -> np.ndarray:
    """Per-channel least-squares scale s minimizing sum (s*r - t)^2."""
    r = np.asarray(rendered, dtype=np.float64).reshape(-1, np.shape(rendered)[-1])
    t = np.asarray(target, dtype=np.float64).reshape(r.shape)
    rr = np.sum(r * r, axis=0)
    rt = np.sum(r * t, axis=0)
    return np.where(rr > 0, rt / np.where(rr > 0, rr, 1.0), 1.0)


def align_brightness(rendered, target, clip: bool = True) -> np.ndarray:
    rendered = np.asarray(rendered, dtype=np.float64)
    if rendered.shape != np.shape(target):
        raise ValueError("rendered and target differ in shape")
    out = rendered * brightness_scales(rendered, target)
    return np.clip(out, 0.0, 1.0) if clip else out


def psnr(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("images differ in shape")
    mse = float(np.mean((a - b) ** 2))
    if mse < 1e-10:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(1.0 / mse))


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-x ** 2 / (2 * sigma ** 2))
    g /= g.sum()
    return np.outer(g, g)


def ssim(a, b, data_range: float = 1.0, k1: float = 0.01, k2: float = 0.03,
         win: int = 11, sigma: float = 1.5) -> float:
    """Single-scale SSIM on the channel-mean grayscale image, averaged over valid windows."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("images differ in shape")
    if a.ndim == 3:
        a = a.mean(axis=-1)
        b = b.mean(axis=-1)
    if a.shape[0] < win or a.shape[1] < win:
        raise ValueError(f"image smaller than the {win}x{win} SSIM window")
    w = _gaussian_window(win, sigma)

    def filt(x):
        return convolve2d(x, w, mode="valid")

    mu_a, mu_b = filt(a), filt(b)
    var_a = filt(a * a) - mu_a ** 2
    var_b = filt(b * b) - mu_b ** 2
    cov = filt(a * b) - mu_a * mu_b
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    s = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / ((mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2))
    return float(np.clip(s.mean(), -1.0, 1.0))


PIPELINE = ("align_brightness", "gamma_correct", "metric")


def evaluation_views(rendered, target, gamma: float = 2.2) -> tuple[np.ndarray, np.ndarray]:
    """Apply the fixed pipeline order to a (rendered, target) pair."""
    aligned = align_brightness(rendered, target)
    return gamma_correct(aligned, gamma), gamma_correct(target, gamma)


@dataclass
class MetricReport:
    psnr: list[float] = field(default_factory=list)
    ssim: list[float] = field(default_factory=list)
    names: list[str] = field(default_factory=list)

    @property
    def mean_psnr(self) -> float:
        return float(np.mean(self.psnr)) if self.psnr else float("nan")

    @property
    def mean_ssim(self) -> float:
        return float(np.mean(self.ssim)) if self.ssim else float("nan")

    def to_dict(self) -> dict:
        return {"pipeline": list(PIPELINE),
                "images": [{"name": n, "psnr": p, "ssim": s} for n, p, s in zip(self.names, self.psnr, self.ssim)],
                "mean_psnr": self.mean_psnr, "mean_ssim": self.mean_ssim}


def evaluate_pairs(pairs, gamma: float = 2.2, names=None) -> MetricReport:
    report = MetricReport()
    for i, (rendered, target) in enumerate(pairs):
        r, t = evaluation_views(rendered, target, gamma)
        report.psnr.append(psnr(r, t))
        report.ssim.append(ssim(r, t))
        report.names.append(names[i] if names else f"view_{i:03d}")
    return report
