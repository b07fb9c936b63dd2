"""PSNR, SSIM and error maps on magnitude images."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from dunmri.layers import _corr_valid, gaussian_window

PSNR_CAP = 99.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def _pair(ref, test) -> tuple[np.ndarray, np.ndarray]:
    ref = np.abs(np.asarray(ref)) if np.iscomplexobj(ref) else np.asarray(ref, dtype=np.float64)
    test = np.abs(np.asarray(test)) if np.iscomplexobj(test) else np.asarray(test, dtype=np.float64)
    if ref.shape != test.shape:
        raise ValueError(f"shape mismatch: {ref.shape} vs {test.shape}")
    return ref, test


def psnr(ref, test, data_range: float | None = None) -> float:
    """10 log10(range^2 / MSE), capped at 99 dB for identical inputs."""
    ref, test = _pair(ref, test)
    data_range = float(ref.max()) if data_range is None else float(data_range)
    if data_range <= 0:
        raise ValueError(f"data_range must be > 0, got {data_range}")
    mse = float(np.mean((ref - test) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(data_range ** 2 / mse))


def _filt(a: np.ndarray, taps: np.ndarray) -> np.ndarray:
    return _corr_valid(_corr_valid(a, taps, -1), taps, -2)


def ssim_map(ref, test, data_range: float | None = None, window: int = SSIM_WINDOW,
             sigma: float = SSIM_SIGMA, k1: float = SSIM_K1, k2: float = SSIM_K2) -> np.ndarray:
    ref, test = _pair(ref, test)
    if min(ref.shape[-2:]) < window:
        raise ValueError(f"image {ref.shape[-2:]} is smaller than the {window}x{window} window")
    data_range = float(ref.max()) if data_range is None else float(data_range)
    taps = gaussian_window(window, sigma)
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    mx, my = _filt(test, taps), _filt(ref, taps)
    sxx = _filt(test * test, taps) - mx * mx
    syy = _filt(ref * ref, taps) - my * my
    sxy = _filt(test * ref, taps) - mx * my
    num = (2.0 * mx * my + c1) * (2.0 * sxy + c2)
    den = (mx * mx + my * my + c1) * (sxx + syy + c2)
    return num / den


def ssim(ref, test, data_range: float | None = None, window: int = SSIM_WINDOW,
         sigma: float = SSIM_SIGMA, k1: float = SSIM_K1, k2: float = SSIM_K2) -> float:
    """Mean SSIM with an 11x11 Gaussian window (sigma 1.5), valid region only."""
    return float(ssim_map(ref, test, data_range, window, sigma, k1, k2).mean())


def error_map(ref, test) -> np.ndarray:
    """|ref - test| scaled by the reference's data range, clipped to [0, 1]."""
    ref, test = _pair(ref, test)
    rng_ = float(ref.max() - ref.min())
    diff = np.abs(ref - test)
    if rng_ == 0:
        rng_ = float(diff.max()) or 1.0
    return np.clip(diff / rng_, 0.0, 1.0)


@dataclass
class MetricReport:
    slice_ids: list = field(default_factory=list)
    psnr_db: list[float] = field(default_factory=list)
    ssim: list[float] = field(default_factory=list)

    def add(self, slice_id, psnr_value: float, ssim_value: float) -> None:
        self.slice_ids.append(slice_id)
        self.psnr_db.append(float(psnr_value))
        self.ssim.append(float(ssim_value))

    @property
    def psnr_mean(self) -> float:
        return float(np.mean(self.psnr_db))

    @property
    def psnr_std(self) -> float:
        return float(np.std(self.psnr_db))

    @property
    def ssim_mean(self) -> float:
        return float(np.mean(self.ssim))

    @property
    def ssim_std(self) -> float:
        return float(np.std(self.ssim))

    def to_csv(self, path) -> None:
        with open(Path(path), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["slice_id", "psnr_db", "ssim"])
            for sid, p, s in zip(self.slice_ids, self.psnr_db, self.ssim):
                w.writerow([sid, repr(p), repr(s)])
            w.writerow(["mean", repr(self.psnr_mean), repr(self.ssim_mean)])
            w.writerow(["std", repr(self.psnr_std), repr(self.ssim_std)])


def evaluate_volume(refs, tests, slice_ids=None, **ssim_kw) -> MetricReport:
    """Per-slice metrics with one data range (max of the reference volume).

    ``ssim_kw`` (window, sigma, k1, k2) overrides the SSIM constants.
    """
    refs = [np.abs(r) for r in refs]
    data_range = max(float(r.max()) for r in refs)
    report = MetricReport()
    ids = range(len(refs)) if slice_ids is None else slice_ids
    for sid, r, t in zip(ids, refs, tests):
        report.add(sid, psnr(r, t, data_range), ssim(r, t, data_range, **ssim_kw))
    return report
