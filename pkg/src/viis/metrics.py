"""Image quality metrics on 8-bit luminance.

Every metric converts its input to grayscale (ITU-R 601 weights) and
quantises to integer levels 0..255 before measuring, so values are directly
comparable with figures reported on 8-bit images.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

LUMA = np.array([0.299, 0.587, 0.114])
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = (0.01 * 255) ** 2
SSIM_C2 = (0.03 * 255) ** 2
CSV_COLUMNS = ("image", "sd", "en", "psnr", "ssim")
# filled in from external tools; no implementation here
RESERVED_COLUMNS = ("niqe", "brisque")


class MetricError(ValueError):
    pass


def to_gray(img: np.ndarray) -> np.ndarray:
    """``H x W x 3`` unit-interval RGB to ``H x W`` luminance."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3 or img.shape[-1] != 3:
        raise MetricError(f"to_gray expects H x W x 3, got {img.shape}")
    return img @ LUMA


def luminance8(img: np.ndarray) -> np.ndarray:
    """Quantised 0..255 luminance (as float64) of a gray or RGB image."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 3 and img.shape[-1] == 3:
        img = to_gray(img)
    elif img.ndim == 3 and img.shape[-1] == 1:
        img = img[..., 0]
    elif img.ndim != 2:
        raise MetricError(f"expected H x W, H x W x 1 or H x W x 3 image, got {img.shape}")
    if img.size == 0:
        raise MetricError("empty image")
    return np.round(np.clip(img, 0.0, 1.0) * 255.0)


def sd(img: np.ndarray) -> float:
    """Population standard deviation of 8-bit luminance."""
    return float(luminance8(img).std())


def en(img: np.ndarray) -> float:
    """Shannon entropy, in bits, of the 256-bin luminance histogram."""
    hist = np.bincount(luminance8(img).astype(np.int64).ravel(), minlength=256)
    p = hist[hist > 0] / hist.sum()
    return float(-(p * np.log2(p)).sum())


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """Peak signal-to-noise ratio in dB; ``inf`` for identical inputs."""
    if np.shape(a) != np.shape(b):
        raise MetricError(f"shape mismatch {np.shape(a)} vs {np.shape(b)}")
    mse = float(np.mean((luminance8(a) - luminance8(b)) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(255.0 ** 2 / mse)


def _gauss_window() -> np.ndarray:
    x = np.arange(SSIM_WINDOW) - SSIM_WINDOW // 2
    g = np.exp(-(x ** 2) / (2 * SSIM_SIGMA ** 2))
    return g / g.sum()


def _filter_valid(x: np.ndarray, g: np.ndarray) -> np.ndarray:
    # separable Gaussian, keeping only windows fully inside the image
    h = SSIM_WINDOW // 2
    y = ndimage.correlate1d(x, g, axis=0, mode="constant")[h:-h or None]
    return ndimage.correlate1d(y, g, axis=1, mode="constant")[:, h:-h or None]


def ssim_map(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if np.shape(a) != np.shape(b):
        raise MetricError(f"shape mismatch {np.shape(a)} vs {np.shape(b)}")
    x, y = luminance8(a), luminance8(b)
    if min(x.shape) < SSIM_WINDOW:
        raise MetricError(f"image {x.shape} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window")
    g = _gauss_window()
    mx, my = _filter_valid(x, g), _filter_valid(y, g)
    sxx = _filter_valid(x * x, g) - mx * mx
    syy = _filter_valid(y * y, g) - my * my
    sxy = _filter_valid(x * y, g) - mx * my
    num = (2 * mx * my + SSIM_C1) * (2 * sxy + SSIM_C2)
    den = (mx * mx + my * my + SSIM_C1) * (sxx + syy + SSIM_C2)
    return num / den


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Mean SSIM over all 11x11 Gaussian windows fully inside the image."""
    return float(ssim_map(a, b).mean())


@dataclass
class MetricReport:
    rows: dict[str, dict[str, float]] = field(default_factory=dict)

    def add(self, name: str, pred: np.ndarray, ref: np.ndarray | None = None) -> dict[str, float]:
        row = {"sd": sd(pred), "en": en(pred)}
        if ref is not None:
            row["psnr"] = psnr(pred, ref)
            row["ssim"] = ssim(pred, ref)
        self.rows[name] = row
        return row

    def merge(self, column: str, values: dict[str, float]) -> None:
        """Attach externally computed scores (e.g. NIQE) to existing rows."""
        for name, v in values.items():
            if name not in self.rows:
                raise KeyError(f"no row for image {name!r}")
            self.rows[name][column] = float(v)

    def means(self) -> dict[str, float]:
        cols = sorted({k for r in self.rows.values() for k in r})
        return {c: float(np.mean([r[c] for r in self.rows.values() if c in r])) for c in cols}

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(CSV_COLUMNS)
            for name in sorted(self.rows):
                r = self.rows[name]
                w.writerow([name] + [format_value(r.get(c, math.nan)) for c in CSV_COLUMNS[1:]])


def format_value(v: float) -> str:
    if math.isinf(v):
        return "inf" if v > 0 else "-inf"
    if math.isnan(v):
        return ""
    return f"{v:.4f}"


def read_csv(path) -> dict[str, dict[str, float]]:
    out = {}
    with open(Path(path), newline="") as fh:
        for row in csv.DictReader(fh):
            name = row.pop("image")
            out[name] = {k: (float(v) if v else math.nan) for k, v in row.items()}
    return out
