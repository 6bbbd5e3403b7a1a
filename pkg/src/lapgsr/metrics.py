"""PSNR, SSIM and dataset-level evaluation reports."""
from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from lapgsr.errors import DataError, ShapeError
from lapgsr.pyramid import up2

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03

Predictor = Callable[[np.ndarray, np.ndarray], np.ndarray]


def _same_shape(a, b) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"image shapes differ: {a.shape} vs {b.shape}", expected=a.shape, got=b.shape)
    return a, b


def psnr(a, b, peak: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; ``inf`` for identical images."""
    if peak <= 0:
        raise ValueError(f"peak must be positive, got {peak}")
    a, b = _same_shape(a, b)
    err = np.mean((a - b) ** 2)
    if err == 0:
        return math.inf
    return float(10 * np.log10(peak**2 / err))


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-(x**2) / (2 * sigma**2))
    return g / g.sum()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    k = g.size
    rows = sliding_window_view(img, k, axis=-2) @ g
    return sliding_window_view(rows, k, axis=-1) @ g


def ssim_map(a, b, data_range: float = 1.0) -> np.ndarray:
    """Windowed SSIM over the valid region of two single-channel images."""
    a, b = _same_shape(a, b)
    if a.ndim != 2:
        raise ShapeError(f"ssim_map expects a 2-D image, got {a.shape}", got=a.shape)
    if min(a.shape) < SSIM_WINDOW:
        raise ShapeError(f"SSIM needs extents of at least {SSIM_WINDOW} px, got {a.shape[1]}x{a.shape[0]}",
                         expected=SSIM_WINDOW, got=a.shape)
    g = gaussian_window()
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    mu_a, mu_b = _filter_valid(a, g), _filter_valid(b, g)
    var_a = _filter_valid(a * a, g) - mu_a**2
    var_b = _filter_valid(b * b, g) - mu_b**2
    cov = _filter_valid(a * b, g) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    return num / den


def ssim(a, b, data_range: float = 1.0) -> float:
    """Mean SSIM.  Accepts ``(h, w)``, ``(c, h, w)`` or ``(1, c, h, w)``; channels are averaged."""
    a, b = _same_shape(a, b)
    if a.ndim == 4:
        if a.shape[0] != 1:
            raise ShapeError(f"ssim takes one image at a time, got batch {a.shape[0]}", got=a.shape)
        a, b = a[0], b[0]
    if a.ndim == 2:
        a, b = a[None], b[None]
    return float(np.mean([ssim_map(x, y, data_range).mean() for x, y in zip(a, b)]))


# ---------------------------------------------------------------- predictors

def bicubic_predictor(guide: np.ndarray, thermal_lr: np.ndarray) -> np.ndarray:
    """Comparison floor: 4x bicubic upsampling of the thermal input, guide ignored."""
    return np.clip(up2(up2(thermal_lr)).data, 0, 1)


def generator_predictor(generator) -> Predictor:
    def predict(guide, thermal_lr):
        return generator(guide, thermal_lr).y.data
    return predict


# ---------------------------------------------------------------- reports

def fingerprint(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def _fmt(value: float) -> str:
    return "inf" if math.isinf(value) else f"{value:.10g}"


@dataclass
class EvalReport:
    ids: list[str] = field(default_factory=list)
    psnr: list[float] = field(default_factory=list)
    ssim: list[float] = field(default_factory=list)
    fingerprint: str = ""

    @property
    def count(self) -> int:
        return len(self.ids)

    @property
    def n_identical(self) -> int:
        """Samples whose PSNR is the ``inf`` sentinel (left out of the PSNR mean)."""
        return sum(math.isinf(p) for p in self.psnr)

    @property
    def mean_psnr(self) -> float:
        finite = [p for p in self.psnr if not math.isinf(p)]
        return float(np.mean(finite)) if finite else math.inf

    @property
    def mean_ssim(self) -> float:
        return float(np.mean(self.ssim))

    def summary(self) -> dict:
        return {
            "count": self.count,
            "mean_psnr": _fmt(self.mean_psnr) if math.isinf(self.mean_psnr) else self.mean_psnr,
            "mean_ssim": self.mean_ssim,
            "psnr_excluded_identical": self.n_identical,
            "fingerprint": self.fingerprint,
        }

    def write_csv(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["id", "psnr", "ssim"])
            for row in zip(self.ids, self.psnr, self.ssim):
                writer.writerow([row[0], _fmt(row[1]), _fmt(row[2])])
        return path

    def write_json(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.summary(), indent=2, sort_keys=True) + "\n")
        return path

    def format(self) -> str:
        note = f" ({self.n_identical} identical excluded from PSNR)" if self.n_identical else ""
        return (f"samples={self.count} psnr={_fmt(self.mean_psnr)} dB "
                f"ssim={self.mean_ssim:.4f}{note} fingerprint={self.fingerprint}")


def evaluate(predictor, samples: Sequence, config: dict | None = None) -> EvalReport:
    """Score full images one at a time.

    ``predictor`` is a generator or any ``(guide, thermal_lr) -> image``
    callable on batched arrays; ``samples`` are ``SamplePair``-like objects.
    """
    if not samples:
        raise DataError("cannot evaluate an empty split")
    if hasattr(predictor, "parameters"):
        predictor = generator_predictor(predictor)
    report = EvalReport(fingerprint=fingerprint(config or {}))
    for s in samples:
        pred = np.asarray(predictor(s.guide[None], s.thermal_lr[None]))[0]
        report.ids.append(s.id)
        report.psnr.append(psnr(pred, s.thermal_hr))
        report.ssim.append(ssim(pred, s.thermal_hr))
    return report
