"""Image and video quality metrics.

Inputs are float arrays or tensors in [0, 1]; PSNR uses a peak of 1.0 and
MAE/RMSE are reported on the 0-255 scale.
"""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass
from typing import Iterable, Protocol

import numpy as np
import torch
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ValidationError


def _np(x) -> np.ndarray:
    if isinstance(x, torch.Tensor):
        return x.detach().cpu().double().numpy()
    return np.asarray(x, dtype=np.float64)


def _pair(a, b):
    a, b = _np(a), _np(b)
    if a.shape != b.shape:
        raise ValidationError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b, peak: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; ``inf`` for identical inputs."""
    a, b = _pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def ssim(a, b, window: int = 8, k1: float = 0.01, k2: float = 0.03,
         data_range: float = 1.0) -> float:
    """Mean SSIM over every ``window x window`` patch of every 2-D plane.

    Statistics inside a patch are uniform-weighted population moments.
    Leading axes (frames, channels) are treated as independent planes.
    """
    a, b = _pair(a, b)
    if a.ndim < 2 or min(a.shape[-2:]) < window:
        raise ValidationError(f"SSIM needs planes of at least {window}x{window}, got {a.shape}")
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    wa = sliding_window_view(a, (window, window), axis=(-2, -1))
    wb = sliding_window_view(b, (window, window), axis=(-2, -1))
    mu_a = wa.mean((-2, -1))
    mu_b = wb.mean((-2, -1))
    var_a = (wa ** 2).mean((-2, -1)) - mu_a ** 2
    var_b = (wb ** 2).mean((-2, -1)) - mu_b ** 2
    cov = (wa * wb).mean((-2, -1)) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def mae_rmse(a, b) -> tuple[float, float]:
    """Mean absolute and root-mean-square error on the 0-255 scale."""
    a, b = _pair(a, b)
    d = (a - b) * 255.0
    return float(np.mean(np.abs(d))), float(np.sqrt(np.mean(d ** 2)))


def cos_sim(u, v) -> float:
    u, v = _pair(u, v)
    u, v = u.ravel(), v.ravel()
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0 or nv == 0:
        raise ValidationError("cosine similarity of a zero vector is undefined")
    return float(np.clip(u @ v / (nu * nv), -1.0, 1.0))


class PerceptualMetric(Protocol):
    """Hook for a learned perceptual distance such as LPIPS (none bundled)."""

    def __call__(self, a: torch.Tensor, b: torch.Tensor) -> float: ...


@dataclass
class PairMetrics:
    pair_id: str
    psnr: float
    ssim: float
    mae: float
    rmse: float


def compare(pair_id: str, a, b, window: int = 8) -> PairMetrics:
    m, r = mae_rmse(a, b)
    return PairMetrics(pair_id, psnr(a, b), ssim(a, b, window), m, r)


@dataclass
class MetricsReport:
    rows: list

    def aggregate(self) -> dict:
        """Mean and std of every metric; infinite PSNR rows are kept as inf."""
        out = {}
        for key in ("psnr", "ssim", "mae", "rmse"):
            vals = np.array([getattr(r, key) for r in self.rows], dtype=float)
            with np.errstate(invalid="ignore"):
                std = 0.0 if np.all(vals == vals[0]) else float(vals.std())
            out[key] = (float(vals.mean()), std)
        return out

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["pair_id", "psnr", "ssim", "mae", "rmse"])
            for r in self.rows:
                w.writerow([r.pair_id, _fmt(r.psnr), f"{r.ssim:.6f}", f"{r.mae:.6f}", f"{r.rmse:.6f}"])


def _fmt(x: float) -> str:
    return "inf" if math.isinf(x) else f"{x:.4f}"


def report(pairs: Iterable[tuple[str, object, object]], window: int = 8) -> MetricsReport:
    rows = [compare(pid, a, b, window) for pid, a, b in pairs]
    if not rows:
        raise ValidationError("cannot build a report from an empty corpus")
    return MetricsReport(rows)


def as_dict(m: PairMetrics) -> dict:
    return asdict(m)
