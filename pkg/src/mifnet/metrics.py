"""Quality metrics: PSNR, correlation, Z-scores and Bjontegaard deltas."""

from __future__ import annotations

import csv
import math
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .exceptions import ComputationError, ValidationError
from .validation import check_plane, check_same_shape

PSNR_CAP = 100.0
ZSCORE_STD_FLOOR = 1e-6


def psnr(a, b, peak: float = 1.0, cap: float = PSNR_CAP) -> float:
    a = check_plane(a, "a")
    b = check_plane(b, "b")
    check_same_shape(a, b, names=("a", "b"))
    if peak <= 0:
        raise ValidationError(f"peak must be positive, got {peak}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return cap
    return min(cap, 10.0 * math.log10(peak * peak / mse))


def frame_psnr(frame, raw, channel: str = "y") -> float:
    return psnr(getattr(frame, channel), getattr(raw, channel))


def delta_psnr_channels(pool_frame, urf, raw_pool, raw_target) -> tuple:
    """Per-channel PSNR gain of a pool frame over the URF.

    Each frame is scored against its own raw frame: ``raw_pool`` for the
    pool frame and ``raw_target`` for the URF.
    """
    if raw_pool is None or raw_target is None:
        raise ValidationError("delta PSNR needs the raw frames of both the pool frame and the URF")
    out = []
    for c in ("y", "u", "v"):
        gain = psnr(getattr(pool_frame, c), getattr(raw_pool, c)) - psnr(getattr(urf, c), getattr(raw_target, c))
        out.append(gain)
    return tuple(out)


def correlation_coefficient(a, b) -> float:
    """Pearson correlation of co-located samples; 0 if either plane is constant."""
    a = check_plane(a, "a")
    b = check_plane(b, "b")
    check_same_shape(a, b, names=("a", "b"))
    if a.size < 2:
        raise ValidationError("correlation needs at least 2 samples")
    da = a - a.mean()
    db = b - b.mean()
    denom = math.sqrt(float(np.sum(da * da)) * float(np.sum(db * db)))
    if denom == 0.0:
        return 0.0
    return float(np.clip(np.sum(da * db) / denom, -1.0, 1.0))


@dataclass(frozen=True)
class NormalizedBatch:
    values: tuple
    mean: float
    std: float


def zscore(values: Sequence[float]) -> NormalizedBatch:
    v = np.asarray(values, dtype=np.float64).ravel()
    if v.size == 0:
        raise ValidationError("cannot Z-score an empty list")
    mean = float(v.mean())
    std = float(v.std())
    return NormalizedBatch(tuple((v - mean) / max(std, ZSCORE_STD_FLOOR)), mean, std)


# ---------------------------------------------------------------------------
# Bjontegaard deltas


@dataclass(frozen=True)
class RdPoint:
    bitrate: float
    psnr: float

    def __post_init__(self):
        if not self.bitrate > 0:
            raise ValidationError(f"bitrate must be positive, got {self.bitrate}")
        if not math.isfinite(self.psnr):
            raise ValidationError(f"psnr must be finite, got {self.psnr}")


def _curve(points: Sequence, name: str) -> tuple:
    pts = [p if isinstance(p, RdPoint) else RdPoint(*p) for p in points]
    if len(pts) < 4:
        raise ValidationError(f"{name} needs at least 4 RD points, got {len(pts)}")
    pts.sort(key=lambda p: p.bitrate)
    rates = np.array([p.bitrate for p in pts])
    if np.any(np.diff(rates) <= 0):
        raise ValidationError(f"{name} bitrates must be strictly increasing")
    return np.log10(rates), np.array([p.psnr for p in pts])


def _mean_gap(x_a, y_a, x_t, y_t) -> float:
    """Mean of (fit_t - fit_a) over the overlap of the two x ranges."""
    lo = max(x_a.min(), x_t.min())
    hi = min(x_a.max(), x_t.max())
    if not hi > lo:
        raise ComputationError(f"RD curves do not overlap (interval [{lo:.4g}, {hi:.4g}])")
    int_a = np.polyint(np.polyfit(x_a, y_a, 3))
    int_t = np.polyint(np.polyfit(x_t, y_t, 3))
    area_a = np.polyval(int_a, hi) - np.polyval(int_a, lo)
    area_t = np.polyval(int_t, hi) - np.polyval(int_t, lo)
    return float((area_t - area_a) / (hi - lo))


def bd_rate(anchor: Sequence, test: Sequence) -> float:
    """Average bitrate change of ``test`` vs ``anchor`` in percent at equal PSNR."""
    lr_a, q_a = _curve(anchor, "anchor")
    lr_t, q_t = _curve(test, "test")
    avg = _mean_gap(q_a, lr_a, q_t, lr_t)
    return (10.0 ** avg - 1.0) * 100.0


def bd_psnr(anchor: Sequence, test: Sequence) -> float:
    """Average PSNR gain of ``test`` vs ``anchor`` in dB at equal bitrate."""
    lr_a, q_a = _curve(anchor, "anchor")
    lr_t, q_t = _curve(test, "test")
    return _mean_gap(lr_a, q_a, lr_t, q_t)


def read_rd_csv(path) -> dict:
    """``label,bitrate,psnr`` rows -> {label: [RdPoint, ...]}."""
    curves = defaultdict(list)
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            curves[row["label"]].append(RdPoint(float(row["bitrate"]), float(row["psnr"])))
    return dict(curves)


def write_rd_csv(path, curves: dict) -> None:
    with open(Path(path), "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["label", "bitrate", "psnr"])
        for label, pts in curves.items():
            for p in pts:
                w.writerow([label, repr(float(p.bitrate)), repr(float(p.psnr))])
