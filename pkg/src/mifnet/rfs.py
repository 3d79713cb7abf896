"""Reference frame selection.

Each previously coded frame in the pool is scored with six metrics
(per-channel PSNR gain over the URF and per-channel correlation with it).
Frames passing the validity rule are ranked by a small two-layer network,
and the ``M`` best become references for the multi-frame filter.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Optional, Sequence

import numpy as np
import torch
import torch.nn as nn

from .blocks import PRELU_INIT, MotionField, warp
from .exceptions import ValidationError
from .frames import Frame
from .metrics import ZSCORE_STD_FLOOR, correlation_coefficient, delta_psnr_channels, psnr, zscore
from .validation import check_plane, check_same_shape

CHANNELS = ("y", "u", "v")


@dataclass(frozen=True)
class RfsConfig:
    pool_size: int = 16
    cc_threshold: float = 0.3
    num_selected: int = 2

    def __post_init__(self):
        if not (self.pool_size >= self.num_selected >= 1):
            raise ValidationError(f"need pool_size >= num_selected >= 1, got "
                                  f"N={self.pool_size}, M={self.num_selected}")
        if not -1.0 < self.cc_threshold < 1.0:
            raise ValidationError(f"cc_threshold must lie in (-1, 1), got {self.cc_threshold}")


def is_valid(d_psnr: Sequence[float], cc: Sequence[float], threshold: float) -> bool:
    """A pool frame is valid if some channel has positive gain and CC above threshold."""
    return any(d > 0 and c > threshold for d, c in zip(d_psnr, cc))


@dataclass(frozen=True)
class RfsRecord:
    pool_index: int
    target_index: int
    d_psnr: tuple
    cc: tuple
    valid: bool
    potential_gt: Optional[float] = None
    potential_pred: Optional[float] = None

    @property
    def features(self) -> tuple:
        return tuple(self.d_psnr) + tuple(self.cc)

    def check(self, threshold: float, pool_size: int) -> None:
        if self.valid != is_valid(self.d_psnr, self.cc, threshold):
            raise ValidationError(f"record {self.pool_index}->{self.target_index}: "
                                  "validity flag disagrees with its metrics")
        if not self.target_index - pool_size <= self.pool_index <= self.target_index - 1:
            raise ValidationError(f"pool index {self.pool_index} outside the pool of frame {self.target_index}")


def compute_metrics(urf: Frame, pool: Sequence[Frame], raws: Mapping[int, Frame] | Sequence[Frame],
                    threshold: float = 0.3) -> list[RfsRecord]:
    """Score every pool frame against ``urf``; ``raws[i]`` is the raw frame at index ``i``."""
    n = urf.index
    try:
        raw_n = raws[n]
    except (KeyError, IndexError):
        raise ValidationError(f"missing raw frame for URF index {n}") from None
    records = []
    for p in pool:
        try:
            raw_i = raws[p.index]
        except (KeyError, IndexError):
            raise ValidationError(f"missing raw frame for pool index {p.index}") from None
        d = delta_psnr_channels(p, urf, raw_i, raw_n)
        cc = tuple(correlation_coefficient(getattr(p, c), getattr(urf, c)) for c in CHANNELS)
        records.append(RfsRecord(p.index, n, d, cc, is_valid(d, cc, threshold)))
    return records


# ---------------------------------------------------------------------------
# RFS-Net


class RfsNet(nn.Module):
    """6 -> 12 -> 1 fully connected ranker with a PReLU after both layers."""

    def __init__(self, hidden: int = 12):
        super().__init__()
        self.hidden = hidden
        self.fc1 = nn.Linear(6, hidden)
        self.act1 = nn.PReLU(1, init=PRELU_INIT)
        self.fc2 = nn.Linear(hidden, 1)
        self.act2 = nn.PReLU(1, init=PRELU_INIT)
        for fc in (self.fc1, self.fc2):
            bound = 1.0 / np.sqrt(fc.in_features)
            nn.init.uniform_(fc.weight, -bound, bound)
            nn.init.uniform_(fc.bias, -bound, bound)

    def raw_scores(self, x: torch.Tensor) -> torch.Tensor:
        return self.act2(self.fc2(self.act1(self.fc1(x)))).squeeze(-1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """Scores of one URF's valid references, Z-scored within the batch."""
        return zscore_tensor(self.raw_scores(x))


def zscore_tensor(v: torch.Tensor) -> torch.Tensor:
    std = v.std(unbiased=False) if v.numel() > 1 else torch.zeros((), dtype=v.dtype)
    return (v - v.mean()) / torch.clamp(std, min=ZSCORE_STD_FLOOR)


def rfs_forward(params: RfsNet, records: Sequence[RfsRecord]) -> list[float]:
    if not records:
        raise ValidationError("RFS-Net needs at least one valid record")
    if not all(r.valid for r in records):
        raise ValidationError("RFS-Net only ranks valid reference frames")
    dtype = next(params.parameters()).dtype
    x = torch.tensor([r.features for r in records], dtype=dtype)
    with torch.no_grad():
        return params(x).double().tolist()


def rfs_loss(gt: Sequence[float], pred: Sequence[float]) -> float:
    """Squared error between batch-normalised ground truth and predictions."""
    if len(gt) != len(pred):
        raise ValidationError(f"length mismatch: {len(gt)} targets vs {len(pred)} predictions")
    target = np.asarray(zscore(gt).values)
    return float(np.sum((target - np.asarray(pred, dtype=np.float64)) ** 2))


def rfs_loss_tensor(gt: torch.Tensor, pred: torch.Tensor) -> torch.Tensor:
    return ((zscore_tensor(gt) - pred) ** 2).sum()


def select_references(records: Sequence[RfsRecord], params: RfsNet,
                      config: RfsConfig) -> Optional[list[int]]:
    """Pool indices of the ``M`` best valid frames, best first.

    Returns ``None`` when fewer than ``M`` frames are valid; the caller then
    falls back to the single-frame filter. Equal scores prefer the
    temporally closer (larger) pool index.
    """
    valid = [r for r in records if r.valid]
    if len(valid) < config.num_selected:
        return None
    scores = rfs_forward(params, valid)
    order = sorted(zip(scores, (r.pool_index for r in valid)), key=lambda t: (-t[0], -t[1]))
    return [i for _, i in order[:config.num_selected]]


# ---------------------------------------------------------------------------
# ground truth via block matching


def block_match(reference, target, block: int = 16, search: int = 8) -> MotionField:
    """Full-search integer motion of ``target`` blocks inside ``reference`` (SAD).

    The returned field satisfies ``warp(reference, field) ~= target``.
    Candidates reaching outside the reference are skipped; equal costs
    prefer the shorter vector.
    """
    ref = check_plane(reference, "reference")
    tgt = check_plane(target, "target")
    check_same_shape(ref, tgt, names=("reference", "target"))
    h, w = tgt.shape
    padded = np.pad(ref, search, constant_values=np.inf)
    rows = np.arange(0, h, block)
    cols = np.arange(0, w, block)
    offsets = sorted(((dx, dy) for dy in range(-search, search + 1) for dx in range(-search, search + 1)),
                     key=lambda d: (abs(d[0]) + abs(d[1]), abs(d[1]), abs(d[0]), d[1], d[0]))
    costs = np.empty((len(offsets), len(rows), len(cols)))
    for k, (dx, dy) in enumerate(offsets):
        shifted = padded[search + dy:search + dy + h, search + dx:search + dx + w]
        diff = np.abs(shifted - tgt)
        costs[k] = np.add.reduceat(np.add.reduceat(diff, rows, axis=0), cols, axis=1)
    best = np.argmin(costs, axis=0)
    vec = np.array(offsets, dtype=np.float64)[best]
    mx = np.repeat(np.repeat(vec[..., 0], block, 0), block, 1)[:h, :w]
    my = np.repeat(np.repeat(vec[..., 1], block, 0), block, 1)[:h, :w]
    return MotionField(mx, my)


def compensate(reference, motion: MotionField) -> np.ndarray:
    ref = torch.tensor(check_plane(reference, "reference"))[None, None]
    return warp(ref, motion.to_tensor())[0, 0].numpy()


def ground_truth_potential(pool_frame: Frame, urf: Frame, raw_n: Frame) -> float:
    """Luma PSNR of the block-matched pool frame against the raw target."""
    check_same_shape(pool_frame.y, urf.y, raw_n.y, names=("pool", "urf", "raw"))
    field = block_match(pool_frame.y, urf.y)
    return psnr(compensate(pool_frame.y, field), raw_n.y)
