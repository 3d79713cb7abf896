"""MIF-Net / IF-Net assembly and frame-level mode selection."""

from __future__ import annotations

import csv
import enum
import math
from collections import deque
from dataclasses import dataclass, field
from typing import Mapping, NamedTuple, Optional, Sequence

import numpy as np
import torch
import torch.nn as nn

from .blocks import PRELU_INIT, DenseUnit, GuidedConv, MotionCompensationNet
from .exceptions import FormatError, ValidationError
from .frames import Frame, PartitionMaps, Role
from .metrics import psnr
from .rfs import RfsConfig, RfsNet, compute_metrics, select_references
from .validation import check_plane, check_same_shape


class MifOutput(NamedTuple):
    enhanced: torch.Tensor      # (B, 1, H, W), clamped to [0, 1]
    difference: torch.Tensor    # (B, 1, H, W)
    compensated: torch.Tensor   # (B, M, H, W)
    flows: torch.Tensor         # (B, M, 2, H, W)
    branches: list              # M tensors (B, 4*growth, H, W)


class Branch(nn.Module):
    def __init__(self, in_channels: int, growth: int = 12, guided_out: int = 16, units: int = 2):
        super().__init__()
        self.guided = GuidedConv(in_channels, 2, guided_out)
        self.act = nn.PReLU(guided_out, init=PRELU_INIT)
        widths = [guided_out] + [4 * growth] * (units - 1)
        self.units = nn.ModuleList(DenseUnit(c, growth) for c in widths)

    def forward(self, x, guidance):
        h = self.act(self.guided(x, guidance))
        for unit in self.units:
            h = unit(h)
        return h


class MifNet(nn.Module):
    """Multi-frame filter: one branch per reference plus a fusion stack.

    ``shared_mc`` applies a single motion-compensation subnet to every
    reference; otherwise each branch owns one.
    """

    kind = "mif"

    def __init__(self, num_refs: int = 2, growth: int = 12, guided_out: int = 16, mc_width: int = 24,
                 shared_mc: bool = True, full_scale: bool = True, residual_full: bool = True):
        super().__init__()
        if num_refs < 1:
            raise ValidationError(f"num_refs must be >= 1, got {num_refs}")
        self.num_refs = num_refs
        self.config = dict(num_refs=num_refs, growth=growth, guided_out=guided_out, mc_width=mc_width,
                           shared_mc=shared_mc, full_scale=full_scale, residual_full=residual_full)
        n_mc = 1 if shared_mc else num_refs
        self.mc = nn.ModuleList(MotionCompensationNet(mc_width, full_scale, residual_full) for _ in range(n_mc))
        self.branches = nn.ModuleList(Branch(3, growth, guided_out) for _ in range(num_refs))
        self.fusion = nn.ModuleList([DenseUnit(num_refs * 4 * growth, growth),
                                     DenseUnit(4 * growth, growth, final=True)])

    @property
    def dense_units(self) -> int:
        return sum(len(b.units) for b in self.branches) + len(self.fusion)

    def compensate(self, urf: torch.Tensor, refs: torch.Tensor):
        b, m, h, w = refs.shape
        if len(self.mc) == 1:
            target = urf.expand(b, m, h, w).reshape(b * m, 1, h, w)
            flows, comp = self.mc[0](refs.reshape(b * m, 1, h, w), target)
            return flows.view(b, m, 2, h, w), comp.view(b, m, h, w)
        pairs = [self.mc[k](refs[:, k:k + 1], urf) for k in range(m)]
        return torch.stack([f for f, _ in pairs], 1), torch.cat([c for _, c in pairs], 1)

    def forward(self, urf: torch.Tensor, refs: torch.Tensor, maps: torch.Tensor) -> MifOutput:
        if refs.dim() != 4 or refs.shape[1] != self.num_refs:
            raise ValidationError(f"MIF-Net expects {self.num_refs} reference planes, got shape {tuple(refs.shape)}")
        if urf.shape[2:] != refs.shape[2:] or maps.shape[2:] != urf.shape[2:] or maps.shape[1] != 2:
            raise ValidationError(f"shape mismatch: urf {tuple(urf.shape)}, refs {tuple(refs.shape)}, "
                                  f"maps {tuple(maps.shape)}")
        flows, comp = self.compensate(urf, refs)
        feats = []
        for m, branch in enumerate(self.branches):
            c = comp[:, m:m + 1]
            feats.append(branch(torch.cat([c, urf, c - urf], 1), maps))
        h = torch.cat(feats, 1)
        for unit in self.fusion:
            h = unit(h)
        return MifOutput((urf + h).clamp(0, 1), h, comp, flows, feats)


class IfNet(nn.Module):
    """Single-frame filter: guided conv on the URF followed by four dense units."""

    kind = "if"

    def __init__(self, growth: int = 12, guided_out: int = 16):
        super().__init__()
        self.config = dict(growth=growth, guided_out=guided_out)
        self.guided = GuidedConv(1, 2, guided_out)
        self.act = nn.PReLU(guided_out, init=PRELU_INIT)
        self.units = nn.ModuleList([DenseUnit(guided_out, growth), DenseUnit(4 * growth, growth),
                                    DenseUnit(4 * growth, growth), DenseUnit(4 * growth, growth, final=True)])

    @property
    def dense_units(self) -> int:
        return len(self.units)

    def forward(self, urf: torch.Tensor, maps: torch.Tensor):
        if maps.shape[2:] != urf.shape[2:] or urf.shape[1] != 1 or maps.shape[1] != 2:
            raise ValidationError(f"shape mismatch: urf {tuple(urf.shape)}, maps {tuple(maps.shape)}")
        h = self.act(self.guided(urf, maps))
        for unit in self.units:
            h = unit(h)
        return (urf + h).clamp(0, 1), h


def _dtype(net: nn.Module):
    return next(net.parameters()).dtype


def _maps_tensor(maps, dtype) -> torch.Tensor:
    arr = maps.stack() if isinstance(maps, PartitionMaps) else np.asarray(maps)
    return torch.tensor(arr, dtype=dtype)[None]


def mif_forward(net: MifNet, urf, refs: Sequence, maps: PartitionMaps) -> np.ndarray:
    u = check_plane(urf, "urf")
    if len(refs) != net.num_refs:
        raise ValidationError(f"MIF-Net expects {net.num_refs} references, got {len(refs)}")
    r = [check_plane(x, "reference") for x in refs]
    check_same_shape(u, *r, maps.cu, names=["urf"] + [f"ref{k}" for k in range(len(r))] + ["maps"])
    dt = _dtype(net)
    with torch.no_grad():
        out = net(torch.tensor(u, dtype=dt)[None, None], torch.as_tensor(np.stack(r), dtype=dt)[None],
                  _maps_tensor(maps, dt))
    # residual added in float64 so a zero difference returns the URF bit-exactly
    return np.clip(u + out.difference[0, 0].double().numpy(), 0.0, 1.0)


def if_forward(net: IfNet, urf, maps: PartitionMaps) -> np.ndarray:
    u = check_plane(urf, "urf")
    check_same_shape(u, maps.cu, names=("urf", "maps"))
    dt = _dtype(net)
    with torch.no_grad():
        _, diff = net(torch.tensor(u, dtype=dt)[None, None], _maps_tensor(maps, dt))
    return np.clip(u + diff[0, 0].double().numpy(), 0.0, 1.0)


# ---------------------------------------------------------------------------
# mode selection


class Mode(enum.Enum):
    MIF = "MIF"
    IF = "IF"
    PASSTHROUGH = "PASSTHROUGH"


# tie order: the cheaper mode wins
_TIE_PREFERENCE = (Mode.PASSTHROUGH, Mode.IF, Mode.MIF)


@dataclass(frozen=True)
class ModeDecision:
    frame_index: int
    mode: Mode
    psnr_mif: float
    psnr_if: float
    psnr_pass: float
    refs: tuple = ()

    def psnr_of(self, mode: Mode) -> float:
        return {Mode.MIF: self.psnr_mif, Mode.IF: self.psnr_if, Mode.PASSTHROUGH: self.psnr_pass}[mode]


@dataclass
class FilterModels:
    """Networks used by :func:`enhance_frame`. Any of them may be absent."""

    mif: Optional[MifNet] = None
    if_net: Optional[IfNet] = None
    rfs: Optional[RfsNet] = None

    def enhance_mif(self, urf: np.ndarray, refs: list, maps: PartitionMaps) -> np.ndarray:
        return mif_forward(self.mif, urf, refs, maps)

    def enhance_if(self, urf: np.ndarray, maps: PartitionMaps) -> np.ndarray:
        return if_forward(self.if_net, urf, maps)


def enhance_frame(urf: Frame, maps: PartitionMaps, pool: Sequence[Frame], models: FilterModels,
                  rfs_config: RfsConfig, raws: Mapping[int, Frame] | Sequence[Frame]):
    """Encoder-side best-of-three filtering of one URF (luma only).

    Returns the enhanced frame and the recorded decision. The pass-through
    candidate is always evaluated, so the result never scores below the URF.
    """
    try:
        raw = raws[urf.index]
    except (KeyError, IndexError, TypeError):
        raise ValidationError(f"raw frame {urf.index} is required for encoder-side mode selection") from None
    if raw is None:
        raise ValidationError(f"raw frame {urf.index} is required for encoder-side mode selection")
    check_same_shape(urf.y, maps.cu, names=("urf", "maps"))

    candidates = {Mode.PASSTHROUGH: urf.y}
    refs = ()
    if models.mif is not None and models.rfs is not None and pool:
        records = compute_metrics(urf, pool, raws, rfs_config.cc_threshold)
        chosen = select_references(records, models.rfs, rfs_config)
        if chosen is not None:
            by_index = {p.index: p for p in pool}
            refs = tuple(chosen)
            candidates[Mode.MIF] = models.enhance_mif(urf.y, [by_index[i].y for i in chosen], maps)
    if models.if_net is not None:
        candidates[Mode.IF] = models.enhance_if(urf.y, maps)

    scores = {m: psnr(y, raw.y) for m, y in candidates.items()}
    best = max(scores.values())
    mode = next(m for m in _TIE_PREFERENCE if scores.get(m) == best)
    decision = ModeDecision(urf.index, mode, scores.get(Mode.MIF, math.nan), scores.get(Mode.IF, math.nan),
                            scores[Mode.PASSTHROUGH], refs if mode is Mode.MIF else ())
    out = urf.replace(y=candidates[mode], role=Role.ENHANCED)
    return out, decision


def replay_frame(urf: Frame, maps: PartitionMaps, pool: Sequence[Frame], models: FilterModels,
                 decision: ModeDecision) -> Frame:
    """Decoder-side filtering that follows a recorded decision."""
    if decision.mode is Mode.PASSTHROUGH:
        y = urf.y
    elif decision.mode is Mode.IF:
        y = models.enhance_if(urf.y, maps)
    else:
        by_index = {p.index: p for p in pool}
        missing = [i for i in decision.refs if i not in by_index]
        if missing or not decision.refs:
            raise ValidationError(f"frame {urf.index}: recorded references {missing or '()'} not in the pool")
        y = models.enhance_mif(urf.y, [by_index[i].y for i in decision.refs], maps)
    return urf.replace(y=y, role=Role.ENHANCED)


@dataclass
class SequenceResult:
    frames: list = field(default_factory=list)
    decisions: list = field(default_factory=list)


def enhance_sequence(urfs: Sequence[Frame], maps: Sequence[PartitionMaps], models: FilterModels,
                     rfs_config: RfsConfig, raws=None, decisions: Optional[Sequence[ModeDecision]] = None
                     ) -> SequenceResult:
    """Filter frames in coding order; each output re-enters the reference pool."""
    if len(maps) != len(urfs):
        raise ValidationError(f"{len(urfs)} frames but {len(maps)} partition maps")
    if raws is None and decisions is None:
        raise ValidationError("need raw frames (encoder side) or recorded decisions (decoder side)")
    pool: deque = deque(maxlen=rfs_config.pool_size)
    result = SequenceResult()
    for k, (urf, m) in enumerate(zip(urfs, maps)):
        if raws is not None:
            out, dec = enhance_frame(urf, m, list(pool), models, rfs_config, raws)
        else:
            dec = decisions[k]
            out = replay_frame(urf, m, list(pool), models, dec)
        result.frames.append(out)
        result.decisions.append(dec)
        pool.append(out.replace(role=Role.POOL))
    return result


DECISION_FIELDS = ["frame_index", "mode", "psnr_mif", "psnr_if", "psnr_pass", "refs"]


def write_decisions(path, decisions: Sequence[ModeDecision]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(DECISION_FIELDS)
        for d in decisions:
            w.writerow([d.frame_index, d.mode.value, repr(d.psnr_mif), repr(d.psnr_if), repr(d.psnr_pass),
                        " ".join(str(i) for i in d.refs)])


def read_decisions(path) -> list[ModeDecision]:
    out = []
    with open(path, newline="", encoding="utf-8") as fh:
        for line, row in enumerate(csv.DictReader(fh), start=2):
            try:
                refs = tuple(int(t) for t in (row.get("refs") or "").split())
                out.append(ModeDecision(int(row["frame_index"]), Mode(row["mode"]), float(row["psnr_mif"]),
                                        float(row["psnr_if"]), float(row["psnr_pass"]), refs))
            except (KeyError, TypeError, ValueError) as exc:
                raise FormatError(f"{path}:{line}: bad decision row ({exc})") from None
    return out
