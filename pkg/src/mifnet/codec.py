"""Transform-coding proxy that stands in for a real encoder.

Frames are intra-coded only: a variance-driven random quadtree gives the
CU layout and every CU is split once more into TUs. Samples are DCT-coded
on a fixed 8x8 grid (or per TU with ``transform_size=0``) with a uniform
quantiser whose step follows the HEVC QP scale. Quality fluctuates across
a GOP through per-position QP offsets.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np
from scipy.fft import dctn, idctn

from .exceptions import ValidationError
from .frames import BlockLayout, Frame, Role, quantize_samples

CTU = 64


@dataclass(frozen=True)
class ProxyCodecConfig:
    qp_base: int = 37
    gop_size: int = 4
    qp_offsets: tuple = (0, 4, 3, 4)
    min_cu: int = 8
    transform_size: int = 8
    split_threshold: float = 4.0
    fps: float = 30.0
    bit_depth: int = 8
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "qp_offsets", tuple(int(o) for o in self.qp_offsets))
        if self.gop_size < 1:
            raise ValidationError(f"gop_size must be >= 1, got {self.gop_size}")
        if len(self.qp_offsets) != self.gop_size:
            raise ValidationError(f"{len(self.qp_offsets)} QP offsets for a GOP of {self.gop_size}")
        if self.min_cu not in (8, 16, 32, 64):
            raise ValidationError(f"min_cu must be 8, 16, 32 or 64, got {self.min_cu}")
        if self.transform_size not in (0, 4, 8, 16, 32):
            raise ValidationError(f"transform_size must be 0 (per TU), 4, 8, 16 or 32, got {self.transform_size}")
        if self.fps <= 0:
            raise ValidationError("fps must be positive")

    def frame_qp(self, n: int) -> int:
        return int(np.clip(self.qp_base + self.qp_offsets[n % self.gop_size], 0, 51))


def quant_step(qp: int, bit_depth: int = 8) -> float:
    """Quantiser step in normalised sample units."""
    return 2.0 ** ((qp - 4) / 6.0) / (2 ** bit_depth - 1)


class ProxyResult(NamedTuple):
    urfs: list
    layouts: list
    bitrate_estimate: float
    nonzero: list
    qps: list


def _quadtree(luma8: np.ndarray, rng: np.random.Generator, config: ProxyCodecConfig) -> list:
    h, w = luma8.shape
    cus: list = []

    def visit(x, y, size):
        if x >= w or y >= h:
            return
        inside = x + size <= w and y + size <= h
        split = not inside
        if inside and size > config.min_cu:
            std = float(luma8[y:y + size, x:x + size].std())
            split = std > config.split_threshold * rng.uniform(0.5, 1.5)
        if split:
            half = size // 2
            for dy in (0, half):
                for dx in (0, half):
                    visit(x + dx, y + dy, half)
        else:
            cus.append((x, y, size, size))

    for y in range(0, h, CTU):
        for x in range(0, w, CTU):
            visit(x, y, CTU)
    return cus


def _split_once(rects: Sequence) -> list:
    out = []
    for x, y, w, h in rects:
        hw, hh = w // 2, h // 2
        out += [(x, y, hw, hh), (x + hw, y, hw, hh), (x, y + hh, hw, hh), (x + hw, y + hh, hw, hh)]
    return out


def _grid(h: int, w: int, size: int) -> list:
    return [(x, y, size, size) for y in range(0, h, size) for x in range(0, w, size)]


def _code_plane(plane: np.ndarray, rects: Sequence, step: float) -> tuple:
    """DCT-quantise every rectangle; returns (reconstruction, nonzero count)."""
    out = np.empty_like(plane)
    nonzero = 0
    by_size: dict = {}
    for r in rects:
        by_size.setdefault((r[3], r[2]), []).append(r)
    for (bh, bw), group in by_size.items():
        blocks = np.stack([plane[y:y + bh, x:x + bw] for x, y, _, _ in group])
        levels = np.rint(dctn(blocks, axes=(1, 2), norm="ortho") / step)
        nonzero += int(np.count_nonzero(levels))
        rec = idctn(levels * step, axes=(1, 2), norm="ortho")
        for (x, y, _, _), blk in zip(group, rec):
            out[y:y + bh, x:x + bw] = blk
    return out, nonzero


def proxy_encode(raw: Sequence[Frame], config: ProxyCodecConfig) -> ProxyResult:
    """Code a raw sequence; returns URFs, block layouts and the proxy rate.

    The rate is the number of non-zero quantised coefficients per second.
    """
    if not raw:
        raise ValidationError("cannot encode an empty sequence")
    rng = np.random.default_rng(config.seed)
    peak = 2 ** config.bit_depth - 1
    urfs, layouts, nonzero, qps = [], [], [], []
    for n, frame in enumerate(raw):
        h, w = frame.y.shape
        if h % 8 or w % 8:
            raise ValidationError(f"frame {n}: {w}x{h} is not a multiple of 8; pad before encoding")
        qp = config.frame_qp(n)
        step = quant_step(qp, config.bit_depth)
        cus = _quadtree(frame.y * peak, rng, config)
        tus = _split_once(cus)
        if config.transform_size:
            t = config.transform_size
            if h % t or w % t:
                raise ValidationError(f"frame {n}: {w}x{h} is not a multiple of the {t}x{t} transform")
            luma_blocks, chroma_blocks = _grid(h, w, t), _grid(h // 2, w // 2, max(t // 2, 2))
        else:
            luma_blocks = tus
            chroma_blocks = [(x // 2, y // 2, bw // 2, bh // 2) for x, y, bw, bh in tus]
        planes, count = [], 0
        for plane, rects in ((frame.y, luma_blocks), (frame.u, chroma_blocks), (frame.v, chroma_blocks)):
            rec, nz = _code_plane(plane, rects, step)
            planes.append(quantize_samples(rec, config.bit_depth) / peak)
            count += nz
        urfs.append(Frame(*planes, role=Role.URF, index=frame.index, qp=qp))
        layouts.append(BlockLayout(cu=cus, tu=tus))
        nonzero.append(count)
        qps.append(qp)
    seconds = len(raw) / config.fps
    return ProxyResult(urfs, layouts, sum(nonzero) / seconds, nonzero, qps)
