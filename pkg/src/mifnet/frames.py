"""Frame data model, raw YUV and partition sidecar I/O, patch extraction."""

from __future__ import annotations

import enum
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .exceptions import ConfigurationError, FormatError, ValidationError
from .validation import check_plane, check_positive_int, check_unit_range

PATCH_SIZE = 64


class Role(enum.Enum):
    RAW = "raw"
    URF = "urf"
    POOL = "pool"
    REFERENCE = "reference"
    COMPENSATED = "compensated"
    ENHANCED = "enhanced"
    DIFFERENCE = "difference"


_BOUNDED_ROLES = {Role.RAW, Role.URF, Role.REFERENCE}


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=np.float64, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Frame:
    """Planar 4:2:0 picture with samples normalised to [0, 1]."""

    y: np.ndarray
    u: np.ndarray
    v: np.ndarray
    role: Role = Role.RAW
    index: int = 0
    qp: Optional[int] = None

    def __post_init__(self):
        y = check_plane(self.y, "y")
        h, w = y.shape
        if h % 2 or w % 2:
            raise ValidationError(f"frame dimensions must be even, got {w}x{h}")
        u = check_plane(self.u, "u")
        v = check_plane(self.v, "v")
        if u.shape != (h // 2, w // 2) or v.shape != (h // 2, w // 2):
            raise ValidationError(
                f"chroma planes must be {(h // 2, w // 2)}, got u={u.shape} v={v.shape}"
            )
        if self.index < 0:
            raise ValidationError(f"frame index must be >= 0, got {self.index}")
        role = Role(self.role)
        if role in _BOUNDED_ROLES:
            for name, plane in (("y", y), ("u", u), ("v", v)):
                check_unit_range(plane, f"{role.value} frame {name}")
        object.__setattr__(self, "role", role)
        object.__setattr__(self, "y", _frozen(y))
        object.__setattr__(self, "u", _frozen(u))
        object.__setattr__(self, "v", _frozen(v))

    @property
    def height(self) -> int:
        return self.y.shape[0]

    @property
    def width(self) -> int:
        return self.y.shape[1]

    @property
    def planes(self) -> tuple:
        return (self.y, self.u, self.v)

    def replace(self, **changes) -> "Frame":
        fields = dict(y=self.y, u=self.u, v=self.v, role=self.role, index=self.index, qp=self.qp)
        fields.update(changes)
        return Frame(**fields)

    @classmethod
    def from_luma(cls, y, role: Role = Role.RAW, index: int = 0, qp=None) -> "Frame":
        """Wrap a luma plane with neutral (0.5) chroma."""
        y = np.asarray(y, dtype=np.float64)
        half = (y.shape[0] // 2, y.shape[1] // 2)
        return cls(y, np.full(half, 0.5), np.full(half, 0.5), role=role, index=index, qp=qp)


# ---------------------------------------------------------------------------
# raw YUV 4:2:0


def frame_nbytes(width: int, height: int, bit_depth: int) -> int:
    per_sample = 1 if bit_depth == 8 else 2
    return (width * height + 2 * (width // 2) * (height // 2)) * per_sample


def _check_bit_depth(bit_depth: int) -> None:
    if bit_depth not in (8, 10):
        raise ConfigurationError(f"unsupported bit depth {bit_depth}; expected 8 or 10")


def read_yuv_sequence(path, width: int, height: int, bit_depth: int = 8,
                      role: Role = Role.RAW) -> list[Frame]:
    """Read a headerless planar YUV 4:2:0 file.

    10-bit samples are little-endian 16-bit words. Samples are divided by
    ``2**bit_depth - 1``.
    """
    _check_bit_depth(bit_depth)
    check_positive_int(width, "width")
    check_positive_int(height, "height")
    if width % 2 or height % 2:
        raise ValidationError(f"4:2:0 requires even dimensions, got {width}x{height}")
    data = Path(path).read_bytes()
    per_frame = frame_nbytes(width, height, bit_depth)
    if len(data) % per_frame:
        raise FormatError(
            f"{path}: size {len(data)} bytes is not a multiple of the frame size "
            f"{per_frame} bytes ({width}x{height}, {bit_depth}-bit 4:2:0)"
        )
    dtype = np.uint8 if bit_depth == 8 else np.dtype("<u2")
    samples = np.frombuffer(data, dtype=dtype).astype(np.float64)
    peak = float(2 ** bit_depth - 1)
    n_luma = width * height
    n_chroma = (width // 2) * (height // 2)
    per = n_luma + 2 * n_chroma
    frames = []
    for k in range(len(samples) // per):
        chunk = samples[k * per:(k + 1) * per] / peak
        if chunk.max(initial=0.0) > 1.0:
            raise FormatError(f"{path}: frame {k} has samples above {bit_depth}-bit range")
        y = chunk[:n_luma].reshape(height, width)
        u = chunk[n_luma:n_luma + n_chroma].reshape(height // 2, width // 2)
        v = chunk[n_luma + n_chroma:].reshape(height // 2, width // 2)
        frames.append(Frame(y, u, v, role=role, index=k))
    return frames


def quantize_samples(plane: np.ndarray, bit_depth: int = 8) -> np.ndarray:
    peak = 2 ** bit_depth - 1
    return np.rint(np.clip(plane, 0.0, 1.0) * peak).astype(np.int64)


def write_yuv_sequence(path, frames: Iterable[Frame], bit_depth: int = 8) -> None:
    _check_bit_depth(bit_depth)
    dtype = np.uint8 if bit_depth == 8 else np.dtype("<u2")
    parts = []
    for f in frames:
        for plane in f.planes:
            parts.append(quantize_samples(plane, bit_depth).astype(dtype).tobytes())
    _atomic_write(Path(path), b"".join(parts))


def _atomic_write(path: Path, payload: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(payload)
    os.replace(tmp, path)


# ---------------------------------------------------------------------------
# partitions

Rect = tuple  # (x, y, w, h)


def _is_pow2(n: int) -> bool:
    return n > 0 and n & (n - 1) == 0


def _check_tiling(rects: Sequence[Rect], width: int, height: int, level: str) -> None:
    cover = np.zeros((height, width), dtype=np.int32)
    for r in rects:
        x, y, w, h = (int(v) for v in r)
        if not (_is_pow2(w) and _is_pow2(h) and 4 <= w <= 64 and 4 <= h <= 64):
            raise ValidationError(f"{level} block {r}: sides must be powers of two in [4, 64]")
        if x < 0 or y < 0 or x + w > width or y + h > height:
            raise ValidationError(f"{level} block {r} extends outside the {width}x{height} frame")
        cover[y:y + h, x:x + w] += 1
    overlap = np.argwhere(cover > 1)
    if len(overlap):
        yy, xx = overlap[0]
        raise ValidationError(f"{level} layout overlaps at pixel (x={xx}, y={yy})")
    gap = np.argwhere(cover == 0)
    if len(gap):
        yy, xx = gap[0]
        raise ValidationError(f"{level} layout leaves a gap at pixel (x={xx}, y={yy})")


@dataclass(frozen=True)
class BlockLayout:
    """CU and TU rectangles ``(x, y, w, h)`` of one frame."""

    cu: tuple = field(default_factory=tuple)
    tu: tuple = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, "cu", tuple(tuple(int(v) for v in r) for r in self.cu))
        object.__setattr__(self, "tu", tuple(tuple(int(v) for v in r) for r in self.tu))

    def validate(self, width: int, height: int) -> None:
        _check_tiling(self.cu, width, height, "CU")
        _check_tiling(self.tu, width, height, "TU")

    def to_json(self) -> dict:
        return {"cu": [list(r) for r in self.cu], "tu": [list(r) for r in self.tu]}

    @classmethod
    def from_json(cls, obj: dict) -> "BlockLayout":
        try:
            return cls(cu=obj["cu"], tu=obj["tu"])
        except (KeyError, TypeError) as exc:
            raise FormatError(f"bad partition entry: {exc}") from None


@dataclass(frozen=True, eq=False)
class PartitionMaps:
    """Per-pixel CU/TU maps: +1 on block perimeters, -1 inside."""

    cu: np.ndarray
    tu: np.ndarray

    def __post_init__(self):
        cu = np.asarray(self.cu, dtype=np.float64)
        tu = np.asarray(self.tu, dtype=np.float64)
        if cu.ndim != 2 or cu.shape != tu.shape:
            raise ValidationError(f"CU/TU maps must be equal 2-D shapes, got {cu.shape} and {tu.shape}")
        for name, m in (("cu", cu), ("tu", tu)):
            if not np.all(np.abs(m) == 1.0):
                raise ValidationError(f"{name} map must contain only +1/-1")
            ring = np.concatenate([m[0], m[-1], m[:, 0], m[:, -1]])
            if not np.all(ring == 1.0):
                raise ValidationError(f"{name} map border ring must be +1")
        object.__setattr__(self, "cu", _frozen(cu))
        object.__setattr__(self, "tu", _frozen(tu))

    @property
    def shape(self) -> tuple:
        return self.cu.shape

    def stack(self) -> np.ndarray:
        return np.stack([self.cu, self.tu])

    def crop(self, x: int, y: int, size: int) -> np.ndarray:
        """2×size×size array of the co-located map window (ring not enforced)."""
        return self.stack()[:, y:y + size, x:x + size]


def _perimeter_map(rects: Sequence[Rect], width: int, height: int) -> np.ndarray:
    m = -np.ones((height, width))
    for x, y, w, h in rects:
        m[y, x:x + w] = 1.0
        m[y + h - 1, x:x + w] = 1.0
        m[y:y + h, x] = 1.0
        m[y:y + h, x + w - 1] = 1.0
    return m


def rasterize_partition(layout: BlockLayout, width: int, height: int) -> PartitionMaps:
    layout.validate(width, height)
    return PartitionMaps(_perimeter_map(layout.cu, width, height),
                         _perimeter_map(layout.tu, width, height))


def write_partition_sidecar(path, layouts: Sequence[BlockLayout]) -> None:
    text = json.dumps([lay.to_json() for lay in layouts], separators=(",", ":"))
    _atomic_write(Path(path), text.encode("utf-8"))


def read_partition_sidecar(path) -> list[BlockLayout]:
    try:
        obj = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(obj, list):
        raise FormatError(f"{path}: top level must be an array indexed by frame")
    return [BlockLayout.from_json(entry) for entry in obj]


# ---------------------------------------------------------------------------
# patches


@dataclass(frozen=True, eq=False)
class PatchSample:
    raw_patch: np.ndarray
    urf_patch: np.ndarray
    cu_patch: np.ndarray
    tu_patch: np.ndarray
    ref_patches: tuple = ()
    origin: tuple = (0, 0)

    @property
    def num_refs(self) -> int:
        return len(self.ref_patches)


def _luma(x) -> np.ndarray:
    return x.y if isinstance(x, Frame) else np.asarray(x, dtype=np.float64)


def patch_count(height: int, width: int, stride: int, size: int = PATCH_SIZE) -> int:
    if height < size or width < size:
        return 0
    return ((height - size) // stride + 1) * ((width - size) // stride + 1)


def extract_patches(raw, urf, maps: PartitionMaps, refs: Sequence = (), stride: int = PATCH_SIZE,
                    size: int = PATCH_SIZE) -> list[PatchSample]:
    """Cut co-located ``size``×``size`` luma patches on a regular grid.

    Grid positions whose window would cross the frame border are dropped.
    """
    check_positive_int(stride, "stride")
    raw_y, urf_y = _luma(raw), _luma(urf)
    ref_y = [_luma(r) for r in refs]
    shapes = {raw_y.shape, urf_y.shape, maps.shape, *(r.shape for r in ref_y)}
    if len(shapes) != 1:
        raise ValidationError(f"resolution mismatch among patch inputs: {sorted(shapes)}")
    h, w = raw_y.shape
    out = []
    for y in range(0, h - size + 1, stride):
        for x in range(0, w - size + 1, stride):
            win = (slice(y, y + size), slice(x, x + size))
            out.append(PatchSample(
                raw_patch=raw_y[win].copy(),
                urf_patch=urf_y[win].copy(),
                cu_patch=maps.cu[win].copy(),
                tu_patch=maps.tu[win].copy(),
                ref_patches=tuple(r[win].copy() for r in ref_y),
                origin=(x, y),
            ))
    return out
