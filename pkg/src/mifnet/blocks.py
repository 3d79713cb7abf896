"""Differentiable building blocks: warping, motion compensation, guided
convolution and dense units.

Tensors follow the usual ``(batch, channels, height, width)`` layout and
sample values live in [0, 1].
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .exceptions import NumericError, ValidationError
from .validation import check_plane, check_same_shape

PRELU_INIT = 0.25
NORM_STD_FLOOR = 1e-2


@dataclass(frozen=True, eq=False)
class MotionField:
    """Dense displacement in pixels; ``mx`` positive samples to the right."""

    mx: np.ndarray
    my: np.ndarray

    def __post_init__(self):
        mx = check_plane(self.mx, "mx")
        my = check_plane(self.my, "my")
        check_same_shape(mx, my, names=("mx", "my"))
        object.__setattr__(self, "mx", mx)
        object.__setattr__(self, "my", my)

    @property
    def shape(self):
        return self.mx.shape

    def to_tensor(self, dtype=torch.float64) -> torch.Tensor:
        return torch.tensor(np.stack([self.mx, self.my])[None], dtype=dtype)

    @classmethod
    def from_tensor(cls, flow: torch.Tensor) -> "MotionField":
        f = flow.detach().cpu().double().numpy()
        return cls(f[0, 0], f[0, 1])

    @classmethod
    def constant(cls, dx: float, dy: float, shape) -> "MotionField":
        return cls(np.full(shape, float(dx)), np.full(shape, float(dy)))


def warp(source: torch.Tensor, flow: torch.Tensor) -> torch.Tensor:
    """Bilinear backward warp: ``out(x, y) = source(x + mx, y + my)``.

    Sampling positions are clamped to the frame, so out-of-frame reads
    repeat the border.
    """
    if source.dim() != 4 or flow.dim() != 4 or flow.shape[1] != 2:
        raise ValidationError(f"expected source (B,C,H,W) and flow (B,2,H,W), got "
                              f"{tuple(source.shape)} and {tuple(flow.shape)}")
    b, c, h, w = source.shape
    if flow.shape[0] != b or flow.shape[2:] != (h, w):
        raise ValidationError(f"flow {tuple(flow.shape)} does not match source {tuple(source.shape)}")
    ys = torch.arange(h, dtype=flow.dtype, device=flow.device).view(1, h, 1)
    xs = torch.arange(w, dtype=flow.dtype, device=flow.device).view(1, 1, w)
    sx = (xs + flow[:, 0]).clamp(0, w - 1)
    sy = (ys + flow[:, 1]).clamp(0, h - 1)
    x0f = sx.detach().floor()
    y0f = sy.detach().floor()
    wx = (sx - x0f).unsqueeze(1)
    wy = (sy - y0f).unsqueeze(1)
    x0 = x0f.long()
    y0 = y0f.long()
    x1 = (x0 + 1).clamp(max=w - 1)
    y1 = (y0 + 1).clamp(max=h - 1)

    flat = source.reshape(b, c, h * w)

    def gather(yi, xi):
        idx = (yi * w + xi).view(b, 1, h * w).expand(b, c, h * w)
        return flat.gather(2, idx).view(b, c, h, w)

    top = gather(y0, x0) * (1 - wx) + gather(y0, x1) * wx
    bottom = gather(y1, x0) * (1 - wx) + gather(y1, x1) * wx
    return top * (1 - wy) + bottom * wy


def bilinear_warp(source, motion: MotionField) -> np.ndarray:
    """Plane-level wrapper around :func:`warp`."""
    src = check_plane(source, "source")
    check_same_shape(src, motion.mx, names=("source", "motion"))
    out = warp(torch.tensor(src)[None, None], motion.to_tensor())
    return out[0, 0].numpy()


def upsample_flow(flow: torch.Tensor, size) -> torch.Tensor:
    """Resize a displacement field and rescale it to the new pixel units."""
    scale_y = size[0] / flow.shape[2]
    scale_x = size[1] / flow.shape[3]
    up = F.interpolate(flow, size=size, mode="bilinear", align_corners=False)
    return torch.cat([up[:, :1] * scale_x, up[:, 1:] * scale_y], dim=1)


def conv3x3(cin: int, cout: int) -> nn.Conv2d:
    conv = nn.Conv2d(cin, cout, 3, padding=1)
    bound = 1.0 / np.sqrt(cin * 9)
    nn.init.uniform_(conv.weight, -bound, bound)
    nn.init.zeros_(conv.bias)
    return conv


def check_finite(t: torch.Tensor, where: str) -> torch.Tensor:
    if not torch.isfinite(t).all():
        raise NumericError(f"non-finite activations in {where}")
    return t


# ---------------------------------------------------------------------------
# motion compensation


class FlowPath(nn.Module):
    """Five 3x3 convs with two identity shortcuts, then a linear 2-channel head."""

    def __init__(self, in_channels: int, width: int = 24):
        super().__init__()
        self.convs = nn.ModuleList([conv3x3(in_channels, width)] + [conv3x3(width, width) for _ in range(4)])
        self.acts = nn.ModuleList([nn.PReLU(width, init=PRELU_INIT) for _ in range(5)])
        self.head = conv3x3(width, 2)
        with torch.no_grad():
            self.head.weight.mul_(0.1)

    shortcuts = 2

    def forward(self, x):
        h = self.acts[0](self.convs[0](x))
        for k in (1, 3):
            r = self.acts[k](self.convs[k](h))
            r = self.acts[k + 1](self.convs[k + 1](r))
            h = h + r
        return self.head(h)


class MotionCompensationNet(nn.Module):
    """Coarse-to-fine flow estimation over x4, x2 and full-scale paths.

    ``full_scale=False`` drops the full-resolution path (two-path
    behaviour, the x2 field is upsampled and used directly).
    ``residual_full=False`` makes the full-scale path predict the whole
    field instead of a correction. With ``normalize`` the paths see each
    pair shifted and scaled to zero mean and unit variance; the returned
    compensated plane always warps the original reference.
    """

    def __init__(self, width: int = 24, full_scale: bool = True, residual_full: bool = True,
                 normalize: bool = True):
        super().__init__()
        self.width = width
        self.normalize = normalize
        self.full_scale = full_scale
        self.residual_full = residual_full
        self.config = dict(width=width, full_scale=full_scale, residual_full=residual_full, normalize=normalize)
        self.path4 = FlowPath(2, width)
        self.path2 = FlowPath(4, width)
        self.path1 = FlowPath(4, width) if full_scale else None

    @property
    def num_shortcuts(self) -> int:
        return sum(p.shortcuts for p in (self.path4, self.path2, self.path1) if p is not None)

    def pyramid(self, reference: torch.Tensor, target: torch.Tensor) -> list:
        """Per-level ``(flow, reference, target)`` from coarsest to finest.

        Planes are replicate-padded to a multiple of 4 (and normalised when
        enabled); the finest entry is at padded input resolution.
        """
        if reference.shape != target.shape or reference.dim() != 4 or reference.shape[1] != 1:
            raise ValidationError(f"reference {tuple(reference.shape)} and target "
                                  f"{tuple(target.shape)} must both be (B,1,H,W)")
        h, w = reference.shape[2:]
        ph, pw = (-h) % 4, (-w) % 4
        ref, tgt = reference, target
        if ph or pw:
            ref = F.pad(ref, (0, pw, 0, ph), mode="replicate")
            tgt = F.pad(tgt, (0, pw, 0, ph), mode="replicate")
        if self.normalize:
            # flow is estimated on a contrast-normalised copy of each pair
            both = torch.cat([ref, tgt], 1)
            mean = both.mean(dim=(1, 2, 3), keepdim=True)
            std = both.std(dim=(1, 2, 3), keepdim=True, unbiased=False).clamp(min=NORM_STD_FLOOR)
            ref, tgt = (ref - mean) / std, (tgt - mean) / std
        ref2, tgt2 = F.avg_pool2d(ref, 2), F.avg_pool2d(tgt, 2)
        ref4, tgt4 = F.avg_pool2d(ref2, 2), F.avg_pool2d(tgt2, 2)

        f4 = check_finite(self.path4(torch.cat([ref4, tgt4], 1)), "x4 flow path")
        up = upsample_flow(f4, ref2.shape[2:])
        x2 = torch.cat([warp(ref2, up), tgt2, up], 1)
        f2 = check_finite(up + self.path2(x2), "x2 flow path")
        up = upsample_flow(f2, ref.shape[2:])
        if self.path1 is None:
            f1 = up
        else:
            x1 = torch.cat([warp(ref, up), tgt, up], 1)
            out = check_finite(self.path1(x1), "full-scale flow path")
            f1 = up + out if self.residual_full else out
        return [(f4, ref4, tgt4), (f2, ref2, tgt2), (f1, ref, tgt)]

    def forward(self, reference: torch.Tensor, target: torch.Tensor):
        """Return ``(flow, compensated)``; ``flow`` is (B, 2, H, W)."""
        h, w = reference.shape[2:]
        flow = self.pyramid(reference, target)[-1][0][:, :, :h, :w]
        return flow, warp(reference, flow)


def mc_forward(net: MotionCompensationNet, reference, target):
    """Plane-level motion compensation: ``(MotionField, compensated plane)``."""
    ref = check_plane(reference, "reference")
    tgt = check_plane(target, "target")
    check_same_shape(ref, tgt, names=("reference", "target"))
    dtype = next(net.parameters()).dtype
    with torch.no_grad():
        flow, comp = net(torch.tensor(ref, dtype=dtype)[None, None],
                         torch.tensor(tgt, dtype=dtype)[None, None])
    return MotionField.from_tensor(flow), comp[0, 0].double().clamp(0, 1).numpy()


# ---------------------------------------------------------------------------
# guided convolution


class GuidedConv(nn.Module):
    """Block-adaptive 3x3 convolution.

    The guidance maps pass through two 3x3 convs (PReLU between) to give one
    intermediate map per output channel. Output ``l`` is a 3x3 convolution
    of ``input_j * intermediate_l`` summed over ``j``, i.e. each tap weight
    is modulated by the intermediate map at the sampled position.
    """

    def __init__(self, in_channels: int, guide_channels: int, out_channels: int, hidden: int = 8):
        super().__init__()
        self.in_channels = in_channels
        self.guide_channels = guide_channels
        self.out_channels = out_channels
        self.weight = nn.Parameter(torch.empty(out_channels, in_channels, 3, 3))
        self.bias = nn.Parameter(torch.zeros(out_channels))
        bound = 1.0 / np.sqrt(in_channels * 9)
        nn.init.uniform_(self.weight, -bound, bound)
        self.guide1 = conv3x3(guide_channels, hidden)
        self.guide_act = nn.PReLU(hidden, init=PRELU_INIT)
        self.guide2 = conv3x3(hidden, out_channels)
        with torch.no_grad():
            self.guide2.weight.mul_(0.01)
            self.guide2.bias.fill_(1.0)

    def intermediate(self, guidance: torch.Tensor) -> torch.Tensor:
        return self.guide2(self.guide_act(self.guide1(guidance)))

    def forward(self, inputs: torch.Tensor, guidance: torch.Tensor) -> torch.Tensor:
        if inputs.shape[1] != self.in_channels or guidance.shape[1] != self.guide_channels:
            raise ValidationError(
                f"guided conv expects {self.in_channels} input and {self.guide_channels} guidance "
                f"maps, got {inputs.shape[1]} and {guidance.shape[1]}")
        if inputs.shape[2:] != guidance.shape[2:] or inputs.shape[0] != guidance.shape[0]:
            raise ValidationError(f"input {tuple(inputs.shape)} and guidance {tuple(guidance.shape)} differ")
        return self.apply_intermediate(inputs, self.intermediate(guidance))

    def apply_intermediate(self, inputs: torch.Tensor, inter: torch.Tensor) -> torch.Tensor:
        b, pi, h, w = inputs.shape
        po = self.out_channels
        # (B, Po, Pi, H, W) products, then one group per output map
        prod = (inter.unsqueeze(2) * inputs.unsqueeze(1)).reshape(b, po * pi, h, w)
        return F.conv2d(prod, self.weight, self.bias, padding=1, groups=po)


def guided_conv_forward(conv: GuidedConv, inputs, guidance) -> np.ndarray:
    """Apply ``conv`` to (P, H, W) stacks of input and guidance planes."""
    x = np.asarray(inputs, dtype=np.float64)
    g = np.asarray(guidance, dtype=np.float64)
    if x.ndim != 3 or g.ndim != 3:
        raise ValidationError(f"expected (P, H, W) stacks, got {x.shape} and {g.shape}")
    dtype = next(conv.parameters()).dtype
    with torch.no_grad():
        out = conv(torch.tensor(x, dtype=dtype)[None], torch.tensor(g, dtype=dtype)[None])
    return out[0].double().numpy()


# ---------------------------------------------------------------------------
# dense unit


class DenseUnit(nn.Module):
    """Four densely connected 3x3 conv layers.

    Layer ``k`` sees the unit input concatenated with the outputs of layers
    ``1..k-1``. An intermediate unit returns all four outputs concatenated;
    a ``final`` unit's last layer emits ``out_channels`` maps linearly and
    only that is returned.
    """

    num_layers = 4

    def __init__(self, in_channels: int, growth: int = 12, final: bool = False, out_channels: int = 1):
        super().__init__()
        self.in_channels = in_channels
        self.growth = growth
        self.final = final
        widths = [in_channels + k * growth for k in range(self.num_layers)]
        outs = [growth] * self.num_layers
        if final:
            outs[-1] = out_channels
        self.convs = nn.ModuleList(conv3x3(cin, cout) for cin, cout in zip(widths, outs))
        n_act = self.num_layers - 1 if final else self.num_layers
        self.acts = nn.ModuleList(nn.PReLU(growth, init=PRELU_INIT) for _ in range(n_act))
        if final:
            nn.init.zeros_(self.convs[-1].weight)
            nn.init.zeros_(self.convs[-1].bias)

    @property
    def input_widths(self) -> list:
        return [c.in_channels for c in self.convs]

    @property
    def out_channels(self) -> int:
        return self.convs[-1].out_channels if self.final else self.num_layers * self.growth

    @property
    def connections(self) -> int:
        # layer k reads the unit input plus k-1 earlier outputs
        return sum(k + 1 for k in range(self.num_layers))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[1] != self.in_channels:
            raise ValidationError(f"dense unit expects {self.in_channels} channels, got {x.shape[1]}")
        feats = [x]
        outs = []
        for k, conv in enumerate(self.convs):
            y = conv(torch.cat(feats, 1) if len(feats) > 1 else x)
            if k < len(self.acts):
                y = self.acts[k](y)
            feats.append(y)
            outs.append(y)
        return outs[-1] if self.final else torch.cat(outs, 1)
