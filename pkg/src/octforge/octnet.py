"""Octave convolution and the Oct-ResNet feature extractor.

An octave tensor carries a full-resolution "high" group of channels and a
half-resolution "low" group. Each OctConv mixes the two groups through four
paths; low outputs are upsampled (nearest) into the high branch and high
inputs are average-pooled into the low branch.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .layers import BatchNorm2d, Conv2d, Module, kaiming_normal
from .tensor import Parameter, Tensor


def low_channels(channels: int, alpha: float) -> int:
    return int(np.floor(alpha * channels + 0.5))


@dataclass
class OctTensor:
    high: Tensor
    low: Tensor | None = None
    alpha: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.alpha < 1.0:
            raise ValueError(f"alpha must be in [0, 1), got {self.alpha}")
        if self.low is None:
            return
        hh, hw = self.high.shape[-2:]
        lh, lw = self.low.shape[-2:]
        if (lh * 2, lw * 2) != (hh, hw):
            raise T.ShapeError(f"low branch {lh}x{lw} is not half of high branch {hh}x{hw}")


class OctConv(Module):
    """Four-path octave convolution without biases (a norm layer follows).

    ``stride == 2`` average-pools both input branches before the path
    convolutions, which keeps the 2:1 resolution ratio between branches.
    """

    def __init__(self, rng, c_in: int, c_out: int, k: int, alpha_in: float, alpha_out: float, stride: int = 1):
        if stride not in (1, 2):
            raise ValueError("OctConv supports stride 1 or 2")
        self.k, self.stride, self.pad = k, stride, k // 2
        self.alpha_in, self.alpha_out = alpha_in, alpha_out
        self.in_low = low_channels(c_in, alpha_in)
        self.in_high = c_in - self.in_low
        self.out_low = low_channels(c_out, alpha_out)
        self.out_high = c_out - self.out_low

        def make(ci, co):
            if ci == 0 or co == 0:
                return None
            # fan-in counts every path feeding the output group
            return Parameter(kaiming_normal(rng, (co, ci, k, k), c_in * k * k))

        self.w_hh = make(self.in_high, self.out_high)
        self.w_lh = make(self.in_low, self.out_high)
        self.w_ll = make(self.in_low, self.out_low)
        self.w_hl = make(self.in_high, self.out_low)

    def _conv(self, x, w):
        return T.conv2d(x, w, None, stride=1, pad=self.pad)

    def __call__(self, x: OctTensor) -> OctTensor:
        if (x.low is None) != (self.in_low == 0):
            raise T.ShapeError("input octave split does not match layer alpha_in")
        xh, xl = x.high, x.low
        if xh.shape[-3] != self.in_high or (xl is not None and xl.shape[-3] != self.in_low):
            raise T.ShapeError(
                f"OctConv expects {self.in_high}/{self.in_low} channels, got "
                f"{xh.shape[-3]}/{None if xl is None else xl.shape[-3]}"
            )
        if self.stride == 2:
            xh = T.avg_pool2x2(xh)
            xl = T.avg_pool2x2(xl) if xl is not None else None
        yh = yl = None
        if self.w_hh is not None:
            yh = self._conv(xh, self.w_hh)
        if self.w_lh is not None:
            up = T.upsample_nearest2x(self._conv(xl, self.w_lh))
            yh = up if yh is None else yh + up
        if self.w_ll is not None:
            yl = self._conv(xl, self.w_ll)
        if self.w_hl is not None:
            down = self._conv(T.avg_pool2x2(xh), self.w_hl)
            yl = down if yl is None else yl + down
        return OctTensor(yh, yl, self.alpha_out)


def oct_conv(x: OctTensor, layer: OctConv) -> OctTensor:
    return layer(x)


class OctSplit(Module):
    """Entry adapter from a plain tensor to an octave tensor.

    With alpha = 0 the input passes through untouched. Otherwise learned 1x1
    projections produce the high channels and the (pooled) low channels.
    """

    def __init__(self, rng, c_in: int, c_out: int, alpha: float):
        self.alpha = alpha
        n_low = low_channels(c_out, alpha)
        if n_low == 0:
            self.w_high = self.w_low = None
        else:
            self.w_high = Parameter(kaiming_normal(rng, (c_out - n_low, c_in, 1, 1), c_in))
            self.w_low = Parameter(kaiming_normal(rng, (n_low, c_in, 1, 1), c_in))

    def __call__(self, x: Tensor) -> OctTensor:
        h, w = x.shape[-2:]
        if h % 2 or w % 2:
            raise T.ShapeError(f"oct_split needs even spatial dims, got {h}x{w}")
        if self.w_low is None:
            return OctTensor(x, None, 0.0)
        high = T.conv2d(x, self.w_high)
        low = T.avg_pool2x2(T.conv2d(x, self.w_low))
        return OctTensor(high, low, self.alpha)


def oct_split(x: Tensor, layer: OctSplit) -> OctTensor:
    return layer(x)


class OctBatchNorm(Module):
    def __init__(self, c: int, alpha: float):
        n_low = low_channels(c, alpha)
        self.bn_h = BatchNorm2d(c - n_low)
        self.bn_l = BatchNorm2d(n_low) if n_low else None

    def __call__(self, x: OctTensor) -> OctTensor:
        low = self.bn_l(x.low) if self.bn_l is not None else None
        return OctTensor(self.bn_h(x.high), low, x.alpha)


def oct_relu(x: OctTensor) -> OctTensor:
    return OctTensor(T.relu(x.high), T.relu(x.low) if x.low is not None else None, x.alpha)


def oct_add(a: OctTensor, b: OctTensor) -> OctTensor:
    low = a.low + b.low if a.low is not None else None
    return OctTensor(a.high + b.high, low, a.alpha)


class OctBasicBlock(Module):
    """ResNet basic block with OctConv; 1x1 OctConv projection shortcut when
    the width, stride or octave split changes."""

    def __init__(self, rng, c_in: int, c_out: int, stride: int, alpha_in: float, alpha_out: float):
        alpha_mid = alpha_out if alpha_out > 0 else alpha_in
        self.conv1 = OctConv(rng, c_in, c_out, 3, alpha_in, alpha_mid, stride)
        self.bn1 = OctBatchNorm(c_out, alpha_mid)
        self.conv2 = OctConv(rng, c_out, c_out, 3, alpha_mid, alpha_out, 1)
        self.bn2 = OctBatchNorm(c_out, alpha_out)
        if stride != 1 or c_in != c_out or alpha_in != alpha_out:
            self.proj = OctConv(rng, c_in, c_out, 1, alpha_in, alpha_out, stride)
            self.proj_bn = OctBatchNorm(c_out, alpha_out)
        else:
            self.proj = self.proj_bn = None

    def __call__(self, x: OctTensor) -> OctTensor:
        y = oct_relu(self.bn1(self.conv1(x)))
        y = self.bn2(self.conv2(y))
        short = self.proj_bn(self.proj(x)) if self.proj is not None else x
        return oct_relu(oct_add(y, short))


PRESETS = {
    "desk-10": dict(blocks=(1, 1, 1, 1), widths=(16, 32, 64, 128), stem_kernel=3, stem_pool=False),
    "resnet-34": dict(blocks=(3, 4, 6, 3), widths=(64, 128, 256, 512), stem_kernel=7, stem_pool=True),
}


@dataclass
class BackboneConfig:
    depth: str = "desk-10"
    alpha: float = 0.25
    in_channels: int = 3

    def __post_init__(self):
        if self.depth not in PRESETS:
            raise ValueError(f"unknown depth preset {self.depth!r}; choose from {sorted(PRESETS)}")
        if not 0.0 <= self.alpha < 1.0:
            raise ValueError("alpha must be in [0, 1)")

    @property
    def preset(self) -> dict:
        return PRESETS[self.depth]

    @property
    def stem_channels(self) -> int:
        return self.preset["widths"][0]

    @property
    def feature_dim(self) -> int:
        return self.preset["widths"][-1]


class OctResNet(Module):
    """Stem conv (stride 2) -> oct split -> residual OctConv stages -> GAP.

    The final block merges back to a single full-resolution group so the
    global average pool yields one vector of ``cfg.feature_dim`` per input.
    """

    def __init__(self, cfg: BackboneConfig, rng: np.random.Generator):
        self.cfg = cfg
        p = cfg.preset
        c0 = cfg.stem_channels
        self.stem = Conv2d(rng, cfg.in_channels, c0, p["stem_kernel"], stride=2)
        self.stem_bn = BatchNorm2d(c0)
        self.split = OctSplit(rng, c0, c0, cfg.alpha)
        blocks = []
        c_in = c0
        n_stages = len(p["blocks"])
        for s, (n, width) in enumerate(zip(p["blocks"], p["widths"])):
            for i in range(n):
                stride = 2 if (s > 0 and i == 0) else 1
                last = s == n_stages - 1 and i == n - 1
                blocks.append(OctBasicBlock(rng, c_in, width, stride, cfg.alpha, 0.0 if last else cfg.alpha))
                c_in = width
        self.blocks = blocks

    @property
    def final_block(self) -> OctBasicBlock:
        return self.blocks[-1]

    def forward_prefix(self, x: Tensor) -> OctTensor:
        """Everything before the final residual block."""
        if x.ndim == 3:
            x = x.reshape(1, *x.shape)
        if x.shape[1] != self.cfg.in_channels:
            raise T.ShapeError(f"backbone expects {self.cfg.in_channels} input channels, got {x.shape[1]}")
        y = T.relu(self.stem_bn(self.stem(x)))
        if self.cfg.preset["stem_pool"]:
            y = T.avg_pool2x2(y)
        z = self.split(y)
        for blk in self.blocks[:-1]:
            z = blk(z)
        return z

    def forward_suffix(self, z: OctTensor) -> Tensor:
        out = self.final_block(z)
        return T.global_avg_pool(out.high)

    def __call__(self, x: Tensor) -> Tensor:
        """[N, C, H, W] (or [C, H, W]) -> [N, D] features."""
        return self.forward_suffix(self.forward_prefix(x))


def backbone_forward(x: Tensor, net: OctResNet, training: bool = False) -> Tensor:
    """Feature vector(s) for one input or a batch; [C,H,W] input gives [D]."""
    single = x.ndim == 3
    net.train(training)
    feats = net(x)
    return feats.reshape(feats.shape[1]) if single else feats
