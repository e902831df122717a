"""Segmentation network blocks: residual encoder, channel-attention gating,
attention feature fusion across pyramid levels, dense upsampling convolution,
and the full encoder-decoder network.

All blocks are assembled from the ops in :mod:`fednet.ops`; there is no batch
normalization anywhere.  Parameters are named by their position in the block
tree, so checkpoints of one flag configuration only ever load into a network
built with the same flags.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from . import ops
from .ops import relu, sigmoid
from .tensor import Parameter, Tensor


@dataclass
class NetworkSpec:
    """Hyperparameters of one network; the four enable flags are the ablation axes."""

    in_channels: int = 3
    base_channels: int = 16
    channels_per_level: Optional[tuple[int, int, int, int]] = None
    se_reduction: int = 16
    enable_rcb: bool = True
    enable_ff: bool = True
    enable_se: bool = True
    enable_duc: bool = True
    out_stride_head_factor: int = 4

    def __post_init__(self):
        if self.channels_per_level is None:
            b = self.base_channels
            self.channels_per_level = (b, 2 * b, 4 * b, 8 * b)
        else:
            self.channels_per_level = tuple(self.channels_per_level)

    def validate(self) -> None:
        if self.in_channels < 1:
            raise ValueError(f"in_channels must be >= 1, got {self.in_channels}")
        ch = self.channels_per_level
        if len(ch) != 4:
            raise ValueError(f"channels_per_level must have 4 entries, got {len(ch)}")
        for lo, hi in zip(ch, ch[1:]):
            if hi != 2 * lo:
                raise ValueError(
                    f"channels_per_level must double per level, got {ch}")
        if ch[0] < 4:
            raise ValueError(f"level-1 channel count must be >= 4 for the decoder, got {ch[0]}")
        if self.se_reduction < 1:
            raise ValueError(f"se_reduction must be >= 1, got {self.se_reduction}")
        if self.enable_ff and self.enable_se:
            for c in ch:
                if c % self.se_reduction != 0:
                    raise ValueError(
                        f"se_reduction {self.se_reduction} must divide every fused channel "
                        f"count, but {c} is not divisible")
        if self.out_stride_head_factor != 4:
            raise ValueError(
                f"out_stride_head_factor must be 4 (the stem stride), got "
                f"{self.out_stride_head_factor}")

    def baseline(self) -> "NetworkSpec":
        """The plain encoder-decoder variant: all three ablation axes off."""
        return replace(self, enable_rcb=False, enable_ff=False, enable_se=False,
                       enable_duc=False)


@dataclass
class FeaturePyramid:
    """Encoder outputs x_1..x_4 at strides 4, 8, 16, 32 relative to the input."""

    levels: list = field(default_factory=list)

    def __post_init__(self):
        for low, high in zip(self.levels, self.levels[1:]):
            if low.shape[0] != high.shape[0]:
                raise ValueError("pyramid levels must share the batch extent")
            if low.shape[2] != 2 * high.shape[2] or low.shape[3] != 2 * high.shape[3]:
                raise ValueError(
                    f"pyramid level spatial extents must halve per level, got "
                    f"{tuple(low.shape)} then {tuple(high.shape)}")


def glorot_uniform(rng: np.random.Generator, shape: tuple, fan_in: int, fan_out: int,
                   dtype=np.float32) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


class Block:
    """Base class: an ordered registry of parameters and child blocks."""

    def __init__(self):
        self._params: dict[str, Parameter] = {}
        self._children: dict[str, Block] = {}

    def _param(self, name: str, array: np.ndarray) -> Parameter:
        p = Parameter(array, name=name)
        self._params[name] = p
        return p

    def _child(self, name: str, block: "Block") -> "Block":
        self._children[name] = block
        return block

    def named_parameters(self, prefix: str = "") -> dict[str, Parameter]:
        out: dict[str, Parameter] = {}
        for name, p in self._params.items():
            out[prefix + name] = p
        for name, child in self._children.items():
            out.update(child.named_parameters(prefix + name + "."))
        return out

    def parameters(self) -> list[Parameter]:
        return list(self.named_parameters().values())


class Conv2d(Block):
    def __init__(self, cin: int, cout: int, k: int, rng: np.random.Generator,
                 stride: int = 1, pad: int = 0, dtype=np.float32, bias: bool = True):
        super().__init__()
        self.stride, self.pad = stride, pad
        w = glorot_uniform(rng, (cout, cin, k, k), cin * k * k, cout * k * k, dtype)
        self.w = self._param("w", w)
        self.b = self._param("b", np.zeros(cout, dtype=dtype)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        b = self.b.value if self.b is not None else None
        return ops.conv2d(x, self.w.value, b, self.stride, self.pad)


class ConvTranspose2d(Block):
    def __init__(self, cin: int, cout: int, k: int, rng: np.random.Generator,
                 stride: int = 1, pad: int = 0, dtype=np.float32, bias: bool = True):
        super().__init__()
        self.stride, self.pad = stride, pad
        w = glorot_uniform(rng, (cin, cout, k, k), cin * k * k, cout * k * k, dtype)
        self.w = self._param("w", w)
        self.b = self._param("b", np.zeros(cout, dtype=dtype)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        b = self.b.value if self.b is not None else None
        return ops.conv_transpose2d(x, self.w.value, b, self.stride, self.pad)


class Dense(Block):
    def __init__(self, cin: int, cout: int, rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        self.w = self._param("w", glorot_uniform(rng, (cout, cin), cin, cout, dtype))
        self.b = self._param("b", np.zeros(cout, dtype=dtype))

    def __call__(self, x: Tensor) -> Tensor:
        return ops.dense(x, self.w.value, self.b.value)


class SEBlock(Block):
    """Channel attention: squeeze (global average pool), excite (two dense
    layers), then a sigmoid gate rescaling every channel map."""

    def __init__(self, channels: int, reduction: int, rng: np.random.Generator,
                 dtype=np.float32):
        super().__init__()
        if channels % reduction != 0:
            raise ValueError(
                f"SE block channels {channels} not divisible by reduction {reduction}")
        hidden = channels // reduction
        self.fc1 = self._child("fc1", Dense(channels, hidden, rng, dtype))
        self.fc2 = self._child("fc2", Dense(hidden, channels, rng, dtype))

    def __call__(self, x: Tensor) -> Tensor:
        gate = sigmoid(self.fc2(relu(self.fc1(ops.global_avg_pool(x)))))
        return ops.channel_scale(x, gate)


class RCB(Block):
    """Residual convolution block without normalization:
    y = relu(x + conv3x3(relu(conv3x3(x))))."""

    def __init__(self, channels: int, rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        self.conv1 = self._child("conv1", Conv2d(channels, channels, 3, rng, pad=1, dtype=dtype))
        self.conv2 = self._child("conv2", Conv2d(channels, channels, 3, rng, pad=1, dtype=dtype))

    def __call__(self, x: Tensor) -> Tensor:
        return relu(x + self.conv2(relu(self.conv1(x))))


class _FuseTerm(Block):
    """One fused contribution: 1x1 projection to the target level's channel
    count, then (optionally) SE gating."""

    def __init__(self, cin: int, cout: int, se_reduction: int, enable_se: bool,
                 rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        self.proj = self._child("proj", Conv2d(cin, cout, 1, rng, dtype=dtype))
        self.se = self._child("se", SEBlock(cout, se_reduction, rng, dtype)) if enable_se else None

    def __call__(self, t: Tensor) -> Tensor:
        t = self.proj(t)
        return self.se(t) if self.se is not None else t


class FeatureFusion(Block):
    """Per-level fusion of the current level with all levels above it:

        H_l = T(x_l) + sum over i > l of T(upsample(x_i, 2**(i-l)))

    where each term T is a learned 1x1 projection to the level-l channel
    count followed by SE gating (identity when SE is disabled).  Terms are
    accumulated in ascending source-level order.
    """

    def __init__(self, channels: Sequence[int], se_reduction: int, enable_se: bool,
                 rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        self.channels = tuple(channels)
        n = len(self.channels)
        self.terms: dict[tuple[int, int], _FuseTerm] = {}
        for l in range(n):
            for i in range(l, n):
                term = _FuseTerm(self.channels[i], self.channels[l], se_reduction,
                                 enable_se, rng, dtype)
                self.terms[(l, i)] = term
                self._child(f"l{l + 1}.from{i + 1}", term)

    def _validate(self, levels: Sequence[Tensor]) -> None:
        if len(levels) != len(self.channels):
            raise ValueError(
                f"feature fusion built for {len(self.channels)} levels, got {len(levels)}")
        batch = levels[0].shape[0]
        for idx, (lvl, c) in enumerate(zip(levels, self.channels)):
            if lvl.shape[0] != batch:
                raise ValueError("pyramid shape inconsistency: batch extents differ")
            if lvl.shape[1] != c:
                raise ValueError(
                    f"pyramid shape inconsistency: level {idx + 1} has {lvl.shape[1]} "
                    f"channels, expected {c}")
            f = 2 ** idx
            if (lvl.shape[2] * f != levels[0].shape[2]
                    or lvl.shape[3] * f != levels[0].shape[3]):
                raise ValueError(
                    f"pyramid shape inconsistency: level {idx + 1} spatial extents "
                    f"{tuple(lvl.shape[2:])} do not match a halving pyramid")

    def __call__(self, levels: Sequence[Tensor]) -> list[Tensor]:
        if isinstance(levels, FeaturePyramid):
            levels = levels.levels
        self._validate(levels)
        fused = []
        for l in range(len(levels)):
            acc = None
            for i in range(l, len(levels)):
                t = levels[i]
                f = 2 ** (i - l)
                if f > 1:
                    t = ops.upsample_nearest(t, f)
                t = self.terms[(l, i)](t)
                acc = t if acc is None else acc + t
            fused.append(acc)
        return fused


class DUC(Block):
    """Dense upsampling convolution: a 3x3 conv expanding channels by r*r,
    then pixel shuffling to trade those channels for an r-fold resolution
    gain."""

    def __init__(self, cin: int, cout: int, r: int, rng: np.random.Generator,
                 dtype=np.float32):
        super().__init__()
        self.r = r
        self.conv = self._child("conv", Conv2d(cin, cout * r * r, 3, rng, pad=1, dtype=dtype))

    def __call__(self, x: Tensor) -> Tensor:
        return ops.pixel_shuffle(self.conv(x), self.r)


class UpsampleConv(Block):
    """Replacement for DUC when it is disabled: nearest upsample then 3x3 conv."""

    def __init__(self, cin: int, cout: int, r: int, rng: np.random.Generator,
                 dtype=np.float32):
        super().__init__()
        self.r = r
        self.conv = self._child("conv", Conv2d(cin, cout, 3, rng, pad=1, dtype=dtype))

    def __call__(self, x: Tensor) -> Tensor:
        return self.conv(ops.upsample_nearest(x, self.r))


class DecoderBlock(Block):
    """Bottlenecked doubling stage: 1x1 reduce to C/4, transposed conv
    (stride 2, kernel 2), then 1x1 restore to the requested channel count."""

    def __init__(self, cin: int, cout: int, rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        if cin < 4:
            raise ValueError(f"decoder block needs >= 4 input channels, got {cin}")
        mid = cin // 4
        self.reduce = self._child("reduce", Conv2d(cin, mid, 1, rng, dtype=dtype))
        self.up = self._child("up", ConvTranspose2d(mid, mid, 2, rng, stride=2, dtype=dtype))
        self.restore = self._child("restore", Conv2d(mid, cout, 1, rng, dtype=dtype))

    def __call__(self, x: Tensor) -> Tensor:
        return self.restore(relu(self.up(relu(self.reduce(x)))))


class _ResStage(Block):
    """Stride-2 residual stage: 3x3/s2 -> relu -> 3x3, plus a 1x1/s2 shortcut."""

    def __init__(self, cin: int, cout: int, rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        self.main1 = self._child("main1", Conv2d(cin, cout, 3, rng, stride=2, pad=1, dtype=dtype))
        self.main2 = self._child("main2", Conv2d(cout, cout, 3, rng, pad=1, dtype=dtype))
        self.short = self._child("short", Conv2d(cin, cout, 1, rng, stride=2, dtype=dtype))

    def __call__(self, x: Tensor) -> Tensor:
        return relu(self.main2(relu(self.main1(x))) + self.short(x))


class Encoder(Block):
    """Four-resolution residual encoder: a stride-4 stem then three stride-2
    residual stages, optionally refined by an RCB after every block."""

    def __init__(self, in_channels: int, channels: Sequence[int], enable_rcb: bool,
                 rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        c1, c2, c3, c4 = channels
        self.stem_a = self._child("stem_a", Conv2d(in_channels, c1, 3, rng, stride=2, pad=1,
                                                   dtype=dtype))
        self.stem_b = self._child("stem_b", Conv2d(c1, c1, 3, rng, stride=2, pad=1, dtype=dtype))
        self.stage2 = self._child("stage2", _ResStage(c1, c2, rng, dtype))
        self.stage3 = self._child("stage3", _ResStage(c2, c3, rng, dtype))
        self.stage4 = self._child("stage4", _ResStage(c3, c4, rng, dtype))
        self.rcbs = None
        if enable_rcb:
            self.rcbs = [self._child(f"rcb{i + 1}", RCB(c, rng, dtype))
                         for i, c in enumerate((c1, c2, c3, c4))]

    def __call__(self, x: Tensor) -> FeaturePyramid:
        if x.ndim != 4:
            raise ValueError(f"encoder input must be 4-d [N,C,H,W], got {tuple(x.shape)}")
        h, w = x.shape[2], x.shape[3]
        if h % 32 != 0 or w % 32 != 0:
            raise ValueError(f"encoder spatial extents must be divisible by 32, got {h}x{w}")
        x1 = relu(self.stem_b(relu(self.stem_a(x))))
        levels = [x1]
        for stage in (self.stage2, self.stage3, self.stage4):
            levels.append(stage(levels[-1]))
        if self.rcbs is not None:
            levels = [rcb(t) for rcb, t in zip(self.rcbs, levels)]
        return FeaturePyramid(levels)


class FedNet(Block):
    """Feature-fusion encoder-decoder segmentation network.

    Encoder pyramid -> (optional) attention feature fusion -> decoder: the
    deepest level is upsampled stride 32 -> 16 (DUC or upsample+conv), then
    three stages each add a channel-matched skip and the first two double the
    resolution, reaching stride 4; the head upsamples by 4 to full resolution
    and a 1x1 conv plus sigmoid yields one probability channel.

    With every enable flag off this is the plain baseline encoder-decoder
    with raw skip connections.
    """

    def __init__(self, spec: NetworkSpec, rng=None, dtype=np.float32):
        super().__init__()
        spec.validate()
        if rng is None or isinstance(rng, int):
            rng = np.random.default_rng(0 if rng is None else rng)
        self.spec = spec
        self.dtype = dtype
        c1, c2, c3, c4 = spec.channels_per_level
        self.encoder = self._child("encoder", Encoder(spec.in_channels,
                                                      spec.channels_per_level,
                                                      spec.enable_rcb, rng, dtype))
        self.fuse = None
        if spec.enable_ff:
            self.fuse = self._child("fuse", FeatureFusion(spec.channels_per_level,
                                                          spec.se_reduction,
                                                          spec.enable_se, rng, dtype))
        head_ch = max(1, c1 // 2)
        if spec.enable_duc:
            self.up4 = self._child("duc4", DUC(c4, c3, 2, rng, dtype))
            self.head_up = self._child("head_duc",
                                       DUC(c1, head_ch, spec.out_stride_head_factor, rng, dtype))
        else:
            self.up4 = self._child("upconv4", UpsampleConv(c4, c3, 2, rng, dtype))
            self.head_up = self._child("head_upconv",
                                       UpsampleConv(c1, head_ch, spec.out_stride_head_factor,
                                                    rng, dtype))
        self.skip3 = self._child("skip3", Conv2d(c3, c3, 1, rng, dtype=dtype))
        self.skip2 = self._child("skip2", Conv2d(c2, c2, 1, rng, dtype=dtype))
        self.skip1 = self._child("skip1", Conv2d(c1, c1, 1, rng, dtype=dtype))
        self.dec3 = self._child("dec3", DecoderBlock(c3, c2, rng, dtype))
        self.dec2 = self._child("dec2", DecoderBlock(c2, c1, rng, dtype))
        self.head_out = self._child("head_out", Conv2d(head_ch, 1, 1, rng, dtype=dtype))
        # start biased toward background: initial probabilities ~0.12 keep the
        # overlap-loss gradients bounded when foreground is rare
        self.head_out.b.value.data[...] = -2.0
        for name, p in self.named_parameters().items():
            p.name = name

    def forward(self, x: Tensor) -> Tensor:
        pyr = self.encoder(x)
        skips = self.fuse(pyr.levels) if self.fuse is not None else pyr.levels
        d = self.up4(skips[3])
        d = d + self.skip3(skips[2])
        d = self.dec3(d)
        d = d + self.skip2(skips[1])
        d = self.dec2(d)
        d = d + self.skip1(skips[0])
        return sigmoid(self.head_out(self.head_up(d)))

    __call__ = forward


def baseline_forward(x: Tensor, net: FedNet) -> Tensor:
    """Forward pass of the plain baseline; ``net`` must be built from a
    baseline spec (all ablation flags off)."""
    spec = net.spec
    if spec.enable_rcb or spec.enable_ff or spec.enable_duc:
        raise ValueError("baseline_forward requires a network with all ablation flags off")
    return net.forward(x)
