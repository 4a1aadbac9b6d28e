"""3D residual blocks and 3D attention blocks.

A residual block is three pre-activation stages (batchnorm -> ReLU -> conv)
with widths N/4, N/4, N plus an identity skip. An attention block runs one
initial residual block, then a trunk of two residual blocks in parallel with
a soft mask branch: three pool+res bottom-up stages, three res+upsample
top-down stages with two residual skip connections, and a two-stage 1x1x1
head ending in a sigmoid. The mask modulates the trunk multiplicatively as
trunk * (1 + mask) before a final residual block.
"""

from __future__ import annotations

import numpy as np

from .tensor import ContractError, ShapeError, Tensor, add, add_scalar, multiply
from .layers import BatchNorm3d, Conv3d, maxpool3d, relu, sigmoid, trilinear_upsample

__all__ = ["PreactConv", "ResidualBlock", "AttentionBlock", "count_parameters_block",
           "ATTENTION_MIN_EXTENT"]

# Three halvings with floor rounding must leave every extent >= 1.
ATTENTION_MIN_EXTENT = 8


class PreactConv:
    """One batchnorm -> ReLU -> convolution stage."""

    def __init__(self, in_channels, out_channels, kernel, rng, dtype=np.float32,
                 init_scale=1.0):
        self.bn = BatchNorm3d(in_channels, dtype=dtype)
        self.conv = Conv3d(in_channels, out_channels, kernel, rng, padding="same",
                           dtype=dtype, init_scale=init_scale)

    def __call__(self, x: Tensor, train: bool) -> Tensor:
        return self.conv(relu(self.bn(x, train)))

    def params(self):
        return [("bn." + n, t) for n, t in self.bn.params()] + [
            ("conv." + n, t) for n, t in self.conv.params()
        ]

    def state(self):
        return [("bn." + n, a) for n, a in self.bn.state()]


class ResidualBlock:
    """res(x) = stage3(stage2(stage1(x))) + x with widths N/4, N/4, N.

    The closing 1x1x1 convolution starts at 0.1x the He scale so a fresh
    block is close to the identity; the batch norms inside would otherwise
    re-inflate arbitrarily small inputs to unit order and destabilize the
    BN-free trunk around the block.
    """

    def __init__(self, channels, rng, dtype=np.float32):
        if channels < 4:
            raise ShapeError(f"residual block needs at least 4 channels, got {channels}")
        hidden = channels // 4
        self.channels = channels
        self.stages = [
            PreactConv(channels, hidden, 1, rng, dtype),
            PreactConv(hidden, hidden, 3, rng, dtype),
            PreactConv(hidden, channels, 1, rng, dtype, init_scale=0.1),
        ]

    def __call__(self, x: Tensor, train: bool) -> Tensor:
        if x.data.shape[1] != self.channels:
            raise ShapeError(f"residual block expects {self.channels} channels, got {x.data.shape[1]}")
        h = x
        for stage in self.stages:
            h = stage(h, train)
        return add(h, x)

    def params(self):
        out = []
        for i, stage in enumerate(self.stages, start=1):
            out.extend((f"stage{i}.{n}", t) for n, t in stage.params())
        return out

    def state(self):
        out = []
        for i, stage in enumerate(self.stages, start=1):
            out.extend((f"stage{i}.{n}", a) for n, a in stage.state())
        return out


class AttentionBlock:
    """Trunk/soft-mask attention block preserving shape at width N.

    The initial residual block feeds both branches; the mask branch reaches
    its lowest resolution after exactly 3 max-pooling steps, and each
    top-down upsample targets the extents of its skip connection so the
    additions always match.
    """

    def __init__(self, channels, rng, dtype=np.float32):
        self.channels = channels
        self.initial = ResidualBlock(channels, rng, dtype)
        self.trunk = [ResidualBlock(channels, rng, dtype) for _ in range(2)]
        self.bottom_up = [ResidualBlock(channels, rng, dtype) for _ in range(3)]
        self.top_down = [ResidualBlock(channels, rng, dtype) for _ in range(3)]
        self.skips = [ResidualBlock(channels, rng, dtype) for _ in range(2)]
        self.head = [PreactConv(channels, channels, 1, rng, dtype) for _ in range(2)]
        self.final = ResidualBlock(channels, rng, dtype)

    def __call__(self, x: Tensor, train: bool):
        """Returns (output, mask); output shape equals input shape."""
        extents = x.data.shape[2:]
        if min(extents) < ATTENTION_MIN_EXTENT:
            raise ContractError(
                f"attention block needs every extent >= {ATTENTION_MIN_EXTENT} "
                f"(three halvings), got {tuple(extents)}"
            )
        r0 = self.initial(x, train)
        trunk = self.trunk[1](self.trunk[0](r0, train), train)

        x1 = self.bottom_up[0](maxpool3d(r0), train)
        x2 = self.bottom_up[1](maxpool3d(x1), train)
        x3 = self.bottom_up[2](maxpool3d(x2), train)

        y1 = add(trilinear_upsample(self.top_down[0](x3, train), x2.data.shape[2:]),
                 self.skips[0](x2, train))
        y2 = add(trilinear_upsample(self.top_down[1](y1, train), x1.data.shape[2:]),
                 self.skips[1](x1, train))
        y3 = trilinear_upsample(self.top_down[2](y2, train), r0.data.shape[2:])

        mask = sigmoid(self.head[1](self.head[0](y3, train), train))
        merged = multiply(trunk, add_scalar(mask, 1.0))
        return self.final(merged, train), mask

    def _children(self):
        yield "initial", self.initial
        for i, b in enumerate(self.trunk, 1):
            yield f"trunk{i}", b
        for i, b in enumerate(self.bottom_up, 1):
            yield f"bottom_up{i}", b
        for i, b in enumerate(self.top_down, 1):
            yield f"top_down{i}", b
        for i, b in enumerate(self.skips, 1):
            yield f"skip{i}", b
        for i, b in enumerate(self.head, 1):
            yield f"head{i}", b
        yield "final", self.final

    def params(self):
        out = []
        for name, child in self._children():
            out.extend((f"{name}.{n}", t) for n, t in child.params())
        return out

    def state(self):
        out = []
        for name, child in self._children():
            out.extend((f"{name}.{n}", a) for n, a in child.state())
        return out


def count_parameters_block(block) -> int:
    """Exact count of learnable scalars (running statistics excluded)."""
    return sum(t.size for _, t in block.params())
