"""Network assembly: single-branch (RGB, flow) and twin models.

A branch is conv30 -> ReLU -> pool -> (block?) -> conv60 -> ReLU -> pool ->
(block?) -> conv80 -> ReLU -> pool -> (block?) -> flatten -> FC-500 -> ReLU.
The twin model fuses two branches with a bilinear layer of size n_classes;
single-branch models use a plain linear head. A softmax turns the fused
scores into class-membership probabilities.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from .tensor import ContractError, ShapeError, Tensor
from .layers import Bilinear, Conv3d, Linear, flatten, maxpool3d, relu, softmax
from .blocks import ATTENTION_MIN_EXTENT, AttentionBlock, ResidualBlock

__all__ = ["ModelConfig", "Network", "ConfigError", "build", "count_parameters", "branch_stage_extents"]

MODEL_KINDS = ("rgb", "flow", "twin")
BLOCK_MODES = ("none", "residual", "attention")
RGB_CHANNELS = 3
FLOW_CHANNELS = 2


class ConfigError(ValueError):
    """Invalid model or run configuration."""


@dataclass
class ModelConfig:
    kind: str = "twin"
    frames: int = 16
    height: int = 32
    width: int = 32
    filters: Tuple[int, int, int] = (30, 60, 80)
    kernel: int = 3
    fc_width: int = 500
    n_classes: int = 21
    block_mode: str = "none"
    n_blocks: int = 0
    batch_size: int = 5

    def validate(self) -> None:
        if self.kind not in MODEL_KINDS:
            raise ConfigError(f"model kind must be one of {MODEL_KINDS}, got {self.kind!r}")
        if self.block_mode not in BLOCK_MODES:
            raise ConfigError(f"block mode must be one of {BLOCK_MODES}, got {self.block_mode!r}")
        if len(self.filters) != 3:
            raise ConfigError("filter schedule must list three convolution widths")
        if not 0 <= self.n_blocks <= len(self.filters):
            raise ConfigError(f"n_blocks must be within 0..3, got {self.n_blocks}")
        if self.block_mode != "none" and self.n_blocks == 0:
            raise ConfigError("block_mode set but n_blocks is 0")
        if self.block_mode == "none" and self.n_blocks != 0:
            raise ConfigError("n_blocks > 0 requires a block mode")
        if self.n_classes < 2:
            raise ConfigError(f"n_classes must be at least 2, got {self.n_classes}")
        if min(self.frames, self.height, self.width) < 1:
            raise ConfigError("input geometry extents must be positive")
        extents = branch_stage_extents(self)
        if min(extents[-1]) < 1:
            raise ConfigError(
                f"input {self.frames}x{self.height}x{self.width} collapses to zero "
                f"under three poolings: {extents}"
            )


def branch_stage_extents(config: ModelConfig) -> List[Tuple[int, int, int]]:
    """(T,H,W) after each of the three pooling stages."""
    t, h, w = config.frames, config.height, config.width
    out = []
    for _ in range(3):
        t, h, w = t // 2, h // 2, w // 2
        out.append((t, h, w))
    return out


def check_block_geometry(config: ModelConfig) -> None:
    """Fail fast when an attention placement cannot run a forward pass."""
    if config.block_mode != "attention":
        return
    extents = branch_stage_extents(config)
    for i in range(config.n_blocks):
        if min(extents[i]) < ATTENTION_MIN_EXTENT:
            raise ConfigError(
                f"attention block {i + 1} would see extents {extents[i]}; every extent "
                f"must be >= {ATTENTION_MIN_EXTENT} for its three pooling steps"
            )


class Branch:
    """One convolutional stream ending in FC-500 + ReLU features."""

    def __init__(self, name: str, in_channels: int, config: ModelConfig, rng, dtype=np.float32):
        self.name = name
        self.in_channels = in_channels
        self.convs = []
        self.blocks: List[Optional[object]] = []
        prev = in_channels
        for width in config.filters:
            self.convs.append(Conv3d(prev, width, config.kernel, rng, padding="same", dtype=dtype))
            if config.block_mode == "residual" and len(self.blocks) < config.n_blocks:
                self.blocks.append(ResidualBlock(width, rng, dtype))
            elif config.block_mode == "attention" and len(self.blocks) < config.n_blocks:
                self.blocks.append(AttentionBlock(width, rng, dtype))
            else:
                self.blocks.append(None)
            prev = width
        t, h, w = branch_stage_extents(config)[-1]
        self.flat_dim = config.filters[-1] * t * h * w
        self.fc = Linear(self.flat_dim, config.fc_width, rng, dtype)

    def __call__(self, x: Tensor, train: bool):
        masks = []
        for i, conv in enumerate(self.convs):
            x = maxpool3d(relu(conv(x)))
            block = self.blocks[i]
            if isinstance(block, AttentionBlock):
                x, mask = block(x, train)
                masks.append((f"{self.name}.block{i + 1}", mask))
            elif block is not None:
                x = block(x, train)
        return relu(self.fc(flatten(x))), masks

    def components(self):
        for i, conv in enumerate(self.convs, start=1):
            yield f"conv{i}", conv
            block = self.blocks[i - 1]
            if block is not None:
                yield f"block{i}", block
        yield "fc", self.fc


class Network:
    """Assembled model with stable, deterministic parameter paths."""

    def __init__(self, config: ModelConfig, rng, dtype=np.float32):
        config.validate()
        self.config = config
        self.dtype = dtype
        self.branches: Dict[str, Branch] = {}
        if config.kind in ("rgb", "twin"):
            self.branches["rgb"] = Branch("rgb", RGB_CHANNELS, config, rng, dtype)
        if config.kind in ("flow", "twin"):
            self.branches["flow"] = Branch("flow", FLOW_CHANNELS, config, rng, dtype)
        if config.kind == "twin":
            self.fusion = Bilinear(config.fc_width, config.fc_width, config.n_classes, rng, dtype)
            self.head = None
        else:
            self.fusion = None
            self.head = Linear(config.fc_width, config.n_classes, rng, dtype)

    # -- parameter/state enumeration ---------------------------------------
    def _components(self):
        for bname in ("rgb", "flow"):
            if bname in self.branches:
                for cname, comp in self.branches[bname].components():
                    yield f"{bname}.{cname}", comp
        if self.fusion is not None:
            yield "fusion", self.fusion
        if self.head is not None:
            yield "head", self.head

    def named_params(self) -> List[Tuple[str, Tensor]]:
        out = []
        for prefix, comp in self._components():
            out.extend((f"{prefix}.{n}", t) for n, t in comp.params())
        return out

    def named_state(self) -> List[Tuple[str, np.ndarray]]:
        out = []
        for prefix, comp in self._components():
            out.extend((f"{prefix}.{n}", a) for n, a in comp.state())
        return out

    def manifest(self) -> str:
        """Architecture summary: one line per parameter tensor."""
        c = self.config
        lines = [
            "tstcnn-manifest v1",
            f"kind={c.kind} blocks={c.block_mode} n_blocks={c.n_blocks} "
            f"filters={','.join(map(str, c.filters))} kernel={c.kernel} "
            f"fc={c.fc_width} classes={c.n_classes} input={c.frames}x{c.height}x{c.width}",
        ]
        total = 0
        for name, t in self.named_params():
            shape = "x".join(map(str, t.shape)) if t.shape else "scalar"
            lines.append(f"{name} {shape} {t.size}")
            total += t.size
        lines.append(f"total {total}")
        return "\n".join(lines) + "\n"

    # -- forward ------------------------------------------------------------
    def _check_input(self, name: str, x: Optional[Tensor], channels: int):
        c = self.config
        if name in self.branches:
            if x is None:
                raise ContractError(f"{c.kind} model requires a {name} input volume")
            expect = (channels, c.frames, c.height, c.width)
            if x.data.ndim != 5 or x.data.shape[1:] != expect:
                raise ShapeError(
                    f"{name} input must be (B, {', '.join(map(str, expect))}), got {x.data.shape}"
                )
        elif x is not None:
            raise ContractError(f"{c.kind} model takes no {name} input")

    def forward_logits(self, rgb: Optional[Tensor] = None, flow: Optional[Tensor] = None,
                       train: bool = False):
        self._check_input("rgb", rgb, RGB_CHANNELS)
        self._check_input("flow", flow, FLOW_CHANNELS)
        masks = []
        feats = {}
        for name, x in (("rgb", rgb), ("flow", flow)):
            if name in self.branches:
                f, m = self.branches[name](x, train)
                feats[name] = f
                masks.extend(m)
        if self.config.kind == "twin":
            logits = self.fusion(feats["rgb"], feats["flow"])
        else:
            logits = self.head(feats[self.config.kind])
        return logits, masks

    def forward(self, rgb: Optional[Tensor] = None, flow: Optional[Tensor] = None,
                train: bool = False):
        """Class-membership probabilities plus soft masks from each attention block."""
        logits, masks = self.forward_logits(rgb, flow, train)
        return softmax(logits, axis=1), masks


def build(config: ModelConfig, seed: int = 0, dtype=np.float32) -> Network:
    """Construct a network with seeded He-normal weights, zero biases, BN gamma=1."""
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 0x7E1])))
    return Network(config, rng, dtype)


def count_parameters(net: Network, include_fc: bool = True) -> int:
    """Count learnable scalars; include_fc=False drops FC-500, head and fusion."""
    total = 0
    for name, t in net.named_params():
        if not include_fc and (".fc." in name or name.startswith(("fusion.", "head."))):
            continue
        total += t.size
    return total
