"""Lightweight CNN branch: Conv modules, max-pool downsampling and GHPA.

The branch maps an ``N x 1 x S x S`` image onto two ``N x C x S/8 x S/8``
feature maps: ``f1`` after the second GHPA module and ``f2 = conv(f1)``.
"""
from __future__ import annotations

from dataclasses import dataclass

from bussam import ops
from bussam.autodiff import Tensor
from bussam.errors import ConfigError
from bussam.params import Initializer

GHPA_GROUPS = 4


@dataclass
class ConvModuleParams:
    weight: Tensor
    bias: Tensor
    norm_scale: Tensor
    norm_shift: Tensor

    @classmethod
    def create(cls, init: Initializer, prefix: str, c_in: int, c_out: int) -> "ConvModuleParams":
        return cls(
            weight=init.fan_in(f"{prefix}.conv.weight", (c_out, c_in, 3, 3)),
            bias=init.zeros(f"{prefix}.conv.bias", (c_out,)),
            norm_scale=init.ones(f"{prefix}.norm.scale", (c_out,)),
            norm_shift=init.zeros(f"{prefix}.norm.shift", (c_out,)),
        )


def conv_module(x: Tensor, p: ConvModuleParams) -> Tensor:
    """GELU(LN(conv3x3(x))); spatial size is preserved."""
    if x.ndim != 4:
        raise ConfigError(f"conv_module expects NCHW input, got {x.shape}")
    y = ops.conv2d(x, p.weight, p.bias, stride=1, padding=1)
    y = ops.normalize(y, "layer", p.norm_scale, p.norm_shift)
    return ops.gelu(y)


@dataclass
class GhpaParams:
    norm_scale: Tensor
    norm_shift: Tensor
    map_hw: Tensor  # 1 x C/4 x m x m
    map_ch: Tensor  # 1 x 1 x C/4 x m
    map_cw: Tensor  # 1 x 1 x C/4 x m
    dw_hw_weight: Tensor
    dw_hw_bias: Tensor
    dw_ch_weight: Tensor
    dw_ch_bias: Tensor
    dw_cw_weight: Tensor
    dw_cw_bias: Tensor
    dw_x_weight: Tensor
    dw_x_bias: Tensor

    @classmethod
    def create(cls, init: Initializer, prefix: str, channels: int, map_size: int = 16) -> "GhpaParams":
        if channels % GHPA_GROUPS:
            raise ConfigError(f"GHPA needs channels divisible by {GHPA_GROUPS}, got {channels}")
        c4 = channels // GHPA_GROUPS
        return cls(
            norm_scale=init.ones(f"{prefix}.norm.scale", (channels,)),
            norm_shift=init.zeros(f"{prefix}.norm.shift", (channels,)),
            map_hw=init.normal(f"{prefix}.map_hw", (1, c4, map_size, map_size), 0.02),
            map_ch=init.normal(f"{prefix}.map_ch", (1, 1, c4, map_size), 0.02),
            map_cw=init.normal(f"{prefix}.map_cw", (1, 1, c4, map_size), 0.02),
            dw_hw_weight=init.fan_in(f"{prefix}.dw_hw.weight", (c4, 1, 3, 3)),
            dw_hw_bias=init.zeros(f"{prefix}.dw_hw.bias", (c4,)),
            dw_ch_weight=init.fan_in(f"{prefix}.dw_ch.weight", (1, 1, 3, 3)),
            dw_ch_bias=init.zeros(f"{prefix}.dw_ch.bias", (1,)),
            dw_cw_weight=init.fan_in(f"{prefix}.dw_cw.weight", (1, 1, 3, 3)),
            dw_cw_bias=init.zeros(f"{prefix}.dw_cw.bias", (1,)),
            dw_x_weight=init.fan_in(f"{prefix}.dw_x.weight", (c4, 1, 3, 3)),
            dw_x_bias=init.zeros(f"{prefix}.dw_x.bias", (c4,)),
        )


def ghpa(x: Tensor, p: GhpaParams) -> Tensor:
    """Group multi-axis Hadamard product attention with a residual path.

    The normalised input is split into four channel groups. The first three
    are gated by sigmoid(DWConv(resized parameter map)) along the (H, W),
    (C/4, H) and (C/4, W) planes; the fourth goes through a DWConv only.
    """
    if x.ndim != 4:
        raise ConfigError(f"ghpa expects NCHW input, got {x.shape}")
    _, c, h, w = x.shape
    if c % GHPA_GROUPS:
        raise ConfigError(f"GHPA needs channels divisible by {GHPA_GROUPS}, got {c}")
    c4 = c // GHPA_GROUPS
    if p.map_hw.shape[1] != c4 or p.map_ch.shape[2] != c4:
        raise ConfigError(f"GHPA parameters built for {4 * p.map_hw.shape[1]} channels, input has {c}")

    xn = ops.normalize(x, "layer", p.norm_scale, p.norm_shift)
    g1, g2, g3, g4 = ops.split(xn, GHPA_GROUPS, axis=1)

    a_hw = ops.conv2d(ops.bilinear_resize(p.map_hw, h, w), p.dw_hw_weight, p.dw_hw_bias, padding=1, groups=c4)
    a_ch = ops.conv2d(ops.bilinear_resize(p.map_ch, c4, h), p.dw_ch_weight, p.dw_ch_bias, padding=1)
    a_cw = ops.conv2d(ops.bilinear_resize(p.map_cw, c4, w), p.dw_cw_weight, p.dw_cw_bias, padding=1)
    a_hw = ops.sigmoid(a_hw)
    a_ch = ops.reshape(ops.sigmoid(a_ch), (1, c4, h, 1))
    a_cw = ops.reshape(ops.sigmoid(a_cw), (1, c4, 1, w))

    g4 = ops.conv2d(g4, p.dw_x_weight, p.dw_x_bias, padding=1, groups=c4)
    y = ops.concat([g1 * a_hw, g2 * a_ch, g3 * a_cw, g4], axis=1)
    return x + y


@dataclass
class CnnEncoderParams:
    theta1: ConvModuleParams
    theta2: ConvModuleParams
    phi1: GhpaParams
    phi2: GhpaParams
    theta3: ConvModuleParams

    @classmethod
    def create(cls, init: Initializer, embed_dim: int, map_size: int = 16, prefix: str = "cnn") -> "CnnEncoderParams":
        c = embed_dim
        return cls(
            theta1=ConvModuleParams.create(init, f"{prefix}.theta1", 1, c // 4),
            theta2=ConvModuleParams.create(init, f"{prefix}.theta2", c // 4, c),
            phi1=GhpaParams.create(init, f"{prefix}.phi1", c, map_size),
            phi2=GhpaParams.create(init, f"{prefix}.phi2", c, map_size),
            theta3=ConvModuleParams.create(init, f"{prefix}.theta3", c, c),
        )


@dataclass
class CnnEncoderOutput:
    f1: Tensor
    f2: Tensor


def encode_cnn(image: Tensor, p: CnnEncoderParams) -> CnnEncoderOutput:
    if image.ndim != 4 or image.shape[1] != 1:
        raise ConfigError(f"encode_cnn expects N x 1 x S x S input, got {image.shape}")
    s = image.shape[2]
    if s != image.shape[3] or s % 8:
        raise ConfigError(f"input side must be square and divisible by 8, got {image.shape[2:]}")

    x = ops.pool(conv_module(image, p.theta1), "spatial", "max", 2, 2)
    x = ops.pool(conv_module(x, p.theta2), "spatial", "max", 2, 2)
    x = ops.pool(ghpa(x, p.phi1), "spatial", "max", 2, 2)
    f1 = ghpa(x, p.phi2)
    f2 = conv_module(f1, p.theta3)
    return CnnEncoderOutput(f1=f1, f2=f2)
