"""ViT image encoder with a Position Adapter and per-block Feature Adapters."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

from bussam import ops
from bussam.autodiff import Tensor
from bussam.cnn_encoder import GhpaParams, ghpa
from bussam.errors import ConfigError
from bussam.params import Initializer


@dataclass
class FeatureAdapterParams:
    down_weight: Tensor
    down_bias: Tensor
    up_weight: Tensor
    up_bias: Tensor

    @classmethod
    def create(cls, init: Initializer, prefix: str, dim: int, ratio: int) -> "FeatureAdapterParams":
        hidden = dim // ratio
        if hidden < 1:
            raise ConfigError(f"adapter ratio {ratio} leaves no bottleneck for dim {dim}")
        return cls(
            down_weight=init.fan_in(f"{prefix}.down.weight", (hidden, dim)),
            down_bias=init.zeros(f"{prefix}.down.bias", (hidden,)),
            up_weight=init.zeros(f"{prefix}.up.weight", (dim, hidden)),
            up_bias=init.zeros(f"{prefix}.up.bias", (dim,)),
        )


def feature_adapter(x: Tensor, p: FeatureAdapterParams) -> Tensor:
    """Bottleneck increment ``up(GELU(down(x)))``; the caller adds it."""
    return ops.linear(ops.gelu(ops.linear(x, p.down_weight, p.down_bias)), p.up_weight, p.up_bias)


@dataclass
class VitBlockParams:
    norm1_scale: Tensor
    norm1_shift: Tensor
    q_weight: Tensor
    q_bias: Tensor
    k_weight: Tensor
    k_bias: Tensor
    v_weight: Tensor
    v_bias: Tensor
    o_weight: Tensor
    o_bias: Tensor
    norm2_scale: Tensor
    norm2_shift: Tensor
    fc1_weight: Tensor
    fc1_bias: Tensor
    fc2_weight: Tensor
    fc2_bias: Tensor
    adapter: FeatureAdapterParams | None = None

    @classmethod
    def create(cls, init: Initializer, prefix: str, dim: int) -> "VitBlockParams":
        kw = {}
        for n in ("q", "k", "v", "o"):
            kw[f"{n}_weight"] = init.normal(f"{prefix}.attn.{n}.weight", (dim, dim), 0.02)
            kw[f"{n}_bias"] = init.zeros(f"{prefix}.attn.{n}.bias", (dim,))
        return cls(
            norm1_scale=init.ones(f"{prefix}.norm1.scale", (dim,)),
            norm1_shift=init.zeros(f"{prefix}.norm1.shift", (dim,)),
            norm2_scale=init.ones(f"{prefix}.norm2.scale", (dim,)),
            norm2_shift=init.zeros(f"{prefix}.norm2.shift", (dim,)),
            fc1_weight=init.normal(f"{prefix}.mlp.fc1.weight", (4 * dim, dim), 0.02),
            fc1_bias=init.zeros(f"{prefix}.mlp.fc1.bias", (4 * dim,)),
            fc2_weight=init.normal(f"{prefix}.mlp.fc2.weight", (dim, 4 * dim), 0.02),
            fc2_bias=init.zeros(f"{prefix}.mlp.fc2.bias", (dim,)),
            **kw,
        )


def mhsa(x: Tensor, p: VitBlockParams, heads: int, return_weights: bool = False):
    n, t, c = x.shape
    if c % heads:
        raise ConfigError(f"embed dim {c} not divisible by {heads} heads")
    d = c // heads

    def split_heads(y: Tensor) -> Tensor:
        return ops.transpose(ops.reshape(y, (n, t, heads, d)), (0, 2, 1, 3))

    q = split_heads(ops.linear(x, p.q_weight, p.q_bias))
    k = split_heads(ops.linear(x, p.k_weight, p.k_bias))
    v = split_heads(ops.linear(x, p.v_weight, p.v_bias))
    att = ops.softmax(ops.matmul(q, ops.transpose(k, (0, 1, 3, 2))) * (1.0 / math.sqrt(d)), axis=-1)
    y = ops.reshape(ops.transpose(ops.matmul(att, v), (0, 2, 1, 3)), (n, t, c))
    y = ops.linear(y, p.o_weight, p.o_bias)
    return (y, att) if return_weights else y


def vit_block(x: Tensor, p: VitBlockParams, heads: int, use_adapter: bool = True) -> Tensor:
    """Pre-norm transformer block; the Feature Adapter sits beside the MLP."""
    x = x + mhsa(ops.normalize(x, "layer", p.norm1_scale, p.norm1_shift), p, heads)
    h = ops.normalize(x, "layer", p.norm2_scale, p.norm2_shift)
    mlp = ops.linear(ops.gelu(ops.linear(h, p.fc1_weight, p.fc1_bias)), p.fc2_weight, p.fc2_bias)
    x = x + mlp
    if use_adapter and p.adapter is not None:
        x = x + feature_adapter(h, p.adapter)
    return x


@dataclass
class PositionAdapterParams:
    ghpa: GhpaParams
    norm_scale: Tensor
    norm_shift: Tensor

    @classmethod
    def create(cls, init: Initializer, dim: int, map_size: int = 16, prefix: str = "pos_adapter") -> "PositionAdapterParams":
        # zero GN scale makes the adapter an exact no-op at build time
        return cls(
            ghpa=GhpaParams.create(init, f"{prefix}.ghpa", dim, map_size),
            norm_scale=init.zeros(f"{prefix}.norm.scale", (dim,)),
            norm_shift=init.zeros(f"{prefix}.norm.shift", (dim,)),
        )


def position_adapter(pos: Tensor, p: PositionAdapterParams, num_groups: int = 4, token_grid: int | None = None) -> Tensor:
    """GELU(GN(GHPA(maxpool2(pos)))) on the ``1 x C x G x G`` embedding."""
    g = pos.shape[-1]
    if g % 2 or pos.shape[-2] != g:
        raise ConfigError(f"position embedding grid must be square with even side, got {pos.shape[2:]}")
    if token_grid is not None and g // 2 != token_grid:
        raise ConfigError(f"pooled position grid {g // 2} does not match token grid {token_grid}")
    x = ops.pool(pos, "spatial", "max", 2, 2)
    x = ghpa(x, p.ghpa)
    x = ops.normalize(x, "group", p.norm_scale, p.norm_shift, num_groups=num_groups)
    return ops.gelu(x)


@dataclass
class VitParams:
    patch_weight: Tensor
    patch_bias: Tensor
    pos_embed: Tensor
    blocks: list[VitBlockParams]
    pos_adapter: PositionAdapterParams | None

    @classmethod
    def create(cls, init: Initializer, cfg) -> "VitParams":
        c, p = cfg.embed_dim, cfg.patch
        blocks = []
        for i in range(cfg.vit_blocks):
            blk = VitBlockParams.create(init, f"vit.blocks.{i}", c)
            blk.adapter = FeatureAdapterParams.create(init, f"feat_adapter.{i}", c, cfg.adapter_ratio)
            blocks.append(blk)
        return cls(
            patch_weight=init.fan_in("vit.patch_embed.weight", (c, 1, p, p)),
            patch_bias=init.zeros("vit.patch_embed.bias", (c,)),
            pos_embed=init.normal("pos_embed", (1, c, cfg.pos_grid, cfg.pos_grid), 0.02),
            blocks=blocks,
            pos_adapter=PositionAdapterParams.create(init, c, cfg.ghpa_map_size) if cfg.use_pos_adapter else None,
        )


def patch_embed(image: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Non-overlapping ``p x p`` convolution with stride ``p``."""
    p = weight.shape[-1]
    s = image.shape[-1]
    if s % p or image.shape[-2] % p:
        raise ConfigError(f"image side {image.shape[2:]} not divisible by patch size {p}")
    return ops.conv2d(image, weight, bias, stride=p)


def grid_to_tokens(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    return ops.transpose(ops.reshape(x, (n, c, h * w)), (0, 2, 1))


def tokens_to_grid(x: Tensor, g: int) -> Tensor:
    n, t, c = x.shape
    if t != g * g:
        raise ConfigError(f"{t} tokens do not form a {g}x{g} grid")
    return ops.reshape(ops.transpose(x, (0, 2, 1)), (n, c, g, g))


BlockHook = Callable[[int, Tensor], Tensor]


def encode_vit(
    image: Tensor,
    p: VitParams,
    heads: int,
    pos_groups: int = 4,
    use_adapters: bool = True,
    block_hook: BlockHook | None = None,
) -> Tensor:
    """Run the ViT branch and return an ``N x C x g x g`` feature grid.

    ``block_hook(i, tokens)`` runs after block ``i`` and may return fused
    tokens; the full model uses it to inject the Cross-Branch Adapter.
    """
    x = patch_embed(image, p.patch_weight, p.patch_bias)
    g = x.shape[-1]
    tokens = grid_to_tokens(x)
    pos = ops.pool(p.pos_embed, "spatial", "max", 2, 2)
    if pos.shape[-1] != g:
        raise ConfigError(f"pooled position grid {pos.shape[-1]} does not match token grid {g}")
    tokens = tokens + grid_to_tokens(pos)
    if use_adapters and p.pos_adapter is not None:
        pa = position_adapter(p.pos_embed, p.pos_adapter, pos_groups, token_grid=g)
        tokens = tokens + grid_to_tokens(pa)
    for i, blk in enumerate(p.blocks):
        tokens = vit_block(tokens, blk, heads, use_adapter=use_adapters)
        if block_hook is not None:
            tokens = block_hook(i, tokens)
    return tokens_to_grid(tokens, g)
