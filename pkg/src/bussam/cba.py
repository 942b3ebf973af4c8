"""Cross-Branch Adapter: pooled spatial attention over the summed branches."""
from __future__ import annotations

from dataclasses import dataclass

from bussam import ops
from bussam.autodiff import Tensor
from bussam.errors import ConfigError
from bussam.params import Initializer


@dataclass
class CbaParams:
    conv_weight: Tensor  # 1 x 2 x 7 x 7
    conv_bias: Tensor
    down_weight: Tensor
    down_bias: Tensor
    up_weight: Tensor
    up_bias: Tensor
    alpha: float = 0.5

    @classmethod
    def create(cls, init: Initializer, prefix: str, dim: int, ratio: int = 4, alpha: float = 0.5) -> "CbaParams":
        hidden = dim // ratio
        if ratio < 1 or hidden < 1:
            raise ConfigError(f"cba ratio {ratio} leaves no bottleneck for dim {dim}")
        return cls(
            conv_weight=init.fan_in(f"{prefix}.conv.weight", (1, 2, 7, 7)),
            conv_bias=init.zeros(f"{prefix}.conv.bias", (1,)),
            down_weight=init.fan_in(f"{prefix}.down.weight", (hidden, dim)),
            down_bias=init.zeros(f"{prefix}.down.bias", (hidden,)),
            up_weight=init.zeros(f"{prefix}.up.weight", (dim, hidden)),
            up_bias=init.zeros(f"{prefix}.up.bias", (dim,)),
            alpha=alpha,
        )


def spatial_attention(s: Tensor, p: CbaParams) -> Tensor:
    """sigmoid(conv7x7([channel-max(s) || channel-mean(s)])), shape N x 1 x H x W."""
    pooled = ops.concat([ops.pool(s, "channel", "max"), ops.pool(s, "channel", "mean")], axis=1)
    return ops.sigmoid(ops.conv2d(pooled, p.conv_weight, p.conv_bias, padding=3))


def cba(f_v: Tensor, f_c: Tensor, p: CbaParams) -> Tensor:
    """Fuse ViT features ``f_v`` with CNN features ``f_c`` (both N x C x H x W)."""
    if f_v.shape != f_c.shape:
        raise ConfigError(f"cba inputs differ in shape: {f_v.shape} vs {f_c.shape}")
    if f_v.ndim != 4:
        raise ConfigError(f"cba expects NCHW inputs, got {f_v.shape}")
    s = f_v + f_c
    h = s * spatial_attention(s, p)
    # channel bottleneck applied per spatial position
    h = ops.transpose(h, (0, 2, 3, 1))
    h = ops.linear(ops.gelu(ops.linear(h, p.down_weight, p.down_bias)), p.up_weight, p.up_bias)
    return ops.transpose(h, (0, 3, 1, 2)) * p.alpha
