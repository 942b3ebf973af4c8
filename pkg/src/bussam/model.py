"""Full network: CNN branch, adapted ViT branch, CBA fusion and mask decoder."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from bussam import ops
from bussam.autodiff import Tensor
from bussam.cba import CbaParams, cba
from bussam.cnn_encoder import CnnEncoderParams, ConvModuleParams, conv_module, encode_cnn
from bussam.config import ModelConfig
from bussam.errors import UsageError
from bussam.params import Initializer, ParameterStore
from bussam.vit import VitParams, encode_vit, grid_to_tokens, tokens_to_grid


@dataclass
class DecoderParams:
    stages: list[ConvModuleParams]
    head_weight: Tensor
    head_bias: Tensor

    @classmethod
    def create(cls, init: Initializer, dim: int, prefix: str = "decoder") -> "DecoderParams":
        widths = [dim, dim // 8, dim // 16, dim // 32]
        stages = [
            ConvModuleParams.create(init, f"{prefix}.stage{i}", widths[i], widths[i + 1])
            for i in range(3)
        ]
        return cls(
            stages=stages,
            head_weight=init.fan_in(f"{prefix}.head.weight", (1, widths[-1], 1, 1)),
            head_bias=init.zeros(f"{prefix}.head.bias", (1,)),
        )


@dataclass
class SegmentationOutput:
    prob_map: Tensor


def decode_mask(e: Tensor, p: DecoderParams) -> SegmentationOutput:
    """Three (bilinear x2 -> Conv module) stages, then 1x1 conv and sigmoid."""
    x = e
    for stage in p.stages:
        x = ops.bilinear_resize(x, 2 * x.shape[-2], 2 * x.shape[-1])
        x = conv_module(x, stage)
    x = ops.conv2d(x, p.head_weight, p.head_bias)
    return SegmentationOutput(prob_map=ops.sigmoid(x))


@dataclass
class BussamModel:
    config: ModelConfig
    store: ParameterStore
    vit: VitParams
    decoder: DecoderParams
    cnn: CnnEncoderParams | None = None
    cbas: list[CbaParams] = field(default_factory=list)

    def __call__(self, image, use_adapters: bool = True) -> SegmentationOutput:
        return forward(self, image, use_adapters=use_adapters)


def build_model(config: ModelConfig, seed: int = 0, dtype=np.float32, materialize: bool = True):
    """Instantiate parameters deterministically from ``seed``.

    Returns ``(model, store)``. With ``materialize=False`` the store holds
    zero-cost placeholders of the right shapes (for parameter counting).
    """
    config.validate()
    store = ParameterStore()
    init = Initializer(store, seed, dtype, materialize)
    c = config.embed_dim
    cnn = CnnEncoderParams.create(init, c, config.ghpa_map_size) if config.use_cnn else None
    vit = VitParams.create(init, config)
    cbas = []
    if config.use_cba:
        n_points = config.vit_blocks // config.cba_every
        cbas = [CbaParams.create(init, f"cba.{k}", c, config.cba_ratio, config.cba_alpha) for k in range(n_points)]
    decoder = DecoderParams.create(init, c)
    model = BussamModel(config=config, store=store, vit=vit, decoder=decoder, cnn=cnn, cbas=cbas)
    return model, store


def trainable_parameters(store: ParameterStore) -> set[str]:
    return set(store.trainable_names())


def forward(model: BussamModel, image, use_adapters: bool = True) -> SegmentationOutput:
    """Probability map ``N x 1 x S x S`` for an ``N x 1 x S x S`` image batch.

    ``use_adapters=False`` evaluates the adapter-free function: no Position
    Adapter, no Feature Adapters, and summation-only branch fusion.
    """
    cfg = model.config
    if not isinstance(image, Tensor):
        image = Tensor(np.asarray(image, dtype=model.vit.patch_weight.dtype))
    s = cfg.input_size
    if image.ndim != 4 or image.shape[1:] != (1, s, s):
        raise UsageError(f"expected image batch N x 1 x {s} x {s}, got {image.shape}")

    feats = encode_cnn(image, model.cnn) if model.cnn is not None else None
    g = cfg.token_grid
    hook = None
    if feats is not None and model.cbas and use_adapters:
        def hook(i: int, tokens: Tensor) -> Tensor:
            if (i + 1) % cfg.cba_every:
                return tokens
            k = (i + 1) // cfg.cba_every - 1
            fused = cba(tokens_to_grid(tokens, g), feats.f1, model.cbas[k])
            return tokens + grid_to_tokens(fused)

    e = encode_vit(image, model.vit, cfg.heads, cfg.pos_gn_groups, use_adapters=use_adapters, block_hook=hook)
    if feats is not None:
        e = e + feats.f2
    return decode_mask(e, model.decoder)
