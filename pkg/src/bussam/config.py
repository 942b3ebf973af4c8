"""Model and training configuration, plus the ``key = value`` file format."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path

from bussam.errors import ConfigError


@dataclass
class ModelConfig:
    input_size: int = 256
    embed_dim: int = 768
    patch: int = 8
    vit_blocks: int = 12
    heads: int = 12
    adapter_ratio: int = 4
    cba_ratio: int = 4
    cba_alpha: float = 0.5
    cba_every: int = 1
    loss_beta: float = 0.2
    ghpa_map_size: int = 16
    pos_gn_groups: int = 4
    use_cnn: bool = True
    use_pos_adapter: bool = True
    use_cba: bool = True

    @property
    def token_grid(self) -> int:
        return self.input_size // self.patch

    @property
    def cnn_grid(self) -> int:
        return self.input_size // 8

    @property
    def pos_grid(self) -> int:
        return 2 * self.token_grid

    def violations(self) -> list[str]:
        v = []
        if self.input_size < 8 or self.input_size % 8:
            v.append(f"input_size={self.input_size} must be a positive multiple of 8")
        if self.patch < 1 or self.input_size % self.patch:
            v.append(f"input_size={self.input_size} not divisible by patch={self.patch}")
        elif self.use_cnn and self.token_grid != self.cnn_grid:
            v.append(f"token grid {self.token_grid} differs from CNN grid {self.cnn_grid}; use patch=8")
        if self.embed_dim < 4 or self.embed_dim % 4:
            v.append(f"embed_dim={self.embed_dim} must be divisible by 4")
        if self.heads < 1 or self.embed_dim % self.heads:
            v.append(f"embed_dim={self.embed_dim} not divisible by heads={self.heads}")
        if self.embed_dim % self.pos_gn_groups:
            v.append(f"embed_dim={self.embed_dim} not divisible by pos_gn_groups={self.pos_gn_groups}")
        if self.embed_dim < 32:
            v.append(f"embed_dim={self.embed_dim} must be >= 32 for the decoder channel schedule")
        if self.vit_blocks < 1:
            v.append("vit_blocks must be >= 1")
        for name in ("adapter_ratio", "cba_ratio"):
            r = getattr(self, name)
            if r < 1 or self.embed_dim // r < 1:
                v.append(f"{name}={r} leaves no bottleneck width")
        if self.cba_every < 1:
            v.append("cba_every must be >= 1")
        if not (self.cba_alpha >= 0 and self.cba_alpha < float("inf")):
            v.append(f"cba_alpha={self.cba_alpha} must be finite and non-negative")
        if not 0.0 <= self.loss_beta <= 1.0:
            v.append(f"loss_beta={self.loss_beta} outside [0, 1]")
        if self.use_cba and not self.use_cnn:
            v.append("use_cba requires use_cnn")
        return v

    def validate(self) -> "ModelConfig":
        v = self.violations()
        if v:
            raise ConfigError("invalid model config: " + "; ".join(v))
        return self


@dataclass
class TrainConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    lr: float = 5e-4
    weight_decay: float = 0.1
    batch: int = 8
    epochs: int = 100
    warmup_frac: float = 0.05
    warmup_steps: int = -1
    seed: int = 0
    val_fraction: float = 0.1
    augment: bool = True
    spacing_mm: float = 1.0

    @property
    def beta(self) -> float:
        return self.model.loss_beta

    def validate(self) -> "TrainConfig":
        self.model.validate()
        if not self.lr > 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if self.batch < 1:
            raise ConfigError(f"batch must be >= 1, got {self.batch}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if not 0 <= self.val_fraction < 1:
            raise ConfigError(f"val_fraction must be in [0, 1), got {self.val_fraction}")
        return self


def _coerce(raw: str, typ, key: str):
    try:
        if typ in (bool, "bool"):
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if typ in (int, "int"):
            return int(raw)
        if typ in (float, "float"):
            return float(raw)
    except ValueError:
        raise ConfigError(f"bad value {raw!r} for key {key!r}") from None
    return raw


def _field_types(cls) -> dict[str, object]:
    return {f.name: f.type for f in fields(cls) if f.name != "model"}


def config_from_dict(values: dict[str, str]) -> TrainConfig:
    """Build a :class:`TrainConfig` from flat string key/values."""
    mtypes = _field_types(ModelConfig)
    ttypes = _field_types(TrainConfig)
    mkw, tkw = {}, {}
    for key, raw in values.items():
        if key in mtypes:
            mkw[key] = _coerce(raw, mtypes[key], key)
        elif key in ttypes:
            tkw[key] = _coerce(raw, ttypes[key], key)
        else:
            raise ConfigError(f"unknown config key {key!r}")
    return TrainConfig(model=ModelConfig(**mkw), **tkw)


def parse_config_text(text: str) -> TrainConfig:
    values: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        values[key] = raw
    return config_from_dict(values)


def load_config(path: str | Path) -> TrainConfig:
    return parse_config_text(Path(path).read_text())


def config_to_dict(cfg: TrainConfig | ModelConfig) -> dict[str, str]:
    """Flatten to string key/values (the checkpoint header and config format)."""
    out: dict[str, str] = {}
    model = cfg.model if isinstance(cfg, TrainConfig) else cfg
    for f in fields(ModelConfig):
        out[f.name] = _fmt(getattr(model, f.name))
    if isinstance(cfg, TrainConfig):
        for f in fields(TrainConfig):
            if f.name != "model":
                out[f.name] = _fmt(getattr(cfg, f.name))
    return out


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


def dump_config_text(cfg: TrainConfig) -> str:
    return "".join(f"{k} = {v}\n" for k, v in config_to_dict(cfg).items())


def replace_model(cfg: TrainConfig, **changes) -> TrainConfig:
    return dataclasses.replace(cfg, model=dataclasses.replace(cfg.model, **changes))
