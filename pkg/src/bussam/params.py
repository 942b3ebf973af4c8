"""Named parameter storage and deterministic initialisation."""
from __future__ import annotations

import zlib
from collections import OrderedDict
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from bussam.autodiff import GradTape, Tensor
from bussam.errors import ConfigError

# Prefixes updated during fine-tuning; everything else is frozen backbone.
TRAINABLE_PREFIXES = ("cnn.", "pos_adapter.", "feat_adapter.", "cba.", "decoder.")


def is_trainable_name(name: str) -> bool:
    return name.startswith(TRAINABLE_PREFIXES)


@dataclass
class Param:
    tensor: Tensor
    trainable: bool


class ParameterStore:
    """Ordered mapping ``name -> (tensor, trainable flag)``."""

    def __init__(self) -> None:
        self._params: OrderedDict[str, Param] = OrderedDict()

    def add(self, name: str, tensor: Tensor, trainable: bool | None = None) -> Tensor:
        if name in self._params:
            raise ConfigError(f"duplicate parameter name {name!r}")
        if trainable is None:
            trainable = is_trainable_name(name)
        tensor.requires_grad = trainable
        self._params[name] = Param(tensor, trainable)
        return tensor

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name].tensor

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def items(self):
        return ((k, p.tensor) for k, p in self._params.items())

    def is_trainable(self, name: str) -> bool:
        return self._params[name].trainable

    def names(self) -> list[str]:
        return list(self._params)

    def trainable_names(self) -> list[str]:
        return [k for k, p in self._params.items() if p.trainable]

    def frozen_names(self) -> list[str]:
        return [k for k, p in self._params.items() if not p.trainable]

    def count(self, prefix: str = "") -> int:
        return int(sum(p.tensor.data.size for k, p in self._params.items() if k.startswith(prefix)))

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.tensor.grad = None

    def gradients(self, tape: GradTape) -> dict[str, np.ndarray]:
        """Gradients of trainable parameters; unused ones come back as zeros."""
        return {k: tape.grad_for(p.tensor) for k, p in self._params.items() if p.trainable}

    def snapshot(self, names=None) -> dict[str, np.ndarray]:
        names = self.names() if names is None else names
        return {k: self[k].data.copy() for k in names}


class Initializer:
    """Creates parameters; each tensor draws from its own name-seeded stream.

    Seeding per name means two models built from the same seed share every
    tensor they have in common, whichever ablation flags are set.
    """

    def __init__(self, store: ParameterStore, seed: int, dtype=np.float32, materialize: bool = True):
        self.store = store
        self.seed = int(seed)
        self.dtype = np.dtype(dtype)
        self.materialize = materialize

    def _rng(self, name: str) -> np.random.Generator:
        return np.random.default_rng([self.seed, zlib.crc32(name.encode())])

    def _make(self, name: str, shape, fill) -> Tensor:
        if not self.materialize:
            data = np.broadcast_to(np.zeros((), self.dtype), shape)
        else:
            data = np.asarray(fill(), dtype=self.dtype).reshape(shape)
        return self.store.add(name, Tensor(data))

    def normal(self, name: str, shape, std: float) -> Tensor:
        return self._make(name, shape, lambda: self._rng(name).standard_normal(shape) * std)

    def fan_in(self, name: str, shape) -> Tensor:
        """Kaiming-style normal scaled by ``sqrt(2 / fan_in)``."""
        fan = int(np.prod(shape[1:]))
        return self.normal(name, shape, float(np.sqrt(2.0 / fan)))

    def zeros(self, name: str, shape) -> Tensor:
        return self._make(name, shape, lambda: np.zeros(shape))

    def ones(self, name: str, shape) -> Tensor:
        return self._make(name, shape, lambda: np.ones(shape))
