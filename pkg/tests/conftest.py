from __future__ import annotations

import dataclasses
from pathlib import Path

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from bussam.autodiff import Tensor
from bussam.config import ModelConfig, TrainConfig, load_config

settings.register_profile(
    "repo", deadline=None, max_examples=30, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("repo")

ROOT = Path(__file__).resolve().parents[1]
TOY_CFG = ROOT / "configs" / "toy.cfg"


def tiny_model_config(**kw) -> ModelConfig:
    """Smallest valid model: 32x32 input, 4x4 token grid, one block."""
    base = dict(input_size=32, embed_dim=32, vit_blocks=1, heads=2)
    base.update(kw)
    return ModelConfig(**base)


def numeric_grad(f, arrays: list[np.ndarray], h: float = 1e-6) -> list[np.ndarray]:
    """Central differences of scalar ``f()`` w.r.t. every entry of ``arrays`` (mutated in place)."""
    out = []
    for a in arrays:
        g = np.zeros_like(a)
        flat, gflat = a.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = f()
            flat[i] = orig - h
            down = f()
            flat[i] = orig
            gflat[i] = (up - down) / (2 * h)
        out.append(g)
    return out


def assert_grad_close(analytic, numeric, rtol=1e-4, floor=1e-6):
    analytic, numeric = np.asarray(analytic), np.asarray(numeric)
    err = np.abs(analytic - numeric) / np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    assert err.max() < rtol, f"max relative error {err.max():.3e}"


def leaf(a, requires_grad=True) -> Tensor:
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=requires_grad)


@pytest.fixture(scope="session")
def toy_train_config() -> TrainConfig:
    return load_config(TOY_CFG)


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory) -> Path:
    """12 synthetic 32x32 samples with a 10/2 split manifest."""
    from bussam.data import read_labels, split_dataset, synth_dataset, write_manifest

    d = tmp_path_factory.mktemp("small_ds")
    synth_dataset(12, 32, seed=5, out_dir=d)
    train, test = split_dataset(read_labels(d), seed=0)
    write_manifest(d, train, test)
    return d


@pytest.fixture
def quick_train_config() -> TrainConfig:
    return TrainConfig(model=tiny_model_config(), epochs=2, batch=4, lr=5e-3, seed=0, val_fraction=0.2)


def with_model(cfg: TrainConfig, **kw) -> TrainConfig:
    return dataclasses.replace(cfg, model=dataclasses.replace(cfg.model, **kw))


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = next((m for k, m in sys.modules.items() if k.endswith("test_acceptance")), None)
    results = getattr(mod, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for n in sorted(results):
            terminalreporter.write_line(results[n])
