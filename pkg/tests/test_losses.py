import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from bussam.autodiff import Tensor, backward
from bussam.config import ModelConfig, TrainConfig
from bussam.errors import ConfigError, UsageError
from bussam.losses import CLAMP_EPS, bce_loss, dice_loss, total_loss

from conftest import assert_grad_close, numeric_grad


def _pg(seed, shape=(8, 8)):
    rng = np.random.default_rng(seed)
    return rng.uniform(0.01, 0.99, shape), (rng.random(shape) > 0.5).astype(np.float64)


def bce_oracle(p, g, reduction="sum"):
    total = 0.0
    for pv, gv in zip(p.ravel(), g.ravel()):
        pv = min(max(pv, CLAMP_EPS), 1 - CLAMP_EPS)
        total -= gv * math.log(pv) + (1 - gv) * math.log(1 - pv)
    return total / p.size if reduction == "mean" else total


def dice_oracle(p, g):
    tp = fp = fn = 0.0
    for pv, gv in zip(p.ravel(), g.ravel()):
        tp += pv * gv
        fp += pv * (1 - gv)
        fn += (1 - pv) * gv
    return 1 - (2 * tp + 1) / (2 * tp + fn + fp + 1)


class TestBce:
    def test_perfect_prediction(self):
        g = (np.random.default_rng(0).random((16, 16)) > 0.5).astype(np.float64)
        assert bce_loss(Tensor(g), g, "mean").item() < 1e-5

    def test_half_is_ln2(self):
        _, g = _pg(1)
        assert bce_loss(Tensor(np.full((8, 8), 0.5)), g).item() == pytest.approx(math.log(2), abs=1e-12)

    @pytest.mark.parametrize("reduction", ["sum", "mean"])
    def test_loop_oracle(self, reduction):
        p, g = _pg(2)
        assert abs(bce_loss(Tensor(p), g, reduction).item() - bce_oracle(p, g, reduction)) < 1e-9

    def test_errors(self):
        p, g = _pg(3)
        with pytest.raises(UsageError):
            bce_loss(Tensor(p), g[:4])
        with pytest.raises(UsageError):
            bce_loss(Tensor(p), g * 0.5)
        with pytest.raises(UsageError):
            bce_loss(Tensor(p), g, "max")


class TestDice:
    def test_perfect_prediction_exact_zero(self):
        g = (np.random.default_rng(4).random((16, 16)) > 0.5).astype(np.float64)
        assert dice_loss(Tensor(g), g).item() == 0.0

    def test_zero_prediction_five_positives(self):
        g = np.zeros((4, 4))
        g.ravel()[:5] = 1
        assert dice_loss(Tensor(np.zeros((4, 4))), g).item() == pytest.approx(1 - 1 / 6, abs=1e-15)

    @given(st.integers(0, 2**16))
    def test_substitution_oracle_and_range(self, seed):
        p, g = _pg(seed)
        d = dice_loss(Tensor(p), g).item()
        assert abs(d - dice_oracle(p, g)) < 1e-9
        assert 0.0 <= d < 1.0

    def test_batch_is_mean_of_per_image(self):
        p, g = _pg(5, (3, 1, 6, 6))
        per = [dice_oracle(p[i], g[i]) for i in range(3)]
        assert dice_loss(Tensor(p), g).item() == pytest.approx(np.mean(per), abs=1e-12)


class TestTotal:
    def test_endpoints_exact(self):
        p, g = _pg(6)
        t = Tensor(p)
        assert total_loss(t, g, 1.0).item() == bce_loss(t, g).item()
        assert total_loss(t, g, 0.0).item() == dice_loss(t, g).item()

    def test_arithmetic(self):
        # 0.2 * 0.5 + 0.8 * 0.25
        assert 0.2 * 0.5 + (1 - 0.2) * 0.25 == pytest.approx(0.3)
        p, g = _pg(7)
        b, d = bce_loss(Tensor(p), g).item(), dice_loss(Tensor(p), g).item()
        assert total_loss(Tensor(p), g).item() == pytest.approx(0.2 * b + 0.8 * d, rel=1e-12)

    def test_default_beta(self):
        assert ModelConfig().loss_beta == 0.2
        assert TrainConfig().beta == 0.2

    @given(st.floats(0, 1), st.floats(0, 1), st.floats(0, 1))
    def test_affine_in_beta(self, b1, b2, lam):
        p, g = _pg(8)
        t = Tensor(p)
        mid = lam * b1 + (1 - lam) * b2
        lhs = total_loss(t, g, mid).item()
        rhs = lam * total_loss(t, g, b1).item() + (1 - lam) * total_loss(t, g, b2).item()
        assert lhs == pytest.approx(rhs, abs=1e-12)

    @pytest.mark.parametrize("beta", [-0.1, 1.5, float("nan")])
    def test_beta_range(self, beta):
        p, g = _pg(9)
        with pytest.raises(ConfigError):
            total_loss(Tensor(p), g, beta)

    def test_gradient_wrt_p(self):
        p, g = _pg(10, (2, 1, 5, 5))
        t = Tensor(p.copy(), requires_grad=True)
        backward(total_loss(t, g, 0.2))
        (n,) = numeric_grad(lambda: total_loss(Tensor(p), g, 0.2).item(), [p])
        assert_grad_close(t.grad, n)
