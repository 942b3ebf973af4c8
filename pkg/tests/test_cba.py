import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from bussam import ops
from bussam.autodiff import Tensor, backward
from bussam.cba import CbaParams, cba, spatial_attention
from bussam.errors import ConfigError
from bussam.params import Initializer, ParameterStore

from conftest import assert_grad_close, numeric_grad


def _params(dim=4, ratio=2, alpha=0.5, seed=0, randomize=True):
    p = CbaParams.create(Initializer(ParameterStore(), seed, np.float64), "cba.0", dim, ratio, alpha)
    if randomize:
        rng = np.random.default_rng(seed)
        for name, t in vars(p).items():
            if isinstance(t, Tensor):
                t.data = rng.standard_normal(t.shape) * 0.5
    return p


def _gelu(v):
    return 0.5 * v * (1 + math.tanh(math.sqrt(2 / math.pi) * (v + 0.044715 * v**3)))


def cba_hand_trace(fv, fc, p: CbaParams):
    """Term by term: sum, channel max/mean, 7x7 conv, sigmoid, gate, bottleneck, scale."""
    n, c, h, w = fv.shape
    s = fv + fc
    k = p.conv_weight.data[0]
    out = np.zeros_like(s)
    for b in range(n):
        hmax = [[max(s[b, ci, i, j] for ci in range(c)) for j in range(w)] for i in range(h)]
        hmean = [[sum(s[b, ci, i, j] for ci in range(c)) / c for j in range(w)] for i in range(h)]
        for i in range(h):
            for j in range(w):
                z = float(p.conv_bias.data[0])
                for u in range(7):
                    for v in range(7):
                        y, x = i + u - 3, j + v - 3
                        if 0 <= y < h and 0 <= x < w:
                            z += k[0, u, v] * hmax[y][x] + k[1, u, v] * hmean[y][x]
                wgt = 1 / (1 + math.exp(-z))
                ht = [wgt * s[b, ci, i, j] for ci in range(c)]
                hid = [
                    _gelu(sum(p.down_weight.data[m, ci] * ht[ci] for ci in range(c)) + p.down_bias.data[m])
                    for m in range(p.down_weight.shape[0])
                ]
                for co in range(c):
                    val = sum(p.up_weight.data[co, m] * hid[m] for m in range(len(hid))) + p.up_bias.data[co]
                    out[b, co, i, j] = p.alpha * val
    return out


def test_alpha_zero_is_zero():
    p = _params(alpha=0.0)
    rng = np.random.default_rng(1)
    for _ in range(20):
        y = cba(Tensor(rng.standard_normal((2, 4, 3, 3))), Tensor(rng.standard_normal((2, 4, 3, 3))), p)
        assert np.all(y.data == 0.0)


def test_cancellation_gives_zero():
    p = _params()
    for name in ("conv_bias", "down_bias", "up_bias"):
        getattr(p, name).data[:] = 0
    x = np.random.default_rng(2).standard_normal((1, 4, 3, 3))
    assert np.all(cba(Tensor(x), Tensor(-x), p).data == 0.0)


@pytest.mark.parametrize("seed", range(3))
def test_hand_trace_c2(seed):
    p = _params(dim=2, ratio=1, alpha=0.7, seed=seed)
    rng = np.random.default_rng(seed + 10)
    fv, fc = rng.standard_normal((1, 2, 2, 2)), rng.standard_normal((1, 2, 2, 2))
    np.testing.assert_allclose(cba(Tensor(fv), Tensor(fc), p).data, cba_hand_trace(fv, fc, p), atol=1e-6, rtol=0)


def test_hand_trace_larger():
    p = _params(dim=8, ratio=4, seed=3)
    rng = np.random.default_rng(4)
    fv, fc = rng.standard_normal((2, 8, 5, 4)), rng.standard_normal((2, 8, 5, 4))
    np.testing.assert_allclose(cba(Tensor(fv), Tensor(fc), p).data, cba_hand_trace(fv, fc, p), atol=1e-9)


@given(st.integers(0, 2**16), st.floats(0.0, 4.0))
def test_symmetric_and_shape(seed, alpha):
    p = _params(alpha=alpha, seed=seed % 7)
    rng = np.random.default_rng(seed)
    a, b = rng.standard_normal((1, 4, 3, 5)), rng.standard_normal((1, 4, 3, 5))
    ab = cba(Tensor(a), Tensor(b), p).data
    ba = cba(Tensor(b), Tensor(a), p).data
    assert ab.shape == a.shape
    assert ab.tobytes() == ba.tobytes()


@given(st.integers(0, 2**16))
def test_attention_map_open_interval(seed):
    p = _params(seed=seed % 5)
    s = np.random.default_rng(seed).standard_normal((1, 4, 4, 4)) * 50
    w = spatial_attention(Tensor(s), p).data
    assert w.shape == (1, 1, 4, 4)
    assert np.all((w > 0) & (w < 1))


def test_gradients_params_and_inputs():
    p = _params(seed=5)
    rng = np.random.default_rng(5)
    fv, fc = rng.standard_normal((2, 4, 3, 3)), rng.standard_normal((2, 4, 3, 3))
    r = rng.standard_normal(fv.shape)
    tensors = [t for t in vars(p).values() if isinstance(t, Tensor)]
    for t in tensors:
        t.requires_grad = True
    tv, tc = Tensor(fv.copy(), requires_grad=True), Tensor(fc.copy(), requires_grad=True)
    backward(ops.sum(cba(tv, tc, p) * r))
    f = lambda: float((cba(Tensor(fv), Tensor(fc), p).data * r).sum())  # noqa: E731
    for t in tensors:
        (n,) = numeric_grad(f, [t.data])
        assert_grad_close(t.grad, n)
    nv, nc = numeric_grad(f, [fv, fc])
    assert_grad_close(tv.grad, nv)
    assert_grad_close(tc.grad, nc)


def test_errors():
    p = _params()
    with pytest.raises(ConfigError):
        cba(Tensor(np.zeros((1, 4, 3, 3))), Tensor(np.zeros((1, 4, 3, 2))), p)
    with pytest.raises(ConfigError):
        CbaParams.create(Initializer(ParameterStore(), 0), "c", 4, 8)


def test_zero_init_up_projection():
    p = _params(randomize=False)
    assert np.all(p.up_weight.data == 0) and p.alpha == 0.5
    x = np.random.default_rng(6).standard_normal((1, 4, 3, 3))
    assert np.all(cba(Tensor(x), Tensor(x), p).data == 0.0)
