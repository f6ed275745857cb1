import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rri_seqnet.ssm import (MambaBlock, MambaWrapper, SsmConfig, discretize, linear_scan_parallel,
                            linear_scan_sequential, selective_scan, selective_scan_parallel,
                            selective_scan_sequential)
from rri_seqnet.tensor import Tensor, grad_check, grad_check_params


def scan_oracle(A_bar, B_bar, C, D, x):
    """Explicit loops over time, channel and state."""
    length, d, n = A_bar.shape
    h = np.zeros((d, n))
    y = np.zeros((length, d))
    for t in range(length):
        for i in range(d):
            for s in range(n):
                h[i, s] = A_bar[t, i, s] * h[i, s] + B_bar[t, i, s] * x[t, i]
            y[t, i] = sum(C[t, s] * h[i, s] for s in range(n)) + D[i] * x[t, i]
    return y


def _instance(rng, length, d=3, n=4):
    delta = np.log1p(np.exp(rng.standard_normal((length, d))))
    A = -np.exp(rng.standard_normal((d, n)))
    A_bar, B_bar = discretize(delta, A, rng.standard_normal((length, n)))
    return A_bar, B_bar, rng.standard_normal((length, n)), rng.standard_normal(d), rng.standard_normal((length, d))


def test_discretize_zoh_and_euler():
    delta = np.array([[0.5]])
    A = np.array([[-2.0]])
    B = np.array([[3.0]])
    A_bar, B_bar = discretize(delta, A, B)
    np.testing.assert_allclose(A_bar, [[[np.exp(-1.0)]]])
    np.testing.assert_allclose(B_bar, [[[1.5]]])


def test_sequential_scan_matches_loop_oracle():
    rng = np.random.default_rng(0)
    args = _instance(rng, 13)
    np.testing.assert_allclose(selective_scan_sequential(*args), scan_oracle(*args), atol=1e-12)


def test_scan_hand_value():
    # h1 = 1, h2 = 0.5*1 + 2 = 2.5; y = h + 0.1*x
    a = np.array([[[0.5]], [[0.5]]])
    b = np.array([[[1.0]], [[1.0]]])
    y = selective_scan_sequential(a, b, np.ones((2, 1)), np.array([0.1]), np.array([[1.0], [2.0]]))
    np.testing.assert_allclose(y[:, 0], [1.1, 2.7])


@pytest.mark.parametrize("length", [1, 2, 63, 64, 65, 200])
def test_parallel_scan_equals_sequential(length):
    rng = np.random.default_rng(length)
    args = _instance(rng, length)
    np.testing.assert_allclose(selective_scan_parallel(*args), selective_scan_sequential(*args), atol=1e-10,
                               rtol=0)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 150), st.integers(1, 70), st.integers(0, 2**32 - 1))
def test_linear_scan_block_size_irrelevant(length, block, seed):
    rng = np.random.default_rng(seed)
    a = rng.uniform(-1, 1, (length, 2))
    b = rng.standard_normal((length, 2))
    h0 = rng.standard_normal(2)
    np.testing.assert_allclose(linear_scan_parallel(a, b, h0, block), linear_scan_sequential(a, b, h0),
                               atol=1e-10, rtol=0)


@pytest.mark.parametrize("parallel", [False, True])
def test_selective_scan_gradients(parallel):
    rng = np.random.default_rng(5)
    n, length, d, s = 2, 7, 3, 2
    x = rng.standard_normal((n, length, d))
    delta = Tensor(np.log1p(np.exp(rng.standard_normal((n, length, d)))), requires_grad=True)
    A = Tensor(-np.exp(rng.standard_normal((d, s))), requires_grad=True)
    B = Tensor(rng.standard_normal((n, length, s)), requires_grad=True)
    C = Tensor(rng.standard_normal((n, length, s)), requires_grad=True)
    D = Tensor(rng.standard_normal(d), requires_grad=True)
    w = Tensor(rng.standard_normal((n, length, d)))
    f = lambda t: (selective_scan(t, delta, A, B, C, D, parallel) * w).sum()
    assert grad_check(f, x) < 1e-6
    assert grad_check_params(lambda: f(Tensor(x)), [delta, A, B, C, D]) < 1e-6


def test_mamba_init():
    cfg = SsmConfig(d_model=8, d_state=5, d_conv=4, expand=2)
    blk = MambaBlock(cfg, np.random.default_rng(0))
    np.testing.assert_allclose(-np.exp(blk.A_log.data), -np.tile(np.arange(1, 6), (16, 1)))
    np.testing.assert_array_equal(blk.D.data, np.ones(16))
    dt = np.log1p(np.exp(blk.dt_proj_b.data))
    assert np.all((dt >= cfg.dt_min - 1e-12) & (dt <= cfg.dt_max + 1e-12))
    assert cfg.rank == 1 and blk.x_proj.shape == (1 + 10, 16)


def test_mamba_block_gradients():
    cfg = SsmConfig(d_model=3, d_state=2, d_conv=3, expand=2)
    rng = np.random.default_rng(1)
    blk = MambaBlock(cfg, rng, parallel_scan=False)
    x = rng.standard_normal((2, 3, 6))
    w = Tensor(rng.standard_normal((2, 3, 6)))
    assert grad_check(lambda t: (blk(t) * w).sum(), x) < 1e-6
    assert grad_check_params(lambda: (blk(Tensor(x)) * w).sum(), blk.parameters()) < 1e-6


def test_wrapper_gradients_and_shape():
    cfg = SsmConfig(d_model=4, d_state=2, d_conv=4, expand=2)
    rng = np.random.default_rng(2)
    wrap = MambaWrapper(cfg, ffn_expand=2, dropout=0.0, rng=rng)
    x = rng.standard_normal((2, 4, 5))
    assert wrap(Tensor(x)).shape == x.shape
    w = Tensor(rng.standard_normal(x.shape))
    assert grad_check(lambda t: (wrap(t) * w).sum(), x) < 1e-6


@pytest.mark.parametrize("parallel", [False, True])
def test_mamba_block_is_causal(parallel):
    cfg = SsmConfig(d_model=4, d_state=3, d_conv=4, expand=2)
    rng = np.random.default_rng(7)
    blk = MambaBlock(cfg, rng, parallel_scan=parallel)
    wrap = MambaWrapper(cfg, ffn_expand=2, dropout=0.0, rng=rng, parallel_scan=parallel).eval()
    for _ in range(50):
        x = rng.standard_normal((1, 4, 30))
        t = int(rng.integers(0, 30))
        x2 = x.copy()
        x2[0, :, t] += rng.standard_normal(4)
        for m in (blk, wrap):
            dy = m(Tensor(x2)).data - m(Tensor(x)).data
            assert np.all(dy[..., :t] == 0.0)
            assert np.any(dy[..., t:] != 0.0)


def test_config_validation():
    with pytest.raises(ValueError):
        SsmConfig(d_model=4, d_state=0).validate()
