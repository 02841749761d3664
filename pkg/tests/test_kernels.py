"""Attention kernels against brute-force numpy oracles, plus the FLOP model."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from jetvit.errors import ConfigError, ContractError, DimensionError
from jetvit.kernels import (
    AttentionInputs,
    FocusingParams,
    SqueezeConvParams,
    attention_flops,
    default_conv_hidden,
    focusing_kernel,
    full_attention,
    init_squeeze_params,
    jetvit_linear_block,
    relu_linear_attention,
    squeeze_conv_flops,
    squeeze_dynamic_conv,
    window_attention,
    window_order_permutation,
)
from jetvit.rng import Rng
from jetvit.tensor import Tensor
from jetvit.verify import la_quadratic_oracle, masked_full_oracle


def _inputs(seed, n, dm, heads, grid, dtype=np.float64):
    rng = Rng(seed, 0x7E5)
    q, k, v = (Tensor(rng.normal((n, dm)).astype(dtype)) for _ in range(3))
    return AttentionInputs(q, k, v, heads=heads, grid=grid)


def test_full_attention_matches_softmax_oracle():
    inp = _inputs(0, 16, 8, 2, (4, 4))
    got = full_attention(inp).data
    want = masked_full_oracle(inp.q.data, inp.k.data, inp.v.data, 2, (4, 4), 4)
    np.testing.assert_allclose(got, want, atol=1e-12)


def test_window_matches_masked_full():
    for side, w in [(4, 1), (4, 2), (4, 4), (6, 2), (6, 3)]:
        inp = _inputs(side * 10 + w, side * side, 8, 2, (side, side))
        got = window_attention(inp, w).data
        want = masked_full_oracle(inp.q.data, inp.k.data, inp.v.data, 2, (side, side), w)
        np.testing.assert_allclose(got, want, atol=1e-10)


def test_window_equal_to_grid_is_full():
    inp = _inputs(3, 16, 8, 2, (4, 4))
    np.testing.assert_array_equal(window_attention(inp, 4).data, full_attention(inp).data)


def test_window_rectangular_grid():
    inp = _inputs(4, 8, 4, 2, (2, 4))
    got = window_attention(inp, 2).data
    want = masked_full_oracle(inp.q.data, inp.k.data, inp.v.data, 2, (2, 4), 2)
    np.testing.assert_allclose(got, want, atol=1e-10)


def test_window_rejects_nondividing_w():
    inp = _inputs(5, 16, 8, 2, (4, 4))
    with pytest.raises(ConfigError):
        window_attention(inp, 3)


def test_window_permutation_is_valid():
    perm = window_order_permutation((4, 4), 2)
    assert sorted(perm.tolist()) == list(range(16))


def test_linear_attention_matches_quadratic_oracle():
    inp = _inputs(6, 32, 16, 4, (8, 4))
    got = relu_linear_attention(inp).data
    want = la_quadratic_oracle(inp.q.data, inp.k.data, inp.v.data, 4, 1e-6)
    assert np.abs(got - want).max() < 1e-10


def test_linear_attention_rows_stay_in_value_hull():
    # Rectified-feature weights are nonnegative and near-normalized, so each
    # output row is (eps-close to) a convex combination of V rows.
    inp = _inputs(7, 24, 8, 2, (4, 6))
    out = relu_linear_attention(inp).data
    v = inp.v.data.reshape(24, 2, 4)
    for h in range(2):
        vh = v[:, h, :]
        oh = out.reshape(24, 2, 4)[:, h, :]
        assert (oh.min(axis=0) >= vh.min(axis=0) - 1e-6).all()
        assert (oh.max(axis=0) <= vh.max(axis=0) + 1e-6).all()


def test_focusing_p1_is_identity():
    rng = Rng(8)
    x = Tensor(np.abs(rng.normal((5, 6))))
    np.testing.assert_array_equal(focusing_kernel(x, 1.0).data, x.data)


def test_focusing_preserves_row_norms():
    rng = Rng(9)
    x = np.abs(rng.normal((5, 6)))
    y = focusing_kernel(Tensor(x), FocusingParams(3.0)).data
    np.testing.assert_allclose(
        np.linalg.norm(y, axis=-1), np.linalg.norm(x, axis=-1), rtol=1e-12
    )


def test_focusing_sharpens_distribution():
    x = np.array([[1.0, 2.0, 3.0]])
    y = focusing_kernel(Tensor(x), 3.0).data
    assert y[0, 2] / y[0, 0] > x[0, 2] / x[0, 0]


def test_focusing_zero_row_passthrough():
    x = np.array([[0.0, 0.0], [1.0, 1.0]])
    y = focusing_kernel(Tensor(x), 2.0).data
    np.testing.assert_array_equal(y[0], [0.0, 0.0])


def test_focusing_rejects_bad_p():
    with pytest.raises(ConfigError):
        FocusingParams(0.0)
    with pytest.raises(ConfigError):
        FocusingParams(float("nan"))


def test_squeeze_init_is_identity_map():
    # Zero w2 and delta-center b2: generated kernels reproduce the input.
    rng = Rng(10)
    params = init_squeeze_params(Rng(11), 6, k=3, dtype=np.float64)
    v = Tensor(rng.normal((12, 6)))
    np.testing.assert_allclose(squeeze_dynamic_conv(v, (3, 4), params).data, v.data, atol=1e-12)


def test_squeeze_conv_matches_explicit_loop():
    rng = Rng(12)
    dm, hp, wp, k = 4, 3, 3, 3
    params = init_squeeze_params(Rng(13), dm, k=k, hidden=5, dtype=np.float64)
    w2 = Rng(14).normal((dm * k * k, 5))
    params = SqueezeConvParams(params.w1, params.b1, Tensor(w2), params.b2, k, 5)
    v = rng.normal((hp * wp, dm))

    # Oracle: generate the kernel by hand, then convolve with explicit loops.
    pool = v.mean(axis=0)
    pre = params.w1.data @ pool + params.b1.data
    hid = pre / (1.0 + np.exp(-pre))
    kern = (params.w2.data @ hid + params.b2.data).reshape(dm, k, k)
    grid_v = v.reshape(hp, wp, dm)
    want = np.zeros_like(grid_v)
    r = k // 2
    for i in range(hp):
        for j in range(wp):
            for u in range(k):
                for t in range(k):
                    ii, jj = i + u - r, j + t - r
                    if 0 <= ii < hp and 0 <= jj < wp:
                        want[i, j] += grid_v[ii, jj] * kern[:, u, t]
    got = squeeze_dynamic_conv(Tensor(v), (hp, wp), params).data
    np.testing.assert_allclose(got, want.reshape(hp * wp, dm), atol=1e-10)


def test_linear_block_is_sum_of_branches():
    inp = _inputs(15, 12, 6, 2, (3, 4))
    params = init_squeeze_params(Rng(16), 6, dtype=np.float64)
    w2 = Rng(17).normal((6 * 9, params.hidden))
    params = SqueezeConvParams(params.w1, params.b1, Tensor(w2), params.b2, 3, params.hidden)
    whole = jetvit_linear_block(inp, params).data
    parts = relu_linear_attention(inp).data + squeeze_dynamic_conv(inp.v, (3, 4), params).data
    np.testing.assert_allclose(whole, parts, atol=1e-12)


def test_linear_block_with_identity_conv_adds_v():
    inp = _inputs(18, 12, 6, 2, (3, 4))
    params = init_squeeze_params(Rng(19), 6, dtype=np.float64)
    got = jetvit_linear_block(inp, params).data
    want = relu_linear_attention(inp).data + inp.v.data
    np.testing.assert_allclose(got, want, atol=1e-12)


def test_attention_inputs_validation():
    rng = Rng(20)
    q = Tensor(rng.normal((8, 4)))
    with pytest.raises(ConfigError):
        AttentionInputs(q, q, q, heads=3, grid=(2, 4))  # heads must divide dm
    with pytest.raises(DimensionError):
        AttentionInputs(q, q, q, heads=2, grid=(3, 3))  # grid must tile n
    with pytest.raises(DimensionError):
        AttentionInputs(q, q, Tensor(rng.normal((8, 6))), heads=2, grid=(2, 4))


# --- FLOP model -------------------------------------------------------------


def test_flops_formulas_exact():
    n, dm = 64, 32
    proj = 8 * n * dm * dm
    assert attention_flops("full", n, dm) == proj + 4 * n * n * dm
    assert attention_flops("window", n, dm, w=4) == proj + 4 * n * 16 * dm
    assert attention_flops("linear", n, dm) == proj + 4 * n * dm * dm
    assert squeeze_conv_flops(n, dm, k=3, h_gen=8) == 2 * n * dm * 9 + 2 * 8 * dm * 10


def test_flops_scaling_shape():
    dm = 32
    lin1 = attention_flops("linear", 256, dm)
    assert attention_flops("linear", 512, dm) == 2 * lin1
    full_quad = attention_flops("full", 512, dm) - 8 * 512 * dm * dm
    assert full_quad == 4 * (attention_flops("full", 256, dm) - 8 * 256 * dm * dm)


def test_flops_include_squeeze_only_for_linear():
    total = attention_flops("linear", 64, 32, include_squeeze=True)
    assert total == attention_flops("linear", 64, 32) + squeeze_conv_flops(64, 32)
    with pytest.raises(ConfigError):
        attention_flops("full", 64, 32, include_squeeze=True)


def test_flops_rejects_unknown_kind_and_missing_w():
    with pytest.raises(ConfigError):
        attention_flops("sparse", 64, 32)
    with pytest.raises(ConfigError):
        attention_flops("window", 64, 32)


def test_default_conv_hidden_floor():
    assert default_conv_hidden(16) == 8
    assert default_conv_hidden(64) == 16


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 6), st.integers(1, 4), st.integers(1, 5))
def test_flops_ordering_property(log_dm, log_w_gap, log_n_gap):
    # linear < window < full whenever d_model < w^2 < N.
    dm = 2**log_dm
    w = 2 ** ((log_dm + log_w_gap + 1) // 2 + 1)
    n = w * w * 2**log_n_gap
    if not (dm < w * w < n):
        return
    lin = attention_flops("linear", n, dm)
    win = attention_flops("window", n, dm, w=w)
    ful = attention_flops("full", n, dm)
    assert lin < win < ful
