import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from plantdet.attention import (
    MASK_VALUE,
    STBlock,
    WindowSpec,
    attention_mask,
    global_msa_forward,
    window_partition,
    window_reverse,
    wmsa_forward,
)
from plantdet.errors import ConfigError, ContractError, DimensionError
from plantdet.gradcheck import check_gradients, random_projection
from plantdet.tensor import Tensor

from oracles import attention_oracle, make_attn, shifted_allowed


# -- partition / reverse ------------------------------------------------------------

def test_partition_enumeration():
    x = Tensor(np.arange(16.0).reshape(1, 4, 4, 1))
    wins = window_partition(x, WindowSpec(2, 0, 4, 4)).data[..., 0]
    np.testing.assert_array_equal(wins, [[0, 1, 4, 5], [2, 3, 6, 7], [8, 9, 12, 13], [10, 11, 14, 15]])


def test_partition_single_window_is_flattened_input(rng):
    x = Tensor(rng.standard_normal((2, 3, 3, 4)))
    wins = window_partition(x, WindowSpec(3, 0, 3, 3))
    np.testing.assert_array_equal(wins.data, x.data.reshape(2, 9, 4))


def test_partition_rejects_unpadded_input():
    with pytest.raises(DimensionError):
        window_partition(Tensor(np.zeros((1, 5, 4, 1))), WindowSpec(2, 0, 4, 4))
    with pytest.raises(DimensionError):
        window_reverse(Tensor(np.zeros((3, 4, 1))), WindowSpec(2, 0, 4, 4), 4, 4)


@settings(max_examples=200, deadline=None)
@given(b=st.integers(1, 3), gh=st.integers(1, 4), gw=st.integers(1, 4), ws=st.integers(1, 5),
       c=st.integers(1, 3))
def test_partition_roundtrip_property(b, gh, gw, ws, c):
    h, w = gh * ws, gw * ws
    x = np.random.default_rng(b * 1000 + h * 10 + w).standard_normal((b, h, w, c))
    spec = WindowSpec(ws, 0, h, w)
    back = window_reverse(window_partition(Tensor(x, dtype=np.float64), spec), spec, h, w)
    assert np.array_equal(back.data, x)


# -- mask -------------------------------------------------------------------------

def test_mask_single_window_is_zero():
    mask = attention_mask(WindowSpec(4, 2, 4, 4)).data
    assert mask.shape == (1, 16, 16)
    assert not mask.any()


def test_mask_matches_bruteforce_region_labels():
    spec = WindowSpec(2, 1, 4, 4)
    mask = attention_mask(spec).data
    allowed = shifted_allowed(4, 4, 2, 1)
    # Reorder the brute-force token-pair table into per-window blocks.
    rows, cols = np.divmod(np.arange(16), 4)
    order = np.lexsort((cols % 2, rows % 2, cols // 2, rows // 2))
    for wi in range(4):
        toks = order[wi * 4:(wi + 1) * 4]
        expected = np.where(allowed[np.ix_(toks, toks)], 0.0, MASK_VALUE)
        np.testing.assert_array_equal(mask[wi], expected)
    assert set(np.unique(mask)) <= {0.0, MASK_VALUE}


def test_mask_needs_shift():
    with pytest.raises(ContractError):
        attention_mask(WindowSpec(4, 0, 8, 8))


# -- W-MSA / SW-MSA ----------------------------------------------------------------

def test_uniform_attention_gives_window_mean(fp64, rng):
    attn = make_attn(dim=4, heads=1)
    attn.qkv.weight.data[...] = 0.0
    attn.qkv.bias.data[...] = 0.0
    attn.qkv.weight.data[:, 8:] = np.eye(4)
    attn.proj.weight.data[...] = np.eye(4)
    attn.proj.bias.data[...] = 0.0
    x = rng.standard_normal((1, 3, 3, 4))
    out = wmsa_forward(Tensor(x), attn, 3, 0).data
    np.testing.assert_allclose(out, np.broadcast_to(x.mean(axis=(1, 2), keepdims=True), x.shape),
                               atol=1e-12)


def test_wmsa_equals_per_window_global_attention(fp64, rng):
    attn = make_attn()
    x = rng.standard_normal((1, 8, 8, 8))
    out = wmsa_forward(Tensor(x), attn, 4, 0).data[0]
    allowed = shifted_allowed(8, 8, 4, 0)
    ref = attention_oracle(x[0].reshape(64, 8), attn, allowed).reshape(8, 8, 8)
    np.testing.assert_allclose(out, ref, atol=1e-6)


@pytest.mark.parametrize("window,shift", [(4, 2), (2, 1)])
def test_swmsa_equals_masked_global_attention(fp64, rng, window, shift):
    attn = make_attn(seed=window)
    x = rng.standard_normal((1, 8, 8, 8))
    out = wmsa_forward(Tensor(x), attn, window, shift).data[0]
    rolled = np.roll(x[0], (-shift, -shift), (0, 1)).reshape(64, 8)
    ref = attention_oracle(rolled, attn, shifted_allowed(8, 8, window, shift))
    ref = np.roll(ref.reshape(8, 8, 8), (shift, shift), (0, 1))
    np.testing.assert_allclose(out, ref, atol=1e-6)


def test_attention_rows_normalized_and_mask_suppressed(fp64, rng):
    attn = make_attn()
    spec = WindowSpec(4, 2, 8, 8)
    x = np.roll(rng.standard_normal((1, 8, 8, 8)), (-2, -2), (1, 2))
    wins = window_partition(Tensor(x), spec)
    mask = attention_mask(spec).data
    weights = attn.attention_weights(wins, mask)
    np.testing.assert_allclose(weights.sum(-1), 1.0, atol=1e-6)
    masked = np.broadcast_to((mask < 0)[:, None], weights.shape)
    assert weights[masked].max() < 1e-4


def test_wmsa_pads_and_crops(rng):
    attn = make_attn()
    out = wmsa_forward(Tensor(rng.standard_normal((2, 7, 3, 8))), attn, 5, 2)
    assert out.shape == (2, 7, 3, 8)


def test_wmsa_head_mismatch():
    attn = make_attn(dim=8, heads=2)
    with pytest.raises(DimensionError):
        wmsa_forward(Tensor(np.zeros((1, 4, 4, 6))), attn, 2, 0)


# -- global MSA ------------------------------------------------------------------

def test_global_single_position_attends_to_itself(rng):
    attn = make_attn()
    x = Tensor(rng.standard_normal((2, 1, 1, 8)))
    np.testing.assert_allclose(attn.attention_weights(x.reshape(2, 1, 8)), 1.0)
    assert global_msa_forward(x, attn).shape == (2, 1, 1, 8)


def test_global_equals_full_window(fp64, rng):
    attn = make_attn()
    x = Tensor(rng.standard_normal((2, 6, 6, 8)))
    np.testing.assert_allclose(global_msa_forward(x, attn).data, wmsa_forward(x, attn, 6, 0).data,
                               atol=1e-6)


def test_global_permutation_equivariance(fp64, rng):
    attn = make_attn()
    x = rng.standard_normal((1, 5, 4, 8))
    perm = rng.permutation(20)
    out = global_msa_forward(Tensor(x), attn).data.reshape(20, 8)
    xp = x.reshape(20, 8)[perm].reshape(1, 5, 4, 8)
    outp = global_msa_forward(Tensor(xp), attn).data.reshape(20, 8)
    np.testing.assert_allclose(outp, out[perm], atol=1e-12)


# -- ST block -----------------------------------------------------------------------

def test_st_block_residual_identity(rng):
    block = STBlock(rng, 8, head_dim=4, window=2)
    for name, t in block.param_store().items():
        if "norm" in name:
            t.data[...] = 0.0
    x = Tensor(rng.standard_normal((2, 8, 4, 4)))
    np.testing.assert_array_equal(block(x).data, x.data)


@pytest.mark.parametrize("hw", [(1, 1), (3, 7), (6, 5), (9, 9)])
def test_st_block_shape_contract(rng, hw):
    block = STBlock(rng, 16, head_dim=8, window=5)
    x = Tensor(rng.standard_normal((1, 16, *hw)))
    assert block(x).shape == x.shape


def test_st_block_config_error(rng):
    with pytest.raises(ConfigError):
        STBlock(rng, 12, head_dim=8)


def test_st_block_gradient(fp64, rng):
    block = STBlock(rng, 8, head_dim=4, window=4)
    for t in block.param_store().values():
        t.data[...] += rng.standard_normal(t.shape) * 0.3
    x = Tensor(rng.standard_normal((1, 8, 8, 8)), requires_grad=True)
    proj = Tensor(random_projection((1, 8, 8, 8)))
    params = [x] + list(block.param_store().values())
    assert check_gradients(lambda: (block(x) * proj).sum(), params) < 1e-3


def test_st_block_gradient_with_relative_bias(fp64, rng):
    block = STBlock(rng, 8, head_dim=4, window=2, rel_pos_bias=True)
    x = Tensor(rng.standard_normal((1, 8, 4, 4)), requires_grad=True)
    proj = Tensor(random_projection((1, 8, 4, 4), 3))
    params = [x] + list(block.param_store().values())
    assert any(name.endswith("rel_bias_table") for name in block.param_store())
    assert check_gradients(lambda: (block(x) * proj).sum(), params) < 1e-3
