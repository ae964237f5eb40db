import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from lsformer import tensor as tt
from lsformer.attention import (
    LSSSA,
    LSSSAConfig,
    cra_attention,
    dilated_sample,
    global_ssa_reference,
    sda_attention,
    window_offsets,
)
from lsformer.bench import bench_config, measure, run_bench
from lsformer.tensor import ConfigError, Tensor


def binary(rng, shape, rate=0.5):
    return (rng.random(shape) < rate).astype(np.float32)


def small_cfg(**kw):
    base = dict(embed_dim=16, groups=2, dilation_rates=(1, 2), heads=2)
    base.update(kw)
    return LSSSAConfig(**base)


# ---------------------------------------------------------------- config


def test_config_validation():
    with pytest.raises(ConfigError):
        LSSSAConfig(embed_dim=10, groups=3, dilation_rates=(1, 2, 3))
    with pytest.raises(ConfigError):
        LSSSAConfig(embed_dim=12, groups=2, dilation_rates=(1, 2), heads=4)
    with pytest.raises(ConfigError):
        LSSSAConfig(embed_dim=12, groups=2, dilation_rates=(1,), heads=2)
    with pytest.raises(ConfigError):
        small_cfg(window_h=2)


def test_large_rate_warns():
    with pytest.warns(UserWarning, match="dilation"):
        small_cfg(dilation_rates=(1, 4))


def test_group_widths_for_the_wide_preset():
    cfg = LSSSAConfig()
    assert (cfg.groups, cfg.group_dim) == (3, 128)
    assert cfg.scale == pytest.approx(1 / math.sqrt(128))


# ---------------------------------------------------------------- gather


def test_window_offsets():
    assert window_offsets(3) == [-1, 0, 1]
    assert window_offsets(1) == [0]


def test_dilated_gather_reads_zero_outside_the_map():
    m = Tensor(np.arange(1, 26, dtype=np.float32).reshape(1, 1, 5, 5))
    h = dilated_sample(m, "horizontal", 2, 3).data
    # position (0, 0): columns -2, 0, 2
    assert h[0, 0, 0, 0].tolist() == [0.0, 1.0, 3.0]
    v = dilated_sample(m, "vertical", 1, 3).data
    assert v[0, 0, 2, 3].tolist() == [9.0, 14.0, 19.0]
    unit = dilated_sample(m, "horizontal", 1, 1).data
    np.testing.assert_array_equal(unit[..., 0], m.data)


def test_interior_gather_ignores_content_outside_the_window():
    rng = np.random.default_rng(0)
    a = binary(rng, (1, 2, 7, 7))
    b = a.copy()
    b[:, :, 0, :] = 1 - b[:, :, 0, :]  # change only row 0
    ga = dilated_sample(Tensor(a), "vertical", 2, 3).data
    gb = dilated_sample(Tensor(b), "vertical", 2, 3).data
    # rows 3..4 read rows 1..6 only
    np.testing.assert_array_equal(ga[:, :, 3:5], gb[:, :, 3:5])


# ---------------------------------------------------------------- SDA / CRA vs oracles


def test_sda_single_token_counts_both_branches():
    rng = np.random.default_rng(1)
    q, k, v = (binary(rng, (1, 4, 1, 1), 0.7) for _ in range(3))
    scale = 0.5
    got = sda_attention(Tensor(q), Tensor(k), Tensor(v), 1, 3, 3, scale).data
    expected = 2 * float(q.ravel() @ k.ravel()) * v * scale
    np.testing.assert_allclose(got, expected)


def test_sda_null_query():
    rng = np.random.default_rng(2)
    k, v = binary(rng, (1, 4, 3, 3)), binary(rng, (1, 4, 3, 3))
    out = sda_attention(Tensor(np.zeros_like(k)), Tensor(k), Tensor(v), 2, 3, 3, 0.5).data
    assert not out.any()


@pytest.mark.parametrize("rate", [1, 2])
def test_sda_random_case_vs_oracle(rate):
    rng = np.random.default_rng(3 + rate)
    q, k, v = (binary(rng, (1, 4, 5, 5)) for _ in range(3))
    got = sda_attention(Tensor(q), Tensor(k), Tensor(v), rate, 3, 3, 0.5).data
    np.testing.assert_allclose(got, oracles.sda(q, k, v, rate, 3, 3, 0.5), atol=1e-5)


@settings(max_examples=60)
@given(
    st.integers(1, 3),
    st.sampled_from([1, 3, 5]),
    st.sampled_from([1, 3, 5]),
    st.integers(1, 6),
    st.integers(1, 6),
    st.integers(0, 2**16),
)
def test_sda_oracle_property(rate, wh, wv, h, w, seed):
    rng = np.random.default_rng(seed)
    q, k, v = (binary(rng, (2, 3, h, w)) for _ in range(3))
    got = sda_attention(Tensor(q), Tensor(k), Tensor(v), rate, wh, wv, 0.3).data
    np.testing.assert_allclose(got, oracles.sda(q, k, v, rate, wh, wv, 0.3), atol=1e-5)


def test_cra_single_token_and_head_degeneracy():
    rng = np.random.default_rng(4)
    q, k, v = (binary(rng, (1, 4, 1, 1), 0.7) for _ in range(3))
    got = cra_attention(Tensor(q), Tensor(k), Tensor(v), 1, 0.5).data
    np.testing.assert_allclose(got, float(q.ravel() @ k.ravel()) * v * 0.5)
    q, k, v = (binary(rng, (1, 8, 3, 3)) for _ in range(3))
    one_head = cra_attention(Tensor(q), Tensor(k), Tensor(v), 1, 0.5).data
    np.testing.assert_allclose(one_head, oracles.cra(q, k, v, 1, 0.5), atol=1e-5)


def test_cra_two_heads_vs_oracle():
    rng = np.random.default_rng(5)
    q, k, v = (binary(rng, (1, 8, 2, 2)) for _ in range(3))
    got = cra_attention(Tensor(q), Tensor(k), Tensor(v), 2, 0.25).data
    np.testing.assert_allclose(got, oracles.cra(q, k, v, 2, 0.25), atol=1e-5)


@settings(max_examples=40)
@given(st.sampled_from([1, 2, 4]), st.integers(1, 4), st.integers(1, 4), st.integers(0, 2**16))
def test_cra_oracle_property(heads, h, w, seed):
    rng = np.random.default_rng(seed)
    q, k, v = (binary(rng, (1, 8, h, w)) for _ in range(3))
    got = cra_attention(Tensor(q), Tensor(k), Tensor(v), heads, 0.3).data
    np.testing.assert_allclose(got, oracles.cra(q, k, v, heads, 0.3), atol=1e-5)


def test_cra_head_divisibility():
    x = Tensor(np.zeros((1, 6, 2, 2), np.float32))
    with pytest.raises(ConfigError):
        cra_attention(x, x, x, 4, 1.0)


def test_global_reference_equals_single_head_token_attention():
    rng = np.random.default_rng(6)
    q, k, v = (binary(rng, (1, 4, 3, 3)) for _ in range(3))
    got = global_ssa_reference(Tensor(q), Tensor(k), Tensor(v), 0.5).data
    np.testing.assert_allclose(got, oracles.cra(q, k, v, 1, 0.5), atol=1e-5)


# ---------------------------------------------------------------- block


def block_input(rng, cfg, t=2, b=2, h=4, w=4):
    return Tensor(binary(rng, (t, b, cfg.embed_dim, h, w), 0.3))


def test_qkv_binary_and_shape_preserving():
    rng = np.random.default_rng(7)
    cfg = small_cfg()
    attn = LSSSA(cfg, rng)
    x = block_input(rng, cfg)
    for m in attn.qkv(x):
        assert m.shape == x.shape
        assert np.all((m.data == 0) | (m.data == 1))
    out = attn(x)
    assert out.shape == x.shape


def test_zero_input_gives_zero_qkv_and_constant_output():
    cfg = small_cfg()
    attn = LSSSA(cfg, np.random.default_rng(8))
    x = Tensor(np.zeros((2, 1, 16, 3, 3), np.float32))
    assert all(not m.data.any() for m in attn.qkv(x))
    out = attn(x).data
    np.testing.assert_allclose(out, np.broadcast_to(out[:1, :1, :, :1, :1], out.shape))


def test_initial_fusion_weights_halve_each_branch():
    rng = np.random.default_rng(9)
    cfg = small_cfg()
    attn = LSSSA(cfg, rng)
    q, k, v = (Tensor(binary(rng, (2, 16, 4, 4))) for _ in range(3))
    branches = [attn.group_branches(q, k, v, m) for m in range(2)]
    fused = attn.fuse(branches, q).data
    d = cfg.group_dim
    for m, (s, c) in enumerate(branches):
        np.testing.assert_allclose(fused[:, 2 * m * d : (2 * m + 1) * d], 0.5 * s.data, rtol=1e-6)
        np.testing.assert_allclose(fused[:, (2 * m + 1) * d : (2 * m + 2) * d], 0.5 * c.data, rtol=1e-6)
    assert fused.shape[1] == 2 * cfg.embed_dim


def test_fused_width_for_three_groups():
    cfg = LSSSAConfig(embed_dim=48, groups=3, dilation_rates=(1, 2, 3), heads=2)
    attn = LSSSA(cfg, np.random.default_rng(10))
    rng = np.random.default_rng(11)
    q, k, v = (Tensor(binary(rng, (1, 48, 3, 3))) for _ in range(3))
    fused = attn.fuse([attn.group_branches(q, k, v, m) for m in range(3)], q)
    assert fused.shape[1] == 96
    assert attn.proj.conv.weight.shape == (48, 96, 1, 1)


def test_zero_gates_remove_a_branch():
    rng = np.random.default_rng(12)
    cfg = small_cfg()
    attn = LSSSA(cfg, rng)
    for b in attn.beta:
        b.value.data[...] = 0
    q, k, v = (Tensor(binary(rng, (1, 16, 4, 4))) for _ in range(3))
    fused = attn.fuse([attn.group_branches(q, k, v, m) for m in range(2)], q).data
    d = cfg.group_dim
    assert not fused[:, d : 2 * d].any() and not fused[:, 3 * d :].any()


def test_without_sda_the_spatial_half_is_zero():
    rng = np.random.default_rng(13)
    cfg = small_cfg(use_sda=False)
    attn = LSSSA(cfg, rng)
    assert attn.dwc is None
    q, k, v = (Tensor(binary(rng, (1, 16, 4, 4))) for _ in range(3))
    branches = [attn.group_branches(q, k, v, m) for m in range(2)]
    fused = attn.fuse(branches, q).data
    d = cfg.group_dim
    for m, (s, c) in enumerate(branches):
        assert s is None
        assert not fused[:, 2 * m * d : (2 * m + 1) * d].any()
        np.testing.assert_allclose(fused[:, (2 * m + 1) * d : (2 * m + 2) * d], 0.5 * c.data, rtol=1e-6)


@pytest.mark.parametrize("flag", ["use_cra", "use_scdf", "use_dwc"])
def test_other_ablations_run(flag):
    rng = np.random.default_rng(14)
    cfg = small_cfg(**{flag: False})
    attn = LSSSA(cfg, rng)
    x = block_input(rng, cfg)
    assert attn(x).shape == x.shape
    if flag == "use_scdf":
        assert attn.alpha is None and attn.proj.conv.weight.shape == (16, 16, 1, 1)


def test_group_independence():
    rng = np.random.default_rng(15)
    cfg = small_cfg()
    attn = LSSSA(cfg, rng)
    q, k, v = (binary(rng, (1, 16, 4, 4)) for _ in range(3))
    q2 = q.copy()
    q2[:, :8] = 1 - q2[:, :8]  # perturb group 0 only
    a = attn.group_branches(Tensor(q), Tensor(k), Tensor(v), 1)
    b = attn.group_branches(Tensor(q2), Tensor(k), Tensor(v), 1)
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x.data, y.data)


def test_spike_map_before_projection_is_binary():
    rng = np.random.default_rng(16)
    cfg = small_cfg()
    attn = LSSSA(cfg, rng)
    seen = []
    original = attn.att_lif.forward

    def spy(x):
        out = original(x)
        seen.append(out.data)
        return out

    attn.att_lif.forward = spy
    attn(block_input(rng, cfg))
    assert seen and np.all((seen[0] == 0) | (seen[0] == 1))


# ---------------------------------------------------------------- cost scaling


def test_counted_flops_scale_linearly_for_local_and_quadratically_for_global():
    res = run_bench()
    assert 0.9 <= res.slope("lsssa_core_flops") <= 1.1
    assert 0.9 <= res.slope("lsssa_block_flops") <= 1.1
    assert 1.8 <= res.slope("global_flops") <= 2.2


def test_doubling_width_doubles_local_attention_flops():
    a = measure(64, bench_config(64))
    b = measure(64, bench_config(128))
    assert b.lsssa_core_flops / a.lsssa_core_flops == pytest.approx(2.0, rel=0.05)


def test_bench_rejects_non_square_token_counts():
    with pytest.raises(ValueError):
        measure(10, bench_config())


def test_flop_counts_match_hand_arithmetic():
    cfg = bench_config(16, 2, 8)
    row = measure(16, cfg)
    d, n = cfg.group_dim, 16
    per_group = (
        2 * (2 * d * n * 3 + 2 * d * n * 3) + 3 * d * n  # row and column branches (scores, values), two scalings, sum
        + 2 * d * 9 * n + 2 * d * n + d * n  # depthwise conv, its batch norm, residual add
        + 2 * (2 * n * d * (d // cfg.heads)) + d * n  # K^T V and Q (K^T V) per head, scaling
        + 2 * d * n  # alpha and beta gates
    )
    assert row.lsssa_core_flops == cfg.groups * per_group
