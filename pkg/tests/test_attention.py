"""Attention kernels, block composition, and the three key-set variants."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stam import tensor as T
from stam.attention import (
    AttentionRecord,
    attention_combine,
    attention_weights,
    init_block,
    msa_block,
    qkv_project,
    score_mac_counter,
)
from stam.errors import ConfigError
from stam.tensor import Tensor


def _block(D=8, A=2, mlp_ratio=4, seed=0):
    return init_block(D, A, mlp_ratio, np.random.default_rng(seed))


def _ln(z, g, b):
    mu = z.mean(axis=-1, keepdims=True)
    var = ((z - mu) ** 2).mean(axis=-1, keepdims=True)
    return (z - mu) / np.sqrt(var + 1e-6)


# ---------------------------------------------------------------------------
# qkv projection


def test_qkv_zero_weight_gives_zero_query():
    block = _block()
    block.w_q.data[:] = 0.0
    q, k, v = qkv_project(Tensor(np.random.default_rng(1).normal(size=(3, 8))), block, 0)
    np.testing.assert_array_equal(q.data, np.zeros((3, 4)))
    assert not np.allclose(k.data, 0.0)


def test_qkv_constant_rows_give_identical_rows():
    block = _block()
    z = Tensor(np.tile(np.random.default_rng(2).normal(size=8), (5, 1)))
    q, k, v = qkv_project(z, block, 1)
    for t in (q, k, v):
        np.testing.assert_allclose(t.data, np.tile(t.data[0], (5, 1)), atol=1e-14)


def test_qkv_matches_hand_formula():
    block = _block(D=6, A=3, seed=4)
    z = np.random.default_rng(5).normal(size=(2, 6))
    h = _ln(z, None, None) * block.ln1_g.data + block.ln1_b.data
    q, _, _ = qkv_project(Tensor(z), block, 2)
    want = h @ block.w_q.data[4:6].T
    np.testing.assert_allclose(q.data, want, atol=1e-10)


def test_qkv_rejects_bad_head():
    block = _block(A=2)
    with pytest.raises(ConfigError, match="head 2"):
        qkv_project(Tensor(np.zeros((3, 8))), block, 2)


# ---------------------------------------------------------------------------
# weights / combine kernels


def test_weights_single_key_is_one():
    out = attention_weights(Tensor(np.ones((1, 4))), Tensor(np.ones((1, 4))))
    np.testing.assert_array_equal(out.data, [[1.0]])


def test_weights_equal_keys_uniform():
    q = Tensor(np.random.default_rng(6).normal(size=(3, 4)))
    k = Tensor(np.tile([0.5, -1.0, 2.0, 0.0], (5, 1)))
    out = attention_weights(q, k).data
    np.testing.assert_allclose(out, np.full((3, 5), 0.2), atol=1e-12)


def test_weights_identity_qk_closed_form():
    # q = k = I_2, D_h = 2: diagonal = e^(1/sqrt 2) / (e^(1/sqrt 2) + 1)
    eye = Tensor(np.eye(2))
    out = attention_weights(eye, eye).data
    d = 0.6697615493266569
    np.testing.assert_allclose(out, [[d, 1 - d], [1 - d, d]], atol=1e-12)


def test_combine_identity_alpha_passes_values():
    v = Tensor(np.random.default_rng(7).normal(size=(4, 3)))
    out = attention_combine(Tensor(np.eye(4)), v)
    np.testing.assert_array_equal(out.data, v.data)


def test_combine_uniform_alpha_averages():
    v = Tensor(np.arange(8.0).reshape(4, 2))
    out = attention_combine(Tensor(np.full((4, 4), 0.25)), v)
    np.testing.assert_allclose(out.data, np.tile([3.0, 4.0], (4, 1)), atol=1e-14)


def test_combine_hand_case():
    alpha = Tensor([[0.25, 0.75], [0.6, 0.4]])
    v = Tensor([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_allclose(
        attention_combine(alpha, v).data, [[2.5, 3.5], [1.8, 2.8]], atol=1e-15
    )


@settings(max_examples=40, deadline=None)
@given(
    st.integers(min_value=1, max_value=6),
    st.integers(min_value=1, max_value=6),
    st.integers(min_value=1, max_value=8),
    st.integers(min_value=0, max_value=2**31),
)
def test_weight_rows_sum_to_one(s, kk, dh, seed):
    rng = np.random.default_rng(seed)
    out = attention_weights(
        Tensor(rng.normal(size=(s, dh)) * 3), Tensor(rng.normal(size=(kk, dh)) * 3)
    ).data
    np.testing.assert_allclose(out.sum(axis=-1), 1.0, atol=1e-9)


# ---------------------------------------------------------------------------
# block composition


def test_block_identity_when_projections_zeroed():
    block = _block(seed=8)
    block.w_o.data[:] = 0.0
    block.mlp_w2.data[:] = 0.0
    z = Tensor(np.random.default_rng(9).normal(size=(2, 5, 8)))
    out = msa_block(z, block, "spatial")
    np.testing.assert_array_equal(out.data, z.data)


def test_block_shapes_all_variants():
    block = _block(seed=10)
    sp = Tensor(np.random.default_rng(11).normal(size=(3, 5, 8)))
    assert msa_block(sp, block, "spatial").shape == (3, 5, 8)
    assert msa_block(sp, block, "joint").shape == (3, 5, 8)
    tm = Tensor(np.random.default_rng(12).normal(size=(4, 8)))
    assert msa_block(tm, block, "temporal").shape == (4, 8)


def test_block_batched_matches_loop():
    block = _block(seed=13)
    clips = np.random.default_rng(14).normal(size=(2, 3, 5, 8))
    batched = msa_block(Tensor(clips), block, "spatial").data
    for b in range(2):
        single = msa_block(Tensor(clips[b]), block, "spatial").data
        np.testing.assert_allclose(batched[b], single, atol=1e-12)


def test_block_rejects_unknown_variant():
    with pytest.raises(ConfigError, match="variant"):
        msa_block(Tensor(np.zeros((2, 3, 8))), _block(), "global")


def test_block_rejects_width_mismatch():
    with pytest.raises(ConfigError):
        msa_block(Tensor(np.zeros((2, 3, 6))), _block(D=8), "spatial")


def test_block_gradcheck():
    block = _block(D=6, A=2, mlp_ratio=2, seed=15)
    z = np.random.default_rng(16).normal(size=(2, 3, 6))
    params = block.tensors()
    target = np.random.default_rng(17).normal(size=(2, 3, 6))

    def f(p):
        out = msa_block(Tensor(z), block, "spatial")
        diff = T.sub(out, Tensor(target))
        return T.tsum(T.mul(diff, diff))

    assert T.finite_difference_check(f, params, step=1e-5) < 1e-5


def test_block_gradcheck_joint():
    block = _block(D=6, A=3, mlp_ratio=2, seed=18)
    z = np.random.default_rng(19).normal(size=(2, 3, 6))
    params = block.tensors()

    def f(p):
        out = msa_block(Tensor(z), block, "joint")
        return T.tsum(T.mul(out, out))

    assert T.finite_difference_check(f, params, step=1e-5) < 1e-5


# ---------------------------------------------------------------------------
# key-set structure


def test_spatial_never_mixes_frames():
    # moving one frame's tokens must not change any other frame's output
    block = _block(seed=20)
    z = np.random.default_rng(21).normal(size=(3, 5, 8))
    base = msa_block(Tensor(z), block, "spatial").data
    z2 = z.copy()
    z2[1] += 100.0
    out = msa_block(Tensor(z2), block, "spatial").data
    np.testing.assert_array_equal(out[0], base[0])
    np.testing.assert_array_equal(out[2], base[2])
    assert not np.allclose(out[1], base[1])


def test_spatial_records_are_block_diagonal():
    block = _block(seed=22)
    F, S = 3, 5
    z = Tensor(np.random.default_rng(23).normal(size=(F, S, 8)))
    records: list[AttentionRecord] = []
    msa_block(z, block, "spatial", layer=0, records=records)
    assert len(records) == block.A * F
    for r in records:
        assert r.variant == "spatial"
        assert r.weights.shape == (S, S)
        assert r.frame in range(F)
        np.testing.assert_allclose(r.weights.sum(axis=-1), 1.0, atol=1e-9)
    # assemble the implied [F*S, F*S] matrix per head: off-diagonal blocks
    # are structurally absent — assert the assembly is exactly block-diagonal
    for a in range(block.A):
        full = np.zeros((F * S, F * S))
        for r in records:
            if r.head == a:
                i = r.frame * S
                full[i : i + S, i : i + S] = r.weights
        mask = np.kron(np.eye(F), np.ones((S, S)))
        np.testing.assert_array_equal(full * (1 - mask), np.zeros_like(full))


def test_joint_row_length_covers_all_patches():
    block = _block(seed=24)
    F, N = 3, 4
    z = Tensor(np.random.default_rng(25).normal(size=(F, N + 1, 8)))
    records: list[AttentionRecord] = []
    msa_block(z, block, "joint", layer=0, records=records)
    assert len(records) == block.A * F
    for r in records:
        assert r.weights.shape == (N + 1, F * N + 1)
        np.testing.assert_allclose(r.weights.sum(axis=-1), 1.0, atol=1e-9)


def test_joint_equal_keys_uniform():
    block = _block(seed=26)
    F, N = 2, 3
    # all tokens identical: every active key equal, so weights are uniform
    z = Tensor(np.tile(np.random.default_rng(27).normal(size=8), (F, N + 1, 1)))
    records: list[AttentionRecord] = []
    msa_block(z, block, "joint", records=records)
    for r in records:
        np.testing.assert_allclose(
            r.weights, np.full((N + 1, F * N + 1), 1.0 / (F * N + 1)), atol=1e-12
        )


def test_joint_f1_weights_bit_identical_to_spatial():
    block = _block(seed=28)
    z = Tensor(np.random.default_rng(29).normal(size=(1, 5, 8)))
    sp: list[AttentionRecord] = []
    jt: list[AttentionRecord] = []
    msa_block(z, block, "spatial", records=sp)
    out_sp = msa_block(z, block, "spatial").data
    out_jt = msa_block(z, block, "joint", records=jt).data
    for rs, rj in zip(sp, jt):
        assert rs.weights.shape == rj.weights.shape
        np.testing.assert_allclose(rs.weights, rj.weights, atol=1e-15)
    np.testing.assert_allclose(out_sp, out_jt, atol=1e-12)


def test_weights_kernel_bit_for_bit_on_equal_keysets():
    # joint key construction for F=1 yields the very same key matrix, so the
    # shared kernel returns bit-identical weights
    rng = np.random.default_rng(30)
    q = rng.normal(size=(5, 4))
    k = rng.normal(size=(5, 4))
    kt = np.concatenate([k[0:1], k[1:]], axis=0)
    np.testing.assert_array_equal(kt, k)
    a = attention_weights(Tensor(q), Tensor(k)).data
    b = attention_weights(Tensor(q), Tensor(kt)).data
    np.testing.assert_array_equal(a, b)


# ---------------------------------------------------------------------------
# score MAC instrumentation


def test_mac_counter_spatial():
    block = _block(D=8, A=2, seed=31)
    F, S = 3, 5
    z = Tensor(np.random.default_rng(32).normal(size=(F, S, 8)))
    with score_mac_counter as c:
        msa_block(z, block, "spatial")
    assert c.macs == F * S * S * 8  # A heads x D_h = D


def test_mac_counter_joint():
    block = _block(D=8, A=2, seed=33)
    F, N = 3, 4
    z = Tensor(np.random.default_rng(34).normal(size=(F, N + 1, 8)))
    with score_mac_counter as c:
        msa_block(z, block, "joint")
    assert c.macs == F * (N + 1) * (F * N + 1) * 8


def test_mac_counter_inactive_outside_context():
    block = _block(seed=35)
    z = Tensor(np.random.default_rng(36).normal(size=(2, 3, 8)))
    before = score_mac_counter.macs
    msa_block(z, block, "spatial")
    assert score_mac_counter.macs == before
