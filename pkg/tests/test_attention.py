import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from padapter import autograd as ag
from padapter import numeric as nc
from padapter.attention import (AttentionWeights, attention, augment, augment_matrix, averaged_output,
                                causal_mask)

from . import oracles


def _weights(rng, d, n):
    return AttentionWeights.random(rng, d, d, n)


def test_single_token_identity_weights():
    eye = np.eye(2)
    w = AttentionWeights(eye, eye, eye, eye, 1)
    v = np.array([[0.4, -1.3]])
    out, inter = attention(v, v, v, w)
    np.testing.assert_array_equal(inter.m_avg, [[1.0]])
    np.testing.assert_allclose(out, v, atol=1e-15)


def test_identical_keys_give_uniform_rows():
    rng = nc.make_rng(0)
    w = _weights(rng, 4, 2)
    k = np.tile(rng.standard_normal((1, 4)), (5, 1))
    _, inter = attention(rng.standard_normal((3, 4)), k, rng.standard_normal((5, 4)), w)
    for m in inter.heads:
        np.testing.assert_allclose(m, np.full((3, 5), 0.2), atol=1e-15)


def test_matches_loop_oracle_pinned_case():
    rng = nc.make_rng(7)
    n1, n2, d, n = 3, 4, 8, 2
    w = _weights(rng, d, n)
    q, k, v = rng.standard_normal((n1, d)), rng.standard_normal((n2, d)), rng.standard_normal((n2, d))
    out, inter = attention(q, k, v, w)
    ref_out, ref_heads, ref_avg = oracles.attention(q, k, v, w.w_q, w.w_k, w.w_v, w.w_o, n)
    np.testing.assert_allclose(out, ref_out, atol=1e-12, rtol=0)
    for a, b in zip(inter.heads, ref_heads):
        np.testing.assert_allclose(a, b, atol=1e-12, rtol=0)
    np.testing.assert_allclose(inter.m_avg, ref_avg, atol=1e-12, rtol=0)


def test_masked_attention_matches_oracle_and_is_causal():
    rng = nc.make_rng(8)
    w = _weights(rng, 4, 2)
    x = rng.standard_normal((5, 4))
    mask = causal_mask(5)
    out, inter = attention(x, x, x, w, mask)
    ref_out, _, ref_avg = oracles.attention(x, x, x, w.w_q, w.w_k, w.w_v, w.w_o, 2, mask)
    np.testing.assert_allclose(out, ref_out, atol=1e-12, rtol=0)
    assert np.all(np.triu(inter.m_avg, 1) == 0)


def test_causal_mask():
    np.testing.assert_array_equal(causal_mask(1), [[True]])
    assert causal_mask(3).sum() == 6
    with pytest.raises(ValueError):
        causal_mask(0)


def test_augment_matrix_example():
    m = np.array([[0.2, 0.8], [0.6, 0.4]])
    mt = augment_matrix(m)
    assert mt.shape == (4, 4)
    np.testing.assert_array_equal(mt, mt.T)
    np.testing.assert_array_equal(mt[:2, :2], 0)
    np.testing.assert_array_equal(mt[2:, 2:], 0)
    assert mt[0, 2] == 0.2 and mt[1, 2] == 0.6
    np.testing.assert_array_equal(mt, oracles.augment(m))


def test_concat_modes():
    rng = nc.make_rng(1)
    w = _weights(rng, 4, 1)
    _, inter = attention(rng.standard_normal((2, 4)), *(2 * [rng.standard_normal((3, 4))]), w)
    z = augment(inter, "zero")
    np.testing.assert_array_equal(z.v_tilde[:2], 0)
    q = augment(inter, "query")
    np.testing.assert_array_equal(q.v_tilde[:2], inter.q_proj)
    a = augment(inter, "noise", nc.make_rng(5))
    b = augment(inter, "noise", nc.make_rng(5))
    np.testing.assert_array_equal(a.v_tilde, b.v_tilde)
    np.testing.assert_array_equal(a.v_tilde[2:], inter.v_proj)
    with pytest.raises(ValueError):
        augment(inter, "noise")
    with pytest.raises(ValueError):
        augment(inter, "bogus")


@pytest.mark.parametrize("mode", ["query", "zero", "noise"])
def test_query_block_equivalence_50_cases(mode):
    for seed in range(50):
        rng = nc.make_rng(100 + seed)
        n = int(rng.choice([1, 2, 4]))
        d = n * int(rng.integers(1, 4))
        n1, n2 = int(rng.integers(1, 7)), int(rng.integers(1, 7))
        w = _weights(rng, d, n)
        q, kv = rng.standard_normal((n1, d)), rng.standard_normal((n2, d))
        _, inter = attention(q, kv, kv, w)
        aug = augment(inter, mode, rng)
        _, _, m_avg = oracles.attention(q, kv, kv, w.w_q, w.w_k, w.w_v, w.w_o, n)
        top = (aug.m_tilde @ aug.v_tilde)[:n1]
        np.testing.assert_allclose(top, m_avg @ (kv @ w.w_v), atol=1e-12, rtol=0)


def test_single_head_output_is_m_v_wv_wo():
    rng = nc.make_rng(3)
    w = _weights(rng, 6, 1)
    q, kv = rng.standard_normal((4, 6)), rng.standard_normal((3, 6))
    out, inter = attention(q, kv, kv, w)
    np.testing.assert_allclose(out, inter.m_avg @ kv @ w.w_v @ w.w_o, atol=1e-12, rtol=0)
    np.testing.assert_allclose(averaged_output(inter), out, atol=1e-12, rtol=0)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from([1, 2, 4]), st.integers(1, 6), st.integers(1, 6))
def test_rows_stochastic_and_augmented_symmetric(seed, n, n1, n2):
    rng = nc.make_rng(seed)
    d = 2 * n
    w = _weights(rng, d, n)
    _, inter = attention(rng.standard_normal((n1, d)) * 5, *(2 * [rng.standard_normal((n2, d)) * 5]), w)
    for m in inter.heads:
        assert np.abs(m.sum(-1) - 1).max() < 1e-12
    mt = augment(inter).m_tilde
    np.testing.assert_array_equal(mt, mt.T)


def test_shape_and_head_errors():
    rng = nc.make_rng(0)
    with pytest.raises(ValueError, match="divisible"):
        AttentionWeights.random(rng, 6, 6, 4)
    w = _weights(rng, 4, 2)
    with pytest.raises(nc.ShapeError):
        attention(np.zeros((2, 3)), np.zeros((2, 4)), np.zeros((2, 4)), w)
    with pytest.raises(nc.ShapeError):
        attention(np.zeros((2, 4)), np.zeros((3, 4)), np.zeros((3, 4)), w, np.ones((2, 2), bool))


def test_batched_attention_matches_per_example():
    rng = nc.make_rng(4)
    w = _weights(rng, 4, 2)
    x = rng.standard_normal((3, 5, 4))
    out, inter = attention(x, x, x, w, causal_mask(5))
    for b in range(3):
        o, i = attention(x[b], x[b], x[b], w, causal_mask(5))
        np.testing.assert_allclose(out[b], o, atol=1e-14)
        np.testing.assert_allclose(inter.m_avg[b], i.m_avg, atol=1e-15)
    assert ag.value(augment(inter).m_tilde).shape == (3, 10, 10)
