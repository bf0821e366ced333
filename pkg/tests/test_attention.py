import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from teformer import numerics as nx
from teformer.attention import (AttentionKind, AttentionLayer, qkta_forward, sdsa_forward, ssa_forward, ssa_scores,
                                tim_update, token_mask)
from teformer.errors import ContractError, DimensionError
from teformer.neurons import LifParams, lif_sequence
from teformer.tea import TemporalEnhancement

LIF = LifParams()


def binary(rng, shape, p=0.5):
    return (rng.random(shape) < p).astype(np.float32)


def ssa_oracle(Q, K, V, scale=0.125):
    T, B, N, D = Q.shape
    A = np.zeros((T, B, N, D))
    for t, b, n, d in itertools.product(range(T), range(B), range(N), range(D)):
        for m in range(N):
            qk = sum(Q[t, b, n, e] * K[t, b, m, e] for e in range(D))
            A[t, b, n, d] += qk * V[t, b, m, d]
    return A * scale


def test_ssa_examples():
    Z = np.zeros((2, 1, 3, 4))
    ones = np.ones((2, 1, 3, 4))
    assert not ssa_forward(Z, ones, ones, LIF).data.any()
    one = np.ones((1, 1, 1, 1))
    assert ssa_scores(one, one, one).data.item() == 0.125
    assert ssa_forward(one, one, one, LIF).data.item() == 0.0


@pytest.mark.parametrize("seed", range(8))
def test_ssa_scores_match_brute_force(seed):
    rng = np.random.default_rng(seed)
    N, D = rng.integers(1, 9, size=2)
    Q, K, V = (binary(rng, (2, 2, N, D)) for _ in range(3))
    A = ssa_scores(Q, K, V).data
    np.testing.assert_array_equal(A, ssa_oracle(Q, K, V).astype(np.float32))
    assert np.all(np.mod(A / 0.125, 1) == 0)


def test_ssa_heads_are_independent_blocks():
    rng = np.random.default_rng(1)
    Q, K, V = (binary(rng, (1, 1, 5, 4)) for _ in range(3))
    A = ssa_scores(Q, K, V, heads=2).data
    for h in range(2):
        sl = slice(2 * h, 2 * h + 2)
        np.testing.assert_array_equal(A[..., sl], ssa_oracle(Q[..., sl], K[..., sl], V[..., sl]))


def test_head_mismatch_raises():
    x = np.zeros((1, 1, 2, 6))
    with pytest.raises(DimensionError):
        ssa_scores(x, x, x, heads=4)
    with pytest.raises(DimensionError):
        ssa_scores(x, np.zeros((1, 1, 3, 6)), x)


def test_sdsa_examples():
    rng = np.random.default_rng(2)
    V = binary(rng, (2, 1, 3, 4))
    assert not sdsa_forward(np.zeros((2, 1, 3, 4)), binary(rng, (2, 1, 3, 4)), V, LIF).data.any()
    out = sdsa_forward(binary(rng, (2, 1, 3, 4)), binary(rng, (2, 1, 3, 4)), V, LIF).data
    assert np.all(out <= V * 0.125)


def test_sdsa_score_is_count_over_keys():
    # one query matching all N keys on 2 channels: score = N * 2 -> 6 for N=3
    Q = np.zeros((1, 1, 3, 4), dtype=np.float32)
    Q[0, 0, 0, :2] = 1
    K = np.zeros_like(Q)
    K[..., :2] = 1
    V = np.ones_like(Q)
    out = sdsa_forward(Q, K, V, LIF).data
    # H = 6 / 2 = 3 >= 1, so only the first query row passes V through
    np.testing.assert_array_equal(out[0, 0, :, 0], [0.125, 0, 0])


def test_qkta_example():
    Q = np.array([[1, 0, 1], [0, 0, 0]], dtype=np.float32).reshape(1, 1, 2, 3)
    K = np.array([[1, 1, 0], [0, 1, 1]], dtype=np.float32).reshape(1, 1, 2, 3)
    np.testing.assert_array_equal(token_mask(Q, LIF).data.reshape(-1), [1, 0])
    np.testing.assert_array_equal(qkta_forward(Q, K, LIF).data.reshape(2, 3), [[1, 1, 0], [0, 0, 0]])


def test_qkta_saturated_mask_returns_keys():
    rng = np.random.default_rng(3)
    K = binary(rng, (3, 2, 4, 6))
    np.testing.assert_array_equal(qkta_forward(np.ones_like(K), K, LIF).data, K)


def test_qkta_mask_is_fresh_each_step():
    # row sum 1 gives H = 0.5 at every step; a carried membrane would fire at step 2
    Q = np.zeros((3, 1, 1, 4), dtype=np.float32)
    Q[..., 0] = 1
    assert not token_mask(Q, LIF).data.any()


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2 ** 31), st.sampled_from([1, 2]))
def test_qkta_rows_are_key_rows_or_zero(seed, heads):
    rng = np.random.default_rng(seed)
    Q, K = binary(rng, (2, 2, 5, 4)), binary(rng, (2, 2, 5, 4))
    out = qkta_forward(Q, K, LIF, heads).data
    dh = 4 // heads
    for h in range(heads):
        o, k = out[..., h * dh:(h + 1) * dh], K[..., h * dh:(h + 1) * dh]
        same = np.all(o == k, axis=-1)
        zero = np.all(o == 0, axis=-1)
        assert np.all(same | zero)


def test_tim_examples():
    rng = np.random.default_rng(4)
    Q = rng.random((4, 3))
    ident = lambda x: x  # noqa: E731
    with nx.precision(np.float64):
        np.testing.assert_allclose(tim_update(Q, 0.0, ident).data, Q)
        np.testing.assert_allclose(tim_update(Q[:2], 0.5, ident).data[1], 0.5 * Q[1] + 0.5 * Q[0])
        np.testing.assert_allclose(tim_update(Q, 1.0, ident).data, np.tile(Q[0], (4, 1)))
    with pytest.raises(ContractError):
        tim_update(Q, 1.5, ident)


def tim_closed_form(Q, a):
    out = np.empty_like(Q)
    for t in range(Q.shape[0]):
        out[t] = a ** t * Q[0] + (1 - a) * sum(a ** (t - j) * Q[j] for j in range(1, t + 1))
    return out


@pytest.mark.parametrize("alpha", [0.0, 0.5, 1.0, 0.3])
@pytest.mark.parametrize("T", [1, 2, 5, 8])
def test_tim_matches_closed_form(alpha, T):
    Q = np.random.default_rng(T).integers(0, 2, (T, 2, 3)).astype(np.float64)
    with nx.precision(np.float64):
        out = tim_update(Q, alpha, lambda x: x).data
    np.testing.assert_allclose(out, tim_closed_form(Q, alpha), atol=1e-6)


@pytest.mark.parametrize("kind", ["ssa", "sdsa", "qkta", "tim"])
@pytest.mark.parametrize("with_tea", [False, True])
def test_layer_does_not_mix_batch(kind, with_tea):
    rng = np.random.default_rng(5)
    tea = TemporalEnhancement("t") if with_tea else None
    layer = AttentionLayer("a", 8, AttentionKind(kind, heads=2), rng, LIF, tea=tea)
    layer.eval()
    x = binary(rng, (4, 5, 6, 8))
    perm = rng.permutation(5)
    with nx.no_grad():
        out = layer(nx.Tensor(x)).data
        out_p = layer(nx.Tensor(x[:, perm])).data
    np.testing.assert_array_equal(out_p, out[:, perm])
    assert set(np.unique(out)) <= {0.0, 1.0}


def test_tea_on_qkta_feeds_the_key_branch():
    rng = np.random.default_rng(6)
    tea = TemporalEnhancement("t", theta0=40.0)  # alpha -> 1: mask is the identity
    a = AttentionLayer("a", 8, AttentionKind("qkta"), np.random.default_rng(0), LIF, tea=tea)
    b = AttentionLayer("a", 8, AttentionKind("qkta"), np.random.default_rng(0), LIF)
    x = binary(rng, (4, 2, 3, 8))
    np.testing.assert_array_equal(a(nx.Tensor(x)).data, b(nx.Tensor(x)).data)
    assert a.v is None


def test_layer_gradients_reach_theta():
    rng = np.random.default_rng(7)
    tea = TemporalEnhancement("t")
    layer = AttentionLayer("a", 8, AttentionKind("qkta"), rng, LIF.relaxed(), tea=tea)
    x = rng.random((4, 2, 3, 8))
    report = nx.grad_check(lambda: nx.mean(layer(nx.Tensor(x))), layer.parameters())
    assert report.max_rel_err < 1e-4
    assert "t.theta" in report.per_param


def test_spiking_output_binary_after_lif():
    s = lif_sequence(ssa_scores(*(np.ones((2, 1, 16, 4)),) * 3), LIF).data
    assert set(np.unique(s)) <= {0.0, 1.0}
