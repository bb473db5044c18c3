import numpy as np
import pytest
from hypothesis import given, strategies as st

from vsa.dense import dense_backward, dense_forward
from vsa.gradcheck import numerical_grad, rel_error


def qkv(rng, shape, dtype=np.float64):
    return tuple(rng.standard_normal(shape).astype(dtype) for _ in range(3))


def naive_attention(q, k, v, mask=None):
    """Per-row loop oracle, no max subtraction tricks shared with the library."""
    b, h, l, d = q.shape
    o = np.zeros_like(q)
    for bi in range(b):
        for hi in range(h):
            for i in range(l):
                s = [float(q[bi, hi, i] @ k[bi, hi, j]) / np.sqrt(d) for j in range(k.shape[2])]
                w = np.array([np.exp(x) if mask is None or mask[i, j] else 0.0 for j, x in enumerate(s)])
                o[bi, hi, i] = (w / w.sum()) @ v[bi, hi]
    return o


def test_matches_naive(rng):
    q, k, v = qkv(rng, (1, 2, 12, 3))
    mask = rng.random((12, 12)) < 0.5
    mask[np.arange(12), np.arange(12)] = True
    o, _ = dense_forward(q, k, v, mask)
    assert np.allclose(o, naive_attention(q, k, v, mask), atol=1e-12)


def test_single_token_returns_v(rng):
    q, k, v = qkv(rng, (2, 3, 1, 4))
    o, _ = dense_forward(q, k, v)
    assert np.array_equal(o, v)


def test_identical_keys_uniform(rng):
    q, _, v = qkv(rng, (1, 1, 6, 4))
    k = np.broadcast_to(rng.standard_normal(4), (1, 1, 6, 4)).copy()
    o, _ = dense_forward(q, k, v)
    assert np.allclose(o, np.broadcast_to(v.mean(axis=2, keepdims=True), o.shape), atol=1e-12)


def test_one_key_per_query(rng):
    q, k, v = qkv(rng, (1, 1, 5, 4))
    perm = rng.permutation(5)
    mask = np.zeros((5, 5), dtype=bool)
    mask[np.arange(5), perm] = True
    o, _ = dense_forward(q, k, v, mask)
    assert np.array_equal(o[0, 0], v[0, 0, perm])


def test_all_true_mask_bitwise(rng):
    q, k, v = qkv(rng, (2, 2, 16, 8), np.float32)
    o1, _ = dense_forward(q, k, v)
    o2, _ = dense_forward(q, k, v, np.ones((16, 16), dtype=bool))
    assert np.array_equal(o1, o2)


def test_probs_rows_sum_to_one(rng):
    q, k, v = qkv(rng, (2, 2, 32, 8), np.float32)
    _, _, p = dense_forward(q, k, v, return_probs=True)
    assert np.abs(p.sum(-1) - 1).max() < 1e-6


def test_fully_masked_row_error(rng):
    q, k, v = qkv(rng, (1, 1, 4, 2))
    mask = np.ones((4, 4), dtype=bool)
    mask[2] = False
    with pytest.raises(ValueError):
        dense_forward(q, k, v, mask)


def test_nan_input_error(rng):
    q, k, v = qkv(rng, (1, 1, 4, 2))
    q[0, 0, 1, 1] = np.nan
    with pytest.raises(ValueError):
        dense_forward(q, k, v)


def test_backward_shape_mismatch(rng):
    q, k, v = qkv(rng, (1, 1, 4, 2))
    o, s = dense_forward(q, k, v)
    with pytest.raises(ValueError):
        dense_backward(q, k, v, None, np.zeros((1, 1, 5, 2)), s)


def test_zero_upstream_gives_zero_grads(rng):
    q, k, v = qkv(rng, (1, 2, 8, 4))
    o, s = dense_forward(q, k, v)
    for g in dense_backward(q, k, v, None, np.zeros_like(o), s):
        assert not g.any()


def test_single_token_grads(rng):
    q, k, v = qkv(rng, (1, 1, 1, 4))
    o, s = dense_forward(q, k, v)
    do = rng.standard_normal(o.shape)
    dq, dk, dv = dense_backward(q, k, v, None, do, s)
    assert np.allclose(dv, do)
    assert np.allclose(dq, 0) and np.allclose(dk, 0)


def _fd_check(rng, shape, mask=None, tol=1e-6):
    q, k, v = qkv(rng, shape)
    w = rng.standard_normal(shape)

    def loss():
        return float((dense_forward(q, k, v, mask)[0] * w).sum())

    o, s = dense_forward(q, k, v, mask)
    grads = dense_backward(q, k, v, mask, w, s)
    for x, g in zip((q, k, v), grads):
        assert rel_error(g, numerical_grad(loss, x)) < tol


def test_gradcheck_small(rng):
    _fd_check(rng, (1, 1, 8, 4), tol=1e-6)


def test_gradcheck_masked(rng):
    mask = rng.random((16, 16)) < 0.4
    mask[np.arange(16), np.arange(16)] = True
    _fd_check(rng, (2, 2, 16, 4), mask, tol=1e-6)


@pytest.mark.slow
def test_gradcheck_largest(rng):
    _fd_check(rng, (2, 2, 64, 16), tol=1e-5)


def test_chunked_rows_match(rng, monkeypatch):
    import vsa.dense as dense

    q, k, v = qkv(rng, (1, 2, 40, 4))
    o_ref, s_ref = dense_forward(q, k, v)
    g_ref = dense_backward(q, k, v, None, o_ref, s_ref)
    monkeypatch.setattr(dense, "SCORE_BUDGET", 2 * 40 * 7)
    o, s = dense_forward(q, k, v)
    assert np.allclose(o, o_ref, atol=1e-14)
    for a, b in zip(dense_backward(q, k, v, None, o, s), g_ref):
        assert np.allclose(a, b, atol=1e-13)


@given(st.integers(0, 2**32 - 1))
def test_permutation_equivariance(seed):
    rng = np.random.default_rng(seed)
    q, k, v = qkv(rng, (1, 2, 10, 3))
    mask = rng.random((10, 10)) < 0.6
    mask[np.arange(10), rng.integers(0, 10, 10)] = True
    perm = rng.permutation(10)
    o, _ = dense_forward(q, k, v, mask)
    op, _ = dense_forward(q[:, :, perm], k[:, :, perm], v[:, :, perm], mask[perm][:, perm])
    assert np.allclose(op, o[:, :, perm], atol=1e-12)
