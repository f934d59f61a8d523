import math

import mpmath
import numpy as np
import pytest

from lafss.gradcheck import gradient_check
from lafss.nn import AttentionConfig, ConfigError, MultiHeadAttention
from lafss.tensor import (
    ShapeError,
    Tensor,
    conv2d,
    conv_transpose2d,
    debug_mode,
    global_average_pool,
    layer_norm,
    matmul,
    precision,
    resize_bilinear,
    softmax,
)


def t64(a, grad=True):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad, dtype=np.float64)


def central_diff(f, x, h=1e-5):
    g = np.zeros_like(x)
    flat, gf = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f(x)
        flat[i] = old - h
        fm = f(x)
        flat[i] = old
        gf[i] = (fp - fm) / (2 * h)
    return g


# -- matmul ------------------------------------------------------------------------


def test_matmul_identity():
    out = matmul(Tensor([[1, 0], [0, 1]]), Tensor([[3], [4]]))
    np.testing.assert_array_equal(out.data, [[3], [4]])


def test_matmul_hand_expansion():
    assert matmul(Tensor([[1, 2]]), Tensor([[3], [4]])).data.item() == 11


def test_matmul_grad_matches_finite_differences():
    rng = np.random.default_rng(0)
    a_np, b_np = rng.standard_normal((4, 5)), rng.standard_normal((5, 3))
    a, b = t64(a_np), t64(b_np)
    matmul(a, b).sum().backward()
    np.testing.assert_allclose(a.grad, np.ones((4, 3)) @ b_np.T, rtol=1e-12)
    numeric = central_diff(lambda x: float((x @ b_np).sum()), a_np.copy())
    np.testing.assert_allclose(a.grad, numeric, rtol=1e-4)


def test_matmul_shape_error_names_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_matmul_broadcast_batch_grad():
    rng = np.random.default_rng(1)
    a = t64(rng.standard_normal((3, 2, 4)))
    b = t64(rng.standard_normal((4, 5)))
    rep = gradient_check(lambda: (matmul(a, b) ** 2).sum(), [a, b])
    assert rep.passed, rep


# -- softmax -----------------------------------------------------------------------


def test_softmax_uniform():
    np.testing.assert_allclose(softmax(Tensor([0.0, 0.0, 0.0])).data, [1 / 3] * 3, rtol=1e-6)


def test_softmax_no_overflow():
    out = softmax(Tensor([1000.0, 0.0])).data
    assert np.isfinite(out).all()
    assert out[0] == pytest.approx(1.0) and out[1] == pytest.approx(0.0, abs=1e-30)


def test_softmax_matches_high_precision_oracle():
    mpmath.mp.dps = 40
    es = [mpmath.e ** k for k in (1, 2, 3)]
    z = sum(es)
    expected = [float(e / z) for e in es]
    with precision(np.float64):
        out = softmax(Tensor([1.0, 2.0, 3.0])).data
    np.testing.assert_allclose(out, expected, rtol=1e-14)


def test_softmax_rows_sum_to_one():
    x = Tensor(np.random.default_rng(2).standard_normal((7, 11)) * 10)
    np.testing.assert_allclose(softmax(x, axis=-1).data.sum(-1), 1.0, atol=1e-6)


def test_softmax_nan_detected_in_debug_mode():
    with debug_mode(), pytest.raises(FloatingPointError):
        softmax(Tensor([np.nan, 1.0]))


def test_masked_softmax_excludes_and_zeroes_empty_rows():
    x = Tensor([[1.0, 5.0, 2.0], [3.0, 3.0, 3.0]])
    mask = np.array([[True, False, True], [False, False, False]])
    out = softmax(x, mask=mask).data
    assert out[0, 1] == 0.0
    np.testing.assert_allclose(out[0, [0, 2]], np.exp([1, 2]) / np.exp([1, 2]).sum(), rtol=1e-6)
    np.testing.assert_array_equal(out[1], 0.0)


# -- attention ---------------------------------------------------------------------


def _mha(d=4, heads=2, seed=0):
    with precision(np.float64):
        return MultiHeadAttention(AttentionConfig(d, heads), np.random.default_rng(seed))


def _randomise(mha, rng, scale=0.5):
    for p in mha.parameters():
        p.data = rng.standard_normal(p.shape) * scale


def test_attention_single_key_returns_value_projection():
    rng = np.random.default_rng(3)
    mha = _mha()
    _randomise(mha, rng)
    q = t64(rng.standard_normal((5, 4)), grad=False)
    kv = t64(rng.standard_normal((1, 4)), grad=False)
    out = mha(q, kv, kv).data
    v = kv.data @ mha.v_proj.weight.data + mha.v_proj.bias.data
    expected = v @ mha.out_proj.weight.data + mha.out_proj.bias.data
    np.testing.assert_allclose(out, np.repeat(expected, 5, axis=0), rtol=1e-12)


def test_attention_key_permutation_invariance():
    rng = np.random.default_rng(4)
    mha = _mha()
    _randomise(mha, rng)
    q = t64(rng.standard_normal((3, 4)), grad=False)
    k = rng.standard_normal((6, 4))
    v = rng.standard_normal((6, 4))
    perm = rng.permutation(6)
    a = mha(q, t64(k, False), t64(v, False)).data
    b = mha(q, t64(k[perm], False), t64(v[perm], False)).data
    np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-14)


def test_attention_matches_per_head_brute_force():
    rng = np.random.default_rng(5)
    mha = _mha()
    _randomise(mha, rng)
    q = rng.standard_normal((3, 4))
    k = rng.standard_normal((4, 4))
    v = rng.standard_normal((4, 4))
    out = mha(t64(q, False), t64(k, False), t64(v, False)).data

    def proj(lin, x):
        return x @ lin.weight.data + lin.bias.data

    Q, K, V = proj(mha.q_proj, q), proj(mha.k_proj, k), proj(mha.v_proj, v)
    heads = []
    for h in range(2):
        sl = slice(2 * h, 2 * h + 2)
        rows = []
        for i in range(3):
            s = [sum(Q[i, sl] * K[j, sl]) / math.sqrt(2) for j in range(4)]
            w = [math.exp(x) for x in s]
            z = sum(w)
            rows.append(sum(w[j] / z * V[j, sl] for j in range(4)))
        heads.append(np.array(rows))
    expected = proj(mha.out_proj, np.concatenate(heads, axis=1))
    np.testing.assert_allclose(out, expected, rtol=1e-10)


def test_attention_fully_masked_row_is_zero():
    rng = np.random.default_rng(6)
    mha = _mha()
    _randomise(mha, rng)
    q = t64(rng.standard_normal((2, 3, 4)), grad=False)
    k = t64(rng.standard_normal((2, 5, 4)), grad=False)
    mask = np.array([[True] * 5, [False] * 5])
    out = mha(q, k, k, mask=mask).data
    np.testing.assert_array_equal(out[1], 0.0)
    assert np.abs(out[0]).sum() > 0


def test_attention_config_divisibility():
    with pytest.raises(ConfigError):
        AttentionConfig(embed_dim=10, num_heads=4)


def test_attention_gradcheck():
    rng = np.random.default_rng(7)
    mha = _mha()
    _randomise(mha, rng)
    q = t64(rng.standard_normal((3, 4)))
    k = t64(rng.standard_normal((5, 4)))
    mask = np.array([True, True, False, True, True])
    rep = gradient_check(lambda: (mha(q, k, k, mask=mask) ** 2).sum(), [q, k] + mha.parameters())
    assert rep.passed, rep


# -- layer norm ---------------------------------------------------------------------


def test_layer_norm_constant_vector_is_zero():
    out = layer_norm(Tensor([2.0, 2.0, 2.0]), Tensor(np.ones(3)), Tensor(np.zeros(3)))
    np.testing.assert_array_equal(out.data, 0.0)


def test_layer_norm_hand_value():
    # mean 2, var 1: (x - 2) / sqrt(1 + 1e-5)
    out = layer_norm(Tensor([1.0, 3.0]), Tensor(np.ones(2)), Tensor(np.zeros(2)))
    expected = np.array([-1.0, 1.0]) / math.sqrt(1 + 1e-5)
    np.testing.assert_allclose(out.data, expected, atol=1e-4)
    np.testing.assert_allclose(out.data, [-1, 1], atol=1e-4)


def test_layer_norm_gradcheck():
    rng = np.random.default_rng(8)
    x = t64(rng.standard_normal((3, 6)))
    g = t64(rng.standard_normal(6))
    b = t64(rng.standard_normal(6))
    w = rng.standard_normal((3, 6))
    rep = gradient_check(lambda: (layer_norm(x, g, b) * w).sum(), [x, g, b])
    assert rep.worst < 1e-4, rep


# -- convolutions ----------------------------------------------------------------------


def naive_conv(x, w, stride, pad):
    B, C, H, W = x.shape
    O, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    Ho = (H + 2 * pad - kh) // stride + 1
    Wo = (W + 2 * pad - kw) // stride + 1
    out = np.zeros((B, O, Ho, Wo))
    for b in range(B):
        for o in range(O):
            for i in range(Ho):
                for j in range(Wo):
                    out[b, o, i, j] = np.sum(
                        xp[b, :, i * stride : i * stride + kh, j * stride : j * stride + kw] * w[o]
                    )
    return out


def test_conv_1x1_ones_sums_channels():
    x = np.random.default_rng(9).standard_normal((1, 3, 4, 4)).astype(np.float32)
    out = conv2d(Tensor(x), Tensor(np.ones((1, 3, 1, 1))))
    np.testing.assert_allclose(out.data[0, 0], x[0].sum(0), rtol=1e-6)


def test_conv_impulse_response():
    x = np.zeros((1, 1, 5, 5))
    x[0, 0, 2, 2] = 1
    out = conv2d(Tensor(x), Tensor(np.ones((1, 1, 3, 3))), padding=1).data[0, 0]
    expected = np.zeros((5, 5))
    expected[1:4, 1:4] = 1
    np.testing.assert_array_equal(out, expected)


@pytest.mark.parametrize("stride,pad,k", [(1, 1, 3), (2, 1, 4), (2, 0, 2), (1, 0, 1)])
def test_conv_matches_loop_oracle(stride, pad, k):
    rng = np.random.default_rng(10)
    x = rng.standard_normal((2, 3, 8, 8)).astype(np.float32)
    w = rng.standard_normal((4, 3, k, k)).astype(np.float32)
    out = conv2d(Tensor(x), Tensor(w), stride=stride, padding=pad).data
    ref = naive_conv(x.astype(np.float64), w.astype(np.float64), stride, pad)
    assert np.abs(out - ref).max() < 1e-5


def test_conv_non_integral_output_rejected():
    with pytest.raises(ShapeError):
        conv2d(Tensor(np.ones((1, 1, 6, 6))), Tensor(np.ones((1, 1, 3, 3))), stride=2)


@pytest.mark.parametrize("stride,pad,k", [(1, 1, 3), (2, 0, 2), (2, 1, 3)])
def test_conv_gradcheck(stride, pad, k):
    rng = np.random.default_rng(11)
    x = t64(rng.standard_normal((1, 2, 5 if k == 3 else 4, 5 if k == 3 else 4)))
    w = t64(rng.standard_normal((3, 2, k, k)))
    b = t64(rng.standard_normal(3))
    rep = gradient_check(lambda: (conv2d(x, w, b, stride, pad) ** 2).sum(), [x, w, b])
    assert rep.passed, rep


def test_transposed_conv_ones_kernel():
    out = conv_transpose2d(Tensor(np.full((1, 1, 1, 1), 7.0)), Tensor(np.ones((1, 1, 2, 2))), stride=2)
    np.testing.assert_array_equal(out.data, np.full((1, 1, 2, 2), 7.0))


@pytest.mark.parametrize("stride,k,size", [(2, 2, 8), (2, 3, 7), (1, 3, 6)])
def test_adjoint_identity(stride, k, size):
    rng = np.random.default_rng(12)
    with precision(np.float64):
        x = Tensor(rng.standard_normal((2, 3, size, size)))
        w = Tensor(rng.standard_normal((4, 3, k, k)))
        y_shape = conv2d(x, w, stride=stride).shape
        y = Tensor(rng.standard_normal(y_shape))
        lhs = float((conv2d(x, w, stride=stride).data * y.data).sum())
        back = conv_transpose2d(y, w, stride=stride)
        assert back.shape == x.shape
        rhs = float((x.data * back.data).sum())
    assert abs(lhs - rhs) < 1e-5 * max(1.0, abs(lhs))


def test_transposed_conv_is_conv_input_gradient():
    rng = np.random.default_rng(13)
    x = t64(rng.standard_normal((1, 2, 7, 7)))
    w_np = rng.standard_normal((3, 2, 3, 3))
    y = rng.standard_normal((1, 3, 3, 3))
    (conv2d(x, t64(w_np, False), stride=2) * t64(y, False)).sum().backward()
    np.testing.assert_allclose(x.grad, conv_transpose2d(t64(y, False), t64(w_np, False), stride=2).data, rtol=1e-12)


def test_two_stride2_layers_upscale_quarter():
    # H/16 -> H/4 for H = 1024
    x = Tensor(np.ones((1, 2, 64, 64)))
    w = Tensor(np.ones((2, 2, 2, 2)))
    out = conv_transpose2d(conv_transpose2d(x, w, stride=2), w, stride=2)
    assert out.shape[-2:] == (1024 // 4, 1024 // 4)


@pytest.mark.parametrize("k", [2, 3])
def test_transposed_conv_gradcheck(k):
    rng = np.random.default_rng(14)
    x = t64(rng.standard_normal((1, 2, 3, 3)))
    w = t64(rng.standard_normal((2, 3, k, k)))
    b = t64(rng.standard_normal(3))
    rep = gradient_check(lambda: (conv_transpose2d(x, w, b, 2) ** 2).sum(), [x, w, b])
    assert rep.passed, rep


# -- pooling, resize -----------------------------------------------------------------


def test_gap_constant_and_mean():
    assert global_average_pool(Tensor(np.full((1, 1, 3, 3), 2.5))).data.item() == 2.5
    assert global_average_pool(Tensor([[[[1.0, 3.0], [5.0, 7.0]]]])).data.item() == 4.0


def test_gap_gradient_uniform():
    x = t64(np.random.default_rng(15).standard_normal((1, 2, 3, 4)))
    global_average_pool(x).sum().backward()
    np.testing.assert_allclose(x.grad, 1 / 12)
    numeric = central_diff(lambda a: float(a.mean(axis=(-2, -1)).sum()), x.data.copy())
    np.testing.assert_allclose(numeric, 1 / 12, rtol=1e-8)


def test_resize_bilinear_piecewise_constant_nearest():
    x = np.zeros((1, 4, 4))
    x[0, :2, :2] = 1
    out = resize_bilinear(Tensor(x), (8, 8)).data
    assert out[0, 0, 0] == 1 and out[0, 7, 7] == 0
    np.testing.assert_allclose(out.sum(), 16, rtol=1e-6)


# -- gradient_check itself -------------------------------------------------------------------


def test_gradcheck_quadratic():
    x = t64([1.0, 2.0])
    rep = gradient_check(lambda: (x * x).sum(), [x])
    np.testing.assert_allclose(x.grad, [2, 4])
    assert rep.worst < 1e-8


def test_gradcheck_detects_wrong_gradient():
    x = t64([1.0, 2.0])

    def bad():
        out = (x * x).sum()
        orig = out._backward
        out._backward = lambda g: tuple(-p for p in orig(g))
        return out

    assert not gradient_check(bad, [x]).passed


def test_gradcheck_flags_non_finite():
    x = t64([-1.0, 2.0])
    assert not gradient_check(lambda: x.sqrt().sum(), [x]).passed


def test_gradcheck_requires_float64():
    with pytest.raises(TypeError):
        gradient_check(lambda: Tensor([1.0]).sum(), [Tensor([1.0], requires_grad=True)])


# -- tensor invariants ----------------------------------------------------------------------


def test_zero_axis_rejected():
    with pytest.raises(ShapeError):
        Tensor(np.zeros((0, 3)))


def test_grad_has_data_shape_and_is_finite():
    rng = np.random.default_rng(16)
    a = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
    b = Tensor(rng.standard_normal((4,)), requires_grad=True)
    ((a * b).tanh().exp().sum() / 3.0).backward()
    assert a.grad.shape == a.shape and b.grad.shape == b.shape
    assert np.isfinite(a.grad).all() and np.isfinite(b.grad).all()


def test_getitem_accumulates_duplicate_indices():
    x = t64([1.0, 2.0, 3.0])
    x[np.array([0, 0, 2])].sum().backward()
    np.testing.assert_array_equal(x.grad, [2, 0, 1])


def test_float32_default():
    assert Tensor([1.0]).dtype == np.float32
    with precision(np.float64):
        assert Tensor([1.0]).dtype == np.float64
