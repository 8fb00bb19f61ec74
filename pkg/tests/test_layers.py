import itertools

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from cvggnet import layers as L
from cvggnet.autodiff import Parameter, Tape, Variable, add, backward, imag_part, real_part, reduce_sum
from cvggnet.gradcheck import LAYER_CASES, run_case
from cvggnet.tensor import ComplexTensor, RealTensor, ShapeError


def V(z):
    z = np.asarray(z, dtype=complex)
    return Variable(ComplexTensor(z.real, z.imag))


def P(z, name="p"):
    z = np.asarray(z, dtype=complex)
    return Parameter(ComplexTensor(z.real, z.imag), name)


def crandn(rng, shape):
    return rng.normal(size=shape) + 1j * rng.normal(size=shape)


# -- convolution -------------------------------------------------------------


def conv_oracle(x, w, b, stride, pad):
    """Per-output-pixel scalar complex multiply-accumulate."""
    n, cin, h, wd = x.shape
    cout, _, kh, kw = w.shape
    xp = np.zeros((n, cin, h + 2 * pad, wd + 2 * pad), complex)
    xp[:, :, pad:pad + h, pad:pad + wd] = x
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    out = np.zeros((n, cout, ho, wo), complex)
    for i, o, r, c in itertools.product(range(n), range(cout), range(ho), range(wo)):
        acc = complex(b[o])
        for ch, u, v in itertools.product(range(cin), range(kh), range(kw)):
            acc += complex(w[o, ch, u, v]) * complex(xp[i, ch, r * stride + u, c * stride + v])
        out[i, o, r, c] = acc
    return out


def run_conv(x, w, b=None, stride=1, pad=0):
    out = L.complex_conv2d(V(x), P(w), None if b is None else P(b), stride, pad)
    return out.value.to_complex()


def test_conv_identity_and_rotation(rng):
    x = crandn(rng, (2, 1, 4, 5))
    np.testing.assert_array_equal(run_conv(x, np.ones((1, 1, 1, 1))), x)
    np.testing.assert_allclose(run_conv(x, np.full((1, 1, 1, 1), 1j)), 1j * x, rtol=0, atol=0)


def test_conv_small_known_case():
    x = np.array([[1 + 1j, 2 + 0j], [0 - 1j, 1 + 2j]]).reshape(1, 1, 2, 2)
    w = np.full((1, 1, 2, 2), 1 + 1j)
    expected = sum((1 + 1j) * v for v in x.ravel())
    out = run_conv(x, w)
    assert out.shape == (1, 1, 1, 1)
    assert out[0, 0, 0, 0] == pytest.approx(expected, rel=1e-15)
    assert expected == 2 + 6j


@given(st.data())
def test_conv_matches_scalar_oracle(data):
    seed = data.draw(st.integers(0, 2**32 - 1))
    rng = np.random.default_rng(seed)
    n, cin, cout = (data.draw(st.integers(1, 3)) for _ in range(3))
    k = data.draw(st.integers(1, 3))
    h, w = data.draw(st.integers(k, 8)), data.draw(st.integers(k, 8))
    stride, pad = data.draw(st.integers(1, 2)), data.draw(st.integers(0, 1))
    x, wt, b = crandn(rng, (n, cin, h, w)), crandn(rng, (cout, cin, k, k)), crandn(rng, cout)
    got = run_conv(x, wt, b, stride, pad)
    ref = conv_oracle(x, wt, b, stride, pad)
    np.testing.assert_allclose(got, ref, rtol=1e-10, atol=1e-12)


def test_conv_rejects_bad_shapes(rng):
    with pytest.raises(ShapeError):
        run_conv(crandn(rng, (1, 2, 4, 4)), crandn(rng, (1, 3, 3, 3)))
    with pytest.raises(ShapeError):
        run_conv(crandn(rng, (1, 1, 2, 2)), crandn(rng, (1, 1, 3, 3)))


# -- batch normalization -----------------------------------------------------


def inv_sqrt_oracle(vrr, vri, vii):
    lam, q = np.linalg.eigh(np.array([[vrr, vri], [vri, vii]]))
    return q @ np.diag(lam ** -0.5) @ q.T


@given(st.floats(0.01, 10), st.floats(0.01, 10), st.floats(-0.99, 0.99))
def test_inv_sqrt_closed_form_matches_eigendecomposition(a, d, rho):
    b = rho * np.sqrt(a * d)
    w11, w12, w22, _, _ = L.inv_sqrt_2x2(a, b, d)
    np.testing.assert_allclose([[w11, w12], [w12, w22]], inv_sqrt_oracle(a, b, d), rtol=1e-9, atol=1e-12)


def _plain_state(c):
    return L.ComplexBNState.create(c, np.float64, affine=False)


def test_bn_constant_batch_gives_beta():
    st_ = L.ComplexBNState.create(2, np.float64)
    st_.beta.set_planes(np.array([0.5, -1.0]), np.array([2.0, 3.0]))
    x = np.full((4, 2, 3, 3), 1.5 - 0.5j)
    out = L.complex_batchnorm(V(x), st_, True).value.to_complex()
    np.testing.assert_allclose(out[:, 0], 0.5 + 2j, atol=1e-12)
    np.testing.assert_allclose(out[:, 1], -1.0 + 3j, atol=1e-12)


def test_bn_two_point_population_against_eigendecomposition():
    x = np.array([1 + 0j, -1 + 0j]).reshape(2, 1, 1, 1)
    out = L.complex_batchnorm(V(x), _plain_state(1), True).value.to_complex().ravel()
    eps = 1e-5
    w = inv_sqrt_oracle(1 + eps, 0.0, eps)
    expected = [complex(*(w @ [v.real, v.imag])) for v in (1 + 0j, -1 + 0j)]
    np.testing.assert_allclose(out, expected, rtol=1e-12)
    assert out[0].real == pytest.approx(1 / np.sqrt(1 + eps), rel=1e-12)


def test_bn_whitening_on_correlated_batch(rng):
    n, c = 16, 3
    base = rng.normal(size=(n, c, 4, 4))
    x = (2 * base + 1) + 1j * (0.3 * base + 0.5 * rng.normal(size=base.shape) - 2)
    out = L.complex_batchnorm(V(x), _plain_state(c), True).value.to_complex()
    for ch in range(c):
        z = out[:, ch].ravel()
        assert abs(z.mean()) < 1e-8
        cov = np.cov(np.stack([z.real, z.imag]), bias=True)
        v = np.cov(np.stack([x[:, ch].real.ravel(), x[:, ch].imag.ravel()]), bias=True)
        # exact: W V W with W = (V + eps I)^(-1/2)
        np.testing.assert_allclose(cov, v @ np.linalg.inv(v + 1e-5 * np.eye(2)), atol=1e-10)


def test_bn_whitening_is_identity_as_eps_vanishes(rng):
    st_ = L.ComplexBNState.create(2, np.float64, eps=1e-12, affine=False)
    x = crandn(rng, (16, 2, 4, 4)) * (0.5 + 2j) + 3
    out = L.complex_batchnorm(V(x), st_, True).value.to_complex()
    for ch in range(2):
        z = out[:, ch].ravel()
        np.testing.assert_allclose(np.cov(np.stack([z.real, z.imag]), bias=True), np.eye(2), atol=1e-9)


def test_bn_default_affine_init():
    st_ = L.ComplexBNState.create(4, np.float64)
    np.testing.assert_allclose(st_.gamma.re, 1 / np.sqrt(2))
    np.testing.assert_allclose(st_.gamma.im, 1 / np.sqrt(2))
    np.testing.assert_array_equal(st_.gamma_ri.re, 0)
    np.testing.assert_array_equal(st_.beta.value.to_complex(), 0)


def test_bn_running_stats_and_eval(rng):
    st_ = _plain_state(2)
    x = crandn(rng, (8, 2, 3, 3)) * 2 + (1 - 1j)
    L.complex_batchnorm(V(x), st_, True)
    mean = x.mean(axis=(0, 2, 3))
    np.testing.assert_allclose(st_.running_mean[0], 0.1 * mean.real)
    np.testing.assert_allclose(st_.running_mean[1], 0.1 * mean.imag)
    cr = x.real - mean.real[None, :, None, None]
    np.testing.assert_allclose(st_.running_cov[0], 0.9 + 0.1 * (cr ** 2).mean(axis=(0, 2, 3)))

    # eval uses running stats and leaves them alone
    before = st_.running_cov.copy()
    out = L.complex_batchnorm(V(x), st_, False).value.to_complex()
    np.testing.assert_array_equal(st_.running_cov, before)
    rm = st_.running_mean
    w = [inv_sqrt_oracle(st_.running_cov[0, c] + 1e-5, st_.running_cov[1, c], st_.running_cov[2, c] + 1e-5)
         for c in range(2)]
    c0 = x[:, 0] - (rm[0, 0] + 1j * rm[1, 0])
    ref = w[0][0, 0] * c0.real + w[0][0, 1] * c0.imag + 1j * (w[0][1, 0] * c0.real + w[0][1, 1] * c0.imag)
    np.testing.assert_allclose(out[:, 0], ref, rtol=1e-10)


def test_bn_running_cov_stays_valid(rng):
    st_ = _plain_state(2)
    for _ in range(20):
        L.complex_batchnorm(V(crandn(rng, (4, 2, 2, 2)) * rng.uniform(0.1, 5)), st_, True)
    vrr, vri, vii = st_.running_cov
    assert (vrr >= 0).all() and (vii >= 0).all()
    assert (vri ** 2 <= (vrr + st_.eps) * (vii + st_.eps)).all()


def test_bn_rejects_population_of_one():
    with pytest.raises(ShapeError):
        L.complex_batchnorm(V(np.ones((1, 2, 1, 1))), _plain_state(2), True)


# -- activations -------------------------------------------------------------


def act(z, kind, slope=None):
    return L.activation(V(z), kind, slope).value.to_complex()


def test_activation_examples():
    assert act([-1 - 2j], "crelu")[0] == 0
    assert act([-3 + 2j], "crelu")[0] == 2j
    assert act([0j], "ctanh")[0] == 0
    out = act([-1 + 1j], "celu")[0]
    assert out.real == pytest.approx(np.exp(-1) - 1, rel=1e-15) and out.imag == 1.0
    np.testing.assert_allclose(act([0.5 - 0.8j], "ctanh"), [np.tanh(0.5) + 1j * np.tanh(-0.8)])


def test_cprelu_per_channel_slope():
    layer = L.ActivationLayer("cprelu", 2, dtype=np.float64)
    np.testing.assert_array_equal(layer.slope.re, [0.25, 0.25])
    layer.slope.set_planes(np.array([0.25, 0.5]), np.zeros(2))
    x = np.array([[-2 - 4j, -2 + 4j]])
    out = layer(V(x)).value.to_complex()
    np.testing.assert_allclose(out, [[-0.5 - 1j, -1 + 4j]])


def test_crelu_kink_uses_right_hand_derivative():
    x = Variable(ComplexTensor(np.zeros(3), np.zeros(3)), requires_grad=True)
    with Tape():
        y = L.activation(x, "crelu")
        backward(reduce_sum(add(real_part(y), imag_part(y))))
    np.testing.assert_array_equal(x.grad.re, 1.0)
    np.testing.assert_array_equal(x.grad.im, 1.0)


# -- pooling -----------------------------------------------------------------


def pool(z, variant):
    out, idx = L.complex_maxpool(V(np.asarray(z).reshape(1, 1, 2, 2)), variant, 2)
    return out.value.to_complex().ravel()[0], idx


def test_amplitude_versus_area_on_fixed_window():
    window = [3 + 0j, 1 + 2j, 2 + 2j, 0 + 4j]
    assert pool(window, "amplitude")[0] == 4j
    assert pool(window, "area")[0] == 2 + 2j


def test_all_zero_window_picks_index_zero():
    for v in L.PoolVariant:
        out, idx = pool(np.zeros(4, complex), v)
        assert out == 0
        assert idx.re.ravel()[0] == 0 and idx.im.ravel()[0] == 0


def test_real_split_synthesizes_new_value():
    out, idx = pool([1 - 5j, 0, -2 + 3j, 0], "real-split")
    assert out == 1 + 3j
    assert (idx.re.ravel()[0], idx.im.ravel()[0]) == (0, 2)


def pool_oracle(x, variant):
    """Brute-force per-window argmax of the score, first row-major index on ties."""
    n, c, h, w = x.shape
    out = np.zeros((n, c, h // 2, w // 2), complex)
    for i, ch, r, col in itertools.product(range(n), range(c), range(h // 2), range(w // 2)):
        win = [x[i, ch, 2 * r + u, 2 * col + v] for u in range(2) for v in range(2)]
        if variant == "real-split":
            out[i, ch, r, col] = max(z.real for z in win) + 1j * max(z.imag for z in win)
            continue
        score = [np.hypot(z.real, z.imag) if variant == "amplitude" else abs(z.real * z.imag) for z in win]
        best = 0
        for k in range(1, 4):
            if score[k] > score[best]:
                best = k
        out[i, ch, r, col] = win[best]
    return out


@given(st.integers(0, 2**32 - 1), st.sampled_from(["amplitude", "area", "real-split"]))
def test_pooling_matches_oracle_with_ties(seed, variant):
    rng = np.random.default_rng(seed)
    # small integer grid makes ties frequent
    x = rng.integers(-2, 3, (2, 2, 4, 6)) + 1j * rng.integers(-2, 3, (2, 2, 4, 6))
    out = L.complex_maxpool(V(x), variant, 2)[0].value.to_complex()
    np.testing.assert_array_equal(out, pool_oracle(x, variant))


@given(st.integers(0, 2**32 - 1), st.sampled_from(["amplitude", "area"]),
       st.floats(1e-3, 1e3))
def test_selection_is_member_and_scale_equivariant(seed, variant, c):
    rng = np.random.default_rng(seed)
    x = crandn(rng, (1, 3, 4, 4))
    out, idx = L.complex_maxpool(V(x), variant, 2)
    z = out.value.to_complex()
    wins = np.lib.stride_tricks.sliding_window_view(x, (2, 2), axis=(2, 3))[:, :, ::2, ::2].reshape(1, 3, 2, 2, 4)
    assert np.all(np.any(wins == z[..., None], axis=-1))
    _, idx_scaled = L.complex_maxpool(V(x * c), variant, 2)
    np.testing.assert_array_equal(idx.re, idx_scaled.re)


def test_pool_backward_routes_to_winner():
    x = Variable(ComplexTensor.from_complex(np.array([3 + 0j, 1 + 2j, 2 + 2j, 0 + 4j]).reshape(1, 1, 2, 2)),
                 requires_grad=True)
    with Tape():
        backward(reduce_sum(real_part(L.complex_maxpool(x, "area", 2)[0])))
    np.testing.assert_array_equal(x.grad.re.ravel(), [0, 0, 1, 0])


def test_pool_window_too_large():
    with pytest.raises(ShapeError):
        L.complex_maxpool(V(np.ones((1, 1, 1, 1))), "area", 2)


# -- dense layers and heads --------------------------------------------------


def lin(x, w, b=None):
    return L.complex_linear(V(x), P(w), None if b is None else P(b)).value.to_complex()


def test_linear_examples(rng):
    x = crandn(rng, (3, 4))
    np.testing.assert_array_equal(lin(x, np.eye(4)), x)
    np.testing.assert_allclose(lin(x, 1j * np.eye(4)), 1j * x, atol=0)
    out = lin(np.array([[1 + 1j, 2 - 1j]]), np.array([[1 + 0j, 0 + 1j]]))
    assert out[0, 0] == 2 + 3j
    with pytest.raises(ShapeError):
        lin(x, np.eye(3))


def test_linear_matches_complex_matmul(rng):
    x, w, b = crandn(rng, (5, 7)), crandn(rng, (3, 7)), crandn(rng, 3)
    np.testing.assert_allclose(lin(x, w, b), x @ w.T + b, rtol=1e-12)


def test_amplitude_layer_examples():
    out = L.amplitude_layer(V([[1 + 0j, 0 + 2j, -3 - 4j]]))
    np.testing.assert_array_equal(out.data, [[1, 2, 5]])
    x = Variable(ComplexTensor(np.zeros((1, 2)), np.zeros((1, 2))), requires_grad=True)
    with Tape():
        backward(reduce_sum(L.amplitude_layer(x)))
    np.testing.assert_array_equal(x.grad.re, 0)
    np.testing.assert_array_equal(x.grad.im, 0)


def test_alternative_readouts():
    z = V([[3 + 4j]])
    assert L.amplitude_layer(z, "real").data[0, 0] == 3
    assert L.amplitude_layer(z, "abs2").data[0, 0] == 25
    with pytest.raises(ValueError):
        L.amplitude_layer(z, "phase")


def ce(z, labels):
    return float(L.softmax_cross_entropy(Variable(RealTensor(np.asarray(z, float))), labels).data)


def test_softmax_cross_entropy_examples():
    assert ce(np.zeros((2, 5)), [0, 3]) == pytest.approx(np.log(5), rel=1e-15)
    assert ce([[1000.0, 0.0]], [0]) == pytest.approx(0.0, abs=1e-12)
    expected = -np.log(np.exp(3) / (np.exp(1) + np.exp(2) + np.exp(3)))
    assert ce([[1.0, 2.0, 3.0]], [2]) == pytest.approx(expected, rel=1e-14)
    assert expected == pytest.approx(0.40761, abs=1e-5)
    with pytest.raises(ValueError):
        ce([[1.0, 2.0]], [2])


def test_init_variance(rng):
    w = L.init_complex_weight((64, 32, 3, 3), 32 * 9, rng, np.float64)
    assert np.var(w.re) == pytest.approx(1 / (2 * 288), rel=0.05)
    assert np.mean(w.re ** 2 + w.im ** 2) == pytest.approx(1 / 288, rel=0.05)


# -- gradient checks on every op ---------------------------------------------


@pytest.mark.parametrize("op", sorted(LAYER_CASES))
def test_layer_op_gradients(op):
    result = run_case(op, LAYER_CASES[op], seed=3)
    assert result.passed, result.worst
    assert result.max_rel_error < 1e-4
