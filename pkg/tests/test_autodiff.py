import numpy as np
import pytest
from scipy.signal import correlate2d

import papm.autodiff as ad


def test_add_mul_broadcast_grads_exact():
    a = ad.Var(np.array([[1.0], [2.0]]), requires_grad=True)
    b = ad.Var(np.array([[3.0, -1.0, 0.5]]), requires_grad=True)
    loss = (a * b + a).sum()
    ad.backward(loss)
    # dL/da_i = sum_j b_j + 3, dL/db_j = sum_i a_i
    assert np.allclose(a.grad, np.full((2, 1), 2.5 + 3.0))
    assert np.allclose(b.grad, np.full((1, 3), 3.0))


def test_div_pow_match_fd():
    rng = np.random.default_rng(3)
    x = ad.Var(rng.uniform(0.5, 2.0, size=(4, 4)), requires_grad=True)
    y = ad.Var(rng.uniform(0.5, 2.0, size=(4, 4)), requires_grad=True)

    def loss():
        return ((x / y) ** 3 + y ** -2 + (2.0 / x)).mean()

    dev = ad.finite_difference_check(loss, {"x": x, "y": y}, h=1e-6)
    assert dev < 1e-6


def test_sum_mean_axes():
    v = ad.Var(np.arange(24, dtype=np.float64).reshape(2, 3, 4), requires_grad=True)
    s = v.sum(axis=(1, 2))
    assert s.shape == (2,)
    m = v.mean(axis=1, keepdims=True)
    assert m.shape == (2, 1, 4)
    loss = (s * 1.0).sum() + m.sum()
    ad.backward(loss)
    # sum contributes 1 everywhere, mean contributes 1/3 everywhere
    assert np.allclose(v.grad, 1.0 + 1.0 / 3.0)


def test_slice_pad_concat_roll_adjoints():
    v = ad.Var(np.arange(16, dtype=np.float64).reshape(4, 4), requires_grad=True)
    loss = v[1:3, 2:].sum()
    ad.backward(loss)
    want = np.zeros((4, 4))
    want[1:3, 2:] = 1.0
    assert np.array_equal(v.grad, want)

    w = ad.Var(np.ones((1, 1, 2, 2)), requires_grad=True)
    loss = (ad.pad2d(w, (1, 0), (0, 2)) * 2.0).sum()
    ad.backward(loss)
    assert np.array_equal(w.grad, np.full((1, 1, 2, 2), 2.0))

    a = ad.Var(np.ones((2, 3)), requires_grad=True)
    b = ad.Var(np.ones((2, 2)), requires_grad=True)
    cat = ad.concat([a, b], axis=1)
    assert cat.shape == (2, 5)
    loss = (cat * np.arange(5.0)).sum()
    ad.backward(loss)
    assert np.array_equal(a.grad, np.tile(np.arange(3.0), (2, 1)))
    assert np.array_equal(b.grad, np.tile(np.array([3.0, 4.0]), (2, 1)))

    r = ad.Var(np.eye(3), requires_grad=True)
    rolled = ad.roll2(r, 1, 0)
    assert np.array_equal(rolled.value, np.roll(np.eye(3), 1, axis=0))
    loss = rolled[0, :].sum()
    ad.backward(loss)
    want = np.zeros((3, 3))
    want[2, :] = 1.0  # row 2 lands on row 0 after the shift
    assert np.array_equal(r.grad, want)


def test_conv2d_forward_matches_scipy():
    rng = np.random.default_rng(7)
    x = rng.normal(size=(2, 3, 9, 8))
    k = rng.normal(size=(4, 3, 3, 5))
    out = ad.conv2d(ad.lift(x), ad.lift(k)).value
    assert out.shape == (2, 4, 7, 4)
    for b in range(2):
        for o in range(4):
            acc = np.zeros((7, 4))
            for c in range(3):
                acc += correlate2d(x[b, c], k[o, c], mode="valid")
            assert np.allclose(out[b, o], acc, atol=1e-12)


def test_conv2d_grads_match_fd():
    rng = np.random.default_rng(11)
    x = ad.Var(rng.normal(size=(1, 2, 6, 6)), requires_grad=True)
    k = ad.Var(rng.normal(size=(3, 2, 3, 3)) * 0.5, requires_grad=True)

    def loss():
        return (ad.conv2d(x, k) ** 2).mean()

    dev = ad.finite_difference_check(loss, {"x": x, "k": k}, h=1e-5)
    assert dev < 1e-6


def test_gelu_exact_values_and_grad():
    x = ad.Var(np.array([-2.0, -1.0, 0.0, 0.5, 1.0, 3.0]), requires_grad=True)
    y = ad.gelu(x)
    want = np.array([-0.04550026389635842, -0.15865525393145707, 0.0,
                     0.3457312306370065, 0.8413447460685429, 2.99595030590511])
    assert np.allclose(y.value, want, atol=1e-15)
    dev = ad.finite_difference_check(lambda: ad.gelu(x).sum(), {"x": x}, h=1e-6)
    assert dev < 1e-7


def test_pointwise_nonlinearities_fd():
    rng = np.random.default_rng(5)
    x = ad.Var(rng.normal(size=(3, 3)), requires_grad=True)

    def loss():
        return (ad.tanh(x) + ad.sin(x) * ad.cos(x) + ad.exp(x * 0.3)
                + ad.relu(x - 0.1)).sum()

    dev = ad.finite_difference_check(loss, {"x": x}, h=1e-6)
    assert dev < 1e-6


def test_fft2_unitary_and_adjoint():
    rng = np.random.default_rng(13)
    x = rng.normal(size=(8, 8))
    xh = ad.fft2(ad.lift(x)).value
    # Parseval under the unitary convention
    assert abs(np.sum(x * x) - np.sum(np.abs(xh) ** 2)) < 1e-12
    # <F x, y> == <x, F^H y> with F^H realized by the backward pass
    y = rng.normal(size=(8, 8)) + 1j * rng.normal(size=(8, 8))
    v = ad.Var(x, requires_grad=True)
    out = ad.fft2(v)
    out.grad = y
    out._backward(y)
    lhs = np.vdot(y, xh).real
    rhs = np.sum(v.grad * x)  # grad is already projected to the real part
    assert abs(lhs - rhs) < 1e-10


def test_complex_chain_fd():
    rng = np.random.default_rng(17)
    x = ad.Var(rng.normal(size=(1, 2, 8, 8)), requires_grad=True)
    wre = ad.Var(rng.normal(size=(2, 3, 8, 8)) * 0.3, requires_grad=True)
    wim = ad.Var(rng.normal(size=(2, 3, 8, 8)) * 0.3, requires_grad=True)

    def loss():
        z = ad.mode_mul(ad.fft2(x), ad.make_complex(wre, wim))
        u = ad.real(ad.ifft2(z))
        w = ad.imag(ad.ifft2(z))
        return (u ** 2).mean() + (w ** 2).mean()

    dev = ad.finite_difference_check(loss, {"x": x, "wre": wre, "wim": wim},
                                     h=1e-5, samples_per_leaf=20, seed=2)
    assert dev < 1e-5


def test_where_routes_gradient():
    mask = np.array([[True, False], [False, True]])
    a = ad.Var(np.ones((2, 2)), requires_grad=True)
    b = ad.Var(np.full((2, 2), 5.0), requires_grad=True)
    loss = ad.where(mask, a, b).sum()
    ad.backward(loss)
    assert np.array_equal(a.grad, mask.astype(float))
    assert np.array_equal(b.grad, (~mask).astype(float))


def test_composite_program_fd():
    rng = np.random.default_rng(0)
    x = ad.Var(rng.normal(size=(2, 3, 8, 8)), requires_grad=True)
    k = ad.Var(rng.normal(size=(4, 3, 3, 3)) * 0.3, requires_grad=True)
    wre = ad.Var(rng.normal(size=(4, 2, 8, 8)) * 0.2, requires_grad=True)
    wim = ad.Var(rng.normal(size=(4, 2, 8, 8)) * 0.2, requires_grad=True)

    def loss():
        y = ad.gelu(ad.conv2d(x, k))
        y = ad.pad2d(y, (1, 1), (1, 1))
        z = ad.mode_mul(ad.fft2(y), ad.make_complex(wre, wim))
        u = ad.real(ad.ifft2(z))
        u = ad.tanh(u) * ad.sin(x[:, :2]) + ad.exp(-(u ** 2))
        v = ad.concat([ad.roll2(u, 1, -2), u * 0.5], axis=1)
        return ((v - 0.1) ** 2).mean() + v.sum() * 1e-3

    leaves = {"x": x, "k": k, "wre": wre, "wim": wim}
    dev = ad.finite_difference_check(loss, leaves, h=1e-5,
                                     samples_per_leaf=25, seed=1)
    assert dev < 1e-5


def test_value_and_grad_handles_unused_leaf():
    x = ad.Var(np.ones(3), requires_grad=True)
    unused = ad.Var(np.ones(2), requires_grad=True)
    val, grads = ad.value_and_grad(lambda: (x * 2.0).sum(),
                                   {"x": x, "unused": unused})
    assert val == 6.0
    assert np.array_equal(grads["x"], np.full(3, 2.0))
    assert np.array_equal(grads["unused"], np.zeros(2))


def test_nonscalar_loss_rejected():
    x = ad.Var(np.ones(3), requires_grad=True)
    with pytest.raises(ValueError):
        ad.value_and_grad(lambda: x * 1.0, {"x": x})


def test_nan_checks_raise_with_op_name():
    ad.nan_checks = True
    try:
        with np.errstate(invalid="ignore"), pytest.raises(FloatingPointError, match="div"):
            ad.Var(np.zeros(2), requires_grad=True) / 0.0
    finally:
        ad.nan_checks = False


def test_unsupported_primitive_raises():
    x = ad.Var(np.ones((2, 2)), requires_grad=True)
    with pytest.raises(NotImplementedError):
        x @ x


def test_deep_graph_backward_is_iterative():
    x = ad.Var(np.array(1.0), requires_grad=True)
    y = x
    for _ in range(5000):
        y = y + 1.0
    ad.backward(y)
    assert x.grad == 1.0
