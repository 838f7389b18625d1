import numpy as np
import pytest

import papm.autodiff as ad
from papm.optim import (Parameter, adamw_step, grad, init_adamw_state,
                        load_checkpoint, save_checkpoint, xavier_init)


def test_quadratic_grad():
    p = Parameter("p", np.array([1.0, 2.0, 3.0]))
    val, grads = grad(lambda: (p.var ** 2).sum(), [p])
    assert val == 14.0
    assert np.array_equal(grads["p"], np.array([2.0, 4.0, 6.0]))


def test_conv_receptive_field_grad():
    # sum(conv2d(x, ones 3x3)): interior pixels are seen by 9 windows
    x = Parameter("x", np.zeros((1, 1, 6, 6)))
    k = ad.lift(np.ones((1, 1, 3, 3)))
    _, grads = grad(lambda: ad.conv2d(x.var, k).sum(), [x])
    g = grads["x"][0, 0]
    assert g[2, 2] == 9.0 and g[0, 0] == 1.0 and g[0, 2] == 3.0 and g[1, 1] == 4.0


def test_fft_roundtrip_zero_grad():
    x = Parameter("x", np.random.default_rng(0).normal(size=(8, 8)))
    def loss():
        r = ad.real(ad.ifft2(ad.fft2(x.var))) - x.var
        return (r ** 2).sum()
    _, grads = grad(loss, [x])
    assert np.max(np.abs(grads["x"])) < 1e-13


def test_fd_check_quadratic_tight():
    p = Parameter("p", np.array([0.3, -1.2, 2.0]))
    dev = ad.finite_difference_check(lambda: (p.var ** 2).sum(), {"p": p.var}, h=1e-5)
    assert dev < 1e-8


def test_fd_check_empty_and_bad_h():
    assert ad.finite_difference_check(lambda: ad.lift(0.0), {}) == 0.0
    with pytest.raises(ValueError):
        ad.finite_difference_check(lambda: ad.lift(0.0), {}, h=0.0)


def test_adamw_null_step():
    p = Parameter("p", np.array([1.0, -2.0]))
    st = init_adamw_state([p])
    adamw_step([p], {"p": np.zeros(2)}, st, lr=1e-3, weight_decay=0.0)
    assert np.array_equal(p.value, np.array([1.0, -2.0]))


def test_adamw_first_step_hand_computed():
    p = Parameter("p", np.zeros(1))
    st = init_adamw_state([p])
    adamw_step([p], {"p": np.ones(1)}, st, lr=1e-3, weight_decay=0.0)
    # bias-corrected m_hat = v_hat = 1 on the first step
    assert abs(float(p.value[0]) + 1e-3 / (1.0 + 1e-8)) < 1e-15


def test_adamw_skips_nonfinite_and_counts():
    p = Parameter("p", np.array([1.0]))
    st = init_adamw_state([p])
    adamw_step([p], {"p": np.array([np.nan])}, st)
    assert st["skipped"] == 1
    assert p.value[0] == 1.0


def test_symmetric2d_survives_random_steps():
    rng = np.random.default_rng(42)
    p = Parameter("k", rng.normal(size=(5, 5)), symmetry_tag="symmetric2d")
    st = init_adamw_state([p])
    for _ in range(100):
        adamw_step([p], {"k": rng.normal(size=(5, 5))}, st, lr=1e-2)
    assert np.allclose(p.value, p.value.T, atol=1e-15)
    assert np.allclose(p.value, p.value[::-1, ::-1], atol=1e-15)


def test_upper_triangular_and_zero_sum_projections():
    rng = np.random.default_rng(1)
    p = Parameter("t", rng.normal(size=(4, 4)), symmetry_tag="upper_triangular",
                  zero_sum=True)
    assert np.all(p.value[np.tril_indices(4, k=-1)] == 0.0)
    assert abs(p.value.sum()) < 1e-14
    st = init_adamw_state([p])
    adamw_step([p], {"t": rng.normal(size=(4, 4))}, st, lr=1e-2)
    assert np.all(p.value[np.tril_indices(4, k=-1)] == 0.0)
    assert abs(p.value.sum()) < 1e-14


def test_mask_freezes_entries_exactly():
    init = np.array([[1.5, -0.5], [0.25, 2.0]])
    mask = np.array([[True, False], [False, True]])
    p = Parameter("m", init.copy(), constraint_mask=mask)
    st = init_adamw_state([p])
    for _ in range(10):
        adamw_step([p], {"m": np.ones((2, 2))}, st, lr=0.1)
    assert p.value[0, 1] == -0.5 and p.value[1, 0] == 0.25
    assert p.value[0, 0] != 1.5
    _, grads = grad(lambda: (p.var * 3.0).sum(), [p])
    assert grads["m"][0, 1] == 0.0 and grads["m"][1, 1] == 3.0
    assert p.n_trainable() == 2


def test_xavier_bound_and_determinism():
    w = xavier_init((16, 16, 3, 3), c=0.02, seed=9)
    bound = 0.02 * np.sqrt(6.0 / (16 * 9 + 16 * 9))
    assert np.max(np.abs(w)) <= bound
    assert np.array_equal(w, xavier_init((16, 16, 3, 3), c=0.02, seed=9))
    means = [xavier_init((16, 16, 3, 3), c=0.02, seed=s).mean() for s in range(10)]
    sigma = bound / np.sqrt(3.0) / np.sqrt(16 * 16 * 9)
    assert abs(np.mean(means)) < 3 * sigma
    with pytest.raises(ValueError):
        xavier_init((0, 4))


def test_checkpoint_roundtrip(tmp_path):
    rng = np.random.default_rng(3)
    mask = rng.random((3, 3)) > 0.5
    ps = [
        Parameter("a", rng.normal(size=(2, 3))),
        Parameter("b", rng.normal(size=(3, 3)), constraint_mask=mask,
                  symmetry_tag="upper_triangular"),
        Parameter("c", rng.normal(size=(2, 2, 4, 4))
                  + 1j * rng.normal(size=(2, 2, 4, 4))),
    ]
    st = init_adamw_state(ps)
    adamw_step(ps, {p.name: (np.abs(rng.normal(size=p.value.shape))
                             if np.iscomplexobj(p.value)
                             else rng.normal(size=p.value.shape)) for p in ps}, st)
    save_checkpoint(tmp_path / "ck", ps, opt_state=st, extra={"epoch": 7})
    ps2, st2, extra = load_checkpoint(tmp_path / "ck")
    assert extra["epoch"] == 7
    assert st2["step"] == 1 and st2["skipped"] == 0
    for p, q in zip(ps, ps2):
        assert p.name == q.name
        assert np.allclose(p.value, q.value, atol=1e-15)
        assert p.symmetry_tag == q.symmetry_tag
        assert np.allclose(st["m"][p.name], st2["m"][p.name], atol=1e-15)
        assert np.allclose(st["v"][p.name], st2["v"][p.name], atol=1e-15)
    assert np.array_equal(ps2[1].constraint_mask, mask)
