"""Stepper and rollout: convergence orders, composition, differentiability."""

import numpy as np
import pytest

from papm import autodiff as ad
from papm.autodiff import finite_difference_check
from papm.fields import BCSpec, EDGES, ConditionSet, Field, GridSpec
from papm.integrate import (RolloutDiverged, StepScheme, rollout,
                            rollout_batch, rollout_var, step, step_var)
from papm.tssm import TSSM, default_config


def decay(u, t):
    return u * (-1.0)


def const_one(n=2):
    return ad.lift(np.ones((1, 1, n, n)))


def test_single_rk4_step_matches_exponential():
    out = step_var(decay, const_one(), 0.0, 0.1, StepScheme("rk4"))
    assert np.allclose(out.value, np.exp(-0.1), atol=1e-7)


def test_zero_derivative_is_identity():
    u0 = ad.lift(np.random.default_rng(0).standard_normal((1, 2, 4, 4)))
    out = step_var(lambda u, t: u * 0.0, u0, 0.0, 0.5, StepScheme("rk4"))
    assert np.array_equal(out.value, u0.value)


def _order(kind, dts):
    errs = []
    for dt in dts:
        n = round(1.0 / dt)
        out = rollout_var(decay, const_one(), n, dt, StepScheme(kind))[-1]
        errs.append(abs(out.value[0, 0, 0, 0] - np.exp(-1.0)))
    rates = np.diff(np.log(errs)) / np.diff(np.log(dts))
    return np.mean(rates), errs


def test_rk4_fourth_order():
    order, errs = _order("rk4", [0.1, 0.05, 0.025])
    assert order >= 3.8
    assert 12 < errs[0] / errs[1] < 20  # halving dt cuts the error ~16x


def test_euler_first_order():
    order, _ = _order("euler", [0.1, 0.05, 0.025])
    assert 0.8 < order < 1.2


def test_substeps_equal_smaller_steps():
    u0 = const_one()
    a = step_var(decay, u0, 0.0, 0.4, StepScheme("rk4", substeps=4))
    b = u0
    for k in range(4):
        b = step_var(decay, b, k * 0.1, 0.1, StepScheme("rk4"))
    assert np.array_equal(a.value, b.value)


def test_rollout_composition_is_exact():
    rng = np.random.default_rng(1)
    u0 = ad.lift(rng.standard_normal((1, 1, 3, 3)))
    f = lambda u, t: u * (-0.7) + np.sin(t)
    scheme = StepScheme("rk4")
    whole = rollout_var(f, u0, 5, 0.1, scheme)
    head = rollout_var(f, u0, 2, 0.1, scheme)
    tail = rollout_var(f, head[-1], 3, 0.1, scheme, t0=0.2)
    assert np.array_equal(whole[-1].value, tail[-1].value)
    assert np.array_equal(whole[1].value, head[-1].value)


def test_rollout_slices_follow_analytic_decay():
    out = rollout_var(decay, const_one(), 5, 0.1, StepScheme("rk4"))
    for k, s in enumerate(out, start=1):
        assert np.allclose(s.value, np.exp(-k * 0.1), atol=1e-6)


def test_rollout_single_step_equals_step():
    u0 = const_one()
    a = rollout_var(decay, u0, 1, 0.2, StepScheme("rk4"))[0]
    b = step_var(decay, u0, 0.0, 0.2, StepScheme("rk4"))
    assert np.array_equal(a.value, b.value)


def test_rollout_determinism():
    grid = GridSpec.from_extent(8, 8, 2 * np.pi, 2 * np.pi, 0.05)
    model = TSSM(default_config("localized", hidden=3, n_layers=2,
                                xf_channels=0), grid)
    rng = np.random.default_rng(2)
    f0 = Field(rng.standard_normal((2, 8, 8)), grid)
    cond = ConditionSet(f0, {e: BCSpec(e, "periodic") for e in EDGES},
                        lam=[0.05])
    a = rollout(model, f0, cond, 4, StepScheme("rk4"))
    b = rollout(model, f0, cond, 4, StepScheme("rk4"))
    assert a.shape == (4, 2, 8, 8)
    assert np.array_equal(a, b)


def test_divergence_reports_step_index():
    u0 = ad.lift(np.full((1, 1, 2, 2), 2.0))
    with np.errstate(over="ignore"), \
            pytest.raises(RolloutDiverged, match="step") as err:
        rollout_var(lambda u, t: u * u, u0, 50, 1.0, StepScheme("euler"))
    assert err.value.step_index >= 1


def test_scheme_validation():
    with pytest.raises(ValueError, match="scheme"):
        StepScheme("leapfrog")
    with pytest.raises(ValueError, match="substeps"):
        StepScheme("rk4", substeps=0)
    with pytest.raises(ValueError, match="dt"):
        step_var(decay, const_one(), 0.0, -0.1, StepScheme("rk4"))
    with pytest.raises(ValueError, match="step"):
        rollout_var(decay, const_one(), 0, 0.1, StepScheme("rk4"))


def test_step_field_wrapper_reembeds_bcs():
    grid = GridSpec.from_extent(16, 16, 2 * np.pi, 2 * np.pi, 0.02)
    model = TSSM(default_config("localized", hidden=3, n_layers=2,
                                xf_channels=0), grid)
    x, y = np.meshgrid(grid.xs(), grid.ys())
    f0 = Field(np.stack([np.sin(x), np.cos(y)]), grid)
    cond = ConditionSet(f0, {e: BCSpec(e, "periodic") for e in EDGES},
                        lam=[0.05])
    out = step(model, f0, cond, 0.0, grid.dt, StepScheme("rk4"))
    assert out.data.shape == f0.data.shape
    assert np.all(np.isfinite(out.data))
    assert not np.array_equal(out.data, f0.data)


def test_gradient_through_three_step_rollout():
    grid = GridSpec.from_extent(8, 8, 2 * np.pi, 2 * np.pi, 0.02)
    model = TSSM(default_config("localized", hidden=3, n_layers=2,
                                xf_channels=0), grid)
    rng = np.random.default_rng(3)
    u0 = rng.standard_normal((2, 2, 8, 8))
    conds = [ConditionSet(Field(u0[i], grid),
                          {e: BCSpec(e, "periodic") for e in EDGES},
                          lam=[0.05]) for i in range(2)]
    target = rng.standard_normal((2, 2, 8, 8))

    def loss_fn():
        slices = rollout_batch(model, ad.lift(u0), conds, 3,
                               StepScheme("rk4"), dt=0.02)
        diff = slices[-1] - ad.lift(target)
        return (diff * diff).mean()

    leaves = {p.name: p.var for p in model.params()}
    worst = finite_difference_check(loss_fn, leaves, h=1e-5,
                                    samples_per_leaf=2, seed=0)
    assert worst < 1e-4
