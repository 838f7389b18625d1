"""Fixed-step time integration, differentiable end to end.

The stepper treats the model as a plain derivative function, so gradients flow
through every stage (discretize-then-differentiate). BC embedding happens
inside the derivative evaluation, hence it is re-applied at every RK stage.
"""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .fields import Field


class RolloutDiverged(FloatingPointError):
    """State became non-finite; .step_index says after which saved slice."""

    def __init__(self, step_index, substep):
        self.step_index = step_index
        self.substep = substep
        super().__init__("non-finite state after step %d (substep %d)"
                         % (step_index, substep))


@dataclass
class StepScheme:
    kind: str = "rk4"
    substeps: int = 1

    def __post_init__(self):
        if self.kind not in ("rk4", "euler"):
            raise ValueError("unknown scheme %r" % self.kind)
        if self.substeps < 1:
            raise ValueError("substeps must be >= 1")


def step_var(deriv_fn, u, t, dt, scheme, step_index=0):
    """Advance one saved slice: `substeps` internal stages of size dt/s."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    h = dt / scheme.substeps
    for i in range(scheme.substeps):
        tt = t + i * h
        if scheme.kind == "rk4":
            k1 = deriv_fn(u, tt)
            k2 = deriv_fn(u + k1 * (h / 2), tt + h / 2)
            k3 = deriv_fn(u + k2 * (h / 2), tt + h / 2)
            k4 = deriv_fn(u + k3 * h, tt + h)
            u = u + (k1 + (k2 + k3) * 2.0 + k4) * (h / 6.0)
        else:
            u = u + deriv_fn(u, tt) * h
        if not np.all(np.isfinite(u.value)):
            raise RolloutDiverged(step_index, i)
    return u


def rollout_var(deriv_fn, u0, n_steps, dt, scheme, t0=0.0):
    """n_steps saved slices, each fed back as the next input. u0 excluded."""
    if n_steps < 1:
        raise ValueError("need at least one step")
    out = []
    u = ad.lift(u0)
    for k in range(n_steps):
        u = step_var(deriv_fn, u, t0 + k * dt, dt, scheme, step_index=k)
        out.append(u)
    return out


def model_deriv_fn(model, conds):
    def f(u, t):
        return model.derivative(u, conds, t=t).dudt
    return f


def step(model, f, cond, t, dt, scheme):
    """Single-sample numpy-facing step: Field -> Field."""
    u = step_var(model_deriv_fn(model, [cond]), ad.lift(f.data[None]),
                 t, dt, scheme)
    return Field(u.value[0], f.grid)


def rollout(model, f0, cond, n_steps, scheme, dt=None, t0=0.0):
    """Autoregressive prediction from a start state: (n_steps, m, ny, nx)."""
    dt = f0.grid.dt if dt is None else dt
    slices = rollout_var(model_deriv_fn(model, [cond]), ad.lift(f0.data[None]),
                         n_steps, dt, scheme, t0=t0)
    return np.stack([s.value[0] for s in slices])


def rollout_batch(model, u0, conds, n_steps, scheme, dt, t0=0.0):
    """Batched differentiable rollout; returns the list of slice Vars."""
    return rollout_var(model_deriv_fn(model, conds), u0, n_steps, dt,
                       scheme, t0=t0)
