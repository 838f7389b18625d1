"""Reference solvers and samplers for the bundled 2D systems.

Everything here is deliberately independent of the model stack: plain numpy
FFTs and roll-based finite differences, so generated data and per-term oracle
fields can catch bugs in the learned operators rather than share them. Each
generator is deterministic per (spec, seed), solves on a grid at least 4x
finer than the stored one, and can re-solve at doubled resolution (refine=2)
for self-convergence checks.
"""

import json
from dataclasses import asdict, dataclass

import numpy as np

from .fields import BCSpec, ConditionSet, EDGES, Field, GridSpec, \
    TrajectoryDataset

SYSTEMS = ("burgers2d", "rd2d", "ns2d")


class CFLError(RuntimeError):
    pass


class SolverStabilityError(RuntimeError):
    pass


@dataclass
class SystemSpec:
    """One dataset recipe: system, scales, coefficient draws, cadence."""

    system: str
    n_samples: int = 20
    nx: int = 32                 # stored resolution (square grids)
    n_slices: int = 50           # stored slices including t=0
    dt_save: float = 0.01
    solver_factor: int = 4       # solver grid = factor * nx
    substeps: int = 8            # solver steps per saved slice
    extent: float = 2 * np.pi
    seed: int = 0
    t0: int = 5
    t_train: int = 25
    nu_range: tuple = (5e-3, 1e-1)   # burgers2d, log-uniform draw
    nu: float = 1e-3                 # ns2d
    d_u: float = 1e-3                # rd2d
    d_v: float = 5e-3
    k_react: float = 5e-3
    forcing: str = "paper"           # paper | none
    init: str = "default"
    method: str = "fd"               # burgers2d: fd | spectral

    def __post_init__(self):
        if self.system not in SYSTEMS:
            raise ValueError("unknown system %r" % self.system)
        if self.solver_factor < 4:
            raise ValueError("solver resolution must be at least 4x output")
        if self.nx < 8 or self.n_samples < 1 or self.substeps < 1:
            raise ValueError("degenerate spec")
        if self.dt_save <= 0 or self.extent <= 0:
            raise ValueError("dt_save and extent must be positive")
        if not (0 <= self.t0 < self.t_train <= self.n_slices - 1):
            raise ValueError("need 0 <= t0 < t_train <= n_slices-1")
        if self.init == "default":
            self.init = {"burgers2d": "grf", "rd2d": "noise",
                         "ns2d": "grf"}[self.system]
        allowed = {"burgers2d": ("grf",), "rd2d": ("noise", "zero"),
                   "ns2d": ("grf", "taylor_green")}[self.system]
        if self.init not in allowed:
            raise ValueError("init %r not available for %s"
                             % (self.init, self.system))
        if self.system == "burgers2d":
            lo, hi = self.nu_range
            if not (0 < lo <= hi):
                raise ValueError("bad viscosity range")
        self.nu_range = tuple(self.nu_range)

    def to_json(self):
        return json.dumps(asdict(self), indent=1)

    @classmethod
    def from_json(cls, text):
        return cls(**json.loads(text))


def desk_spec(system, **overrides):
    """Small configurations solvable on one CPU core in minutes."""
    base = {
        "burgers2d": dict(system="burgers2d", n_samples=20, nx=32, n_slices=50,
                          dt_save=0.01, substeps=8, extent=2 * np.pi,
                          nu_range=(5e-3, 1e-1), t0=5, t_train=25),
        "rd2d": dict(system="rd2d", n_samples=20, nx=24, n_slices=30,
                     dt_save=0.05, substeps=6, extent=2.0, t0=5, t_train=13),
        "ns2d": dict(system="ns2d", n_samples=8, nx=16, n_slices=20,
                     dt_save=0.2, substeps=32, extent=1.0, nu=1e-3,
                     t0=5, t_train=13),
    }[system]
    base.update(overrides)
    return SystemSpec(**base)


def paper_spec(system, **overrides):
    """Full-scale configurations; hours of CPU, kept for completeness."""
    base = {
        "burgers2d": dict(system="burgers2d", n_samples=250, nx=64,
                          n_slices=100, dt_save=0.01, substeps=32,
                          extent=2 * np.pi, nu_range=(1e-3, 1e-1),
                          t0=5, t_train=45),
        "rd2d": dict(system="rd2d", n_samples=100, nx=64, n_slices=100,
                     dt_save=0.05, substeps=10, extent=2.0, t0=5, t_train=45),
        "ns2d": dict(system="ns2d", n_samples=100, nx=64, n_slices=50,
                     dt_save=1.0, substeps=256, extent=1.0, nu=1e-3,
                     t0=5, t_train=25),
    }[system]
    base.update(overrides)
    return SystemSpec(**base)


# ---------------------------------------------------------------------------
# Gaussian random fields
# ---------------------------------------------------------------------------

def grf_modes(n, rng, sigma_c=25.0, tau=5.0, alpha=3.0):
    """Spectrum of one GRF draw: white noise shaped by sqrt eigenvalues of
    sigma_c (-Laplacian + tau^2 I)^(-alpha) over integer mode numbers."""
    xi = rng.standard_normal((n, n))
    xh = np.fft.fft2(xi)
    m = np.fft.fftfreq(n, d=1.0 / n)
    m2 = m[:, None] ** 2 + m[None, :] ** 2
    amp = np.sqrt(sigma_c) * (m2 + tau ** 2) ** (-alpha / 2.0)
    nyq = np.abs(m) == n // 2
    amp[nyq, :] = 0.0  # keep padded spectra hermitian
    amp[:, nyq] = 0.0
    return xh * amp


def grf_field(fh, n_target=None):
    """Real-space field, optionally spectrally upsampled to a finer grid."""
    n = fh.shape[0]
    if n_target is None or n_target == n:
        return np.fft.ifft2(fh).real
    if n_target < n or n_target % n:
        raise ValueError("can only upsample to a multiple of the base grid")
    shifted = np.fft.fftshift(fh)
    pad = (n_target - n) // 2
    big = np.pad(shifted, pad)
    return np.fft.ifft2(np.fft.ifftshift(big)).real * (n_target / n) ** 2


def normalize_range(f, lo=0.1, hi=1.1, ref=None):
    """Linear min-max normalization; ref supplies the min/max when the same
    affine map must be reused on an upsampled copy."""
    r = f if ref is None else ref
    a, b = r.min(), r.max()
    if b <= a:
        raise ValueError("degenerate field, cannot normalize")
    return lo + (f - a) * (hi - lo) / (b - a)


def sample_grf(n, seed, sigma_c=25.0, tau=5.0, alpha=3.0, lo=0.1, hi=1.1):
    """One normalized GRF draw on an n x n periodic grid."""
    fh = grf_modes(n, np.random.default_rng(seed), sigma_c, tau, alpha)
    return normalize_range(grf_field(fh), lo, hi)


# ---------------------------------------------------------------------------
# Periodic 4th-order finite differences (solver-side, numpy only)
# ---------------------------------------------------------------------------

def _d1(f, dx, axis):
    return (np.roll(f, 2, axis) - 8 * np.roll(f, 1, axis)
            + 8 * np.roll(f, -1, axis) - np.roll(f, -2, axis)) / (12 * dx)


def _d2(f, dx, axis):
    return (-np.roll(f, 2, axis) + 16 * np.roll(f, 1, axis) - 30 * f
            + 16 * np.roll(f, -1, axis) - np.roll(f, -2, axis)) / (12 * dx * dx)


def _rk4(state, rhs, dt):
    k1 = rhs(state)
    k2 = rhs(state + 0.5 * dt * k1)
    k3 = rhs(state + 0.5 * dt * k2)
    k4 = rhs(state + dt * k3)
    return state + (dt / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)


def _down(a, stride):
    return np.ascontiguousarray(a[..., ::stride, ::stride])


# ---------------------------------------------------------------------------
# Burgers2d
# ---------------------------------------------------------------------------

def _burgers_terms_fd(s, nu, dx, c1, c2):
    u, v = s
    adv = np.stack([-(u * _d1(u, dx, 1) + v * _d1(u, dx, 0)),
                    -(u * _d1(v, dx, 1) + v * _d1(v, dx, 0))])
    dif = nu * np.stack([_d2(u, dx, 1) + _d2(u, dx, 0),
                         _d2(v, dx, 1) + _d2(v, dx, 0)])
    frc = np.stack([np.sin(v) * c1, np.sin(u) * c2])
    return dif, adv, frc


def _burgers_terms_spectral(s, nu, basis, c1, c2):
    kx, ky, k2 = basis
    sh = np.fft.fft2(s)
    sx = np.fft.ifft2(1j * kx * sh).real
    sy = np.fft.ifft2(1j * ky * sh).real
    u, v = s
    adv = -(u * sx + v * sy)
    dif = nu * np.fft.ifft2(-k2 * sh).real
    frc = np.stack([np.sin(v) * c1, np.sin(u) * c2])
    return dif, adv, frc


def solve_burgers2d(spec, refine=1):
    """Periodic Burgers on [0, 2pi)^2 with the state-coupled forcing.

    Returns (TrajectoryDataset, terms) where terms holds the diffusion /
    convection / source fields of every stored slice on the stored grid.
    """
    n_base = spec.nx * spec.solver_factor
    n_s = n_base * refine
    substeps = spec.substeps * refine
    stride = n_s // spec.nx
    dx = spec.extent / n_s
    dt = spec.dt_save / substeps

    xs = np.arange(n_s) * dx
    x, y = np.meshgrid(xs, xs)
    if spec.forcing == "paper":
        q = 5.0 * (2 * np.pi / spec.extent)
        c1, c2 = np.cos(q * (x + y)), np.cos(q * (x - y))
    else:
        c1 = c2 = np.zeros((n_s, n_s))
    if spec.method == "spectral":
        k = 2 * np.pi / spec.extent * np.fft.fftfreq(n_s, d=1.0 / n_s)
        basis = (k[None, :], k[:, None],
                 k[None, :] ** 2 + k[:, None] ** 2)

    grid_out = GridSpec.from_extent(spec.nx, spec.nx, spec.extent,
                                    spec.extent, spec.dt_save)
    xo = np.arange(spec.nx) * (spec.extent / spec.nx)
    xg, yg = np.meshgrid(xo, xo)
    x_f_out = np.stack([np.cos(q * (xg + yg)), np.cos(q * (xg - yg))]) \
        if spec.forcing == "paper" else np.zeros((2, spec.nx, spec.nx))
    bcs = {e: BCSpec(e, "periodic") for e in EDGES}

    conds, trajs = [], []
    nsl = spec.n_slices
    terms = {k_: np.empty((spec.n_samples, nsl, 2, spec.nx, spec.nx))
             for k_ in ("df", "cf", "source")}
    n_ic = 2 * spec.nx  # band-limit ICs to modes the stored grid resolves
    for k in range(spec.n_samples):
        rng = np.random.default_rng([spec.seed, k])
        lo, hi = spec.nu_range
        nu = float(np.exp(rng.uniform(np.log(lo), np.log(hi))))
        s = np.empty((2, n_s, n_s))
        for c in range(2):
            fh = grf_modes(n_ic, rng)
            base = grf_field(fh)
            s[c] = normalize_range(grf_field(fh, n_s), ref=base)

        def rhs(st):
            if spec.method == "spectral":
                dif, adv, frc = _burgers_terms_spectral(st, nu, basis, c1, c2)
            else:
                dif, adv, frc = _burgers_terms_fd(st, nu, dx, c1, c2)
            return dif + adv + frc

        traj = np.empty((nsl, 2, spec.nx, spec.nx))
        for j in range(nsl):
            if spec.method == "spectral":
                dif, adv, frc = _burgers_terms_spectral(s, nu, basis, c1, c2)
            else:
                dif, adv, frc = _burgers_terms_fd(s, nu, dx, c1, c2)
            traj[j] = _down(s, stride)
            terms["df"][k, j] = _down(dif, stride)
            terms["cf"][k, j] = _down(adv, stride)
            terms["source"][k, j] = _down(frc, stride)
            if j == nsl - 1:
                break
            cfl = np.max(np.abs(s)) * dt / dx
            if cfl > 0.6:
                raise CFLError("CFL number %.3f exceeds 0.6 at slice %d"
                               % (cfl, j))
            for _ in range(substeps):
                s = _rk4(s, rhs, dt)
            if not np.all(np.isfinite(s)):
                raise SolverStabilityError("solution blew up at slice %d" % j)
        conds.append(ConditionSet(Field(traj[0], grid_out), dict(bcs),
                                  lam=[nu], x_f=Field(x_f_out, grid_out)))
        trajs.append(traj)
    ds = TrajectoryDataset(grid_out, conds, trajs, spec.t0, spec.t_train,
                           channel_names=["u", "v"])
    return ds, terms


# ---------------------------------------------------------------------------
# RD2d (FitzHugh-Nagumo reaction-diffusion, no-flow Neumann box)
# ---------------------------------------------------------------------------

def _mirror_lap(s, dx):
    p = np.pad(s, ((0, 0), (1, 1), (1, 1)), mode="reflect")
    return (p[:, :-2, 1:-1] + p[:, 2:, 1:-1] + p[:, 1:-1, :-2]
            + p[:, 1:-1, 2:] - 4 * s) / (dx * dx)


def _rd_noise(spec, rng, n_s):
    """Random cosine-series fields, zero-mean and unit-variance in the
    continuum sense.  Cosines are flux-free at the walls, so the start has
    no boundary layer to trip the mirror ghosts, and the series is a fixed
    continuum function: every solver resolution samples the same initial
    state; iid noise drawn straight on the fine grid would make FD term
    oracles meaningless."""
    m = np.arange(spec.nx)
    damp = np.exp(-(m[:, None] ** 2 + m[None, :] ** 2)
                  / (2 * (spec.nx / 6.0) ** 2))
    a = rng.standard_normal((2, spec.nx, spec.nx)) * damp
    a[:, 0, 0] = 0.0
    w = np.full(spec.nx, 0.5)  # mean of cos^2 over the box; 1 for mode 0
    w[0] = 1.0
    std = np.sqrt((a ** 2 * (w[:, None] * w[None, :])).sum(axis=(1, 2)))
    a /= std[:, None, None]
    xs = np.linspace(0.0, spec.extent, n_s)
    ev = np.cos(np.pi / spec.extent * np.outer(xs, m))
    return np.einsum("im,cmn,jn->cij", ev, a, ev)


def solve_rd2d(spec, refine=1):
    """Activator/inhibitor dynamics with mirror-ghost diffusion.

    The no-flux walls sit on the first and last node rows, so dx is
    extent/(n-1) and every resolution samples the same box; nodes stay
    nested under refinement because n-1 scales by whole factors.
    """
    factor = spec.solver_factor * refine
    n_s = (spec.nx - 1) * factor + 1
    substeps = spec.substeps * refine ** 2  # explicit diffusion: dt ~ dx^2
    dx = spec.extent / (n_s - 1)
    dt = spec.dt_save / substeps
    dnum = max(spec.d_u, spec.d_v) * dt / (dx * dx)
    if dnum > 0.25:
        raise SolverStabilityError(
            "diffusion number %.3f exceeds 0.25; raise substeps" % dnum)
    dcoef = np.array([spec.d_u, spec.d_v])[:, None, None]

    def rhs(st):
        u, v = st
        react = np.stack([u - u ** 3 - spec.k_react - v, u - v])
        return dcoef * _mirror_lap(st, dx) + react

    dxo = spec.extent / (spec.nx - 1)
    grid_out = GridSpec(spec.nx, spec.nx, dxo, dxo, spec.dt_save,
                        spec.nx * dxo, spec.nx * dxo)
    bcs = {e: BCSpec(e, "neumann", f=0.0) for e in EDGES}
    stride = factor
    nsl = spec.n_slices
    conds, trajs = [], []
    terms = {k_: np.empty((spec.n_samples, nsl, 2, spec.nx, spec.nx))
             for k_ in ("df", "source")}
    for k in range(spec.n_samples):
        rng = np.random.default_rng([spec.seed, k])
        if spec.init == "zero":
            s = np.zeros((2, n_s, n_s))
        else:
            s = _rd_noise(spec, rng, n_s)
        traj = np.empty((nsl, 2, spec.nx, spec.nx))
        for j in range(nsl):
            u, v = s
            traj[j] = _down(s, stride)
            terms["df"][k, j] = _down(dcoef * _mirror_lap(s, dx), stride)
            terms["source"][k, j] = _down(
                np.stack([u - u ** 3 - spec.k_react - v, u - v]), stride)
            if j == nsl - 1:
                break
            for _ in range(substeps):
                s = _rk4(s, rhs, dt)
            if not np.all(np.isfinite(s)):
                raise SolverStabilityError("solution blew up at slice %d" % j)
        conds.append(ConditionSet(Field(traj[0], grid_out), dict(bcs),
                                  lam=[spec.d_u, spec.d_v]))
        trajs.append(traj)
    ds = TrajectoryDataset(grid_out, conds, trajs, spec.t0, spec.t_train,
                           channel_names=["u", "v"])
    return ds, terms


# ---------------------------------------------------------------------------
# NS2d (vorticity form, pseudo-spectral)
# ---------------------------------------------------------------------------

def solve_ns2d(spec, refine=1):
    """Incompressible vorticity dynamics on a periodic square."""
    n_s = spec.nx * spec.solver_factor * refine
    substeps = spec.substeps * refine
    dt = spec.dt_save / substeps
    L = spec.extent
    k1 = 2 * np.pi / L * np.fft.fftfreq(n_s, d=1.0 / n_s)
    kx, ky = k1[None, :], k1[:, None]
    k2 = kx ** 2 + ky ** 2
    inv_k2 = np.zeros_like(k2)
    inv_k2[k2 > 0] = 1.0 / k2[k2 > 0]
    kmax = np.abs(k1).max()
    dealias = (np.abs(kx) <= (2 / 3) * kmax) & (np.abs(ky) <= (2 / 3) * kmax)
    tail = k2 > (2 / 3 * kmax) ** 2

    xs = np.arange(n_s) * (L / n_s)
    x, y = np.meshgrid(xs, xs)
    if spec.forcing == "paper":
        q = 2 * np.pi / L * (x + y)
        f = 0.1 * (np.sin(q) + np.cos(q))
    else:
        f = np.zeros((n_s, n_s))

    def pieces(w):
        wh = np.fft.fft2(w)
        psi_h = wh * inv_k2
        u = np.fft.ifft2(1j * ky * psi_h).real
        v = -np.fft.ifft2(1j * kx * psi_h).real
        wx = np.fft.ifft2(1j * kx * wh).real
        wy = np.fft.ifft2(1j * ky * wh).real
        adv = -np.fft.ifft2(np.fft.fft2(u * wx + v * wy) * dealias).real
        dif = spec.nu * np.fft.ifft2(-k2 * wh).real
        return dif, adv

    def rhs(w):
        dif, adv = pieces(w)
        return dif + adv + f

    grid_out = GridSpec.from_extent(spec.nx, spec.nx, L, L, spec.dt_save)
    bcs = {e: BCSpec(e, "periodic") for e in EDGES}
    stride = n_s // spec.nx
    xo = np.arange(spec.nx) * (L / spec.nx)
    xg, yg = np.meshgrid(xo, xo)
    if spec.forcing == "paper":
        qo = 2 * np.pi / L * (xg + yg)
        f_out = (0.1 * (np.sin(qo) + np.cos(qo)))[None]
    else:
        f_out = np.zeros((1, spec.nx, spec.nx))

    nsl = spec.n_slices
    conds, trajs = [], []
    terms = {k_: np.empty((spec.n_samples, nsl, 1, spec.nx, spec.nx))
             for k_ in ("df", "cf", "source")}
    for k in range(spec.n_samples):
        rng = np.random.default_rng([spec.seed, k])
        if spec.init == "taylor_green":
            w = 2.0 * np.sin(2 * np.pi / L * x) * np.sin(2 * np.pi / L * y)
        else:
            fh = grf_modes(spec.nx * spec.solver_factor, rng,
                           sigma_c=7.0 ** 1.5, tau=7.0, alpha=2.5)
            w = grf_field(fh, n_s)
            w -= w.mean()
        traj = np.empty((nsl, 1, spec.nx, spec.nx))
        for j in range(nsl):
            dif, adv = pieces(w)
            traj[j, 0] = w[::stride, ::stride]
            terms["df"][k, j, 0] = _down(dif, stride)
            terms["cf"][k, j, 0] = _down(adv, stride)
            terms["source"][k, j, 0] = _down(f, stride)
            if j == nsl - 1:
                break
            wh = np.fft.fft2(w)
            frac = (np.abs(wh[tail]) ** 2).sum() / max((np.abs(wh) ** 2).sum(),
                                                       1e-300)
            if frac > 0.05:
                raise SolverStabilityError(
                    "enstrophy pile-up (tail fraction %.4f): resolution "
                    "insufficient for nu=%g" % (frac, spec.nu))
            for _ in range(substeps):
                w = _rk4(w, rhs, dt)
            if not np.all(np.isfinite(w)):
                raise SolverStabilityError("solution blew up at slice %d" % j)
        conds.append(ConditionSet(Field(traj[0], grid_out), dict(bcs),
                                  lam=[spec.nu], x_f=Field(f_out, grid_out)))
        trajs.append(traj)
    ds = TrajectoryDataset(grid_out, conds, trajs, spec.t0, spec.t_train,
                           channel_names=["w"])
    return ds, terms


def solve(spec, refine=1):
    fn = {"burgers2d": solve_burgers2d, "rd2d": solve_rd2d,
          "ns2d": solve_ns2d}[spec.system]
    return fn(spec, refine=refine)


def self_convergence(spec):
    """Relative L2 gap between the first sample's run and its
    doubled-resolution twin (same continuum initial condition)."""
    one = SystemSpec(**{**asdict(spec), "n_samples": 1})
    base, _ = solve(one)
    fine, _ = solve(one, refine=2)
    a, b = base.trajectories[0], fine.trajectories[0]
    return float(np.linalg.norm(a - b) / np.linalg.norm(b))


# ---------------------------------------------------------------------------
# On-disk layout: dataset blob dir + per-term oracle sidecar + spec echo
# ---------------------------------------------------------------------------

def save_generated(out_dir, ds, terms, spec):
    import os

    from .dataio import save_dataset
    save_dataset(ds, out_dir)
    np.savez_compressed(os.path.join(out_dir, "terms.npz"), **terms)
    with open(os.path.join(out_dir, "system.json"), "w") as fp:
        fp.write(spec.to_json())


def load_generated(path):
    import os

    from .dataio import load_dataset
    ds = load_dataset(path)
    terms = None
    tp = os.path.join(path, "terms.npz")
    if os.path.exists(tp):
        with np.load(tp) as z:
            terms = {k: z[k] for k in z.files}
    spec = None
    sp = os.path.join(path, "system.json")
    if os.path.exists(sp):
        with open(sp) as fp:
            spec = SystemSpec.from_json(fp.read())
    return ds, terms, spec
