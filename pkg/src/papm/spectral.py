"""Spectral-path operators on periodic grids.

Derivatives are elementwise wavenumber products in Fourier space (unitary
transforms throughout): d/dx multiplies by i*kx, the Laplacian by -k^2. The
vorticity inversion recovers the streamfunction as psi_hat = w_hat / k^2 and
velocities u = d(psi)/dy, v = -d(psi)/dx, which is divergence-free by
construction. The learnable S-Conv block mixes channels per retained mode
inside a centered frequency window, with a 1x1 bypass in physical space.
"""

import warnings

import numpy as np

from . import autodiff as ad
from .fields import Field
from .optim import Parameter, xavier_init


class SpectralBasis:
    """Wavenumber grids for an nx x ny periodic box."""

    def __init__(self, grid):
        self.grid = grid
        kx = 2.0 * np.pi * np.fft.fftfreq(grid.nx, d=grid.dx)
        ky = 2.0 * np.pi * np.fft.fftfreq(grid.ny, d=grid.dy)
        self.kx = np.broadcast_to(kx[None, :], (grid.ny, grid.nx)).copy()
        self.ky = np.broadcast_to(ky[:, None], (grid.ny, grid.nx)).copy()
        self.k2 = self.kx ** 2 + self.ky ** 2
        self.zero_mode_index = (0, 0)
        inv = np.zeros_like(self.k2)
        nz = self.k2 > 0
        inv[nz] = 1.0 / self.k2[nz]
        self.inv_k2 = inv

    def deriv_multiplier(self, ox, oy):
        """(i kx)^ox (i ky)^oy with odd-order Nyquist modes zeroed."""
        mult = (1j * self.kx) ** ox * (1j * self.ky) ** oy
        nx, ny = self.grid.nx, self.grid.ny
        if ox % 2 == 1 and nx % 2 == 0:
            mult[:, nx // 2] = 0.0
        if oy % 2 == 1 and ny % 2 == 0:
            mult[ny // 2, :] = 0.0
        return mult

    def dealias_mask(self):
        """2/3-rule mask over (ny, nx)."""
        kx_max = np.abs(self.kx).max()
        ky_max = np.abs(self.ky).max()
        return (np.abs(self.kx) <= (2.0 / 3.0) * kx_max) \
            & (np.abs(self.ky) <= (2.0 / 3.0) * ky_max)


def _require_periodic(bcs):
    if bcs is not None and any(bc.kind != "periodic" for bc in bcs.values()):
        raise ValueError("spectral operators require periodic BCs on all edges")


def spectral_derivative_var(u, basis, ox, oy):
    """Differentiable mixed derivative of (B,C,ny,nx) via the FFT."""
    mult = ad.lift(basis.deriv_multiplier(ox, oy)[None, None])
    return ad.real(ad.ifft2(ad.fft2(u) * mult))


def spectral_derivative(f, order, bcs=None):
    """Field derivative of given (ox, oy) order; asserts tiny imaginary residue."""
    _require_periodic(bcs)
    ox, oy = order
    basis = SpectralBasis(f.grid)
    mult = basis.deriv_multiplier(ox, oy)
    out = np.fft.ifft2(np.fft.fft2(f.data, norm="ortho") * mult[None], norm="ortho")
    resid = np.abs(out.imag).max()
    scale = max(np.abs(out.real).max(), 1.0)
    assert resid < 1e-10 * scale, "imaginary residue %.3e too large" % resid
    return Field(out.real, f.grid)


def dealias_var(u, basis):
    """Zero all modes outside the 2/3 window (real field in, real field out)."""
    mask = basis.dealias_mask()[None, None]
    z = ad.fft2(u) * ad.lift(mask.astype(np.float64))
    return ad.real(ad.ifft2(z))


def vorticity_to_velocity_var(w, basis):
    """(B,1,ny,nx) vorticity -> (B,2,ny,nx) velocity, zero-mean enforced."""
    w = w - w.mean(axis=(-1, -2), keepdims=True)
    psi_hat = ad.fft2(w) * ad.lift(basis.inv_k2[None, None])
    iky = ad.lift((1j * basis.ky)[None, None])
    ikx = ad.lift((1j * basis.kx)[None, None])
    u = ad.real(ad.ifft2(psi_hat * iky))
    v = -ad.real(ad.ifft2(psi_hat * ikx))
    return ad.concat([u, v], axis=1)


def vorticity_to_velocity(w):
    """Field wrapper around the streamfunction inversion."""
    basis = SpectralBasis(w.grid)
    mean = abs(float(w.data.mean()))
    if mean > 1e-8:
        warnings.warn("vorticity mean %.2e subtracted before inversion" % mean)
    out = vorticity_to_velocity_var(ad.lift(w.data[None]), basis)
    return Field(out.value[0], w.grid)


def df_cf_spectral_var(w, basis, nu, dealias=True):
    """Vorticity-equation physics terms: (df, cf) as separate Vars.

    df = nu * Laplacian(w); cf = -(u dw/dx + v dw/dy) with the quadratic
    product dealiased by the 2/3 rule.
    """
    vel = vorticity_to_velocity_var(w, basis)
    wx = spectral_derivative_var(w, basis, 1, 0)
    wy = spectral_derivative_var(w, basis, 0, 1)
    adv = vel[:, 0:1] * wx + vel[:, 1:2] * wy
    if dealias:
        adv = dealias_var(adv, basis)
    lap_mult = ad.lift((-basis.k2)[None, None])
    df = float(nu) * ad.real(ad.ifft2(ad.fft2(w) * lap_mult))
    return df, -adv


def df_cf_spectral(w, nu, bcs=None, dealias=True):
    """Field wrapper returning df + cf for a vorticity state."""
    _require_periodic(bcs)
    basis = SpectralBasis(w.grid)
    df, cf = df_cf_spectral_var(ad.lift(w.data[None]), basis, nu, dealias)
    return Field((df + cf).value[0], w.grid)


# learnable S-Conv block -------------------------------------------------------


def make_sconv_params(in_ch, out_ch, width=12, window=11, seed=0, prefix="sc"):
    """Lift/per-mode/bypass/project parameters for one S-Conv block."""
    rng = np.random.default_rng(seed)
    return [
        Parameter(prefix + "_lift_w", xavier_init((width, in_ch, 1, 1), rng=rng)),
        Parameter(prefix + "_lift_b", np.zeros(width)),
        Parameter(prefix + "_wre",
                  xavier_init((width, width, window, window), rng=rng)),
        Parameter(prefix + "_wim",
                  xavier_init((width, width, window, window), rng=rng)),
        Parameter(prefix + "_byp_w", xavier_init((width, width, 1, 1), rng=rng)),
        Parameter(prefix + "_byp_b", np.zeros(width)),
        Parameter(prefix + "_proj_w", xavier_init((out_ch, width, 1, 1), rng=rng)),
        Parameter(prefix + "_proj_b", np.zeros(out_ch)),
    ]


def sconv_var(u, params):
    """S-Conv block on (B,C,ny,nx): lift, mode mixing + bypass, GELU, project."""
    lift_w, lift_b, wre, wim, byp_w, byp_b, proj_w, proj_b = params
    _, _, ny, nx = u.shape
    wy, wx = wre.value.shape[2:]
    if (wy - 1) // 2 + 1 > ny // 2 or (wx - 1) // 2 + 1 > nx // 2:
        raise ValueError("mode window %dx%d exceeds Nyquist for %dx%d grid"
                         % (wy, wx, ny, nx))
    h = ad.conv2d(u, lift_w.var) + lift_b.var.reshape(1, -1, 1, 1)
    hy, hx = (wy - 1) // 2, (wx - 1) // 2
    z = ad.roll2(ad.fft2(h), hy, hx)[:, :, :wy, :wx]
    z = ad.mode_mul(z, ad.make_complex(wre.var, wim.var))
    z = ad.roll2(ad.pad2d(z, (0, ny - wy), (0, nx - wx)), -hy, -hx)
    spec = ad.real(ad.ifft2(z))
    byp = ad.conv2d(h, byp_w.var) + byp_b.var.reshape(1, -1, 1, 1)
    act = ad.gelu(spec + byp)
    return ad.conv2d(act, proj_w.var) + proj_b.var.reshape(1, -1, 1, 1)


def sconv_block_eval(f, cond, params):
    """Numpy-facing S-Conv source estimate on a Field."""
    parts = [f.data[None]]
    if cond is not None and cond.x_f is not None:
        parts.append(cond.x_f.data[None])
    x = np.concatenate(parts, axis=1)
    return Field(sconv_var(ad.lift(x), params).value[0], f.grid)
