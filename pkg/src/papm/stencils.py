"""Localized-path spatial operators: finite-difference kernels as convolutions.

Fixed kernels are the fourth-order central stencils
  K_s1 = [1, -8, 0, 8, -1] / (12 dx)          (first derivative, one axis)
  K_s2 = cross of (-1, 16, -60, 16, -1) / (12 dx^2)   (Laplacian)
plus second-order one-sided pairs for upwinding; all applied as cross-
correlations on BC-padded fields. Cells within two nodes of a non-periodic
boundary fall back to the second-order 3-point stencils, which only need the
single ghost layer that the Appendix-style BC formulas define.

Trainable kernels are Parameters with structural projections: diffusion
kernels symmetric under transpose and double flip, convection kernels
upper-triangular (column kernels are stored transposed so one tag covers
both axes), every derivative kernel constrained to zero entry-sum.
"""

import numpy as np

from . import autodiff as ad
from .bc import PaddedField
from .fields import Field
from .optim import Parameter, xavier_init


# fixed kernel values ---------------------------------------------------------


def k_dx1(dx):
    """Fourth-order d/dx as a 1x5 cross-correlation kernel."""
    return np.array([[1.0, -8.0, 0.0, 8.0, -1.0]]) / (12.0 * dx)


def k_dy1(dy):
    return k_dx1(dy).T


def k_lap(dx, dy):
    """Fourth-order Laplacian: 5x5 cross pattern."""
    line = np.array([-1.0, 16.0, -30.0, 16.0, -1.0])
    k = np.zeros((5, 5))
    k[2, :] += line / (12.0 * dx * dx)
    k[:, 2] += line / (12.0 * dy * dy)
    return k


def k_dt(dt):
    """Central time-derivative weights over three consecutive slices."""
    return np.array([-1.0, 0.0, 1.0]) / (2.0 * dt)


def k_dx1_2nd(dx):
    return np.array([[-1.0, 0.0, 1.0]]) / (2.0 * dx)


def k_dy1_2nd(dy):
    return k_dx1_2nd(dy).T


def k_lap_2nd(dx, dy):
    k = np.zeros((3, 3))
    k[1, :] += np.array([1.0, -2.0, 1.0]) / (dx * dx)
    k[:, 1] += np.array([1.0, -2.0, 1.0]) / (dy * dy)
    return k


def k_upwind_fwd(dx):
    """Second-order forward difference centered in a 1x5 window."""
    return np.array([[0.0, 0.0, -3.0, 4.0, -1.0]]) / (2.0 * dx)


def k_upwind_bwd(dx):
    return np.array([[1.0, -4.0, 3.0, 0.0, 0.0]]) / (2.0 * dx)


# application ------------------------------------------------------------------


def corr_depthwise(x, k):
    """Cross-correlate every channel of x (B,C,H,W) with one 2D kernel."""
    b, c, h, w = x.shape
    k = ad.lift(k)
    kh, kw = k.shape
    out = ad.conv2d(x.reshape(b * c, 1, h, w), k.reshape(1, 1, kh, kw))
    return out.reshape(b, c, h - kh + 1, w - kw + 1)


def apply_kernel_padded(up, k, g):
    """Apply kernel to a g-padded state and crop back to the interior shape."""
    kh, kw = (k.shape if isinstance(k, np.ndarray) else k.value.shape)[-2:]
    ry, rx = (kh - 1) // 2, (kw - 1) // 2
    if ry > g or rx > g:
        raise ValueError("ghost width %d too small for %dx%d kernel" % (g, kh, kw))
    out = corr_depthwise(up, k)
    my, mx = g - ry, g - rx
    sl_y = slice(my, -my) if my else slice(None)
    sl_x = slice(mx, -mx) if mx else slice(None)
    return out[:, :, sl_y, sl_x]


def apply_stencil(pf, k):
    """Numpy-facing wrapper: PaddedField x kernel -> interior Field."""
    up = ad.lift(pf.array[None])
    out = apply_kernel_padded(up, np.asarray(k, dtype=np.float64), pf.ghost_width)
    return Field(out.value[0], pf.grid)


def _edge_fallback_mask(ny, nx, periodic_x, periodic_y, affect_x, affect_y):
    """Cells where a wide kernel would reach past a non-periodic first ghost."""
    mask = np.zeros((ny, nx), dtype=bool)
    if affect_x and not periodic_x:
        mask[:, :2] = mask[:, -2:] = True
    if affect_y and not periodic_y:
        mask[:2, :] = mask[-2:, :] = True
    return mask


class KernelBank:
    """Derivative operators for the localized path, fixed or trainable.

    Fixed banks carry no parameters and blend in the 3-point fallback near
    non-periodic edges. Trainable banks hold projected Parameters applied
    uniformly over the width-2 halo (second layer extrapolated by bc.embed).
    """

    def __init__(self, grid, kind="fixed", ksize=5, cf_scheme="central",
                 seed=0, prefix="kb"):
        if kind not in ("fixed", "trainable"):
            raise ValueError("kernel kind must be fixed or trainable")
        if cf_scheme not in ("central", "upwind"):
            raise ValueError("cf_scheme must be central or upwind")
        self.grid = grid
        self.kind = kind
        self.ksize = int(ksize)
        self.cf_scheme = cf_scheme
        self._params = []
        if kind == "trainable":
            dx, dy = grid.dx, grid.dy
            if self.ksize == 5:
                lap0 = k_lap(dx, dy)
                fwdx = np.zeros((5, 5))
                fwdx[2] = k_upwind_fwd(dx)[0]
                fwdy = np.zeros((5, 5))
                fwdy[2] = k_upwind_fwd(dy)[0]  # stored transposed
            elif self.ksize == 3:
                lap0 = k_lap_2nd(dx, dy)
                fwdx = np.zeros((3, 3))
                fwdx[1, 1:] = np.array([-1.0, 1.0]) / dx
                fwdy = np.zeros((3, 3))
                fwdy[1, 1:] = np.array([-1.0, 1.0]) / dy
            else:
                raise ValueError("trainable kernels support size 3 or 5")
            self.p_lap = Parameter(prefix + "_lap", lap0,
                                   symmetry_tag="symmetric2d", zero_sum=True)
            self.p_cx = Parameter(prefix + "_cx", fwdx,
                                  symmetry_tag="upper_triangular", zero_sum=True)
            self.p_cy = Parameter(prefix + "_cy", fwdy,
                                  symmetry_tag="upper_triangular", zero_sum=True)
            self._params = [self.p_lap, self.p_cx, self.p_cy]

    def params(self):
        return list(self._params)

    def ghost_width(self):
        return 2

    def _blend(self, up, wide_k, narrow_k, g, periodic_x, periodic_y,
               affect_x, affect_y):
        full = apply_kernel_padded(up, wide_k, g)
        _, _, ny, nx = full.shape
        mask = _edge_fallback_mask(ny, nx, periodic_x, periodic_y,
                                   affect_x, affect_y)
        if not mask.any():
            return full
        near = apply_kernel_padded(up, narrow_k, g)
        return ad.where(mask, near, full)

    def dx(self, up, g, periodic_x=True, periodic_y=True):
        """d/dx of the padded state, interior-shaped."""
        gr = self.grid
        if self.kind == "trainable":
            return apply_kernel_padded(up, self.p_cx.var, g)
        return self._blend(up, k_dx1(gr.dx), k_dx1_2nd(gr.dx), g,
                           periodic_x, periodic_y, True, False)

    def dy(self, up, g, periodic_x=True, periodic_y=True):
        gr = self.grid
        if self.kind == "trainable":
            # column kernel recovered by transposing the stored row form
            return apply_kernel_padded(up, ad.transpose2(self.p_cy.var), g)
        return self._blend(up, k_dy1(gr.dy), k_dy1_2nd(gr.dy), g,
                           periodic_x, periodic_y, False, True)

    def lap(self, up, g, periodic_x=True, periodic_y=True):
        gr = self.grid
        if self.kind == "trainable":
            return apply_kernel_padded(up, self.p_lap.var, g)
        return self._blend(up, k_lap(gr.dx, gr.dy), k_lap_2nd(gr.dx, gr.dy), g,
                           periodic_x, periodic_y, True, True)

    def dx_upwind(self, up, vel_sign, g):
        """Sign-selected one-sided d/dx (fixed scheme only)."""
        gr = self.grid
        fwd = apply_kernel_padded(up, k_upwind_fwd(gr.dx), g)
        bwd = apply_kernel_padded(up, k_upwind_bwd(gr.dx), g)
        return ad.where(vel_sign > 0, bwd, fwd)

    def dy_upwind(self, up, vel_sign, g):
        gr = self.grid
        fwd = apply_kernel_padded(up, k_upwind_fwd(gr.dy).T, g)
        bwd = apply_kernel_padded(up, k_upwind_bwd(gr.dy).T, g)
        return ad.where(vel_sign > 0, bwd, fwd)


def diffusive_flow_var(bank, up, diff_coeff, g, periodic_x=True, periodic_y=True):
    """RHS diffusion term D * Laplacian(U) with per-channel (or per-sample) D."""
    co = np.asarray(diff_coeff, dtype=np.float64)
    if np.any(co < 0):
        raise ValueError("diffusivity must be nonnegative")
    if co.ndim == 1:
        co = co.reshape(1, -1, 1, 1)
    elif co.ndim == 2:
        co = co[:, :, None, None]
    return bank.lap(up, g, periodic_x, periodic_y) * ad.lift(co)


def convective_flow_var(bank, up, vel, g, periodic_x=True, periodic_y=True):
    """Advective RHS term -(v . grad)U, velocity broadcast over channels."""
    if vel.shape[1] != 2:
        raise ValueError("velocity needs exactly (u, v) channels")
    if bank.kind == "fixed" and bank.cf_scheme == "upwind":
        du = bank.dx_upwind(up, vel.value[:, 0:1], g)
        dv = bank.dy_upwind(up, vel.value[:, 1:2], g)
    else:
        du = bank.dx(up, g, periodic_x, periodic_y)
        dv = bank.dy(up, g, periodic_x, periodic_y)
    return -(vel[:, 0:1] * du + vel[:, 1:2] * dv)


def diffusive_flow_local(pf, diff_coeff):
    """Numpy-facing: PaddedField -> D*Laplacian field (periodic-interior rule)."""
    bank = KernelBank(pf.grid, "fixed")
    out = diffusive_flow_var(bank, ad.lift(pf.array[None]), diff_coeff,
                             pf.ghost_width)
    return Field(out.value[0], pf.grid)


def convective_flow_local(pf, velocity):
    bank = KernelBank(pf.grid, "fixed")
    out = convective_flow_var(bank, ad.lift(pf.array[None]),
                              ad.lift(velocity.data[None]), pf.ghost_width)
    return Field(out.value[0], pf.grid)


# source block -----------------------------------------------------------------


def make_resnet_params(in_ch, out_ch, hidden=16, ksize=5, n_layers=4,
                       seed=0, prefix="src"):
    """Conv-stack parameters: n_layers of ksize convs, GELU between."""
    rng = np.random.default_rng(seed)
    params = []
    chans = [in_ch] + [hidden] * (n_layers - 1) + [out_ch]
    for i in range(n_layers):
        w = xavier_init((chans[i + 1], chans[i], ksize, ksize), c=0.02, rng=rng)
        params.append(Parameter("%s_w%d" % (prefix, i), w))
        params.append(Parameter("%s_b%d" % (prefix, i), np.zeros(chans[i + 1])))
    return params


def resnet_source_var(x_padded, skip, params, g, ksize=5):
    """Shallow conv stack plus additive skip: the IST/EST estimate.

    x_padded: (B, C_in, ny+2g, nx+2g) with the halo consumed by the first
    layer; skip: (B, m, ny, nx) state channels added to the stack output.
    """
    r = (ksize - 1) // 2
    if r > g:
        raise ValueError("ghost width %d too small for kernel %d" % (g, ksize))
    m = g - r
    h = x_padded
    if m:
        h = h[:, :, m:-m, m:-m]
    n_layers = len(params) // 2
    for i in range(n_layers):
        w, b = params[2 * i], params[2 * i + 1]
        if i > 0:
            h = ad.pad2d(h, (r, r), (r, r))
        h = ad.conv2d(h, w.var) + b.var.reshape(1, -1, 1, 1)
        if i < n_layers - 1:
            h = ad.gelu(h)
    return h + skip


def resnet_block_eval(f, cond, params, feed_coeff=False):
    """Numpy-facing source block: zero halo, inputs (U [, lambda] [, X_F])."""
    u = f.data[None]
    parts = [u]
    if feed_coeff and cond.lam.size:
        parts.append(np.broadcast_to(cond.lam.reshape(1, -1, 1, 1),
                                     (1, cond.lam.size) + u.shape[2:]))
    if cond.x_f is not None:
        parts.append(cond.x_f.data[None])
    x = np.concatenate(parts, axis=1)
    ksize = params[0].value.shape[-1]
    r = (ksize - 1) // 2
    xp = ad.lift(np.pad(x, ((0, 0), (0, 0), (r, r), (r, r))))
    out = resnet_source_var(xp, ad.lift(u), params, g=r, ksize=ksize)
    return Field(out.value[0], f.grid)
