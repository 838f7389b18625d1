"""Ghost-cell boundary embedding: U -> padded U-tilde before spatial operators.

First ghost layer, per edge and channel (x shown, y analogous; f is the
boundary data, n the outward normal):
  dirichlet: boundary node forced to f, ghost = 2f - U_inner (odd reflection)
  neumann:   ghost = U_inner + 2*dx*f   (central difference of dU/dn = f)
  robin:     ghost = (2*dx/beta)*(f - alpha*U_bnd) + U_inner
  periodic:  wrap-around copy of the opposite side
For ghost width 2 on non-periodic edges the second layer extends the first by
linear extrapolation. Corners are filled last by averaging the two
adjacent-edge rules applied to each other's ghost strips.

Everything is built from differentiable primitives so gradients flow through
the embedding during rollout training.
"""

import numpy as np

from . import autodiff as ad
from .fields import EDGES, Field, validate_bcs


class PaddedField:
    """A field plus its ghost halo: array shape (m, ny+2g, nx+2g)."""

    def __init__(self, array, grid, ghost_width):
        self.array = array
        self.grid = grid
        self.ghost_width = int(ghost_width)

    @property
    def inner(self):
        g = self.ghost_width
        return Field(self.array[:, g:-g, g:-g], self.grid)


def _const(arr, like_batch):
    """Lift boundary data to a broadcastable constant block."""
    return ad.lift(np.broadcast_to(arr, like_batch).copy())


def _ghost_cols(u, side, bc, f_vals, dx, g):
    """Ghost columns for one x-side of `u` (B,m,R,nx) -> (B,m,R,g).

    Rows of the result are ordered outermost-first on the left side and
    boundary-first on the right side, matching array assembly order.
    f_vals has shape (m, R).
    """
    b, m, r, nx = u.shape
    fb = _const(f_vals[None, :, :, None], (b, m, r, 1))
    if bc.kind == "periodic":
        return u[:, :, :, nx - g:] if side == "left" else u[:, :, :, :g]
    if side == "left":
        inner, bnd = u[:, :, :, 1:2], u[:, :, :, 0:1]
    else:
        inner, bnd = u[:, :, :, nx - 2:nx - 1], u[:, :, :, nx - 1:nx]
    if bc.kind == "dirichlet":
        first = 2.0 * fb - inner
    elif bc.kind == "neumann":
        first = inner + (2.0 * dx) * fb
    else:  # robin
        first = (2.0 * dx / bc.beta) * (fb - bc.alpha * bnd) + inner
    if g == 1:
        return first
    second = 2.0 * first - bnd
    return ad.concat([second, first] if side == "left" else [first, second], axis=3)


def _ghost_rows(u, side, bc, f_vals, dy, g):
    """Ghost rows for one y-side of `u` (B,m,ny,C) -> (B,m,g,C)."""
    b, m, ny, c = u.shape
    fb = _const(f_vals[None, :, None, :], (b, m, 1, c))
    if bc.kind == "periodic":
        return u[:, :, ny - g:, :] if side == "bottom" else u[:, :, :g, :]
    if side == "bottom":
        inner, bnd = u[:, :, 1:2, :], u[:, :, 0:1, :]
    else:
        inner, bnd = u[:, :, ny - 2:ny - 1, :], u[:, :, ny - 1:ny, :]
    if bc.kind == "dirichlet":
        first = 2.0 * fb - inner
    elif bc.kind == "neumann":
        first = inner + (2.0 * dy) * fb
    else:
        first = (2.0 * dy / bc.beta) * (fb - bc.alpha * bnd) + inner
    if g == 1:
        return first
    second = 2.0 * first - bnd
    return ad.concat([second, first] if side == "bottom" else [first, second], axis=2)


def embed_var(u, bcs, grid, g=1, t=0.0):
    """Differentiable embedding of a batched state (B,m,ny,nx) -> padded Var."""
    if g not in (1, 2):
        raise ValueError("ghost width must be 1 or 2")
    validate_bcs(bcs)
    u = ad.lift(u)
    b, m, ny, nx = u.shape
    fx = {e: bcs[e].sample_f(m, ny, grid, t) for e in ("left", "right")}
    fy = {e: bcs[e].sample_f(m, nx, grid, t) for e in ("bottom", "top")}

    # force dirichlet boundary nodes first so adjacent formulas see them
    if bcs["left"].kind == "dirichlet":
        u = ad.concat([_const(fx["left"][None, :, :, None], (b, m, ny, 1)),
                       u[:, :, :, 1:]], axis=3)
    if bcs["right"].kind == "dirichlet":
        u = ad.concat([u[:, :, :, :nx - 1],
                       _const(fx["right"][None, :, :, None], (b, m, ny, 1))], axis=3)
    if bcs["bottom"].kind == "dirichlet":
        u = ad.concat([_const(fy["bottom"][None, :, None, :], (b, m, 1, nx)),
                       u[:, :, 1:, :]], axis=2)
    if bcs["top"].kind == "dirichlet":
        u = ad.concat([u[:, :, :ny - 1, :],
                       _const(fy["top"][None, :, None, :], (b, m, 1, nx))], axis=2)

    xl = _ghost_cols(u, "left", bcs["left"], fx["left"], grid.dx, g)
    xr = _ghost_cols(u, "right", bcs["right"], fx["right"], grid.dx, g)
    yb = _ghost_rows(u, "bottom", bcs["bottom"], fy["bottom"], grid.dy, g)
    yt = _ghost_rows(u, "top", bcs["top"], fy["top"], grid.dy, g)

    # corners: average the two adjacent-edge rules applied to each other's strip,
    # extending boundary data by its endpoint value
    def corner(xstrip, ystrip, xside, yside):
        fx_end = np.repeat(fx[xside][:, :1] if yside == "bottom"
                           else fx[xside][:, -1:], g, axis=1)
        fy_end = np.repeat(fy[yside][:, :1] if xside == "left"
                           else fy[yside][:, -1:], g, axis=1)
        from_y = _ghost_cols(ystrip, xside, bcs[xside], fx_end, grid.dx, g)
        from_x = _ghost_rows(xstrip, yside, bcs[yside], fy_end, grid.dy, g)
        return 0.5 * (from_y + from_x)

    c_bl = corner(xl, yb, "left", "bottom")
    c_br = corner(xr, yb, "right", "bottom")
    c_tl = corner(xl, yt, "left", "top")
    c_tr = corner(xr, yt, "right", "top")

    bottom = ad.concat([c_bl, yb, c_br], axis=3)
    mid = ad.concat([xl, u, xr], axis=3)
    top = ad.concat([c_tl, yt, c_tr], axis=3)
    return ad.concat([bottom, mid, top], axis=2)


def embed_bcs(f, bcs, g=1, t=0.0):
    """Numpy-facing wrapper: Field -> PaddedField."""
    out = embed_var(ad.lift(f.data[None]), bcs, f.grid, g=g, t=t)
    return PaddedField(out.value[0], f.grid, g)


def bc_residual(f, bcs, t=0.0):
    """How well a plain field satisfies each declared BC.

    Returns {edge: residual}, the L2 norm of the discrete violation divided by
    max(||f_edge||, 1). Periodic edges are identically satisfied on this grid
    (no duplicated node) and report 0. Normal derivatives at the boundary are
    taken one-sided at second order.
    """
    validate_bcs(bcs)
    d = f.data
    m = f.channels
    g = f.grid
    out = {}
    for edge in EDGES:
        bc = bcs[edge]
        if bc.kind == "periodic":
            out[edge] = 0.0
            continue
        if edge in ("left", "right"):
            n = g.ny
            h = g.dx
            sl = (slice(None), slice(None))
            if edge == "left":
                u0, u1, u2 = d[:, :, 0], d[:, :, 1], d[:, :, 2]
            else:
                u0, u1, u2 = d[:, :, -1], d[:, :, -2], d[:, :, -3]
        else:
            n = g.nx
            h = g.dy
            if edge == "bottom":
                u0, u1, u2 = d[:, 0, :], d[:, 1, :], d[:, 2, :]
            else:
                u0, u1, u2 = d[:, -1, :], d[:, -2, :], d[:, -3, :]
        fv = bc.sample_f(m, n, g, t)
        dn = (3.0 * u0 - 4.0 * u1 + u2) / (2.0 * h)  # outward one-sided
        if bc.kind == "dirichlet":
            viol = u0 - fv
        elif bc.kind == "neumann":
            viol = dn - fv
        else:
            viol = bc.alpha * u0 + bc.beta * dn - fv
        out[edge] = float(np.sqrt((viol ** 2).sum())
                          / max(np.sqrt((fv ** 2).sum()), 1.0))
    return out


def ring_mask(ny, nx, width=1):
    """Boolean mask selecting the outermost `width` cells of the grid."""
    mask = np.zeros((ny, nx), dtype=bool)
    mask[:width, :] = mask[-width:, :] = True
    mask[:, :width] = mask[:, -width:] = True
    return mask
