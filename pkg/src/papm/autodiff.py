"""Reverse-mode automatic differentiation over numpy arrays.

Define-by-run tape in the micrograd style: every operation returns a Var
holding its value plus a closure that pushes adjoints to its parents.
Values are float64 (complex128 where spectral work needs it); gradients of
complex nodes follow the convention grad(z) = dL/d(Re z) + i dL/d(Im z),
under which the adjoint of the unitary FFT is the unitary inverse FFT and
products backprop through conjugated operands.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf

# set True to raise on the first non-finite value produced by any op
nan_checks = False

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def _sum_to_shape(g, shape):
    """Undo numpy broadcasting so g can be accumulated into a leaf of `shape`."""
    shape = tuple(shape)
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


class Var:
    """One node of the computation graph, wrapping a numpy array."""

    __slots__ = ("value", "grad", "parents", "_backward", "requires_grad", "op")

    def __init__(self, value, parents=(), backward=None, requires_grad=None, op="leaf"):
        if isinstance(value, np.ndarray):
            self.value = value
        else:
            self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self.parents = parents
        self._backward = backward
        self.op = op
        if requires_grad is None:
            requires_grad = any(p.requires_grad for p in parents)
        self.requires_grad = requires_grad
        if nan_checks and not np.all(np.isfinite(self.value)):
            raise FloatingPointError("non-finite value produced by op '%s'" % op)

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return "Var(op=%s, shape=%s)" % (self.op, self.value.shape)

    # arithmetic -----------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __sub__(self, other):
        return add(self, neg(lift(other)))

    def __rsub__(self, other):
        return add(lift(other), neg(self))

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(lift(other), self)

    def __pow__(self, p):
        return power(self, p)

    def __getitem__(self, idx):
        return take(self, idx)

    def __matmul__(self, other):  # pragma: no cover - guard only
        raise NotImplementedError("matmul is not a supported primitive")

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis, keepdims)

    def reshape(self, *shape):
        return reshape(self, shape)


def lift(x):
    """Wrap a constant as a non-differentiable Var."""
    if isinstance(x, Var):
        return x
    val = np.asarray(x)
    if val.dtype not in (np.float64, np.complex128):
        val = val.astype(np.float64)
    return Var(val, requires_grad=False, op="const")


def _accum(node, g):
    if not node.requires_grad:
        return
    g = np.asarray(g)
    if np.iscomplexobj(g) and not np.iscomplexobj(node.value):
        g = g.real
    g = _sum_to_shape(g, node.value.shape)
    if node.grad is None:
        node.grad = g.copy() if g.base is not None or g is node.value else g
    else:
        node.grad = node.grad + g


# primitives ---------------------------------------------------------------


def add(a, b):
    a, b = lift(a), lift(b)
    out = Var(a.value + b.value, (a, b), op="add")

    def bw(g):
        _accum(a, g)
        _accum(b, g)

    out._backward = bw
    return out


def neg(a):
    a = lift(a)
    out = Var(-a.value, (a,), op="neg")
    out._backward = lambda g: _accum(a, -g)
    return out


def mul(a, b):
    a, b = lift(a), lift(b)
    out = Var(a.value * b.value, (a, b), op="mul")

    def bw(g):
        _accum(a, g * np.conj(b.value))
        _accum(b, g * np.conj(a.value))

    out._backward = bw
    return out


def div(a, b):
    a, b = lift(a), lift(b)
    out = Var(a.value / b.value, (a, b), op="div")

    def bw(g):
        _accum(a, g * np.conj(1.0 / b.value))
        _accum(b, g * np.conj(-a.value / (b.value * b.value)))

    out._backward = bw
    return out


def power(a, p):
    if isinstance(p, Var):
        raise NotImplementedError("only constant exponents are supported")
    a = lift(a)
    out = Var(a.value ** p, (a,), op="pow")
    out._backward = lambda g: _accum(a, g * np.conj(p * a.value ** (p - 1)))
    return out


def reduce_sum(a, axis=None, keepdims=False):
    a = lift(a)
    out = Var(a.value.sum(axis=axis, keepdims=keepdims), (a,), op="sum")

    def bw(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(g, a.value.shape))

    out._backward = bw
    return out


def reduce_mean(a, axis=None, keepdims=False):
    a = lift(a)
    n = a.value.size if axis is None else np.prod(
        [a.value.shape[ax] for ax in np.atleast_1d(axis)])
    return reduce_sum(a, axis, keepdims) * (1.0 / float(n))


def reshape(a, shape):
    a = lift(a)
    out = Var(a.value.reshape(shape), (a,), op="reshape")
    out._backward = lambda g: _accum(a, np.asarray(g).reshape(a.value.shape))
    return out


def take(a, idx):
    """Basic (non-fancy) slicing; adjoint scatters into zeros."""
    a = lift(a)
    out = Var(a.value[idx], (a,), op="slice")

    def bw(g):
        full = np.zeros_like(a.value)
        full[idx] = g
        _accum(a, full)

    out._backward = bw
    return out


def concat(parts, axis):
    parts = [lift(p) for p in parts]
    out = Var(np.concatenate([p.value for p in parts], axis=axis),
              tuple(parts), op="concat")
    sizes = [p.value.shape[axis] for p in parts]

    def bw(g):
        start = 0
        for p, s in zip(parts, sizes):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(start, start + s)
            _accum(p, g[tuple(sl)])
            start += s

    out._backward = bw
    return out


def pad2d(a, py, px):
    """Zero-pad the last two axes by (before, after) tuples py and px."""
    a = lift(a)
    width = [(0, 0)] * (a.value.ndim - 2) + [tuple(py), tuple(px)]
    out = Var(np.pad(a.value, width), (a,), op="pad2d")
    sl = tuple([slice(None)] * (a.value.ndim - 2)
               + [slice(py[0], py[0] + a.value.shape[-2]),
                  slice(px[0], px[0] + a.value.shape[-1])])
    out._backward = lambda g: _accum(a, np.asarray(g)[sl])
    return out


def transpose2(a):
    """Swap the last two axes."""
    a = lift(a)
    out = Var(np.swapaxes(a.value, -1, -2), (a,), op="transpose2")
    out._backward = lambda g: _accum(a, np.swapaxes(np.asarray(g), -1, -2))
    return out


def roll2(a, sy, sx):
    """Circular shift of the last two axes."""
    a = lift(a)
    out = Var(np.roll(a.value, (sy, sx), axis=(-2, -1)), (a,), op="roll2")
    out._backward = lambda g: _accum(a, np.roll(np.asarray(g), (-sy, -sx), axis=(-2, -1)))
    return out


def where(cond, a, b):
    """Select by a constant boolean mask (the mask itself is not differentiated)."""
    cond = np.asarray(cond, dtype=bool)
    a, b = lift(a), lift(b)
    out = Var(np.where(cond, a.value, b.value), (a, b), op="where")

    def bw(g):
        _accum(a, np.where(cond, g, 0.0))
        _accum(b, np.where(cond, 0.0, g))

    out._backward = bw
    return out


# pointwise nonlinearities ---------------------------------------------------


def relu(a):
    a = lift(a)
    mask = a.value > 0
    out = Var(np.where(mask, a.value, 0.0), (a,), op="relu")
    out._backward = lambda g: _accum(a, np.where(mask, g, 0.0))
    return out


def gelu(a):
    """Exact GELU x·Φ(x) with the Gaussian CDF, not the tanh approximation."""
    a = lift(a)
    phi = 0.5 * (1.0 + erf(a.value * _INV_SQRT2))
    out = Var(a.value * phi, (a,), op="gelu")
    pdf = np.exp(-0.5 * a.value * a.value) * _INV_SQRT_2PI
    out._backward = lambda g: _accum(a, g * (phi + a.value * pdf))
    return out


def tanh(a):
    a = lift(a)
    t = np.tanh(a.value)
    out = Var(t, (a,), op="tanh")
    out._backward = lambda g: _accum(a, g * (1.0 - t * t))
    return out


def sin(a):
    a = lift(a)
    out = Var(np.sin(a.value), (a,), op="sin")
    out._backward = lambda g: _accum(a, g * np.cos(a.value))
    return out


def cos(a):
    a = lift(a)
    out = Var(np.cos(a.value), (a,), op="cos")
    out._backward = lambda g: _accum(a, -g * np.sin(a.value))
    return out


def exp(a):
    a = lift(a)
    e = np.exp(a.value)
    out = Var(e, (a,), op="exp")
    out._backward = lambda g: _accum(a, g * np.conj(e))
    return out


# convolution ----------------------------------------------------------------


def conv2d(x, k):
    """Valid 2D cross-correlation, stride 1.

    x: (B, C, H, W), k: (O, C, kh, kw) -> (B, O, H-kh+1, W-kw+1).
    """
    x, k = lift(x), lift(k)
    kh, kw = k.value.shape[-2:]
    win = sliding_window_view(x.value, (kh, kw), axis=(-2, -1))
    out_v = np.tensordot(win, k.value, axes=([1, 4, 5], [1, 2, 3]))
    out = Var(np.ascontiguousarray(np.moveaxis(out_v, -1, 1)), (x, k), op="conv2d")

    def bw(g):
        g = np.ascontiguousarray(g)
        if x.requires_grad:
            gp = np.pad(g, ((0, 0), (0, 0), (kh - 1, kh - 1), (kw - 1, kw - 1)))
            gwin = sliding_window_view(gp, (kh, kw), axis=(-2, -1))
            kf = k.value[:, :, ::-1, ::-1]
            gx = np.tensordot(gwin, kf, axes=([1, 4, 5], [0, 2, 3]))
            _accum(x, np.moveaxis(gx, -1, 1))
        if k.requires_grad:
            gk = np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))
            _accum(k, gk)

    out._backward = bw
    return out


# complex / spectral ----------------------------------------------------------


def make_complex(re, im):
    re, im = lift(re), lift(im)
    out = Var(re.value + 1j * im.value, (re, im), op="make_complex")

    def bw(g):
        _accum(re, np.asarray(g).real)
        _accum(im, np.asarray(g).imag)

    out._backward = bw
    return out


def real(a):
    a = lift(a)
    out = Var(np.ascontiguousarray(a.value.real), (a,), op="real")
    out._backward = lambda g: _accum(a, np.asarray(g))
    return out


def imag(a):
    a = lift(a)
    out = Var(np.ascontiguousarray(a.value.imag), (a,), op="imag")
    out._backward = lambda g: _accum(a, 1j * np.asarray(g))
    return out


def fft2(a):
    """Unitary 2D FFT over the last two axes; adjoint is the unitary IFFT."""
    a = lift(a)
    out = Var(np.fft.fft2(a.value, norm="ortho"), (a,), op="fft2")
    out._backward = lambda g: _accum(a, np.fft.ifft2(np.asarray(g), norm="ortho"))
    return out


def ifft2(a):
    a = lift(a)
    out = Var(np.fft.ifft2(a.value, norm="ortho"), (a,), op="ifft2")
    out._backward = lambda g: _accum(a, np.fft.fft2(np.asarray(g), norm="ortho"))
    return out


def mode_mul(x, w):
    """Per-mode channel mixing: (B,I,m,n) x (I,O,m,n) -> (B,O,m,n), complex."""
    x, w = lift(x), lift(w)
    out = Var(np.einsum("bimn,iomn->bomn", x.value, w.value), (x, w), op="mode_mul")

    def bw(g):
        g = np.asarray(g)
        if x.requires_grad:
            _accum(x, np.einsum("bomn,iomn->bimn", g, np.conj(w.value)))
        if w.requires_grad:
            _accum(w, np.einsum("bimn,bomn->iomn", np.conj(x.value), g))

    out._backward = bw
    return out


# driver ----------------------------------------------------------------------


def backward(loss):
    """Push adjoints from `loss` (any shape; seeded with ones) to all leaves."""
    order = []
    seen = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    loss.grad = np.ones_like(loss.value)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
            if node.parents:
                node.grad = None  # free interior adjoints as we go


def value_and_grad(loss_fn, leaves):
    """Evaluate loss_fn() -> scalar Var and return (float, {name: grad array}).

    leaves: dict name -> Var with requires_grad=True. Leaves untouched by the
    program get a zero gradient (an empty dict stays empty).
    """
    for v in leaves.values():
        v.grad = None
    loss = loss_fn()
    if loss.value.size != 1:
        raise ValueError("loss must be scalar")
    backward(loss)
    grads = {}
    for name, v in leaves.items():
        grads[name] = np.zeros_like(v.value) if v.grad is None else v.grad
    return float(loss.value.real), grads


def finite_difference_check(loss_fn, leaves, h=1e-5, samples_per_leaf=None, seed=0):
    """Worst relative deviation between reverse-mode and central differences.

    Perturbs every entry of every leaf (or a random subset of size
    samples_per_leaf when the parameter count makes that unaffordable).
    """
    if h <= 0:
        raise ValueError("h must be positive")
    if not leaves:
        return 0.0
    _, grads = value_and_grad(loss_fn, leaves)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for name, v in leaves.items():
        flat = v.value.reshape(-1)
        n = flat.size
        if samples_per_leaf is None or samples_per_leaf >= n:
            picks = np.arange(n)
        else:
            picks = rng.choice(n, size=samples_per_leaf, replace=False)
        gflat = grads[name].reshape(-1)
        for i in picks:
            keep = flat[i]
            flat[i] = keep + h
            fp = float(loss_fn().value.real)
            flat[i] = keep - h
            fm = float(loss_fn().value.real)
            flat[i] = keep
            fd = (fp - fm) / (2.0 * h)
            denom = max(abs(gflat[i]), abs(fd), 1e-8)
            worst = max(worst, abs(gflat[i] - fd) / denom)
    return worst
