"""Grid descriptors, multi-channel 2D fields, and trajectory containers.

Index convention, used everywhere: data[c][iy][ix], x along the last axis.
The "left" edge is ix=0, "bottom" is iy=0. Grid nodes sit at i*dx starting
from the domain origin, endpoint-exclusive (node nx-1 is at extent_x - dx),
which makes periodic wrap-around exact.
"""

from dataclasses import dataclass, field

import numpy as np

EDGES = ("left", "right", "bottom", "top")
BC_KINDS = ("dirichlet", "neumann", "robin", "periodic")


@dataclass(frozen=True)
class GridSpec:
    """Uniform grid: nx x ny cells, spacings dx/dy/dt, domain extents."""

    nx: int
    ny: int
    dx: float
    dy: float
    dt: float
    extent_x: float
    extent_y: float

    def __post_init__(self):
        if self.nx < 4 or self.ny < 4:
            raise ValueError("grid must be at least 4x4, got %dx%d" % (self.nx, self.ny))
        if self.dx <= 0 or self.dy <= 0 or self.dt <= 0:
            raise ValueError("spacings must be positive")
        if abs(self.dx * self.nx - self.extent_x) > 1e-9 * max(1.0, self.extent_x):
            raise ValueError("dx*nx must equal extent_x")
        if abs(self.dy * self.ny - self.extent_y) > 1e-9 * max(1.0, self.extent_y):
            raise ValueError("dy*ny must equal extent_y")

    @classmethod
    def from_extent(cls, nx, ny, extent_x, extent_y, dt):
        return cls(nx, ny, extent_x / nx, extent_y / ny, dt, extent_x, extent_y)

    def xs(self):
        return np.arange(self.nx) * self.dx

    def ys(self):
        return np.arange(self.ny) * self.dy

    def to_dict(self):
        return {"nx": self.nx, "ny": self.ny, "dx": self.dx, "dy": self.dy,
                "dt": self.dt, "extent_x": self.extent_x, "extent_y": self.extent_y}

    @classmethod
    def from_dict(cls, d):
        return cls(d["nx"], d["ny"], d["dx"], d["dy"], d["dt"],
                   d["extent_x"], d["extent_y"])


class Field:
    """State U on a grid: float64 array of shape (m, ny, nx)."""

    def __init__(self, data, grid):
        data = np.asarray(data, dtype=np.float64)
        if data.ndim == 2:
            data = data[None]
        if data.ndim != 3:
            raise ValueError("field data must be (m, ny, nx)")
        if data.shape[1] != grid.ny or data.shape[2] != grid.nx:
            raise ValueError("data shape %s does not match grid %dx%d"
                             % (data.shape, grid.ny, grid.nx))
        if not np.all(np.isfinite(data)):
            raise ValueError("field contains non-finite entries")
        self.data = data
        self.grid = grid

    @property
    def channels(self):
        return self.data.shape[0]

    def copy(self):
        return Field(self.data.copy(), self.grid)


@dataclass
class BCSpec:
    """One edge's boundary condition.

    f is the boundary-value function: None (homogeneous), a scalar, a
    per-channel vector, an (m, edge_len) array, or a callable f(s, t) over the
    along-edge coordinate s. alpha/beta enter the Robin combination
    alpha*U + beta*dU/dn = f.
    """

    edge: str
    kind: str
    alpha: float = 0.0
    beta: float = 0.0
    f: object = None

    def __post_init__(self):
        if self.edge not in EDGES:
            raise ValueError("unknown edge %r" % self.edge)
        self.kind = self.kind.lower()
        if self.kind not in BC_KINDS:
            raise ValueError("unknown BC kind %r" % self.kind)
        if self.kind == "robin" and self.beta == 0.0:
            raise ValueError("robin BC requires beta != 0")

    def sample_f(self, m, edge_len, grid=None, t=0.0):
        """Boundary values as an (m, edge_len) array at time t."""
        if self.f is None:
            return np.zeros((m, edge_len))
        if callable(self.f):
            if grid is None:
                raise ValueError("callable f needs the grid for coordinates")
            s = grid.xs() if self.edge in ("bottom", "top") else grid.ys()
            vals = np.asarray(self.f(s, t), dtype=np.float64)
        else:
            vals = np.asarray(self.f, dtype=np.float64)
        if vals.ndim == 0:
            return np.full((m, edge_len), float(vals))
        if vals.ndim == 1 and vals.shape[0] == m and m != edge_len:
            return np.repeat(vals[:, None], edge_len, axis=1)
        if vals.ndim == 1 and vals.shape[0] == edge_len:
            return np.repeat(vals[None], m, axis=0)
        if vals.shape == (m, edge_len):
            return vals
        raise ValueError("boundary values of shape %s do not fit (%d, %d)"
                         % (vals.shape, m, edge_len))

    def to_dict(self):
        if callable(self.f):
            raise ValueError("callable boundary functions are not serializable")
        f = self.f
        if isinstance(f, np.ndarray):
            f = f.tolist()
        return {"edge": self.edge, "kind": self.kind, "alpha": self.alpha,
                "beta": self.beta, "f": f}

    @classmethod
    def from_dict(cls, d):
        f = d.get("f")
        if isinstance(f, list):
            f = np.asarray(f, dtype=np.float64)
        return cls(d["edge"], d["kind"], d.get("alpha", 0.0), d.get("beta", 0.0), f)


def validate_bcs(bcs):
    """Check the four-edge set: periodic edges must come in opposing pairs."""
    if set(bcs) != set(EDGES):
        raise ValueError("need exactly the four edges %s" % (EDGES,))
    for a, b in (("left", "right"), ("bottom", "top")):
        if (bcs[a].kind == "periodic") != (bcs[b].kind == "periodic"):
            raise ValueError("periodic must be declared on both %s and %s" % (a, b))
    return bcs


@dataclass
class ConditionSet:
    """One sample's inputs: initial state, BCs, coefficients, optional source."""

    initial: Field
    bcs: dict
    lam: np.ndarray = field(default_factory=lambda: np.zeros(0))
    x_f: Field = None

    def __post_init__(self):
        validate_bcs(self.bcs)
        self.lam = np.asarray(self.lam, dtype=np.float64).reshape(-1)
        if not np.all(np.isfinite(self.lam)):
            raise ValueError("coefficients must be finite")


class TrajectoryDataset:
    """Samples {(a_k, S_k)}: trajectories of T slices plus per-sample inputs.

    trajectories[k] has shape (T, m, ny, nx); slice t0 starts the rollout and
    slices up to t_train are the training horizon.
    """

    def __init__(self, grid, conditions, trajectories, t0, t_train,
                 split_tags=None, channel_names=None):
        self.grid = grid
        self.conditions = list(conditions)
        self.trajectories = [np.asarray(tr, dtype=np.float64) for tr in trajectories]
        if len(self.conditions) != len(self.trajectories):
            raise ValueError("one condition set per trajectory required")
        shapes = {tr.shape for tr in self.trajectories}
        if len(shapes) > 1:
            raise ValueError("trajectories differ in shape: %s" % shapes)
        t_total = self.trajectories[0].shape[0] if self.trajectories else 0
        if self.trajectories and self.trajectories[0].shape[-2:] != (grid.ny, grid.nx):
            raise ValueError("trajectory grid mismatch")
        if not (1 <= t_train <= t_total):
            raise ValueError("need 1 <= T' <= T")
        if not (0 <= t0 < t_total):
            raise ValueError("t0 out of range")
        self.t0 = int(t0)
        self.t_train = int(t_train)
        self.t_total = int(t_total)
        self.split_tags = list(split_tags) if split_tags is not None \
            else ["train"] * len(self.conditions)
        self.channel_names = list(channel_names) if channel_names is not None \
            else ["c%d" % i for i in range(self.channels)]

    def __len__(self):
        return len(self.conditions)

    @property
    def channels(self):
        return self.trajectories[0].shape[1] if self.trajectories else 0

    def indices(self,*tags):
        return [i for i, t in enumerate(self.split_tags) if t in tags]


def field_stats(f):
    """Per-channel (min, max, mean, l2norm) over all cells."""
    d = f.data
    return [(float(d[c].min()), float(d[c].max()), float(d[c].mean()),
             float(np.sqrt((d[c] ** 2).sum()))) for c in range(f.channels)]


def downsample(f, factor):
    """Strided subsampling keeping every factor-th node from index 0."""
    factor = int(factor)
    if factor < 1:
        raise ValueError("factor must be >= 1")
    if factor == 1:
        return f
    g = f.grid
    if g.nx % factor or g.ny % factor:
        raise ValueError("grid %dx%d not divisible by factor %d"
                         % (g.nx, g.ny, factor))
    sub = GridSpec(g.nx // factor, g.ny // factor, g.dx * factor, g.dy * factor,
                   g.dt, g.extent_x, g.extent_y)
    return Field(f.data[:, ::factor, ::factor].copy(), sub)
