"""Assembly of the state derivative: dU/dt = DF + CF + IST + EST.

Three paths share one interface. The localized path applies finite-difference
kernel banks to the BC-padded state; the spectral path differentiates in
Fourier space and inverts vorticity for the advecting velocity; the hybrid
path computes a provisional velocity tendency with localized operators plus a
conv source, then routes it through an S-Conv that emits the coupled
(du, dv, dp) correction, reported as the EST term so the four-term breakdown
stays additive.

Ablation flags mirror the model variants used for comparison: no_DF / no_CF /
no_Phy drop physics terms, no_BCs replaces the ghost embedding with zero
padding, no_NODE switches the integrator to forward Euler (handled by the
stepper), no_All reduces the model to the source block with its residual
connection.
"""

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .bc import embed_var
from .fields import Field
from .spectral import (SpectralBasis, df_cf_spectral_var, make_sconv_params,
                       sconv_var)
from .stencils import (KernelBank, convective_flow_var, diffusive_flow_var,
                       make_resnet_params, resnet_source_var)

PATHS = ("localized", "spectral", "hybrid")


@dataclass
class TSSMConfig:
    """Everything needed to rebuild a model deterministically."""

    path: str = "localized"
    kernel_kind: str = "fixed"
    source_block: str = "resnet"
    state_channels: int = 2
    xf_channels: int = 0
    lam_size: int = 1
    # lam index supplying the diffusivity of each state channel, -1 for none
    diff_lam: list = field(default_factory=lambda: [0, 0])
    velocity: str = "state"  # state | vorticity | none
    est_mode: str = "none"   # none | xf_direct
    feed_coeff: bool = False
    hidden: int = 16
    ksize: int = 5
    n_layers: int = 4
    width: int = 12
    window: int = 11
    hybrid_width: int = 8
    hybrid_window: int = 13
    cf_scheme: str = "central"
    dealias: bool = True
    ghost: int = 2
    seed: int = 0
    no_DF: bool = False
    no_CF: bool = False
    no_Phy: bool = False
    no_BCs: bool = False
    no_NODE: bool = False
    no_IST: bool = False
    no_EST: bool = False
    no_All: bool = False

    def __post_init__(self):
        if self.path not in PATHS:
            raise ValueError("unknown path %r" % self.path)
        if self.no_Phy:
            self.no_DF = self.no_CF = True
        if self.no_All:
            self.no_DF = self.no_CF = self.no_BCs = self.no_NODE = True
        if len(self.diff_lam) != self.state_channels:
            raise ValueError("diff_lam needs one entry per state channel")
        if self.est_mode == "xf_direct" and self.xf_channels != self.state_channels:
            raise ValueError("a directly-added forcing needs one channel per "
                             "state channel")

    def to_json(self):
        return json.dumps(asdict(self), indent=1)

    @classmethod
    def from_json(cls, text):
        return cls(**json.loads(text))


def default_config(path, **overrides):
    """Reference configurations matching the reported parameter budgets."""
    if path == "localized":
        base = dict(path="localized", state_channels=2, xf_channels=2,
                    diff_lam=[0, 0], velocity="state")
    elif path == "spectral":
        base = dict(path="spectral", source_block="sconv", state_channels=1,
                    xf_channels=1, diff_lam=[0], velocity="vorticity",
                    est_mode="xf_direct")
    elif path == "hybrid":
        base = dict(path="hybrid", kernel_kind="trainable", state_channels=3,
                    xf_channels=0, diff_lam=[0, 0, -1], velocity="state")
    else:
        raise ValueError("unknown path %r" % path)
    base.update(overrides)
    return TSSMConfig(**base)


@dataclass
class StateDerivative:
    """dU/dt plus the retained four-term breakdown."""

    dudt: object
    df: object
    cf: object
    ist: object
    est: object

    def values(self):
        return {k: getattr(self, k).value for k in ("dudt", "df", "cf", "ist", "est")}


def _check_term(name, var):
    if not np.all(np.isfinite(var.value)):
        raise FloatingPointError("non-finite values in term %s" % name)
    return var


class TSSM:
    """A configured model: parameters plus the derivative evaluation."""

    def __init__(self, cfg, grid):
        self.cfg = cfg
        self.grid = grid
        self.basis = SpectralBasis(grid) if cfg.path in ("spectral", "hybrid") \
            or cfg.velocity == "vorticity" else None
        self._params = []
        self.bank = None
        if cfg.path in ("localized", "hybrid") and not cfg.no_Phy:
            self.bank = KernelBank(grid, cfg.kernel_kind, ksize=cfg.ksize,
                                   cf_scheme=cfg.cf_scheme, seed=cfg.seed)
            self._params += self.bank.params()
        src_in = cfg.state_channels
        if cfg.xf_channels and cfg.est_mode != "xf_direct" and not cfg.no_EST:
            src_in += cfg.xf_channels
        if cfg.feed_coeff:
            src_in += cfg.lam_size
        self.src_params = []
        if not cfg.no_IST:
            if cfg.source_block == "resnet":
                self.src_params = make_resnet_params(
                    src_in, cfg.state_channels, hidden=cfg.hidden,
                    ksize=cfg.ksize, n_layers=cfg.n_layers, seed=cfg.seed)
            else:
                self.src_params = make_sconv_params(
                    src_in, cfg.state_channels, width=cfg.width,
                    window=cfg.window, seed=cfg.seed)
            self._params += self.src_params
        self.coupling_params = []
        if cfg.path == "hybrid" and not cfg.no_All:
            self.coupling_params = make_sconv_params(
                2, cfg.state_channels, width=cfg.hybrid_width,
                window=cfg.hybrid_window, seed=cfg.seed + 1, prefix="cpl")
            self._params += self.coupling_params
        self._src_in = src_in

    def params(self):
        return list(self._params)

    def param_map(self):
        return {p.name: p for p in self._params}

    def n_params(self):
        return sum(p.n_trainable() for p in self._params)

    # ---- batched condition helpers ----

    def _lam_array(self, conds):
        return np.stack([c.lam for c in conds])  # (B, lam_size)

    def _xf_array(self, conds):
        if self.cfg.xf_channels == 0:
            return None
        return np.stack([c.x_f.data for c in conds])  # (B, n_xf, ny, nx)

    def _diff_coeff(self, conds):
        lam = self._lam_array(conds)
        cols = []
        for idx in self.cfg.diff_lam:
            cols.append(lam[:, idx] if idx >= 0 else np.zeros(len(conds)))
        return np.stack(cols, axis=1)  # (B, m)

    # ---- source ----

    def _source(self, u, up, conds, g):
        cfg = self.cfg
        if cfg.no_IST:
            return ad.lift(np.zeros(u.shape))
        b, m, ny, nx = u.shape
        if cfg.source_block == "resnet":
            parts = [up]
            if cfg.xf_channels and cfg.est_mode != "xf_direct" and not cfg.no_EST:
                xf = np.pad(self._xf_array(conds), ((0, 0), (0, 0), (g, g), (g, g)))
                parts.append(ad.lift(xf))
            if cfg.feed_coeff:
                lam = self._lam_array(conds)[:, :, None, None]
                parts.append(ad.lift(np.broadcast_to(
                    lam, (b, cfg.lam_size, ny + 2 * g, nx + 2 * g)).copy()))
            x = parts[0] if len(parts) == 1 else ad.concat(parts, axis=1)
            return resnet_source_var(x, u, self.src_params, g, ksize=cfg.ksize)
        parts = [u]
        if cfg.xf_channels and cfg.est_mode != "xf_direct" and not cfg.no_EST:
            parts.append(ad.lift(self._xf_array(conds)))
        x = parts[0] if len(parts) == 1 else ad.concat(parts, axis=1)
        return sconv_var(x, self.src_params) + u

    # ---- main evaluation ----

    def derivative(self, u, conds, t=0.0):
        """State derivative of a batched Var (B,m,ny,nx) -> StateDerivative."""
        cfg = self.cfg
        g = cfg.ghost
        b, m, ny, nx = u.shape
        zeros = lambda: ad.lift(np.zeros((b, m, ny, nx)))
        bcs = conds[0].bcs
        periodic_x = bcs["left"].kind == "periodic"
        periodic_y = bcs["bottom"].kind == "periodic"

        needs_pad = cfg.path in ("localized", "hybrid") or \
            cfg.source_block == "resnet"
        up = None
        if needs_pad:
            if cfg.no_BCs:
                up = ad.pad2d(u, (g, g), (g, g))
            else:
                up = embed_var(u, bcs, self.grid, g=g, t=t)

        df = cf = None
        if cfg.path == "spectral" and not (cfg.no_DF and cfg.no_CF):
            nu = self._diff_coeff(conds)[:, :, None, None]
            df_s, cf_s = df_cf_spectral_var(u, self.basis, 1.0,
                                            dealias=cfg.dealias)
            df = df_s * ad.lift(nu)
            cf = cf_s
        elif cfg.path in ("localized", "hybrid"):
            if not cfg.no_DF:
                dcoef = self._diff_coeff(conds)
                df = diffusive_flow_var(self.bank, up, dcoef, g,
                                        periodic_x, periodic_y)
            if not cfg.no_CF and cfg.velocity != "none":
                if cfg.velocity != "state":
                    raise ValueError("localized convection needs the state "
                                     "to carry the velocity")
                vel = u[:, :2]
                cf = convective_flow_var(self.bank, up, vel, g,
                                         periodic_x, periodic_y)
                if cfg.path == "hybrid":
                    mask = np.zeros((1, m, 1, 1))
                    mask[0, :2] = 1.0
                    cf = cf * ad.lift(mask)
        df = zeros() if (df is None or cfg.no_DF) else df
        cf = zeros() if (cf is None or cfg.no_CF) else cf

        ist = self._source(u, up, conds, g)

        est = zeros()
        if cfg.est_mode == "xf_direct" and not cfg.no_EST and cfg.xf_channels:
            est = ad.lift(self._xf_array(conds))
        if cfg.path == "hybrid" and self.coupling_params:
            prov = (df + cf + ist)[:, :2]
            est = est + sconv_var(prov, self.coupling_params)

        for name, term in (("df", df), ("cf", cf), ("ist", ist), ("est", est)):
            _check_term(name, term)
        dudt = ((df + cf) + ist) + est
        return StateDerivative(dudt, df, cf, ist, est)

    def derivative_field(self, f, cond, t=0.0):
        """Numpy-facing single-sample evaluation returning Fields."""
        out = self.derivative(ad.lift(f.data[None]), [cond], t=t)
        mk = lambda v: Field(v.value[0], self.grid)
        return StateDerivative(mk(out.dudt), mk(out.df), mk(out.cf),
                               mk(out.ist), mk(out.est))


def build_model(cfg, grid):
    return TSSM(cfg, grid)


def save_model(path, model, opt_state=None, extra=None):
    from .optim import save_checkpoint
    meta = dict(extra or {})
    meta["config"] = asdict(model.cfg)
    meta["grid"] = model.grid.to_dict()
    save_checkpoint(path, model.params(), opt_state, meta)


def load_model(path):
    """Rebuild a model (and optimizer state, extra dict) from a checkpoint."""
    from .fields import GridSpec
    from .optim import load_checkpoint
    params, opt_state, extra = load_checkpoint(path)
    cfg = TSSMConfig(**extra["config"])
    model = TSSM(cfg, GridSpec.from_dict(extra["grid"]))
    stored = {p.name: p for p in params}
    own = model.param_map()
    if set(stored) != set(own):
        raise ValueError("checkpoint parameters %s do not match config's %s"
                         % (sorted(stored), sorted(own)))
    for name, p in own.items():
        src = stored[name].value
        if src.shape != p.value.shape:
            raise ValueError("shape mismatch for %s" % name)
        p.var.value = src.copy()
    return model, opt_state, extra


def count_params(cfg, grid=None):
    """Exact trainable-scalar count of a config's model."""
    from .fields import GridSpec
    if grid is None:
        grid = GridSpec.from_extent(64, 64, 2 * np.pi, 2 * np.pi, 0.1)
    return TSSM(cfg, grid).n_params()


def relative_l2(pred, truth, floor=1e-12):
    """||pred - truth||_2 / ||truth||_2 over each leading slice, averaged."""
    p = pred.reshape(pred.shape[0], -1)
    q = truth.reshape(truth.shape[0], -1)
    num = np.sqrt(((p - q) ** 2).sum(axis=1))
    den = np.sqrt((q ** 2).sum(axis=1))
    return float(np.mean(num / np.maximum(den, floor)))


def term_validation(model, dataset, oracle_terms, t_indices, sample_indices=None):
    """Mean relative L2 error of each model term against oracle term fields.

    oracle_terms: {"df"|"cf"|"source": array (n_samples, n_times, m, ny, nx)};
    terms whose oracle is identically zero are reported as None (absent by
    construction, like convection in a pure reaction-diffusion system).
    """
    if sample_indices is None:
        sample_indices = range(len(dataset))
    preds = {"df": [], "cf": [], "source": []}
    truths = {"df": [], "cf": [], "source": []}
    for si, k in enumerate(sample_indices):
        cond = dataset.conditions[k]
        for ti, tslice in enumerate(t_indices):
            state = Field(dataset.trajectories[k][tslice], dataset.grid)
            out = model.derivative_field(state, cond)
            got = {"df": out.df.data, "cf": out.cf.data,
                   "source": out.ist.data + out.est.data}
            for name in preds:
                if name not in oracle_terms:
                    continue
                want = oracle_terms[name][si, ti]
                if want.shape != got[name].shape:
                    raise ValueError("oracle term %s shape %s != model %s"
                                     % (name, want.shape, got[name].shape))
                preds[name].append(got[name].ravel())
                truths[name].append(want.ravel())
    out = {}
    for name in ("df", "cf", "source"):
        if name not in oracle_terms:
            continue
        t = np.stack(truths[name])
        if not np.any(t):
            out[name] = None
            continue
        out[name] = relative_l2(np.stack(preds[name]), t)
    return out
