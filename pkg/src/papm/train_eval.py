"""Training loop, split protocols, loss/metric, and evaluation reports.

The loss and the reported error are the same triple mean: for every
(sample, step, channel) the spatial L2 norm of the prediction error is
divided by the norm of the target, and the ratios are averaged.  Training
rolls the model out for `horizon_train` steps from slice `t0` and
backpropagates through the whole rollout; evaluation rolls out further
(`horizon_eval`) to probe time extrapolation.

Splits: `c_int` shuffles samples, `c_ext` sorts them by their physical
coefficient and sends the lowest-coefficient quintile (the hardest,
least-diffusive regime) to the test set.
"""

import time
import warnings
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from . import optim
from .bc import bc_residual
from .fields import Field
from .integrate import StepScheme, model_deriv_fn, rollout_batch, step_var
from .tssm import TSSM, TSSMConfig, term_validation

SPLIT_MODES = ("c_int", "c_ext")

ABLATION_FLAGS = ("no_DF", "no_CF", "no_Phy", "no_BCs", "no_NODE",
                  "no_IST", "no_EST", "no_All")


@dataclass
class TrainConfig:
    """Optimization protocol: horizons are step counts past slice t0."""

    epochs: int = 500
    lr: float = 1e-3
    patience: int = 20
    factor: float = 0.8
    batch: int = 8
    microbatch: int = 4
    seed: int = 0
    t0: int = 5
    horizon_train: int = None   # T'; None -> dataset's training window
    horizon_eval: int = None    # T;  None -> last stored slice
    split: str = "c_int"
    ratio: tuple = (0.7, 0.1, 0.2)

    def __post_init__(self):
        if self.epochs < 1 or self.batch < 1 or self.microbatch < 1:
            raise ValueError("epochs, batch, microbatch must be positive")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if not 0 < self.factor <= 1:
            raise ValueError("factor must be in (0, 1]")
        if self.t0 < 0:
            raise ValueError("t0 must be >= 0")
        if self.split not in SPLIT_MODES:
            raise ValueError("split must be one of %s" % (SPLIT_MODES,))
        self.ratio = tuple(float(r) for r in self.ratio)
        if len(self.ratio) != 3 or min(self.ratio) <= 0:
            raise ValueError("ratio needs three positive entries")
        if abs(sum(self.ratio) - 1.0) > 1e-9:
            raise ValueError("ratio must sum to 1")
        for h in (self.horizon_train, self.horizon_eval):
            if h is not None and h < 1:
                raise ValueError("horizons must be positive step counts")
        if (self.horizon_train is not None and self.horizon_eval is not None
                and not self.horizon_train < self.horizon_eval):
            raise ValueError("need horizon_train < horizon_eval")


def _split_sizes(n, ratio):
    n_val = max(1, int(round(n * ratio[1])))
    n_test = max(1, int(round(n * ratio[2])))
    n_train = n - n_val - n_test
    if n_train < 1:
        raise ValueError("split leaves no training samples")
    return n_train, n_val, n_test


def split_dataset(ds, mode, ratio=(0.7, 0.1, 0.2), seed=0, coeff_index=0):
    """Tag every sample train/val/test and return the dataset.

    c_int: seeded uniform shuffle.  c_ext: sort by conditions' coefficient
    (largest first); the lowest-coefficient tail becomes the test set.
    """
    if mode not in SPLIT_MODES:
        raise ValueError("split must be one of %s" % (SPLIT_MODES,))
    n = len(ds)
    if n < 10:
        raise ValueError("need at least 10 samples to split, got %d" % n)
    ratio = tuple(float(r) for r in ratio)
    if abs(sum(ratio) - 1.0) > 1e-9:
        raise ValueError("ratio must sum to 1")
    n_train, n_val, n_test = _split_sizes(n, ratio)
    if mode == "c_int":
        order = np.random.default_rng(seed).permutation(n)
    else:
        coeffs = []
        for c in ds.conditions:
            if c.lam.size <= coeff_index:
                raise ValueError("c_ext split needs a per-sample coefficient")
            coeffs.append(c.lam[coeff_index])
        order = np.argsort(coeffs)[::-1]  # largest first, lowest -> test
    tags = [""] * n
    for j, i in enumerate(order):
        if j < n_train:
            tags[i] = "train"
        elif j < n_train + n_val:
            tags[i] = "val"
        else:
            tags[i] = "test"
    ds.split_tags = tags
    return ds


# ---------------------------------------------------------------------------
# Loss and metric (one definition, a numpy path and a differentiable path)
# ---------------------------------------------------------------------------

def _ratio_array(pred, truth, floor=1e-12):
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise ValueError("prediction shape %s != target shape %s"
                         % (pred.shape, truth.shape))
    if pred.ndim == 4:
        pred, truth = pred[None], truth[None]
    if pred.ndim != 5:
        raise ValueError("expected (B, T, m, ny, nx) trajectories")
    num = np.sqrt(((pred - truth) ** 2).sum(axis=(-2, -1)))
    den = np.sqrt((truth ** 2).sum(axis=(-2, -1)))
    if np.any(den < floor):
        warnings.warn("zero-norm target channel; denominator floored")
    return num / np.maximum(den, floor)  # (B, T, m)


def relative_l2_loss(pred, truth, floor=1e-12):
    """Mean over samples, steps, and channels of ||u-u_hat||_2 / ||u||_2."""
    return float(_ratio_array(pred, truth, floor).mean())


def _loss_var(slices, truth, floor=1e-12):
    """Differentiable twin of relative_l2_loss on rollout slice Vars."""
    total = None
    for t, u in enumerate(slices):
        tgt = truth[:, t]
        d = ad.add(u, ad.lift(-tgt))
        sq = ad.reduce_sum(ad.mul(d, d), axis=(2, 3))
        num = ad.power(ad.add(sq, ad.lift(1e-24)), 0.5)
        den = np.maximum(np.sqrt((tgt ** 2).sum(axis=(2, 3))), floor)
        term = ad.reduce_mean(ad.mul(num, ad.lift(1.0 / den)))
        total = term if total is None else ad.add(total, term)
    return ad.mul(total, 1.0 / len(slices))


def _scheme_for(model):
    return StepScheme("euler" if model.cfg.no_NODE else "rk4")


def _rollout_numpy(model, u0, conds, n_steps, scheme, dt, t0=0.0):
    """Graph-free batched rollout -> (B, n_steps, m, ny, nx)."""
    f = model_deriv_fn(model, conds)
    u = np.asarray(u0, dtype=np.float64)
    out = np.empty((u.shape[0], n_steps) + u.shape[1:])
    t = t0
    for s in range(n_steps):
        u = step_var(f, ad.lift(u), t, dt, scheme, step_index=s).value
        t += dt
        out[:, s] = u
    return out


def _resolve_horizons(ds, cfg):
    t0 = cfg.t0
    if not 0 <= t0 < ds.t_total - 1:
        raise ValueError("t0=%d leaves no slices to predict" % t0)
    tp = cfg.horizon_train
    if tp is None:
        tp = max(1, ds.t_train - t0)
    te = cfg.horizon_eval
    if te is None:
        te = ds.t_total - 1 - t0
    if t0 + tp > ds.t_total - 1:
        raise ValueError("training horizon exceeds stored trajectory")
    return t0, tp, te


def _gather(ds, idx, t0, n_steps):
    u0 = np.stack([ds.trajectories[i][t0] for i in idx])
    truth = np.stack([ds.trajectories[i][t0 + 1:t0 + n_steps + 1]
                      for i in idx])
    conds = [ds.conditions[i] for i in idx]
    return u0, truth, conds


class PlateauSchedule:
    """Multiply lr by `factor` after `patience` epochs without improvement."""

    def __init__(self, lr, patience, factor):
        self.lr = float(lr)
        self.patience = int(patience)
        self.factor = float(factor)
        self.best = np.inf
        self.bad = 0

    def step(self, metric):
        if np.isfinite(metric) and metric < self.best:
            self.best = float(metric)
            self.bad = 0
        else:
            self.bad += 1
            if self.bad > self.patience:
                self.lr *= self.factor
                self.bad = 0
        return self.lr


@dataclass
class TrainResult:
    model: TSSM
    history: list
    status: str
    best_epoch: int
    best_val: float
    best_params: dict
    opt_state: dict


def snapshot_params(model):
    return {p.name: p.value.copy() for p in model.params()}


def apply_params(model, values):
    pm = model.param_map()
    if set(values) != set(pm):
        raise ValueError("parameter names do not match the model")
    for name, v in values.items():
        pm[name].value = np.array(v, copy=True)


def train(ds, cfg, tssm_cfg=None, model=None, opt_state=None, start_epoch=0,
          log=None):
    """Fit a model on the train split; returns the best-validation state.

    The model keeps its final-epoch values (for resuming); the best
    validation snapshot is in result.best_params.  Datasets arrive either
    pre-tagged or with the default all-train tags, in which case they are
    split here using cfg.split.  Aborts with status "diverged" when the
    loss blows up; small training sets (< 10 samples, e.g. overfit probes)
    are used whole, with validation skipped.
    """
    if model is None:
        if tssm_cfg is None:
            raise ValueError("pass either tssm_cfg or a model")
        model = TSSM(tssm_cfg, ds.grid)
    if set(ds.split_tags) == {"train"} and len(ds) >= 10:
        split_dataset(ds, cfg.split, cfg.ratio, seed=cfg.seed)
    idx_tr = ds.indices("train")
    idx_val = ds.indices("val")
    if not idx_tr:
        raise ValueError("no samples tagged 'train'")

    t0, tp, _ = _resolve_horizons(ds, cfg)
    dt = ds.grid.dt
    scheme = _scheme_for(model)
    params = model.params()
    state = opt_state if opt_state is not None else optim.init_adamw_state(params)
    sched = PlateauSchedule(cfg.lr, cfg.patience, cfg.factor)
    if idx_val:
        u0_val, truth_val, conds_val = _gather(ds, idx_val, t0, tp)

    history = []
    status = "ok"
    best_val = np.inf
    best_epoch = -1
    best_params = snapshot_params(model)

    def batch_loss_grads(batch_idx):
        total_loss = 0.0
        total = {p.name: np.zeros_like(p.value) for p in params}
        for lo in range(0, len(batch_idx), cfg.microbatch):
            chunk = batch_idx[lo:lo + cfg.microbatch]
            u0, truth, conds = _gather(ds, chunk, t0, tp)

            def loss_fn():
                slices = rollout_batch(model, u0, conds, tp, scheme, dt,
                                       t0=t0 * dt)
                return _loss_var(slices, truth)

            val, grads = optim.grad(loss_fn, params)
            w = len(chunk) / len(batch_idx)
            total_loss += w * float(val)
            for name in total:
                total[name] += w * grads[name]
        return total_loss, total

    for epoch in range(start_epoch, start_epoch + cfg.epochs):
        if len(idx_tr) <= 32:
            batches = [list(idx_tr)]
        else:
            order = np.random.default_rng([cfg.seed, epoch]).permutation(idx_tr)
            batches = [list(order[i:i + cfg.batch])
                       for i in range(0, len(order), cfg.batch)]
        lr = sched.lr
        epoch_loss = 0.0
        diverged = False
        for b in batches:
            try:
                loss, grads = batch_loss_grads(b)
            except FloatingPointError:
                loss = float("nan")
                diverged = True
            if not np.isfinite(loss) or loss > 1e3:
                epoch_loss = loss
                diverged = True
                break
            epoch_loss += loss * len(b) / len(idx_tr)
            optim.adamw_step(params, grads, state, lr=lr)

        if diverged:
            history.append({"epoch": epoch, "train_loss": epoch_loss,
                            "val_eps": float("nan"), "lr": lr})
            status = "diverged"
            break

        if idx_val:
            try:
                pred = _rollout_numpy(model, u0_val, conds_val, tp, scheme,
                                      dt, t0=t0 * dt)
                val_eps = relative_l2_loss(pred, truth_val)
            except FloatingPointError:
                val_eps = float("inf")
        else:
            val_eps = float("nan")
        track = val_eps if idx_val else epoch_loss
        if np.isfinite(track) and track < best_val:
            best_val = float(track)
            best_epoch = epoch
            best_params = snapshot_params(model)
        row = {"epoch": epoch, "train_loss": epoch_loss, "val_eps": val_eps,
               "lr": lr}
        history.append(row)
        if log:
            log(row)
        sched.step(track)

    return TrainResult(model, history, status, best_epoch, best_val,
                       best_params, state)


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------

@dataclass
class EvalReport:
    eps: float
    per_step: list
    bc_eps: float
    bc_residuals: dict
    per_term: dict
    n_params: int
    runtime: float
    t0: int
    horizon: int
    n_samples: int

    def to_dict(self):
        return asdict(self)


def evaluate(model, ds, horizon=None, t0=None, tags=("test",),
             oracle_terms=None, term_steps=None, microbatch=8):
    """Roll the model out `horizon` steps and report errors.

    eps / per_step: trajectory-wide and per-step triple-mean relative L2.
    bc_eps: the same ratio restricted to the one-node boundary ring.
    bc_residuals: per-edge violation of the declared BCs at the final step.
    per_term: term-wise errors against stored oracles, when provided.
    """
    start = time.perf_counter()
    t0 = ds.t0 if t0 is None else int(t0)
    if horizon is None:
        horizon = ds.t_total - 1 - t0
    horizon = int(horizon)
    if horizon < 1:
        raise ValueError("horizon must be at least one step")
    if t0 + horizon > ds.t_total - 1:
        raise ValueError("horizon %d from t0=%d exceeds the stored %d slices"
                         % (horizon, t0, ds.t_total))
    idx = list(range(len(ds))) if tags is None else ds.indices(*tags)
    if not idx:
        raise ValueError("no samples tagged %s" % (tags,))

    scheme = _scheme_for(model)
    dt = ds.grid.dt
    preds, truths = [], []
    for lo in range(0, len(idx), microbatch):
        chunk = idx[lo:lo + microbatch]
        u0, truth, conds = _gather(ds, chunk, t0, horizon)
        preds.append(_rollout_numpy(model, u0, conds, horizon, scheme, dt,
                                    t0=t0 * dt))
        truths.append(truth)
    pred = np.concatenate(preds)
    truth = np.concatenate(truths)

    ratios = _ratio_array(pred, truth)
    eps = float(ratios.mean())
    per_step = [float(v) for v in ratios.mean(axis=(0, 2))]

    ny, nx = ds.grid.ny, ds.grid.nx
    ring = np.zeros((ny, nx), dtype=bool)
    ring[0, :] = ring[-1, :] = True
    ring[:, 0] = ring[:, -1] = True
    dr = pred[..., ring] - truth[..., ring]
    num = np.sqrt((dr ** 2).sum(axis=-1))
    den = np.sqrt((truth[..., ring] ** 2).sum(axis=-1))
    bc_eps = float((num / np.maximum(den, 1e-12)).mean())

    t_end = (t0 + horizon) * dt
    edge_sums = {}
    for row, i in enumerate(idx):
        res = bc_residual(Field(pred[row, -1], ds.grid),
                          ds.conditions[i].bcs, t=t_end)
        for e, v in res.items():
            edge_sums[e] = edge_sums.get(e, 0.0) + v
    bc_residuals = {e: v / len(idx) for e, v in edge_sums.items()}

    per_term = None
    if oracle_terms is not None:
        if term_steps is None:
            term_steps = sorted({t0, t0 + horizon // 2, t0 + horizon})
        per_term = term_validation(model, ds, oracle_terms,
                                   t_indices=term_steps, sample_indices=idx)

    return EvalReport(eps=eps, per_step=per_step, bc_eps=bc_eps,
                      bc_residuals=bc_residuals, per_term=per_term,
                      n_params=model.n_params(),
                      runtime=time.perf_counter() - start,
                      t0=t0, horizon=horizon, n_samples=len(idx))


# ---------------------------------------------------------------------------
# Ablation harness
# ---------------------------------------------------------------------------

def ablation_configs(base, names=None):
    """One config per ablation flag plus the unmodified baseline."""
    if names is None:
        names = ("PAPM",) + ABLATION_FLAGS
    base_d = base.to_json()
    out = []
    for name in names:
        if name != "PAPM" and name not in ABLATION_FLAGS:
            raise ValueError("unknown ablation %r" % name)
        cfg = TSSMConfig.from_json(base_d)
        if name != "PAPM":
            setattr(cfg, name, True)
            cfg.__post_init__()
        out.append((name, cfg))
    return out


def run_ablations(ds, train_cfg, base_tssm_cfg, names=None, horizon=None,
                  log=None):
    """Train and evaluate one model per ablation row -> list of result dicts."""
    rows = []
    for name, cfg in ablation_configs(base_tssm_cfg, names):
        result = train(ds, train_cfg, tssm_cfg=cfg)
        apply_params(result.model, result.best_params)
        report = evaluate(result.model, ds, horizon=horizon, t0=train_cfg.t0)
        rows.append({"config": name, "eps": report.eps,
                     "bc_eps": report.bc_eps, "status": result.status,
                     "report": report, "train_result": result})
        if log:
            log(rows[-1])
    return rows
