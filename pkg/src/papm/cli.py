"""Command-line front end: generate datasets, train, evaluate, ablate.

Every command writes its artifacts under one output directory and echoes the
fully resolved configuration (with the origin of each value) next to the
results, so any run can be audited and repeated from its own files.

Exit codes: 0 success, 2 usage error, 3 numerical failure, 4 I/O error.
Relative dataset paths that do not exist locally are also tried under
$PAPM_DATA_DIR.
"""

import argparse
import csv
import json
import os
import sys
from dataclasses import asdict

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_NUMERIC = 3
EXIT_IO = 4

# The ablation table rows, in print order.
ABLATE_ROWS = ("PAPM", "no_DF", "no_CF", "no_Phy", "no_BCs", "no_NODE",
               "no_All")
SNAPSHOT_CMAP = "RdBu_r"


class UsageError(Exception):
    pass


class IOFailure(Exception):
    pass


# ---------------------------------------------------------------------------
# Shared plumbing
# ---------------------------------------------------------------------------

def _cap_threads(n):
    """Best effort: pin the BLAS/OpenMP pools before numpy comes in."""
    if n is None:
        return
    if n < 1:
        raise UsageError("--threads must be >= 1")
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS"):
        os.environ[var] = str(n)


def _data_path(path):
    """Existing or absolute paths win; otherwise look under PAPM_DATA_DIR."""
    if os.path.isabs(path) or os.path.exists(path):
        return path
    root = os.environ.get("PAPM_DATA_DIR")
    if root:
        cand = os.path.join(root, path)
        if os.path.exists(cand):
            return cand
    return path


def _claim_out_dir(path, force):
    if os.path.isfile(path):
        raise IOFailure("output path %s is a file" % path)
    if os.path.isdir(path) and os.listdir(path) and not force:
        raise IOFailure("output directory %s is not empty; pass --force to "
                        "overwrite" % path)
    os.makedirs(path, exist_ok=True)


def _resolve(defaults, file_cfg, flag_cfg, scope):
    """Merge one config scope: CLI flag > config file > built-in default.

    Returns (merged, sources) where sources records where each key came from.
    """
    merged = dict(defaults)
    sources = {k: "default" for k in defaults}
    for k, v in (file_cfg or {}).items():
        if k not in merged:
            raise UsageError("unknown %s config key %r" % (scope, k))
        merged[k] = v
        sources[k] = "file"
    for k, v in (flag_cfg or {}).items():
        if v is None:
            continue
        if k not in merged:
            raise UsageError("unknown %s flag key %r" % (scope, k))
        merged[k] = v
        sources[k] = "flag"
    return merged, sources


def _load_config_file(path):
    if path is None:
        return {}
    try:
        with open(path) as fp:
            cfg = json.load(fp)
    except OSError as e:
        raise IOFailure("cannot read config file: %s" % e)
    except json.JSONDecodeError as e:
        raise UsageError("config file %s is not valid JSON: %s" % (path, e))
    if not isinstance(cfg, dict):
        raise UsageError("config file must hold a JSON object")
    return cfg


def _write_json(path, payload):
    with open(path, "w") as fp:
        json.dump(payload, fp, indent=1, sort_keys=True)
        fp.write("\n")


def _write_csv(path, header, rows, mode="w"):
    fresh = mode == "w" or not os.path.exists(path)
    with open(path, mode, newline="") as fp:
        w = csv.writer(fp)
        if fresh:
            w.writerow(header)
        w.writerows(rows)


def _load_dataset(path):
    from .datagen import load_generated
    resolved = _data_path(path)
    if not os.path.isdir(resolved):
        raise IOFailure("dataset directory %s not found" % path)
    return load_generated(resolved) + (resolved,)


def _manifest_value_range(dataset_dir, ds):
    """Fixed color range for snapshots; fall back to the data when the
    manifest predates the key."""
    mpath = os.path.join(dataset_dir, "manifest.json")
    try:
        with open(mpath) as fp:
            vr = json.load(fp).get("value_range")
    except OSError:
        vr = None
    if vr is None:
        vr = [min(float(t.min()) for t in ds.trajectories),
              max(float(t.max()) for t in ds.trajectories)]
    return float(vr[0]), float(vr[1])


# ---------------------------------------------------------------------------
# generate
# ---------------------------------------------------------------------------

def _build_spec(args):
    from .datagen import SystemSpec, desk_spec, paper_spec
    overrides = {"seed": args.seed, "n_samples": args.samples,
                 "nx": args.nx, "n_slices": args.slices,
                 "substeps": args.substeps, "t0": args.t0,
                 "t_train": args.t_train}
    live = {k: v for k, v in overrides.items() if v is not None}
    if os.path.isfile(args.system):
        with open(args.system) as fp:
            spec = SystemSpec.from_json(fp.read())
        if live:
            spec = SystemSpec(**{**asdict(spec), **live})
        return spec
    make = desk_spec if args.scale == "desk" else paper_spec
    return make(args.system, **live)


def cmd_generate(args):
    from .datagen import save_generated, solve
    spec = _build_spec(args)
    _claim_out_dir(args.out, args.force)
    ds, terms = solve(spec)
    save_generated(args.out, ds, terms, spec)
    # Record the fixed snapshot color range alongside the sample index.
    mpath = os.path.join(args.out, "manifest.json")
    with open(mpath) as fp:
        manifest = json.load(fp)
    manifest["value_range"] = [min(float(t.min()) for t in ds.trajectories),
                               max(float(t.max()) for t in ds.trajectories)]
    _write_json(mpath, manifest)
    _write_json(os.path.join(args.out, "config.resolved.json"),
                {"command": "generate", "system": asdict(spec)})
    print("wrote %d %s samples (%dx%d, %d slices) to %s"
          % (spec.n_samples, spec.system, spec.nx, spec.nx,
             spec.n_slices, args.out))
    return EXIT_OK


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

def _resolve_train_configs(args, for_ablate=False):
    """Build (TrainConfig, TSSMConfig, echo dict) from defaults/file/flags."""
    from .train_eval import ABLATION_FLAGS, TrainConfig
    from .tssm import TSSMConfig, default_config

    file_cfg = _load_config_file(args.config)
    bad = set(file_cfg) - {"train", "model"}
    if bad:
        raise UsageError("config file keys must be 'train' and/or 'model', "
                         "got %s" % sorted(bad))

    flag_train = {"epochs": args.epochs, "lr": args.lr, "batch": args.batch,
                  "seed": args.seed, "t0": args.t0,
                  "horizon_train": args.horizon, "split": args.split}
    train_merged, train_src = _resolve(asdict(TrainConfig()),
                                       file_cfg.get("train"), flag_train,
                                       "train")
    try:
        train_cfg = TrainConfig(**train_merged)
    except (ValueError, TypeError) as e:
        raise UsageError(str(e))

    model_file = dict(file_cfg.get("model") or {})
    path = args.path or model_file.pop("path", None) or "localized"
    try:
        defaults = asdict(default_config(path))
    except (ValueError, KeyError):
        raise UsageError("unknown model path %r" % path)
    flag_model = {"hidden": args.hidden}
    model_merged, model_src = _resolve(defaults, model_file, flag_model,
                                       "model")
    ablate_flag = getattr(args, "ablate", None)
    if ablate_flag is not None and not for_ablate:
        if ablate_flag not in ABLATION_FLAGS:
            raise UsageError("unknown ablation flag %r (choose from %s)"
                             % (ablate_flag, ", ".join(ABLATION_FLAGS)))
        model_merged[ablate_flag] = True
        model_src[ablate_flag] = "flag"
    try:
        tssm_cfg = TSSMConfig(**model_merged)
    except (ValueError, TypeError) as e:
        raise UsageError(str(e))

    echo = {"train": train_merged, "model": asdict(tssm_cfg),
            "sources": {"train": train_src, "model": model_src}}
    return train_cfg, tssm_cfg, echo


def _history_rows(history):
    return [(r["epoch"], "%.10e" % r["train_loss"], "%.10e" % r["val_eps"],
             "%.10e" % r["lr"]) for r in history]


def cmd_train(args):
    from .train_eval import train
    from .tssm import load_model, save_model

    train_cfg, tssm_cfg, echo = _resolve_train_configs(args)
    ds, _terms, _spec, data_dir = _load_dataset(args.dataset)
    _claim_out_dir(args.out, args.force)

    model = opt_state = None
    start_epoch = 0
    if args.resume:
        if not os.path.exists(args.resume):
            raise IOFailure("resume checkpoint %s not found" % args.resume)
        model, opt_state, extra = load_model(args.resume)
        start_epoch = int(extra.get("epochs_done", 0))
        echo["resume"] = {"checkpoint": args.resume,
                          "start_epoch": start_epoch}
        echo["model"] = dict(extra["config"])
        echo["sources"]["model"] = {k: "checkpoint" for k in extra["config"]}
        tssm_cfg = None

    echo.update({"command": "train", "dataset": data_dir})
    _write_json(os.path.join(args.out, "config.resolved.json"), echo)

    every = max(1, train_cfg.epochs // 10)
    def log(row):
        if (row["epoch"] - start_epoch) % every == 0:
            print("epoch %d  train %.4e  val %.4e  lr %.2e"
                  % (row["epoch"], row["train_loss"], row["val_eps"],
                     row["lr"]))

    res = train(ds, train_cfg, tssm_cfg=tssm_cfg, model=model,
                opt_state=opt_state, start_epoch=start_epoch, log=log)

    hist_path = os.path.join(args.out, "history.csv")
    mode = "a" if args.resume and os.path.exists(hist_path) else "w"
    _write_csv(hist_path, ("epoch", "train_loss", "val_eps", "lr"),
               _history_rows(res.history), mode=mode)

    meta = {"epochs_done": start_epoch + len(res.history),
            "best_epoch": res.best_epoch, "best_val": res.best_val,
            "status": res.status,
            # The split lives with the run, not the dataset; eval re-applies
            # it so "--tags test" means the held-out samples of this run.
            "split_tags": list(ds.split_tags)}
    # last.ckpt carries the final weights plus optimizer state for resuming;
    # model.ckpt carries the best-validation weights for evaluation.
    save_model(os.path.join(args.out, "last.ckpt"), res.model,
               opt_state=res.opt_state, extra=meta)
    from .train_eval import apply_params
    apply_params(res.model, res.best_params)
    save_model(os.path.join(args.out, "model.ckpt"), res.model, extra=meta)

    if res.status != "ok":
        print("training aborted: %s (epoch %d)"
              % (res.status, res.history[-1]["epoch"] if res.history else -1),
              file=sys.stderr)
        return EXIT_NUMERIC
    print("trained %d epochs; best val %.4e at epoch %d; artifacts in %s"
          % (len(res.history), res.best_val, res.best_epoch, args.out))
    return EXIT_OK


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------

def _pick_tags(ds, requested):
    have = set(ds.split_tags)
    want = [t for t in requested if t in have]
    if want:
        return tuple(want)
    print("dataset has no %s samples; evaluating all %d"
          % ("/".join(requested), len(ds.trajectories)))
    return None


def _render_curve(path, per_step, t_mark):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    steps = range(1, len(per_step) + 1)
    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.plot(steps, per_step, lw=1.5)
    if t_mark is not None and 0 < t_mark < len(per_step):
        ax.axvline(t_mark, color="gray", ls="--", lw=1,
                   label="training window")
        ax.legend(frameon=False)
    ax.set_xlabel("rollout step")
    ax.set_ylabel("relative L2 error")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def _render_snapshots(out_dir, model, ds, tags, t0, horizon, k, vrange):
    """k PNGs of truth vs prediction at evenly spaced rollout steps, first
    evaluated sample, fixed diverging colormap and color range."""
    import numpy as np
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    from .integrate import StepScheme, rollout

    idx = ds.indices(*tags) if tags else list(range(len(ds.trajectories)))
    i = idx[0]
    cond = ds.conditions[i]
    truth = ds.trajectories[i]
    from .fields import Field
    f0 = Field(truth[t0], ds.grid)
    scheme = StepScheme("euler" if model.cfg.no_NODE else "rk4")
    pred = rollout(model, f0, cond, horizon, scheme, dt=ds.grid.dt,
                   t0=t0 * ds.grid.dt)
    picks = np.unique(np.linspace(1, horizon, min(k, horizon)).astype(int))
    names = ds.channel_names
    written = []
    for j, step in enumerate(picks):
        m = truth.shape[1]
        fig, axes = plt.subplots(2, m, figsize=(3.2 * m, 6.2), squeeze=False)
        for c in range(m):
            for row, (data, label) in enumerate(
                    ((truth[t0 + step, c], "reference"),
                     (pred[step - 1, c], "prediction"))):
                ax = axes[row][c]
                im = ax.imshow(data, cmap=SNAPSHOT_CMAP, vmin=vrange[0],
                               vmax=vrange[1], origin="lower")
                ax.set_title("%s %s" % (names[c], label), fontsize=9)
                ax.set_xticks(())
                ax.set_yticks(())
        fig.colorbar(im, ax=[a for r in axes for a in r], shrink=0.8)
        fig.suptitle("sample %d, t = %.3f" % (i, (t0 + step) * ds.grid.dt))
        name = os.path.join(out_dir, "snapshot_%02d.png" % j)
        fig.savefig(name, dpi=110)
        plt.close(fig)
        written.append(name)
    return written


def cmd_eval(args):
    from .train_eval import evaluate
    from .tssm import load_model

    if not os.path.exists(args.checkpoint):
        raise IOFailure("checkpoint %s not found" % args.checkpoint)
    model, _opt, extra = load_model(args.checkpoint)
    ds, terms, _spec, data_dir = _load_dataset(args.dataset)
    _claim_out_dir(args.out, args.force)

    stored_tags = extra.get("split_tags")
    if stored_tags is not None and len(stored_tags) == len(ds.trajectories):
        ds.split_tags = list(stored_tags)
    tags = _pick_tags(ds, [t for t in args.tags.split(",") if t])
    oracle = terms if args.terms else None
    if args.terms and terms is None:
        raise IOFailure("--terms needs terms.npz next to the dataset")
    try:
        rep = evaluate(model, ds, horizon=args.horizon, t0=args.t0,
                       tags=tags, oracle_terms=oracle)
    except ValueError as e:
        raise UsageError(str(e))

    _write_json(os.path.join(args.out, "report.json"), rep.to_dict())
    _write_csv(os.path.join(args.out, "per_step.csv"), ("step", "t", "eps"),
               [(k + 1, "%.6f" % ((rep.t0 + k + 1) * ds.grid.dt),
                 "%.10e" % e) for k, e in enumerate(rep.per_step)])
    _write_json(os.path.join(args.out, "config.resolved.json"),
                {"command": "eval", "checkpoint": args.checkpoint,
                 "dataset": data_dir, "horizon": rep.horizon, "t0": rep.t0,
                 "tags": list(tags) if tags else None,
                 "terms": bool(args.terms), "snapshots": args.snapshots})

    _render_curve(os.path.join(args.out, "eps_curve.png"), rep.per_step,
                  ds.t_train - rep.t0)
    if args.snapshots > 0:
        vrange = _manifest_value_range(data_dir, ds)
        _render_snapshots(args.out, model, ds, tags, rep.t0, rep.horizon,
                          args.snapshots, vrange)
    print("eps %.6f  bc_eps %.6f  (%d samples, %d steps) -> %s"
          % (rep.eps, rep.bc_eps, rep.n_samples, rep.horizon, args.out))
    return EXIT_OK


# ---------------------------------------------------------------------------
# ablate
# ---------------------------------------------------------------------------

def cmd_ablate(args):
    from .train_eval import run_ablations

    train_cfg, tssm_cfg, echo = _resolve_train_configs(args, for_ablate=True)
    ds, _terms, _spec, data_dir = _load_dataset(args.dataset)
    _claim_out_dir(args.out, args.force)
    echo.update({"command": "ablate", "dataset": data_dir,
                 "rows": list(ABLATE_ROWS)})
    _write_json(os.path.join(args.out, "config.resolved.json"), echo)

    def log(row):
        print("%-8s eps %.6f  bc_eps %.6f  (%s)"
              % (row["config"], row["eps"], row["bc_eps"], row["status"]))

    rows = run_ablations(ds, train_cfg, tssm_cfg, names=ABLATE_ROWS,
                         horizon=args.horizon_eval, log=log)
    _write_csv(os.path.join(args.out, "table.csv"),
               ("config", "eps", "bc_eps"),
               [(r["config"], "%.6f" % r["eps"], "%.6f" % r["bc_eps"])
                for r in rows])
    print("%-8s %10s %10s" % ("config", "eps", "bc_eps"))
    for r in rows:
        print("%-8s %10.6f %10.6f" % (r["config"], r["eps"], r["bc_eps"]))
    bad = [r["config"] for r in rows if r["status"] != "ok"]
    if bad:
        print("diverged runs: %s" % ", ".join(bad), file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser and dispatch
# ---------------------------------------------------------------------------

def _add_train_flags(p):
    p.add_argument("--config", help="JSON file with 'train'/'model' objects")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch", type=int)
    p.add_argument("--t0", type=int)
    p.add_argument("--horizon", type=int,
                   help="training rollout steps past t0")
    p.add_argument("--split", choices=("c_int", "c_ext"))
    p.add_argument("--path", choices=("localized", "spectral", "hybrid"))
    p.add_argument("--hidden", type=int)


def build_parser():
    ap = argparse.ArgumentParser(
        prog="papm",
        description="Physics-aware proxy models for 2D process systems.")
    sub = ap.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out", required=True, help="output directory")
    common.add_argument("--seed", type=int)
    common.add_argument("--threads", type=int)
    common.add_argument("--force", action="store_true",
                        help="allow writing into a non-empty directory")

    g = sub.add_parser("generate", parents=[common],
                       help="solve a system and store the trajectory set")
    g.add_argument("system", help="burgers2d | rd2d | ns2d, or a spec JSON")
    g.add_argument("--scale", choices=("desk", "paper"), default="desk")
    g.add_argument("--samples", type=int)
    g.add_argument("--nx", type=int)
    g.add_argument("--slices", type=int)
    g.add_argument("--substeps", type=int)
    g.add_argument("--t0", type=int, help="first slice used as a start state")
    g.add_argument("--t-train", dest="t_train", type=int,
                   help="slice index ending the training window")
    g.set_defaults(fn=cmd_generate)

    t = sub.add_parser("train", parents=[common],
                       help="fit a model on a stored dataset")
    t.add_argument("dataset")
    _add_train_flags(t)
    t.add_argument("--ablate", metavar="FLAG",
                   help="train with one ablation flag set (e.g. no_Phy)")
    t.add_argument("--resume", metavar="CKPT",
                   help="continue from a last.ckpt; epoch numbering carries on")
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", parents=[common],
                       help="roll a checkpoint out and report errors")
    e.add_argument("checkpoint")
    e.add_argument("dataset")
    e.add_argument("--horizon", type=int, help="rollout steps past t0")
    e.add_argument("--t0", type=int)
    e.add_argument("--tags", default="test",
                   help="comma-separated split tags to evaluate")
    e.add_argument("--terms", action="store_true",
                   help="compare model terms against the stored oracle")
    e.add_argument("--snapshots", type=int, default=4,
                   help="field images at evenly spaced steps (0 disables)")
    e.set_defaults(fn=cmd_eval)

    a = sub.add_parser("ablate", parents=[common],
                       help="train and evaluate the ablation table")
    a.add_argument("dataset")
    _add_train_flags(a)
    a.add_argument("--horizon-eval", dest="horizon_eval", type=int)
    a.set_defaults(fn=cmd_ablate)
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        _cap_threads(args.threads)
        from .datagen import CFLError, SolverStabilityError
        from .dataio import DatasetFormatError
        from .integrate import RolloutDiverged
        try:
            return args.fn(args)
        except UsageError as e:
            print("error: %s" % e, file=sys.stderr)
            return EXIT_USAGE
        except ValueError as e:
            print("error: %s" % e, file=sys.stderr)
            return EXIT_USAGE
        except (RolloutDiverged, FloatingPointError, CFLError,
                SolverStabilityError) as e:
            print("numerical failure: %s" % e, file=sys.stderr)
            return EXIT_NUMERIC
        except (IOFailure, DatasetFormatError, OSError) as e:
            print("i/o failure: %s" % e, file=sys.stderr)
            return EXIT_IO
    except UsageError as e:
        print("error: %s" % e, file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
