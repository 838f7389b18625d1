"""Trainable parameters, constraint projections, AdamW, and checkpointing."""

import json
import os

import numpy as np

from . import autodiff as ad


class Parameter:
    """Named trainable array with optional structural constraints.

    constraint_mask marks the trainable entries (True = trainable); the rest
    stay bit-exact at their initial values. symmetry_tag is one of
    {"none", "symmetric2d", "upper_triangular"} and acts on the last two axes.
    zero_sum forces each trailing 2D slice to sum to zero, so the stencil it
    parameterizes annihilates constant fields.
    """

    def __init__(self, name, value, constraint_mask=None, symmetry_tag="none",
                 zero_sum=False, project=True):
        if symmetry_tag not in ("none", "symmetric2d", "upper_triangular"):
            raise ValueError("unknown symmetry_tag %r" % symmetry_tag)
        value = np.asarray(value)
        if value.dtype != np.complex128:
            value = value.astype(np.float64)
        self.name = name
        self.var = ad.Var(value, requires_grad=True, op="param:" + name)
        self.symmetry_tag = symmetry_tag
        self.zero_sum = bool(zero_sum)
        if constraint_mask is not None:
            constraint_mask = np.asarray(constraint_mask, dtype=bool)
            if constraint_mask.shape != value.shape:
                raise ValueError("mask shape mismatch for %s" % name)
        self.constraint_mask = constraint_mask
        self._frozen = value.copy() if constraint_mask is not None else None
        # project=False keeps checkpointed values bit-exact on reload
        if project:
            self.project()

    @property
    def value(self):
        return self.var.value

    @value.setter
    def value(self, v):
        self.var.value = v

    def n_trainable(self):
        """Trainable real scalars: masked-off and structurally-zero entries
        are excluded; complex entries count twice."""
        n = int(self._support().sum())
        return 2 * n if np.iscomplexobj(self.value) else n

    def _support(self):
        """Entries allowed to carry weight (trainable and not structurally zero)."""
        support = np.ones(self.value.shape, dtype=bool)
        if self.symmetry_tag == "upper_triangular":
            n, m = self.value.shape[-2:]
            tri = np.triu(np.ones((n, m), dtype=bool))
            support &= np.broadcast_to(tri, self.value.shape)
        if self.constraint_mask is not None:
            support &= self.constraint_mask
        return support

    def project(self):
        """Re-apply symmetry, mask freezing, and zero-sum after an update."""
        v = self.value
        if self.symmetry_tag == "symmetric2d":
            vt = np.swapaxes(v, -1, -2)
            vf = v[..., ::-1, ::-1]
            vtf = vt[..., ::-1, ::-1]
            v = 0.25 * (v + vt + vf + vtf)
        elif self.symmetry_tag == "upper_triangular":
            n, m = v.shape[-2:]
            v = np.where(np.triu(np.ones((n, m), dtype=bool)), v, 0.0)
        if self.constraint_mask is not None:
            v = np.where(self.constraint_mask, v, self._frozen)
        if self.zero_sum:
            support = self._support()
            ns = support.sum(axis=(-1, -2), keepdims=True)
            total = v.sum(axis=(-1, -2), keepdims=True)
            v = np.where(support, v - total / np.maximum(ns, 1), v)
        self.value = np.ascontiguousarray(v)


def xavier_init(shape, c=0.02, seed=None, rng=None):
    """Xavier-uniform sample scaled by c: bound = c * sqrt(6/(fan_in+fan_out))."""
    shape = tuple(int(s) for s in shape)
    if any(s <= 0 for s in shape):
        raise ValueError("dims must be positive")
    if rng is None:
        rng = np.random.default_rng(seed)
    if len(shape) == 1:
        fan_in = fan_out = shape[0]
    else:
        rcpt = int(np.prod(shape[2:])) if len(shape) > 2 else 1
        fan_in, fan_out = shape[1] * rcpt, shape[0] * rcpt
    bound = c * np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


def grad(loss_fn, params):
    """Loss value and per-parameter gradient, with masked entries zeroed."""
    leaves = {p.name: p.var for p in params}
    val, grads = ad.value_and_grad(loss_fn, leaves)
    for p in params:
        if p.constraint_mask is not None:
            grads[p.name] = np.where(p.constraint_mask, grads[p.name], 0.0)
    return val, grads


def init_adamw_state(params):
    return {
        "step": 0,
        "skipped": 0,
        "m": {p.name: np.zeros_like(p.value) for p in params},
        "v": {p.name: np.zeros_like(p.value, dtype=np.float64) for p in params},
    }


def adamw_step(params, grads, state, lr=1e-3, betas=(0.9, 0.999), eps=1e-8,
               weight_decay=1e-4):
    """Decoupled-weight-decay Adam update followed by constraint projection.

    A parameter whose gradient contains non-finite values keeps its old value
    for this step; state["skipped"] counts such events.
    """
    b1, b2 = betas
    state["step"] += 1
    t = state["step"]
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for p in params:
        g = grads[p.name]
        if not np.all(np.isfinite(g)):
            state["skipped"] += 1
            continue
        m = state["m"][p.name]
        v = state["v"][p.name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * np.abs(g) ** 2
        update = (m / c1) / (np.sqrt(v / c2) + eps)
        p.value = p.value - lr * update - lr * weight_decay * p.value
        p.project()
    return state


# checkpointing --------------------------------------------------------------


def save_checkpoint(path, params, opt_state=None, extra=None):
    """Write a checkpoint directory: manifest.json + little-endian float64 blobs."""
    os.makedirs(path, exist_ok=True)
    manifest = {"format": 1, "params": [], "extra": extra or {}}
    offset = 0
    chunks = []

    def put(arr):
        nonlocal offset
        raw = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        chunks.append(raw)
        rec = offset
        offset += len(raw)
        return rec

    for p in params:
        val = p.value
        entry = {
            "name": p.name,
            "shape": list(val.shape),
            "complex": bool(np.iscomplexobj(val)),
            "symmetry_tag": p.symmetry_tag,
            "zero_sum": p.zero_sum,
            "offset": put(val.view(np.float64) if np.iscomplexobj(val) else val),
        }
        if p.constraint_mask is not None:
            entry["mask_offset"] = put(p.constraint_mask.astype(np.float64))
        manifest["params"].append(entry)
    if opt_state is not None:
        manifest["opt"] = {"step": opt_state["step"], "skipped": opt_state["skipped"],
                           "m": {}, "v": {}}
        for name in opt_state["m"]:
            mv = opt_state["m"][name]
            manifest["opt"]["m"][name] = {
                "offset": put(mv.view(np.float64) if np.iscomplexobj(mv) else mv),
                "complex": bool(np.iscomplexobj(mv)),
            }
            manifest["opt"]["v"][name] = {"offset": put(opt_state["v"][name])}
    with open(os.path.join(path, "weights.bin"), "wb") as f:
        for chunk in chunks:
            f.write(chunk)
    with open(os.path.join(path, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=1)


def load_checkpoint(path):
    """Read back (params, opt_state or None, extra dict)."""
    with open(os.path.join(path, "manifest.json")) as f:
        manifest = json.load(f)
    blob = np.fromfile(os.path.join(path, "weights.bin"), dtype="<f8")

    def get(offset, shape, is_complex=False):
        n = int(np.prod(shape)) if shape else 1
        n_f64 = 2 * n if is_complex else n
        arr = blob[offset // 8: offset // 8 + n_f64].copy()
        if is_complex:
            arr = arr.view(np.complex128)
        return arr.reshape(shape)

    params = []
    for entry in manifest["params"]:
        val = get(entry["offset"], entry["shape"], entry["complex"])
        mask = None
        if "mask_offset" in entry:
            mask = get(entry["mask_offset"], entry["shape"]).astype(bool)
        params.append(Parameter(entry["name"], val, constraint_mask=mask,
                                symmetry_tag=entry["symmetry_tag"],
                                zero_sum=entry["zero_sum"], project=False))
    opt_state = None
    if "opt" in manifest:
        opt = manifest["opt"]
        opt_state = {"step": opt["step"], "skipped": opt["skipped"], "m": {}, "v": {}}
        for p in params:
            shape = list(p.value.shape)
            rec = opt["m"][p.name]
            opt_state["m"][p.name] = get(rec["offset"], shape, rec["complex"])
            opt_state["v"][p.name] = get(opt["v"][p.name]["offset"], shape)
    return params, opt_state, manifest.get("extra", {})
