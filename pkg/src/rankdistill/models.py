"""Base scorers (BPR-MF and NeuMF) with hand-written gradients, and Adam.

Every loss in the package is a function of pair scores ``S(u, i)``. A model
therefore exposes two primitives:

* ``forward(users, items)`` returning the scores and a cache, and
* ``backward(cache, dscores, grads, scale)`` accumulating ``scale * dL/dtheta``
  into a dict of dense gradient arrays shaped like the parameters.
"""
from __future__ import annotations

import io
import json
import zipfile
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit, log_expit

from .dataset import Batch, InteractionDataset

__all__ = [
    "NumericalError",
    "ModelParams",
    "AdamState",
    "init_params",
    "score",
    "base_loss",
    "adam_step",
    "zero_grads",
    "save_checkpoint",
    "load_checkpoint",
]

KINDS = ("bpr", "neumf")
CHECKPOINT_FORMAT = "rankdistill-checkpoint/1"


class NumericalError(ArithmeticError):
    """Non-finite values in losses, gradients or parameters."""


def _mlp_hidden(dim: int) -> int:
    return max(1, dim // 2)


@dataclass(eq=False)
class ModelParams:
    """Learnable tensors of one scorer.

    BPR holds ``user`` and ``item`` tables (plus ``item_bias`` when enabled).
    NeuMF adds ``gmf_user``/``gmf_item`` tables, a two-layer ReLU tower
    ``W1, b1, W2, b2`` fed by the concatenated ``user``/``item`` vectors, and
    a linear head ``w_out, b_out`` over the concatenated GMF and MLP outputs.
    """

    kind: str
    dim: int
    num_users: int
    num_items: int
    tensors: dict[str, np.ndarray]
    seed: int | None = None

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    @property
    def num_parameters(self) -> int:
        return int(sum(t.size for t in self.tensors.values()))

    def copy(self) -> "ModelParams":
        return ModelParams(
            self.kind, self.dim, self.num_users, self.num_items,
            {k: v.copy() for k, v in self.tensors.items()}, self.seed,
        )

    def check_ids(self, users, items) -> None:
        users, items = np.asarray(users), np.asarray(items)
        if users.size and (users.min() < 0 or users.max() >= self.num_users):
            raise IndexError("user id out of range")
        if items.size and (items.min() < 0 or items.max() >= self.num_items):
            raise IndexError("item id out of range")

    def forward(self, users: np.ndarray, items: np.ndarray):
        return _OPS[self.kind][0](self.tensors, users, items)

    def backward(self, cache, dscores: np.ndarray, grads: dict[str, np.ndarray], scale: float = 1.0) -> None:
        _OPS[self.kind][1](self.tensors, cache, dscores * scale, grads)

    def scores(self, users: np.ndarray, items: np.ndarray) -> np.ndarray:
        return self.forward(np.asarray(users, dtype=np.int64), np.asarray(items, dtype=np.int64))[0]

    def score_matrix(self, users=None, items=None, chunk: int = 1 << 20) -> np.ndarray:
        """Dense scores for ``users`` x ``items`` (all when None)."""
        users = np.arange(self.num_users) if users is None else np.asarray(users, dtype=np.int64)
        items = np.arange(self.num_items) if items is None else np.asarray(items, dtype=np.int64)
        if self.kind == "bpr":
            out = self.tensors["user"][users] @ self.tensors["item"][items].T
            if "item_bias" in self.tensors:
                out += self.tensors["item_bias"][items]
            return out
        out = np.empty((len(users), len(items)))
        rows = max(1, chunk // max(1, len(items)))
        for start in range(0, len(users), rows):
            block = users[start:start + rows]
            uu = np.repeat(block, len(items))
            ii = np.tile(items, len(block))
            out[start:start + rows] = self.scores(uu, ii).reshape(len(block), len(items))
        return out


def zero_grads(params: ModelParams) -> dict[str, np.ndarray]:
    return {k: np.zeros_like(v) for k, v in params.tensors.items()}


# --- BPR-MF -----------------------------------------------------------------

def _bpr_forward(t, users, items):
    u, v = t["user"][users], t["item"][items]
    s = np.einsum("nd,nd->n", u, v)
    if "item_bias" in t:
        s = s + t["item_bias"][items]
    return s, (users, items, u, v)


def _bpr_backward(t, cache, ds, grads):
    users, items, u, v = cache
    np.add.at(grads["user"], users, ds[:, None] * v)
    np.add.at(grads["item"], items, ds[:, None] * u)
    if "item_bias" in grads:
        np.add.at(grads["item_bias"], items, ds)


# --- NeuMF ------------------------------------------------------------------

def _neumf_forward(t, users, items):
    gu, gi = t["gmf_user"][users], t["gmf_item"][items]
    gmf = gu * gi
    x0 = np.concatenate([t["user"][users], t["item"][items]], axis=1)
    z1 = x0 @ t["W1"] + t["b1"]
    a1 = np.maximum(z1, 0.0)
    z2 = a1 @ t["W2"] + t["b2"]
    a2 = np.maximum(z2, 0.0)
    h = np.concatenate([gmf, a2], axis=1)
    s = h @ t["w_out"] + t["b_out"][0]
    return s, (users, items, gu, gi, x0, z1, a1, z2, h)


def _neumf_backward(t, cache, ds, grads):
    users, items, gu, gi, x0, z1, a1, z2, h = cache
    d = gu.shape[1]
    grads["w_out"] += h.T @ ds
    grads["b_out"][0] += ds.sum()
    dh = ds[:, None] * t["w_out"][None, :]
    dgmf, da2 = dh[:, :d], dh[:, d:]
    np.add.at(grads["gmf_user"], users, dgmf * gi)
    np.add.at(grads["gmf_item"], items, dgmf * gu)
    dz2 = da2 * (z2 > 0)
    grads["W2"] += a1.T @ dz2
    grads["b2"] += dz2.sum(axis=0)
    dz1 = (dz2 @ t["W2"].T) * (z1 > 0)
    grads["W1"] += x0.T @ dz1
    grads["b1"] += dz1.sum(axis=0)
    dx0 = dz1 @ t["W1"].T
    np.add.at(grads["user"], users, dx0[:, :d])
    np.add.at(grads["item"], items, dx0[:, d:])


_OPS = {"bpr": (_bpr_forward, _bpr_backward), "neumf": (_neumf_forward, _neumf_backward)}


def _xavier(rng, fan_in, fan_out, shape=None):
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape or (fan_in, fan_out))


def init_params(
    kind: str,
    num_users: int,
    num_items: int,
    dim: int,
    seed: int,
    init_std: float = 0.01,
    item_bias: bool = False,
) -> ModelParams:
    """Random initial parameters; embeddings ~ N(0, init_std^2), MLP Xavier-uniform."""
    if kind not in KINDS:
        raise ValueError(f"unknown model kind {kind!r}; expected one of {KINDS}")
    if dim <= 0:
        raise ValueError("embedding dimension must be positive")
    rng = np.random.default_rng(seed)
    t = {
        "user": rng.normal(0.0, init_std, (num_users, dim)),
        "item": rng.normal(0.0, init_std, (num_items, dim)),
    }
    if kind == "bpr":
        if item_bias:
            t["item_bias"] = np.zeros(num_items)
    else:
        hid = _mlp_hidden(dim)
        t["gmf_user"] = rng.normal(0.0, init_std, (num_users, dim))
        t["gmf_item"] = rng.normal(0.0, init_std, (num_items, dim))
        t["W1"] = _xavier(rng, 2 * dim, dim)
        t["b1"] = np.zeros(dim)
        t["W2"] = _xavier(rng, dim, hid)
        t["b2"] = np.zeros(hid)
        t["w_out"] = _xavier(rng, dim + hid, 1, shape=(dim + hid,))
        t["b_out"] = np.zeros(1)
    return ModelParams(kind, dim, num_users, num_items, t, seed)


def score(params: ModelParams, u: int, i: int) -> float:
    params.check_ids([u], [i])
    return float(params.scores(np.array([u]), np.array([i]))[0])


def base_loss(
    params: ModelParams,
    batch: Batch,
    grads: dict[str, np.ndarray] | None = None,
    scale: float = 1.0,
) -> tuple[float, dict[str, np.ndarray]]:
    """Implicit-feedback loss of the base model and its gradient.

    BPR: mean over (positive, negative) pairs of ``-log sigmoid(s+ - s-)``.
    NeuMF: mean binary cross-entropy of ``sigmoid(s)`` over every positive
    (label 1) and every negative (label 0).
    ``scale * gradient`` is added to ``grads`` (allocated when None).
    """
    if len(batch) == 0:
        raise ValueError("empty batch")
    if grads is None:
        grads = zero_grads(params)
    n, k = batch.negatives.shape
    anchors = batch.anchors
    if batch.side == "user":
        users_pos, items_pos = anchors, batch.positives
        users_neg, items_neg = np.repeat(anchors, k), batch.negatives.ravel()
    else:
        users_pos, items_pos = batch.positives, anchors
        users_neg, items_neg = batch.negatives.ravel(), np.repeat(anchors, k)
    users = np.concatenate([users_pos, users_neg])
    items = np.concatenate([items_pos, items_neg])
    s, cache = params.forward(users, items)
    s_pos, s_neg = s[:n], s[n:].reshape(n, k)
    if params.kind == "bpr":
        diff = s_pos[:, None] - s_neg
        m = diff.size
        loss = -log_expit(diff).sum() / m
        g = -expit(-diff) / m
        ds = np.concatenate([g.sum(axis=1), -g.ravel()])
    else:
        m = s.size
        loss = (-log_expit(s_pos).sum() - log_expit(-s_neg).sum()) / m
        ds = np.concatenate([expit(s_pos) - 1.0, expit(s_neg).ravel()]) / m
    params.backward(cache, ds, grads, scale)
    return float(loss), grads


@dataclass(eq=False)
class AdamState:
    """Adam moments for one ModelParams, with coupled L2 (``grad += l2 * theta``)."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    l2: float = 0.0
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: ModelParams, state: AdamState, grads: dict[str, np.ndarray]) -> ModelParams:
    """One bias-corrected Adam update of ``params`` in place (also returned)."""
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise NumericalError(f"non-finite gradient in tensor {name!r}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** state.step
    bc2 = 1.0 - b2 ** state.step
    for name, theta in params.tensors.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(theta)
        if state.l2:
            g = g + state.l2 * theta
        m = state.m.setdefault(name, np.zeros_like(theta))
        v = state.v.setdefault(name, np.zeros_like(theta))
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        theta -= (state.lr / bc1) * m / (np.sqrt(v / bc2) + state.eps)
    return params


# --- checkpoints --------------------------------------------------------------

def _write_entry(zf: zipfile.ZipFile, name: str, payload: bytes) -> None:
    info = zipfile.ZipInfo(name, date_time=(1980, 1, 1, 0, 0, 0))
    info.compress_type = zipfile.ZIP_DEFLATED
    info.external_attr = 0o644 << 16
    zf.writestr(info, payload)


def _npy_bytes(arr: np.ndarray) -> bytes:
    buf = io.BytesIO()
    np.lib.format.write_array(buf, np.ascontiguousarray(arr), allow_pickle=False)
    return buf.getvalue()


def save_checkpoint(path, params: ModelParams, adam: AdamState | None = None, meta: dict | None = None) -> None:
    """Write a deterministic ``.npz``-compatible archive (fixed zip timestamps)."""
    header = {
        "format": CHECKPOINT_FORMAT,
        "kind": params.kind,
        "dim": params.dim,
        "num_users": params.num_users,
        "num_items": params.num_items,
        "seed": params.seed,
        "tensors": sorted(params.tensors),
        "meta": meta or {},
    }
    if adam is not None:
        header["adam"] = {k: getattr(adam, k) for k in ("lr", "beta1", "beta2", "eps", "l2", "step")}
    with zipfile.ZipFile(path, "w") as zf:
        _write_entry(zf, "header.json", json.dumps(header, sort_keys=True).encode())
        for name in sorted(params.tensors):
            _write_entry(zf, f"param/{name}.npy", _npy_bytes(params.tensors[name]))
        if adam is not None:
            for name in sorted(adam.m):
                _write_entry(zf, f"adam_m/{name}.npy", _npy_bytes(adam.m[name]))
                _write_entry(zf, f"adam_v/{name}.npy", _npy_bytes(adam.v[name]))


def load_checkpoint(path, dataset: InteractionDataset | None = None):
    """Return ``(params, adam_or_None, meta)``; reject shape mismatches with ``dataset``."""
    with zipfile.ZipFile(path) as zf:
        header = json.loads(zf.read("header.json"))
        if header.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"{path}: unsupported checkpoint format {header.get('format')!r}")

        def arr(name):
            return np.lib.format.read_array(io.BytesIO(zf.read(name)), allow_pickle=False)

        tensors = {k: arr(f"param/{k}.npy") for k in header["tensors"]}
        adam = None
        if "adam" in header:
            adam = AdamState(**header["adam"])
            adam.m = {k: arr(f"adam_m/{k}.npy") for k in header["tensors"]}
            adam.v = {k: arr(f"adam_v/{k}.npy") for k in header["tensors"]}
    params = ModelParams(header["kind"], header["dim"], header["num_users"], header["num_items"], tensors, header["seed"])
    if tensors["user"].shape != (params.num_users, params.dim) or tensors["item"].shape != (params.num_items, params.dim):
        raise ValueError(f"{path}: tensor shapes disagree with header")
    if dataset is not None and (dataset.num_users, dataset.num_items) != (params.num_users, params.num_items):
        raise ValueError(
            f"{path}: checkpoint has {params.num_users} users x {params.num_items} items, "
            f"dataset has {dataset.num_users} x {dataset.num_items}"
        )
    return params, adam, header["meta"]
