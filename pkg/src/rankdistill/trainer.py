"""Teacher training and student distillation.

The student objective per user batch ``B`` is::

    L_RS + lambda_rrd * L_RRD + lambda_ucd * L_UCD + lambda_icd * L_ICD

where the item-side term runs over the distinct positive items of ``B``.
Relaxed ranking targets are built once from the teacher; correction samples
are rebuilt from fresh pools every ``resample_period`` epochs.
"""
from __future__ import annotations

import dataclasses
import logging
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .dataset import InteractionDataset, make_user_batch
from .distill import (
    CorrectionSamples,
    RRDTargets,
    build_rrd_targets,
    compute_correction_samples,
    icd_loss,
    rrd_loss,
    ucd_loss,
)
from .evaluation import MetricReport, evaluate
from .models import KINDS, AdamState, ModelParams, NumericalError, adam_step, base_loss, init_params, zero_grads

__all__ = [
    "METHODS",
    "ABLATIONS",
    "LOSS_KEYS",
    "TrainConfig",
    "Objective",
    "rng_for",
    "train_teacher",
    "distill_student",
    "run_ablation",
]

log = logging.getLogger(__name__)

METHODS = ("student", "rrd", "dcd")
ABLATIONS = ("full", "no_correction", "no_item_side", "no_user_side", "no_sampling")
LOSS_KEYS = ("L_RS", "L_RRD", "L_UCD", "L_ICD", "L_IRRD")

# stream ids for forking the single run seed
_STREAMS = {"teacher_init": 1, "student_init": 2, "split": 3, "negatives": 4,
            "sampler": 5, "targets": 6, "shuffle": 7, "item_targets": 8}


def rng_for(seed: int, purpose: str) -> np.random.Generator:
    """Independent generator for one purpose, derived from the run seed."""
    return np.random.default_rng([seed, _STREAMS[purpose]])


@dataclass
class TrainConfig:
    model: str = "bpr"
    teacher_dim: int = 200
    student_dim: int = 20
    epochs: int = 200
    batch_size: int = 64
    lr: float = 1e-3
    l2: float = 1e-5
    teacher_lr: float | None = None
    teacher_l2: float | None = None
    num_negatives: int = 1
    init_std: float = 0.01
    item_bias: bool = False
    method: str = "dcd"
    ablation: str = "full"
    lambda_rrd: float = 0.1
    lambda_ucd: float = 0.01
    lambda_icd: float = 0.01
    lambda_irrd: float | None = None
    mu: float = 1e-3
    m_under: int = 40
    m_over: int = 40
    pool_teacher: int | None = 100
    pool_student: int | None = 100
    pool_random: int = 100
    rrd_k: int = 40
    rrd_l: int = 40
    rrd_exhaustive: bool = False
    resample_period: int = 5
    patience: int = 20
    eval_every: int = 1
    min_interactions: int = 3
    seed: int = 0

    def validate(self) -> "TrainConfig":
        if self.model not in KINDS:
            raise ValueError(f"model: expected one of {KINDS}, got {self.model!r}")
        if self.method not in METHODS:
            raise ValueError(f"method: expected one of {METHODS}, got {self.method!r}")
        if self.ablation not in ABLATIONS:
            raise ValueError(f"ablation: expected one of {ABLATIONS}, got {self.ablation!r}")
        for name in ("lambda_rrd", "lambda_ucd", "lambda_icd", "mu", "lr"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.lambda_irrd is not None and self.lambda_irrd < 0:
            raise ValueError("lambda_irrd must be non-negative")
        if self.resample_period < 1:
            raise ValueError("resample_period must be >= 1")
        for name in ("teacher_dim", "student_dim", "batch_size", "epochs", "num_negatives", "eval_every"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        return self

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - names)
        if unknown:
            raise KeyError(f"unknown config key {unknown[0]!r}")
        return cls(**d)

    def objective(self) -> "Objective":
        """Loss weights and sampler mode implied by ``method`` and ``ablation``."""
        self.validate()
        if self.method == "student":
            return Objective(0.0, 0.0, 0.0, 0.0, False)
        if self.method == "rrd":
            return Objective(self.lambda_rrd, 0.0, 0.0, 0.0, False)
        mode = self.ablation
        if mode == "no_correction":
            # same weights, static teacher targets: the user-side term shares the RRD targets
            irrd = self.lambda_icd if self.lambda_irrd is None else self.lambda_irrd
            return Objective(self.lambda_rrd + self.lambda_ucd, 0.0, 0.0, irrd, False)
        return Objective(
            self.lambda_rrd,
            0.0 if mode == "no_user_side" else self.lambda_ucd,
            0.0 if mode == "no_item_side" else self.lambda_icd,
            0.0,
            mode == "no_sampling",
        )


@dataclass(frozen=True)
class Objective:
    lambda_rrd: float
    lambda_ucd: float
    lambda_icd: float
    lambda_irrd: float
    deterministic: bool


@dataclass
class DistillState:
    """What the training loop exposes to epoch callbacks."""

    epoch: int
    student: ModelParams
    rrd_targets: RRDTargets | None = None
    item_targets: RRDTargets | None = None
    user_samples: CorrectionSamples | None = None
    item_samples: CorrectionSamples | None = None
    extra: dict = field(default_factory=dict)


def _fit(
    dataset: InteractionDataset,
    params: ModelParams,
    lr: float,
    l2: float,
    cfg: TrainConfig,
    batch_objective: Callable[[np.ndarray, dict], dict],
    on_epoch_start: Callable[[int], dict] | None = None,
    label: str = "",
) -> tuple[ModelParams, list[dict]]:
    adam = AdamState(lr=lr, l2=l2)
    shuffle = rng_for(cfg.seed, "shuffle")
    users = np.flatnonzero([len(t) > 0 for t in dataset.train])
    n_batches = max(1, int(np.ceil(len(users) / cfg.batch_size)))
    has_valid = bool((dataset.valid >= 0).any())
    best_score, best_params, best_epoch, stale = -1.0, None, -1, 0
    records: list[dict] = []
    t0 = time.perf_counter()
    for epoch in range(cfg.epochs):
        info = on_epoch_start(epoch) if on_epoch_start else {}
        sums = dict.fromkeys(LOSS_KEYS, 0.0)
        for batch_users in np.array_split(shuffle.permutation(users), n_batches):
            grads = zero_grads(params)
            comps = batch_objective(batch_users, grads)
            total = sum(comps.values())
            if not np.isfinite(total):
                raise NumericalError(f"{label}: non-finite loss at epoch {epoch}")
            adam_step(params, adam, grads)
            for k, v in comps.items():
                sums[k] += v
        rec = {"epoch": epoch, **{k: v / n_batches for k, v in sums.items()}}
        rec["total"] = sum(rec[k] for k in LOSS_KEYS)
        rec.update(info)
        if has_valid and (epoch % cfg.eval_every == 0 or epoch == cfg.epochs - 1):
            agg = evaluate(params, dataset, "valid", ns=(5,)).aggregate()
            rec["valid_H@5"], rec["valid_M@5"] = agg["H@5"], agg["M@5"]
            if agg["H@5"] > best_score:
                best_score, best_params, best_epoch, stale = agg["H@5"], params.copy(), epoch, 0
            else:
                stale += cfg.eval_every
        rec["wall_time"] = time.perf_counter() - t0
        records.append(rec)
        log.debug("%s epoch %d: %s", label, epoch, rec)
        if has_valid and stale >= cfg.patience:
            break
    if best_params is not None:
        params.tensors = best_params.tensors
        records.append({"best_epoch": best_epoch, "best_valid_H@5": best_score})
    return params, records


def _check_dims(params: ModelParams, dataset: InteractionDataset, what: str) -> None:
    if (params.num_users, params.num_items) != (dataset.num_users, dataset.num_items):
        raise ValueError(
            f"{what} was built for {params.num_users} users x {params.num_items} items, "
            f"dataset has {dataset.num_users} x {dataset.num_items}"
        )


def train_teacher(dataset: InteractionDataset, config: TrainConfig) -> tuple[ModelParams, list[dict]]:
    """Train the large model on the base loss only, early-stopping on validation H@5."""
    cfg = config.validate()
    params = init_params(cfg.model, dataset.num_users, dataset.num_items, cfg.teacher_dim,
                         seed=int(rng_for(cfg.seed, "teacher_init").integers(2**31)),
                         init_std=cfg.init_std, item_bias=cfg.item_bias)
    negatives = rng_for(cfg.seed, "negatives")

    def objective(users, grads):
        batch = make_user_batch(dataset, users, negatives, cfg.num_negatives)
        return {"L_RS": base_loss(params, batch, grads)[0]}

    lr = cfg.lr if cfg.teacher_lr is None else cfg.teacher_lr
    l2 = cfg.l2 if cfg.teacher_l2 is None else cfg.teacher_l2
    return _fit(dataset, params, lr, l2, cfg, objective, label="teacher")


def distill_student(
    dataset: InteractionDataset,
    teacher: ModelParams,
    config: TrainConfig,
    callback: Callable[[DistillState], None] | None = None,
) -> tuple[ModelParams, list[dict]]:
    """Train a small student with the configured distillation objective."""
    cfg = config.validate()
    _check_dims(teacher, dataset, "teacher")
    obj = cfg.objective()
    student = init_params(cfg.model, dataset.num_users, dataset.num_items, cfg.student_dim,
                          seed=int(rng_for(cfg.seed, "student_init").integers(2**31)),
                          init_std=cfg.init_std, item_bias=cfg.item_bias)
    negatives = rng_for(cfg.seed, "negatives")
    sampler = rng_for(cfg.seed, "sampler")
    state = DistillState(epoch=0, student=student)
    if obj.lambda_rrd > 0:
        state.rrd_targets = build_rrd_targets(teacher, dataset, rng_for(cfg.seed, "targets"),
                                              cfg.rrd_k, cfg.rrd_l, "user", cfg.rrd_exhaustive)
    if obj.lambda_irrd > 0:
        state.item_targets = build_rrd_targets(teacher, dataset, rng_for(cfg.seed, "item_targets"),
                                               cfg.rrd_k, cfg.rrd_l, "item", cfg.rrd_exhaustive)
    sides = [s for s, lam in (("user", obj.lambda_ucd), ("item", obj.lambda_icd)) if lam > 0]
    sample_kw = dict(mu=cfg.mu, m_under=cfg.m_under, m_over=cfg.m_over, t_teacher=cfg.pool_teacher,
                     t_student=cfg.pool_student, n_random=cfg.pool_random, deterministic=obj.deterministic)

    def on_epoch_start(epoch):
        state.epoch = epoch
        info = {}
        if sides and epoch % cfg.resample_period == 0:
            for side in sides:
                s = compute_correction_samples(dataset, teacher, state.student, side, sampler, epoch=epoch, **sample_kw)
                setattr(state, f"{side}_samples", s)
            info["resampled"] = True
        if callback is not None:
            callback(state)
        return info

    def objective(users, grads):
        batch = make_user_batch(dataset, users, negatives, cfg.num_negatives)
        comps = dict.fromkeys(LOSS_KEYS, 0.0)
        comps["L_RS"] = base_loss(student, batch, grads)[0]
        items = np.unique(batch.positives)
        if obj.lambda_rrd > 0:
            comps["L_RRD"] = obj.lambda_rrd * rrd_loss(student, state.rrd_targets, users, grads, obj.lambda_rrd)[0]
        if obj.lambda_ucd > 0:
            comps["L_UCD"] = obj.lambda_ucd * ucd_loss(student, state.user_samples, users, grads, obj.lambda_ucd)[0]
        if obj.lambda_icd > 0:
            comps["L_ICD"] = obj.lambda_icd * icd_loss(student, state.item_samples, items, grads, obj.lambda_icd)[0]
        if obj.lambda_irrd > 0:
            comps["L_IRRD"] = obj.lambda_irrd * rrd_loss(student, state.item_targets, items, grads, obj.lambda_irrd)[0]
        return comps

    student, records = _fit(dataset, student, cfg.lr, cfg.l2, cfg, objective, on_epoch_start, label=cfg.method)
    state.student = student
    return student, records


def run_ablation(
    dataset: InteractionDataset, teacher: ModelParams, base_config: TrainConfig, mode: str
) -> tuple[MetricReport, ModelParams, list[dict]]:
    """Distil a DCD student under one ablation mode and evaluate it on the test split."""
    if mode not in ABLATIONS:
        raise ValueError(f"unknown ablation mode {mode!r}; expected one of {ABLATIONS}")
    cfg = base_config.replace(method="dcd", ablation=mode)
    student, records = distill_student(dataset, teacher, cfg)
    report = evaluate(student, dataset, "test", method=f"dcd:{mode}", seed=cfg.seed)
    return report, student, records
