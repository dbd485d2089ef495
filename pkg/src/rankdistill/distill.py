"""Ranking distillation losses and discrepancy-driven correction sampling.

The central quantity is the relaxed permutation log-probability of an ordered
head list against an unordered tail::

    log p = sum_k [ s_k - log( sum_{i >= k} exp(s_i) + sum_j exp(t_j) ) ]

It is used three ways: teacher top-K against sampled lower-ranked items
(relaxed ranking distillation), and sampled under-estimated against
over-estimated counterparts on the user side and on the item side
(correction losses).

Batched lists are stored as padded integer matrices with -1 for empty slots.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .dataset import InteractionDataset
from .models import ModelParams, NumericalError, zero_grads
from .ranking import (
    RankingList,
    anchor_scores,
    num_anchors,
    observed_mask,
    order_unobserved,
    pool_masks,
    rank_positions,
)

__all__ = [
    "discrepancy_under",
    "discrepancy_over",
    "weighted_sample_without_replacement",
    "CorrectionSample",
    "CorrectionSamples",
    "sample_correction",
    "compute_correction_samples",
    "relaxed_log_prob",
    "relaxed_log_prob_rows",
    "listwise_loss",
    "RRDTarget",
    "RRDTargets",
    "build_rrd_targets",
    "rrd_loss",
    "ucd_loss",
    "icd_loss",
]


def _digest(*arrays: np.ndarray) -> str:
    h = hashlib.sha256()
    for a in arrays:
        h.update(str(a.shape).encode())
        h.update(np.ascontiguousarray(a, dtype="<i8").tobytes())
    return h.hexdigest()


# --- discrepancy and sampling -------------------------------------------------

def discrepancy_under(rank_student, rank_teacher, mu: float = 1e-3):
    """Under-estimation error ``tanh(max(mu * (R_S - R_T), 0))``."""
    gap = np.asarray(rank_student, dtype=np.float64) - np.asarray(rank_teacher, dtype=np.float64)
    out = np.tanh(np.maximum(mu * gap, 0.0))
    return float(out) if out.ndim == 0 else out


def discrepancy_over(rank_student, rank_teacher, mu: float = 1e-3):
    """Over-estimation error ``tanh(max(mu * (R_T - R_S), 0))``."""
    return discrepancy_under(rank_teacher, rank_student, mu)


def _select_rows(weights: np.ndarray, m: int, rng: np.random.Generator | None) -> np.ndarray:
    """Pick up to ``m`` positive-weight columns per row, padded with -1.

    With an ``rng`` the picks follow successive weighted draws without
    replacement and come back in draw order: the m largest keys
    ``log(U) / w`` have the same law as remove-and-renormalise draws.
    Without one, the m largest weights are taken, ties by column.
    """
    n_rows, n_cols = weights.shape
    m = min(m, n_cols)
    if m <= 0:
        return np.full((n_rows, 0), -1, dtype=np.int64)
    positive = weights > 0
    if rng is None:
        keys = np.where(positive, weights, -np.inf)
    else:
        u = 1.0 - rng.random(weights.shape)  # (0, 1]
        keys = np.where(positive, np.log(u) / np.where(positive, weights, 1.0), -np.inf)
    order = np.argsort(-keys, axis=1, kind="stable")[:, :m]
    picked = np.take_along_axis(keys, order, axis=1)
    return np.where(np.isfinite(picked), order, -1).astype(np.int64)


def weighted_sample_without_replacement(weights, m: int, rng: np.random.Generator | None) -> np.ndarray:
    """Indices of ``m`` draws proportional to ``weights``, never repeating.

    Zero-weight entries are never drawn; if fewer than ``m`` weights are
    positive all of them are returned. ``rng=None`` returns the top ``m``.
    """
    w = np.asarray(weights, dtype=np.float64)
    if (w < 0).any() or not np.isfinite(w).all():
        raise ValueError("weights must be finite and non-negative")
    picked = _select_rows(w[None, :], m, rng)[0]
    return picked[picked >= 0]


@dataclass(frozen=True)
class CorrectionSample:
    """Discrepant counterparts of one anchor.

    ``under`` is ordered by teacher rank, best first; ``over`` is a set,
    stored sorted by ID.
    """

    anchor: int
    side: str
    under: np.ndarray
    over: np.ndarray
    epoch: int = 0


@dataclass(eq=False)
class CorrectionSamples:
    """Correction samples of every anchor on one side, as padded matrices."""

    side: str
    under: np.ndarray
    over: np.ndarray
    epoch: int
    deterministic: bool = False

    def sample(self, anchor: int) -> CorrectionSample:
        u, o = self.under[anchor], self.over[anchor]
        return CorrectionSample(anchor, self.side, u[u >= 0], o[o >= 0], self.epoch)

    def digest(self) -> str:
        return _digest(self.under, self.over)


def sample_correction(
    teacher_list: RankingList,
    student_list: RankingList,
    mu: float = 1e-3,
    m: int = 40,
    rng: np.random.Generator | None = None,
    m_over: int | None = None,
    epoch: int = 0,
) -> CorrectionSample:
    """Draw under- and over-estimated candidates of one anchor.

    Both lists must rank the same pool. ``rng=None`` takes the largest
    errors deterministically instead of sampling.
    """
    cands = np.sort(teacher_list.order)
    if not np.array_equal(cands, np.sort(student_list.order)):
        raise ValueError("teacher and student lists rank different pools")
    rt = np.array([teacher_list.rank_of(c) for c in cands])
    rs = np.array([student_list.rank_of(c) for c in cands])
    w_under = np.atleast_1d(discrepancy_under(rs, rt, mu))
    w_over = np.atleast_1d(discrepancy_over(rs, rt, mu))
    under = weighted_sample_without_replacement(w_under, m, rng)
    over = weighted_sample_without_replacement(w_over, m if m_over is None else m_over, rng)
    under = under[np.argsort(rt[under], kind="stable")]
    return CorrectionSample(
        teacher_list.anchor, teacher_list.side, cands[under], np.sort(cands[over]), epoch
    )


def compute_correction_samples(
    dataset: InteractionDataset,
    teacher: ModelParams,
    student: ModelParams,
    side: str,
    rng: np.random.Generator,
    *,
    mu: float = 1e-3,
    m_under: int = 40,
    m_over: int = 40,
    t_teacher: int | None = 100,
    t_student: int | None = 100,
    n_random: int = 100,
    deterministic: bool = False,
    epoch: int = 0,
    chunk: int = 256,
) -> CorrectionSamples:
    """Correction samples for every anchor of ``side``.

    For each anchor a candidate pool is built, both models rank it, the two
    discrepancies are evaluated per candidate and ``m_under`` / ``m_over``
    candidates are drawn proportionally (or taken top-down when
    ``deterministic``).
    """
    n = num_anchors(dataset, side)
    under = np.full((n, m_under), -1, dtype=np.int64)
    over = np.full((n, m_over), -1, dtype=np.int64)
    pick_rng = None if deterministic else rng
    for start in range(0, n, chunk):
        anchors = np.arange(start, min(n, start + chunk))
        excluded = observed_mask(dataset, anchors, side)
        n_unobs = (~excluded).sum(axis=1)
        t_order = order_unobserved(anchor_scores(teacher, anchors, side), excluded)
        s_order = order_unobserved(anchor_scores(student, anchors, side), excluded)
        pool = pool_masks(t_order, s_order, n_unobs, t_teacher, t_student, n_random, rng)
        rt = rank_positions(t_order, pool)
        rs = rank_positions(s_order, pool)
        w_under = np.where(pool, discrepancy_under(rs, rt, mu), 0.0)
        w_over = np.where(pool, discrepancy_over(rs, rt, mu), 0.0)
        u = _select_rows(w_under, m_under, pick_rng)
        o = _select_rows(w_over, m_over, pick_rng)
        # under-estimated list ordered by teacher rank, padding last
        key = np.where(u >= 0, np.take_along_axis(rt, np.maximum(u, 0), axis=1), np.iinfo(np.int64).max)
        u = np.take_along_axis(u, np.argsort(key, axis=1, kind="stable"), axis=1)
        o = np.sort(np.where(o >= 0, o, np.iinfo(np.int64).max), axis=1)
        o[o == np.iinfo(np.int64).max] = -1
        under[anchors, : u.shape[1]] = u
        over[anchors, : o.shape[1]] = o
    return CorrectionSamples(side, under, over, epoch, deterministic)


# --- relaxed permutation probability -----------------------------------------

def relaxed_log_prob_rows(head: np.ndarray, head_mask: np.ndarray, tail: np.ndarray, tail_mask: np.ndarray):
    """Row-wise relaxed log-probability and its gradient.

    ``head`` rows are left-aligned (valid entries first). Returns
    ``(logp, d_head, d_tail)`` where the gradients are of ``-logp`` and zero
    on padding. Rows with an empty head give ``logp = 0``.
    """
    neg_inf = -np.inf
    hs = np.where(head_mask, head, neg_inf)
    ts = np.where(tail_mask, tail, neg_inf)
    with np.errstate(invalid="ignore", divide="ignore"):
        suffix = np.logaddexp.accumulate(hs[:, ::-1], axis=1)[:, ::-1]
        tail_lse = logsumexp(ts, axis=1) if ts.shape[1] else np.full(len(ts), neg_inf)
        denom = np.logaddexp(suffix, tail_lse[:, None])
        logp = np.where(head_mask, hs - denom, 0.0).sum(axis=1)
        # d(-logp)/ds_i = -1 + sum_{k<=i} exp(s_i - D_k); d/dt_j = sum_k exp(t_j - D_k)
        cum = np.logaddexp.accumulate(np.where(head_mask, -denom, neg_inf), axis=1)
        d_head = np.where(head_mask, np.exp(hs + cum) - 1.0, 0.0)
        last = cum[:, -1] if cum.shape[1] else np.full(len(ts), neg_inf)
        d_tail = np.where(tail_mask, np.exp(ts + last[:, None]), 0.0)
    return logp, d_head, d_tail


def relaxed_log_prob(head_scores, tail_scores=()) -> float:
    """Relaxed permutation log-probability of ordered ``head_scores`` above ``tail_scores``."""
    h = np.asarray(head_scores, dtype=np.float64).reshape(1, -1)
    t = np.asarray(tail_scores, dtype=np.float64).reshape(1, -1)
    if h.size == 0:
        raise ValueError("head list must be non-empty")
    if not (np.isfinite(h).all() and np.isfinite(t).all()):
        raise NumericalError("non-finite score")
    logp, _, _ = relaxed_log_prob_rows(h, np.ones_like(h, bool), t, np.ones_like(t, bool))
    return float(logp[0])


def listwise_loss(
    params: ModelParams,
    anchors: np.ndarray,
    side: str,
    heads: np.ndarray,
    tails: np.ndarray,
    grads: dict[str, np.ndarray] | None = None,
    scale: float = 1.0,
) -> tuple[float, dict[str, np.ndarray]]:
    """Mean negative relaxed log-probability over anchors with a non-empty head.

    ``heads``/``tails`` hold counterpart IDs per anchor (-1 padded). Anchors
    whose head is empty add nothing and are left out of the mean.
    """
    if grads is None:
        grads = zero_grads(params)
    anchors = np.asarray(anchors, dtype=np.int64)
    hm, tm = heads >= 0, tails >= 0
    active = hm.any(axis=1)
    n_active = int(active.sum())
    if n_active == 0:
        return 0.0, grads
    ha, ta = np.broadcast_to(anchors[:, None], heads.shape)[hm], np.broadcast_to(anchors[:, None], tails.shape)[tm]
    a = np.concatenate([ha, ta])
    c = np.concatenate([heads[hm], tails[tm]])
    users, items = (a, c) if side == "user" else (c, a)
    s, cache = params.forward(users, items)
    if not np.isfinite(s).all():
        raise NumericalError("non-finite score")
    hs = np.zeros(heads.shape)
    ts = np.zeros(tails.shape)
    hs[hm], ts[tm] = s[: len(ha)], s[len(ha):]
    logp, dh, dt = relaxed_log_prob_rows(hs, hm, ts, tm)
    loss = -logp[active].sum() / n_active
    ds = np.concatenate([dh[hm], dt[tm]]) / n_active
    params.backward(cache, ds, grads, scale)
    return float(loss), grads


# --- relaxed ranking distillation targets --------------------------------------

@dataclass(frozen=True)
class RRDTarget:
    anchor: int
    interesting: np.ndarray
    uninteresting: np.ndarray


@dataclass(eq=False)
class RRDTargets:
    """Per-anchor teacher top-K (ordered) and sampled lower-ranked counterparts."""

    side: str
    interesting: np.ndarray
    uninteresting: np.ndarray

    def target(self, anchor: int) -> RRDTarget:
        h, t = self.interesting[anchor], self.uninteresting[anchor]
        return RRDTarget(anchor, h[h >= 0], t[t >= 0])

    def digest(self) -> str:
        return _digest(self.interesting, self.uninteresting)


def build_rrd_targets(
    teacher: ModelParams,
    dataset: InteractionDataset,
    rng: np.random.Generator,
    k: int = 40,
    l: int = 40,
    side: str = "user",
    exhaustive: bool = False,
    chunk: int = 256,
) -> RRDTargets:
    """Teacher top-``k`` unobserved counterparts and ``l`` uniform picks below them.

    With ``exhaustive`` every remaining unobserved counterpart goes into the
    lower-ranked set.
    """
    n = num_anchors(dataset, side)
    n_cand = dataset.num_items if side == "user" else dataset.num_users
    width = max(0, n_cand - k) if exhaustive else l
    head = np.full((n, k), -1, dtype=np.int64)
    tail = np.full((n, width), -1, dtype=np.int64)
    for start in range(0, n, chunk):
        anchors = np.arange(start, min(n, start + chunk))
        excluded = observed_mask(dataset, anchors, side)
        n_unobs = (~excluded).sum(axis=1)[:, None]
        order = order_unobserved(anchor_scores(teacher, anchors, side), excluded)
        cols = np.arange(n_cand)[None, :]
        kk = min(k, n_cand)
        head[anchors, :kk] = np.where(cols[:, :kk] < n_unobs, order[:, :kk], -1)
        rest = (cols >= k) & (cols < n_unobs)
        if exhaustive:
            sel = np.where(rest, order, -1)[:, k:]
        else:
            keys = np.where(rest, rng.random(order.shape), -1.0)
            pos = np.argsort(-keys, axis=1, kind="stable")[:, :width]
            ok = np.take_along_axis(rest, pos, axis=1)
            sel = np.where(ok, np.take_along_axis(order, pos, axis=1), -1)
            # keep teacher order within the sampled set for readability of dumps
            sel = np.take_along_axis(sel, np.argsort(np.where(ok, pos, n_cand), axis=1, kind="stable"), axis=1)
        tail[anchors, : sel.shape[1]] = sel
    return RRDTargets(side, head, tail)


def rrd_loss(student: ModelParams, targets: RRDTargets, anchors, grads=None, scale: float = 1.0):
    """Relaxed ranking distillation loss over a batch of anchors."""
    anchors = np.asarray(anchors, dtype=np.int64)
    if not len(anchors):
        raise ValueError("empty batch")
    return listwise_loss(
        student, anchors, targets.side, targets.interesting[anchors], targets.uninteresting[anchors], grads, scale
    )


def _correction_loss(student, samples: CorrectionSamples, anchors, side, grads, scale):
    if samples.side != side:
        raise ValueError(f"expected {side}-side correction samples, got {samples.side}-side")
    anchors = np.asarray(anchors, dtype=np.int64)
    return listwise_loss(student, anchors, side, samples.under[anchors], samples.over[anchors], grads, scale)


def ucd_loss(student: ModelParams, samples: CorrectionSamples, users, grads=None, scale: float = 1.0):
    """User-side correction loss: under-estimated items (teacher order) above over-estimated ones."""
    return _correction_loss(student, samples, users, "user", grads, scale)


def icd_loss(student: ModelParams, samples: CorrectionSamples, items, grads=None, scale: float = 1.0):
    """Item-side correction loss: under-estimated users (teacher order) above over-estimated ones."""
    return _correction_loss(student, samples, items, "item", grads, scale)
