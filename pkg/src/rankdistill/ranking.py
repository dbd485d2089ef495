"""User-side and item-side ranking lists over unobserved counterparts.

Rank 0 is the best position. Ties in score are always broken by ascending
candidate ID so that every ranking is total and reproducible. On the item
side the anchors are items and the candidates are users.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from .dataset import InteractionDataset
from .models import ModelParams

__all__ = [
    "SIDES",
    "RankingList",
    "CandidatePool",
    "rank_candidates",
    "build_pool",
    "top_n",
    "anchor_scores",
    "observed_mask",
    "order_unobserved",
    "rank_positions",
    "pool_masks",
    "write_rankings",
]

SIDES = ("user", "item")


def _check_side(side: str) -> None:
    if side not in SIDES:
        raise ValueError(f"side must be one of {SIDES}, got {side!r}")


def num_anchors(dataset: InteractionDataset, side: str) -> int:
    return dataset.num_users if side == "user" else dataset.num_items


def num_candidates(dataset: InteractionDataset, side: str) -> int:
    return dataset.num_items if side == "user" else dataset.num_users


def observed_of(dataset: InteractionDataset, anchor: int, side: str) -> np.ndarray:
    return dataset.train[anchor] if side == "user" else dataset.train_t[anchor]


@dataclass(frozen=True, eq=False)
class RankingList:
    anchor: int
    side: str
    order: np.ndarray
    scores: np.ndarray
    _rank: dict = field(init=False, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "_rank", {int(c): k for k, c in enumerate(self.order)})

    def __len__(self) -> int:
        return len(self.order)

    def rank_of(self, candidate: int) -> int:
        return self._rank[int(candidate)]


@dataclass(frozen=True, eq=False)
class CandidatePool:
    anchor: int
    side: str
    candidates: np.ndarray

    def __len__(self) -> int:
        return len(self.candidates)


def _pair_scores(params: ModelParams, anchor: int, side: str, candidates: np.ndarray) -> np.ndarray:
    anchors = np.full(len(candidates), anchor, dtype=np.int64)
    if side == "user":
        return params.scores(anchors, candidates)
    return params.scores(candidates, anchors)


def rank_candidates(params: ModelParams, anchor: int, side: str, pool) -> RankingList:
    """Sort a pool by descending score, ascending ID on ties."""
    _check_side(side)
    candidates = np.asarray(getattr(pool, "candidates", pool), dtype=np.int64)
    if not len(candidates):
        raise ValueError("cannot rank an empty candidate pool")
    s = _pair_scores(params, anchor, side, candidates)
    idx = np.lexsort((candidates, -s))
    return RankingList(anchor, side, candidates[idx], s[idx])


def anchor_scores(params: ModelParams, anchors: np.ndarray, side: str) -> np.ndarray:
    """Scores of every counterpart for each anchor, shape (len(anchors), n_counterparts)."""
    _check_side(side)
    if side == "user":
        return params.score_matrix(users=anchors)
    return params.score_matrix(items=anchors).T


def observed_mask(dataset: InteractionDataset, anchors: np.ndarray, side: str) -> np.ndarray:
    """Boolean (len(anchors), n_counterparts) mask of training interactions."""
    lists = dataset.train if side == "user" else dataset.train_t
    mask = np.zeros((len(anchors), num_candidates(dataset, side)), dtype=bool)
    for row, a in enumerate(anchors):
        mask[row, lists[a]] = True
    return mask


def order_unobserved(scores: np.ndarray, excluded: np.ndarray) -> np.ndarray:
    """Per-row candidate order, best first; excluded entries are pushed to the end.

    A stable sort on negated scores gives ascending-ID tie-breaking.
    """
    keyed = np.where(excluded, np.inf, -scores)
    return np.argsort(keyed, axis=1, kind="stable")


def rank_positions(order: np.ndarray, member: np.ndarray | None = None) -> np.ndarray:
    """Invert per-row orders into rank positions.

    With ``member`` given, the rank counts only members ranked above (rank
    within the sub-list); non-members get -1.
    """
    n_rows, n_cols = order.shape
    rows = np.arange(n_rows)[:, None]
    ranks = np.empty_like(order)
    if member is None:
        ranks[rows, order] = np.arange(n_cols)[None, :]
        return ranks
    in_order = np.take_along_axis(member, order, axis=1)
    ranks[rows, order] = np.cumsum(in_order, axis=1) - 1
    return np.where(member, ranks, -1)


def pool_masks(
    teacher_order: np.ndarray,
    student_order: np.ndarray,
    n_unobserved: np.ndarray,
    t_teacher: int | None,
    t_student: int | None,
    n_random: int,
    rng: np.random.Generator,
) -> np.ndarray:
    """Union of both models' heads and a random unobserved tail, per row.

    ``None`` for a head size means every unobserved candidate.
    """
    n_rows, n_cols = teacher_order.shape
    mask = np.zeros((n_rows, n_cols), dtype=bool)
    rows = np.arange(n_rows)[:, None]
    cols = np.arange(n_cols)[None, :]
    for order, t in ((teacher_order, t_teacher), (student_order, t_student)):
        limit = n_unobserved[:, None] if t is None else np.minimum(t, n_unobserved)[:, None]
        take = cols < limit
        mask[rows, order] |= take
    if n_random > 0:
        # uniform positions among each row's unobserved prefix of the teacher order
        pos = (rng.random((n_rows, n_random)) * n_unobserved[:, None]).astype(np.int64)
        picked = np.take_along_axis(teacher_order, np.minimum(pos, n_cols - 1), axis=1)
        keep = np.broadcast_to(n_unobserved[:, None] > 0, picked.shape)
        mask[np.broadcast_to(rows, picked.shape)[keep], picked[keep]] = True
    return mask


def build_pool(
    dataset: InteractionDataset,
    teacher: ModelParams,
    student: ModelParams,
    anchor: int,
    side: str,
    rng: np.random.Generator,
    t_teacher: int | None = 100,
    t_student: int | None = 100,
    n_random: int = 100,
) -> CandidatePool:
    """Teacher head, student head and random tail over unobserved counterparts."""
    _check_side(side)
    anchors = np.array([anchor])
    excluded = observed_mask(dataset, anchors, side)
    n_unobs = (~excluded).sum(axis=1)
    t_order = order_unobserved(anchor_scores(teacher, anchors, side), excluded)
    s_order = order_unobserved(anchor_scores(student, anchors, side), excluded)
    mask = pool_masks(t_order, s_order, n_unobs, t_teacher, t_student, n_random, rng)
    return CandidatePool(anchor, side, np.flatnonzero(mask[0]))


def top_n(params: ModelParams, user: int, dataset: InteractionDataset, n: int, exclude: Iterable[int] = ()) -> np.ndarray:
    """Top ``n`` unobserved items of ``user`` over the whole catalogue."""
    if n < 1:
        raise ValueError("N must be >= 1")
    anchors = np.array([user])
    excluded = observed_mask(dataset, anchors, "user")
    excluded[0, list(exclude)] = True
    order = order_unobserved(anchor_scores(params, anchors, "user"), excluded)[0]
    return order[: min(n, int((~excluded).sum()))]


def write_rankings(path, lists: Iterable[RankingList], ids: tuple[str, ...] | None = None,
                   anchor_ids: tuple[str, ...] | None = None, limit: int | None = None) -> None:
    """Dump rankings as ``anchor_id: id1,id2,...`` lines."""
    def name(table, k):
        return table[k] if table is not None else str(k)

    with open(path, "w", encoding="utf-8") as fh:
        for rl in lists:
            order = rl.order if limit is None else rl.order[:limit]
            fh.write(f"{name(anchor_ids, rl.anchor)}: {','.join(name(ids, int(c)) for c in order)}\n")
