"""Leave-one-out evaluation, run comparison and rank-discrepancy diagnostics."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np
from scipy import stats

from .dataset import InteractionDataset
from .models import ModelParams
from .ranking import anchor_scores, num_anchors, observed_mask, order_unobserved, rank_positions

__all__ = [
    "hit_at_n",
    "mrr_at_n",
    "target_ranks",
    "MetricReport",
    "evaluate",
    "avg_rank_discrepancy",
    "TTestResult",
    "paired_ttest",
    "write_reports_csv",
]

METRIC_NS = (5, 10)


def hit_at_n(rank, n: int):
    """1 if the 0-based ``rank`` is inside the top ``n``."""
    out = (np.asarray(rank) < n).astype(np.float64)
    return float(out) if out.ndim == 0 else out


def mrr_at_n(rank, n: int):
    """Truncated reciprocal rank ``1 / (rank + 1)``, zero outside the top ``n``."""
    r = np.asarray(rank, dtype=np.float64)
    out = np.where(r < n, 1.0 / (r + 1.0), 0.0)
    return float(out) if out.ndim == 0 else out


def target_ranks(params: ModelParams, dataset: InteractionDataset, split: str = "test", chunk: int = 512):
    """0-based rank of each eligible user's held-out item among unobserved items.

    Training items and the user's other held-out item are not candidates.
    Equal scores rank the lower item ID first. Returns ``(users, ranks)``.
    """
    if split not in ("test", "valid"):
        raise ValueError("split must be 'test' or 'valid'")
    target = dataset.test if split == "test" else dataset.valid
    other = dataset.valid if split == "test" else dataset.test
    users = np.flatnonzero(target >= 0)
    ranks = np.empty(len(users), dtype=np.int64)
    cols = np.arange(dataset.num_items)[None, :]
    for start in range(0, len(users), chunk):
        block = users[start:start + chunk]
        s = anchor_scores(params, block, "user")
        excluded = observed_mask(dataset, block, "user")
        rows = np.arange(len(block))
        o = other[block]
        excluded[rows[o >= 0], o[o >= 0]] = True
        t = target[block]
        st = s[rows, t][:, None]
        ahead = ((s > st) | ((s == st) & (cols < t[:, None]))) & ~excluded
        ranks[start:start + chunk] = ahead.sum(axis=1)
    return users, ranks


@dataclass
class MetricReport:
    """Per-user H@N / M@N for one method, stacked over seeds (rows)."""

    method: str
    users: np.ndarray
    seeds: list[int]
    per_user: dict[str, np.ndarray]
    split_fingerprint: str = ""
    extra: dict = field(default_factory=dict)

    @property
    def metrics(self) -> list[str]:
        return list(self.per_user)

    def aggregate(self) -> dict[str, float]:
        """Mean over users, then over seeds."""
        return {k: float(v.mean(axis=1).mean()) for k, v in self.per_user.items()}

    def per_seed(self) -> dict[str, list[float]]:
        return {k: [float(x) for x in v.mean(axis=1)] for k, v in self.per_user.items()}

    def merge(self, other: "MetricReport") -> "MetricReport":
        """Stack another seed's report for the same users and split."""
        if self.split_fingerprint != other.split_fingerprint:
            raise ValueError("reports were computed on different splits")
        if not np.array_equal(self.users, other.users):
            raise ValueError("reports cover different users")
        per_user = {k: np.vstack([self.per_user[k], other.per_user[k]]) for k in self.per_user}
        extra = {k: v for k, v in self.extra.items()}
        for k, v in other.extra.items():
            extra.setdefault(k, v)
        return MetricReport(self.method, self.users, self.seeds + other.seeds, per_user, self.split_fingerprint, extra)

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "seeds": list(self.seeds),
            "split_fingerprint": self.split_fingerprint,
            "metrics": self.aggregate(),
            "per_seed": self.per_seed(),
            "extra": self.extra,
            "users": self.users.tolist(),
            "per_user": {k: v.tolist() for k, v in self.per_user.items()},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MetricReport":
        return cls(
            method=d["method"],
            users=np.asarray(d["users"], dtype=np.int64),
            seeds=list(d["seeds"]),
            per_user={k: np.asarray(v, dtype=np.float64) for k, v in d["per_user"].items()},
            split_fingerprint=d.get("split_fingerprint", ""),
            extra=d.get("extra", {}),
        )

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=1, sort_keys=True)

    @classmethod
    def load(cls, path) -> "MetricReport":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


def evaluate(
    params: ModelParams,
    dataset: InteractionDataset,
    split: str = "test",
    ns: Sequence[int] = METRIC_NS,
    method: str = "model",
    seed: int = 0,
) -> MetricReport:
    users, ranks = target_ranks(params, dataset, split)
    per_user = {}
    for n in ns:
        per_user[f"H@{n}"] = hit_at_n(ranks, n)[None, :]
        per_user[f"M@{n}"] = mrr_at_n(ranks, n)[None, :]
    return MetricReport(method, users, [seed], per_user, dataset.fingerprint())


def avg_rank_discrepancy(
    teacher: ModelParams,
    student: ModelParams,
    dataset: InteractionDataset,
    side: str = "user",
    k: int = 50,
    chunk: int = 256,
) -> float:
    """Mean |student rank - teacher rank| over the teacher's top ``k``, averaged over anchors.

    Both ranks are positions among all unobserved counterparts of the anchor.
    Anchors with fewer than ``k`` candidates use all of them; anchors with
    none are skipped.
    """
    n = num_anchors(dataset, side)
    total, counted = 0.0, 0
    for start in range(0, n, chunk):
        anchors = np.arange(start, min(n, start + chunk))
        excluded = observed_mask(dataset, anchors, side)
        n_unobs = (~excluded).sum(axis=1)
        t_order = order_unobserved(anchor_scores(teacher, anchors, side), excluded)
        s_ranks = rank_positions(order_unobserved(anchor_scores(student, anchors, side), excluded))
        kk = min(k, t_order.shape[1])
        top = t_order[:, :kk]
        gaps = np.abs(np.take_along_axis(s_ranks, top, axis=1) - np.arange(kk)[None, :])
        valid = np.arange(kk)[None, :] < np.minimum(n_unobs, k)[:, None]
        has = n_unobs > 0
        per_anchor = np.where(valid, gaps, 0).sum(axis=1)[has] / np.minimum(n_unobs, k)[has]
        total += per_anchor.sum()
        counted += int(has.sum())
    if counted == 0:
        raise ValueError("no anchor has unobserved candidates")
    return total / counted


class TTestResult(NamedTuple):
    statistic: float
    pvalue: float
    n: int


def paired_ttest(report_a: MetricReport, report_b: MetricReport, metric: str = "H@5") -> TTestResult:
    """Two-sided paired t-test over matched (seed, user) observations."""
    if report_a.split_fingerprint != report_b.split_fingerprint:
        raise ValueError("reports were computed on different splits")
    if not np.array_equal(report_a.users, report_b.users) or report_a.per_user[metric].shape != report_b.per_user[metric].shape:
        raise ValueError("reports do not cover the same users and seeds")
    diff = (report_a.per_user[metric] - report_b.per_user[metric]).ravel()
    n = diff.size
    if n < 2:
        raise ValueError("need at least 2 paired observations")
    mean = diff.mean()
    sd = diff.std(ddof=1)
    if sd == 0.0:
        if mean == 0.0:
            return TTestResult(0.0, 1.0, n)
        return TTestResult(float(np.copysign(np.inf, mean)), 0.0, n)
    t = mean / (sd / np.sqrt(n))
    p = 2.0 * stats.t.sf(abs(t), df=n - 1)
    return TTestResult(float(t), float(p), n)


def write_reports_csv(path, reports: Sequence[MetricReport]) -> None:
    """Flat CSV: one row per (method, seed) with aggregate metrics and diagnostics."""
    metric_cols = list(reports[0].metrics) if reports else []
    extra_cols = sorted({k for r in reports for k, v in r.extra.items() if isinstance(v, (int, float))})
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["method", "seed", *metric_cols, *extra_cols])
        for r in reports:
            seeds = r.per_seed()
            for j, seed in enumerate(r.seeds):
                w.writerow([r.method, seed, *(f"{seeds[m][j]:.6f}" for m in metric_cols),
                            *(r.extra.get(c, "") for c in extra_cols)])
