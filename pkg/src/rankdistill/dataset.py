"""Implicit-feedback interaction storage, leave-one-out splits and negative sampling.

Users and items are re-indexed densely in order of first appearance. The raw
identifiers are kept so that splits and reports can be written with the
original IDs.
"""
from __future__ import annotations

import hashlib
import io
import os
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
import scipy.sparse as sp

__all__ = [
    "DataError",
    "InteractionDataset",
    "Batch",
    "load_interactions",
    "leave_one_out_split",
    "sample_negatives",
    "sample_negatives_batch",
    "make_user_batch",
    "write_split",
    "read_split",
    "apply_split",
]


class DataError(ValueError):
    """Raised for malformed or unusable interaction data."""


def _as_index_lists(rows: np.ndarray, cols: np.ndarray, n_rows: int) -> list[np.ndarray]:
    order = np.lexsort((cols, rows))
    rows, cols = rows[order], cols[order]
    bounds = np.searchsorted(rows, np.arange(n_rows + 1))
    return [cols[bounds[r]:bounds[r + 1]].copy() for r in range(n_rows)]


@dataclass(frozen=True, eq=False)
class InteractionDataset:
    """Sparse user x item implicit-feedback store.

    ``train[u]`` is the sorted array of training items of user ``u`` and
    ``train_t[i]`` the sorted array of training users of item ``i``.
    ``valid[u]`` / ``test[u]`` hold the held-out item of ``u`` or -1.
    """

    num_users: int
    num_items: int
    user_ids: tuple[str, ...]
    item_ids: tuple[str, ...]
    train: tuple[np.ndarray, ...]
    valid: np.ndarray
    test: np.ndarray
    train_t: tuple[np.ndarray, ...] = field(init=False)
    user_index: dict[str, int] = field(init=False, repr=False)
    item_index: dict[str, int] = field(init=False, repr=False)
    _observed_keys: np.ndarray = field(init=False, repr=False)
    _n_observed: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        users, items = self.train_pairs()
        set_ = object.__setattr__
        set_(self, "train_t", tuple(_as_index_lists(items, users, self.num_items)))
        set_(self, "user_index", {raw: k for k, raw in enumerate(self.user_ids)})
        set_(self, "item_index", {raw: k for k, raw in enumerate(self.item_ids)})
        keys = [users.astype(np.int64) * self.num_items + items]
        n_obs = np.array([len(t) for t in self.train], dtype=np.int64)
        for held in (self.valid, self.test):
            has = np.flatnonzero(held >= 0)
            keys.append(has.astype(np.int64) * self.num_items + held[has])
            n_obs[has] += 1
        set_(self, "_observed_keys", np.unique(np.concatenate(keys)))
        set_(self, "_n_observed", n_obs)
        for arr in (self.valid, self.test, self._observed_keys, self._n_observed):
            arr.setflags(write=False)
        for arr in self.train + self.train_t:
            arr.setflags(write=False)

    @classmethod
    def from_pairs(
        cls,
        users: np.ndarray,
        items: np.ndarray,
        user_ids: Sequence[str],
        item_ids: Sequence[str],
    ) -> "InteractionDataset":
        """Build an unsplit dataset from dense index pairs (duplicates dropped)."""
        num_users, num_items = len(user_ids), len(item_ids)
        users = np.asarray(users, dtype=np.int64)
        items = np.asarray(items, dtype=np.int64)
        if users.size and (users.max() >= num_users or items.max() >= num_items or min(users.min(), items.min()) < 0):
            raise DataError("interaction index out of range")
        keys = np.unique(users * num_items + items)
        users, items = keys // num_items, keys % num_items
        return cls(
            num_users=num_users,
            num_items=num_items,
            user_ids=tuple(str(u) for u in user_ids),
            item_ids=tuple(str(i) for i in item_ids),
            train=tuple(_as_index_lists(users, items, num_users)),
            valid=np.full(num_users, -1, dtype=np.int64),
            test=np.full(num_users, -1, dtype=np.int64),
        )

    @property
    def num_train(self) -> int:
        return int(sum(len(t) for t in self.train))

    @property
    def num_interactions(self) -> int:
        return self.num_train + int((self.valid >= 0).sum() + (self.test >= 0).sum())

    @property
    def is_split(self) -> bool:
        return bool((self.test >= 0).any())

    def train_pairs(self) -> tuple[np.ndarray, np.ndarray]:
        """Flat (users, items) arrays of all training interactions."""
        lengths = np.array([len(t) for t in self.train], dtype=np.int64)
        users = np.repeat(np.arange(self.num_users, dtype=np.int64), lengths)
        items = np.concatenate(self.train) if self.train else np.empty(0, np.int64)
        return users, items.astype(np.int64)

    def train_matrix(self) -> sp.csr_matrix:
        users, items = self.train_pairs()
        data = np.ones(len(users), dtype=np.float64)
        return sp.csr_matrix((data, (users, items)), shape=(self.num_users, self.num_items))

    def train_mask(self) -> np.ndarray:
        """Dense boolean user x item mask of training interactions."""
        mask = np.zeros((self.num_users, self.num_items), dtype=bool)
        users, items = self.train_pairs()
        mask[users, items] = True
        return mask

    def observed(self, user: int) -> np.ndarray:
        """Sorted items of ``user`` in train, valid or test."""
        extra = [x for x in (self.valid[user], self.test[user]) if x >= 0]
        return np.union1d(self.train[user], np.asarray(extra, dtype=np.int64))

    def is_observed(self, users: np.ndarray, items: np.ndarray) -> np.ndarray:
        keys = np.asarray(users, dtype=np.int64) * self.num_items + np.asarray(items, dtype=np.int64)
        pos = np.searchsorted(self._observed_keys, keys)
        pos = np.minimum(pos, len(self._observed_keys) - 1)
        return self._observed_keys[pos] == keys

    def fingerprint(self) -> str:
        """Content hash of ids, training data and held-out items."""
        h = hashlib.sha256()
        h.update(f"{self.num_users}:{self.num_items}\n".encode())
        h.update("\x1f".join(self.user_ids).encode())
        h.update(b"\x1e")
        h.update("\x1f".join(self.item_ids).encode())
        users, items = self.train_pairs()
        for arr in (users, items, self.valid, self.test):
            h.update(np.ascontiguousarray(arr, dtype="<i8").tobytes())
        return h.hexdigest()

    def with_split(self, valid: np.ndarray, test: np.ndarray) -> "InteractionDataset":
        """Move the given held-out items out of train."""
        train = []
        for u, items in enumerate(self.train):
            held = [x for x in (valid[u], test[u]) if x >= 0]
            train.append(np.setdiff1d(items, held) if held else items.copy())
        return InteractionDataset(
            num_users=self.num_users,
            num_items=self.num_items,
            user_ids=self.user_ids,
            item_ids=self.item_ids,
            train=tuple(train),
            valid=np.asarray(valid, dtype=np.int64).copy(),
            test=np.asarray(test, dtype=np.int64).copy(),
        )


@dataclass
class Batch:
    """User- or item-anchored training batch.

    ``anchors``, ``positives`` are aligned per pair; ``negatives`` has one row
    per pair and one column per sampled negative.
    """

    side: str
    anchors: np.ndarray
    positives: np.ndarray
    negatives: np.ndarray

    def __len__(self) -> int:
        return len(self.anchors)


def _open_lines(source) -> Iterable[str]:
    if isinstance(source, (str, os.PathLike)):
        with open(source, encoding="utf-8") as fh:
            yield from fh
    elif isinstance(source, io.IOBase) or hasattr(source, "read"):
        yield from source
    else:
        yield from source


def load_interactions(
    source,
    delimiter: str | None = None,
    user_col: int = 0,
    item_col: int = 1,
    min_user_count: int = 1,
    min_item_count: int = 1,
) -> InteractionDataset:
    """Read a delimited interaction log into an unsplit dataset.

    ``source`` is a path, an open text stream or an iterable of lines. The
    delimiter is detected from the first record (tab wins over comma) unless
    forced. Lines starting with ``#`` and blank lines are skipped. Duplicate
    pairs are collapsed. Optional count filters drop users/items with fewer
    interactions (a single pass, not iterated to a fixed point).
    """
    user_index: dict[str, int] = {}
    item_index: dict[str, int] = {}
    users: list[int] = []
    items: list[int] = []
    need = max(user_col, item_col) + 1
    for lineno, raw in enumerate(_open_lines(source), start=1):
        line = raw.rstrip("\r\n")
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        if delimiter is None:
            delimiter = "\t" if "\t" in line else ","
        parts = [p.strip() for p in line.split(delimiter)]
        if len(parts) < need or not parts[user_col] or not parts[item_col]:
            raise DataError(f"line {lineno}: expected at least {need} non-empty fields, got {line!r}")
        u = user_index.setdefault(parts[user_col], len(user_index))
        i = item_index.setdefault(parts[item_col], len(item_index))
        users.append(u)
        items.append(i)
    if not users:
        raise DataError("no interactions found in input")
    ds = InteractionDataset.from_pairs(np.array(users), np.array(items), list(user_index), list(item_index))
    if min_user_count > 1 or min_item_count > 1:
        ds = _filter_counts(ds, min_user_count, min_item_count)
    return ds


def _filter_counts(ds: InteractionDataset, min_user: int, min_item: int) -> InteractionDataset:
    users, items = ds.train_pairs()
    ucount = np.bincount(users, minlength=ds.num_users)
    icount = np.bincount(items, minlength=ds.num_items)
    keep = (ucount[users] >= min_user) & (icount[items] >= min_item)
    users, items = users[keep], items[keep]
    if not len(users):
        raise DataError("count filters removed every interaction")
    # re-index in first-appearance order of the surviving records
    kept_u, u_new = np.unique(users, return_inverse=True)
    kept_i, i_new = np.unique(items, return_inverse=True)
    return InteractionDataset.from_pairs(
        u_new, i_new, [ds.user_ids[k] for k in kept_u], [ds.item_ids[k] for k in kept_i]
    )


def leave_one_out_split(
    dataset: InteractionDataset, seed: int, min_interactions: int = 3
) -> InteractionDataset:
    """Hold out one test and one validation item per eligible user.

    Users with fewer than ``min_interactions`` interactions keep everything in
    train. Held-out items are chosen uniformly at random from ``seed``.
    """
    if min_interactions < 3:
        raise ValueError("min_interactions must be >= 3")
    if dataset.is_split:
        raise ValueError("dataset is already split")
    rng = np.random.default_rng(seed)
    valid = np.full(dataset.num_users, -1, dtype=np.int64)
    test = np.full(dataset.num_users, -1, dtype=np.int64)
    for u, items in enumerate(dataset.train):
        if len(items) < min_interactions:
            continue
        t, v = rng.choice(len(items), size=2, replace=False)
        test[u], valid[u] = items[t], items[v]
    return dataset.with_split(valid, test)


def write_split(dataset: InteractionDataset, path) -> None:
    """Write (user, valid item, test item) raw-ID triples, tab separated."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("# user\tvalid\ttest\n")
        for u in np.flatnonzero(dataset.test >= 0):
            fh.write(
                f"{dataset.user_ids[u]}\t{dataset.item_ids[dataset.valid[u]]}\t{dataset.item_ids[dataset.test[u]]}\n"
            )


def read_split(path) -> list[tuple[str, str, str]]:
    triples = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip() or line.startswith("#"):
                continue
            parts = line.rstrip("\r\n").split("\t")
            if len(parts) != 3:
                raise DataError(f"{path}: line {lineno}: expected 3 tab-separated fields")
            triples.append((parts[0], parts[1], parts[2]))
    return triples


def apply_split(dataset: InteractionDataset, triples: Iterable[tuple[str, str, str]]) -> InteractionDataset:
    """Re-create a stored split on an unsplit dataset."""
    valid = np.full(dataset.num_users, -1, dtype=np.int64)
    test = np.full(dataset.num_users, -1, dtype=np.int64)
    for user, v, t in triples:
        try:
            u, vi, ti = dataset.user_index[user], dataset.item_index[v], dataset.item_index[t]
        except KeyError as exc:
            raise DataError(f"split refers to unknown id {exc.args[0]!r}") from None
        train = dataset.train[u]
        if vi == ti or not (np.isin(vi, train) and np.isin(ti, train)):
            raise DataError(f"split entry for user {user!r} does not match the interactions")
        valid[u], test[u] = vi, ti
    return dataset.with_split(valid, test)


def sample_negatives(dataset: InteractionDataset, anchor: int, count: int, rng: np.random.Generator) -> np.ndarray:
    """Uniformly sample ``count`` items the user never interacted with (with replacement)."""
    if not 0 <= anchor < dataset.num_users:
        raise IndexError(f"user {anchor} out of range")
    candidates = np.setdiff1d(np.arange(dataset.num_items), dataset.observed(anchor))
    if not len(candidates):
        raise DataError(f"user {anchor} has interacted with every item")
    return rng.choice(candidates, size=count)


def sample_negatives_batch(
    dataset: InteractionDataset, users: np.ndarray, rng: np.random.Generator, max_rounds: int = 32
) -> np.ndarray:
    """One uniform unobserved item per entry of ``users`` (rejection sampling)."""
    users = np.asarray(users, dtype=np.int64)
    if (dataset._n_observed[users] >= dataset.num_items).any():
        bad = users[dataset._n_observed[users] >= dataset.num_items][0]
        raise DataError(f"user {bad} has interacted with every item")
    out = rng.integers(0, dataset.num_items, size=len(users))
    todo = np.flatnonzero(dataset.is_observed(users, out))
    for _ in range(max_rounds):
        if not len(todo):
            return out
        out[todo] = rng.integers(0, dataset.num_items, size=len(todo))
        todo = todo[dataset.is_observed(users[todo], out[todo])]
    for k in todo:
        out[k] = sample_negatives(dataset, int(users[k]), 1, rng)[0]
    return out


def make_user_batch(
    dataset: InteractionDataset, users: np.ndarray, rng: np.random.Generator, num_negatives: int = 1
) -> Batch:
    """All training positives of ``users`` with ``num_negatives`` negatives each."""
    users = np.asarray(users, dtype=np.int64)
    lengths = np.array([len(dataset.train[u]) for u in users], dtype=np.int64)
    anchors = np.repeat(users, lengths)
    if not len(anchors):
        raise DataError("batch has no training interactions")
    positives = np.concatenate([dataset.train[u] for u in users]).astype(np.int64)
    negs = sample_negatives_batch(dataset, np.repeat(anchors, num_negatives), rng)
    return Batch("user", anchors, positives, negs.reshape(len(anchors), num_negatives))
