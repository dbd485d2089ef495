"""Synthetic implicit feedback from a low-rank preference model."""
from __future__ import annotations

import numpy as np

from .dataset import InteractionDataset


def synthetic_interactions(
    n_users: int = 300,
    n_items: int = 500,
    rank: int = 8,
    per_user: float = 20.0,
    sharpness: float = 2.5,
    popularity: float = 1.0,
    seed: int = 0,
) -> list[tuple[str, str]]:
    """(user, item) raw-ID pairs drawn from a rank-``rank`` preference matrix.

    Each user gets ``max(3, Poisson(per_user))`` distinct items, drawn without
    replacement with probability proportional to
    ``exp(sharpness * <p_u, q_i> / sqrt(rank) + popularity * b_i)``.
    """
    rng = np.random.default_rng(seed)
    p = rng.normal(size=(n_users, rank))
    q = rng.normal(size=(n_items, rank))
    bias = rng.normal(size=n_items)
    logits = sharpness * (p @ q.T) / np.sqrt(rank) + popularity * bias
    counts = np.clip(rng.poisson(per_user, size=n_users), 3, n_items)
    # Gumbel top-k == sequential softmax draws without replacement
    keys = logits + rng.gumbel(size=logits.shape)
    pairs = []
    for u in range(n_users):
        top = np.argpartition(-keys[u], counts[u] - 1)[: counts[u]]
        for i in top[np.argsort(-keys[u, top])]:
            pairs.append((f"u{u}", f"i{i}"))
    return pairs


def synthetic_dataset(**kwargs) -> InteractionDataset:
    from .dataset import load_interactions

    return load_interactions(f"{u},{i}" for u, i in synthetic_interactions(**kwargs))
