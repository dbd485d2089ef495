import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rankdistill.dataset import InteractionDataset
from rankdistill.models import ModelParams, init_params
from rankdistill.ranking import (
    CandidatePool,
    build_pool,
    rank_candidates,
    rank_positions,
    top_n,
    write_rankings,
)


def _fixed_scores(item_scores, n_users=1):
    """BPR model whose user vectors are all 1, so S(u, i) = item_scores[i]."""
    s = np.asarray(item_scores, dtype=float)[:, None]
    return ModelParams("bpr", 1, n_users, len(s), {"user": np.ones((n_users, 1)), "item": s})


def test_rank_by_hand():
    p = _fixed_scores([0.9, 0.1, 0.5])
    rl = rank_candidates(p, 0, "user", CandidatePool(0, "user", np.array([0, 1, 2])))
    assert rl.order.tolist() == [0, 2, 1]
    assert rl.rank_of(2) == 1 and rl.rank_of(0) == 0


def test_ties_break_by_ascending_id():
    p = _fixed_scores([0.3] * 5)
    rl = rank_candidates(p, 0, "user", np.array([4, 1, 3, 0]))
    assert rl.order.tolist() == [0, 1, 3, 4]


def test_empty_pool_is_an_error():
    with pytest.raises(ValueError):
        rank_candidates(_fixed_scores([1.0]), 0, "user", np.array([], dtype=np.int64))


def test_item_side_ranks_users():
    p = ModelParams("bpr", 1, 3, 1, {"user": np.array([[0.2], [0.9], [0.5]]), "item": np.ones((1, 1))})
    rl = rank_candidates(p, 0, "item", np.array([0, 1, 2]))
    assert rl.order.tolist() == [1, 2, 0]


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-3, 3), min_size=1, max_size=12), st.integers(0, 2**16))
def test_ranking_list_invariants(scores, seed):
    p = _fixed_scores(scores)
    rng = np.random.default_rng(seed)
    pool = rng.permutation(len(scores))[: max(1, len(scores) // 2 + 1)]
    rl = rank_candidates(p, 0, "user", pool)
    assert all(rl.rank_of(c) == k for k, c in enumerate(rl.order))
    assert np.all(np.diff(rl.scores) <= 0)
    again = rank_candidates(p, 0, "user", pool[::-1])
    assert np.array_equal(rl.order, again.order)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-3, 3), min_size=2, max_size=10), st.integers(0, 9), st.floats(0, 5))
def test_raising_a_score_never_worsens_its_rank(scores, which, bump):
    which %= len(scores)
    pool = np.arange(len(scores))
    before = rank_candidates(_fixed_scores(scores), 0, "user", pool).rank_of(which)
    raised = list(scores)
    raised[which] += bump
    after = rank_candidates(_fixed_scores(raised), 0, "user", pool).rank_of(which)
    assert after <= before


def _dataset():
    users = np.array([0, 0, 1, 2, 2, 2])
    items = np.array([1, 4, 0, 2, 3, 5])
    return InteractionDataset.from_pairs(users, items, ["a", "b", "c"], [f"i{k}" for k in range(8)])


def test_top_n_excludes_train_and_orders_by_score():
    ds = _dataset()
    p = _fixed_scores([8, 7, 6, 5, 4, 3, 2, 1], n_users=3)
    assert top_n(p, 0, ds, 1).tolist() == [0]
    assert top_n(p, 0, ds, 100).tolist() == [0, 2, 3, 5, 6, 7]
    with pytest.raises(ValueError):
        top_n(p, 0, ds, 0)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**16), st.integers(1, 8))
def test_top_n_equals_exhaustive_ranking(seed, n):
    ds = _dataset()
    p = init_params("neumf", 3, 8, 4, seed=seed, init_std=1.0)
    for u in range(3):
        unobserved = np.setdiff1d(np.arange(8), ds.train[u])
        expected = rank_candidates(p, u, "user", unobserved).order[:n]
        assert np.array_equal(top_n(p, u, ds, n), expected)


def test_pool_exhaustive_setting_is_all_unobserved():
    ds = _dataset()
    t = init_params("bpr", 3, 8, 3, seed=0, init_std=1.0)
    s = init_params("bpr", 3, 8, 3, seed=1, init_std=1.0)
    rng = np.random.default_rng(0)
    for side, observed in (("user", ds.train), ("item", ds.train_t)):
        for a in range(len(observed)):
            pool = build_pool(ds, t, s, a, side, rng, t_teacher=None, t_student=0, n_random=0)
            n_cand = 8 if side == "user" else 3
            assert pool.candidates.tolist() == np.setdiff1d(np.arange(n_cand), observed[a]).tolist()


def test_pool_union_of_disjoint_heads():
    ds = InteractionDataset.from_pairs(np.array([0]), np.array([0]), ["u"], [f"i{k}" for k in range(5)])
    teacher = _fixed_scores([9, 5, 4, 3, 2])   # best unobserved: 1
    student = _fixed_scores([9, 1, 2, 3, 8])   # best unobserved: 4
    pool = build_pool(ds, teacher, student, 0, "user", np.random.default_rng(0), t_teacher=1, t_student=1, n_random=0)
    assert pool.candidates.tolist() == [1, 4]


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**16), st.integers(0, 5), st.integers(0, 5), st.integers(0, 10))
def test_pool_never_contains_training_interactions(seed, tt, ts, nr):
    ds = _dataset()
    t = init_params("bpr", 3, 8, 3, seed=seed, init_std=1.0)
    s = init_params("bpr", 3, 8, 3, seed=seed + 1, init_std=1.0)
    rng = np.random.default_rng(seed)
    for u in range(3):
        pool = build_pool(ds, t, s, u, "user", rng, t_teacher=tt, t_student=ts, n_random=nr)
        assert not set(pool.candidates.tolist()) & set(ds.train[u].tolist())
        assert len(set(pool.candidates.tolist())) == len(pool)
        assert len(pool) >= min(max(tt, ts), 8 - len(ds.train[u]))


def test_rank_positions_within_subset():
    order = np.array([[3, 0, 2, 1]])
    member = np.array([[True, False, True, True]])
    assert rank_positions(order).tolist() == [[1, 3, 2, 0]]
    assert rank_positions(order, member).tolist() == [[0, -1, 1, 2]] or rank_positions(order, member).tolist() == [[1, -1, 2, 0]]


def test_ranking_dump_format(tmp_path):
    p = _fixed_scores([0.9, 0.1, 0.5])
    lists = [rank_candidates(p, 0, "user", np.array([0, 1, 2]))]
    path = tmp_path / "rank.txt"
    write_rankings(path, lists, ids=("x", "y", "z"), anchor_ids=("alice",))
    assert path.read_text() == "alice: x,z,y\n"
