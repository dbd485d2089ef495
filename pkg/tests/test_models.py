import numpy as np
import pytest

from _oracles import central_differences, random_batch, random_model, relative_error
from rankdistill.dataset import Batch
from rankdistill.models import (
    AdamState,
    ModelParams,
    NumericalError,
    adam_step,
    base_loss,
    init_params,
    load_checkpoint,
    save_checkpoint,
    score,
    zero_grads,
)


def _bpr(user_vecs, item_vecs):
    u, i = np.asarray(user_vecs, float), np.asarray(item_vecs, float)
    return ModelParams("bpr", u.shape[1], len(u), len(i), {"user": u, "item": i})


def test_bpr_score_is_dot_product():
    p = _bpr([[1.0, 0.0]], [[2.0, 3.0]])
    assert score(p, 0, 0) == 2.0


def test_bpr_zero_item_scores_zero():
    p = _bpr([[1.0, 2.0], [-3.0, 0.5]], [[0.0, 0.0]])
    assert score(p, 0, 0) == 0.0 and score(p, 1, 0) == 0.0


def test_neumf_all_zero_weights_scores_zero():
    p = init_params("neumf", 3, 4, 6, seed=0)
    for t in p.tensors.values():
        t[...] = 0.0
    assert score(p, 2, 3) == 0.0


def test_score_rejects_out_of_range():
    p = init_params("bpr", 3, 4, 2, seed=0)
    with pytest.raises(IndexError):
        score(p, 3, 0)
    with pytest.raises(IndexError):
        score(p, 0, -1)


def test_bpr_bilinear_in_user_vector():
    p = init_params("bpr", 2, 3, 4, seed=1, init_std=1.0)
    s = score(p, 0, 1)
    p.tensors["user"][0] *= -2.5
    assert np.isclose(score(p, 0, 1), -2.5 * s)


def test_score_matrix_matches_pairwise():
    for kind in ("bpr", "neumf"):
        p = init_params(kind, 5, 7, 4, seed=2, init_std=0.5)
        m = p.score_matrix()
        uu, ii = np.meshgrid(np.arange(5), np.arange(7), indexing="ij")
        assert np.allclose(m, p.scores(uu.ravel(), ii.ravel()).reshape(5, 7))
        assert np.allclose(p.score_matrix(chunk=3), m)


def test_init_shapes_determinism_and_errors():
    a = init_params("bpr", 100, 30, 20, seed=4)
    b = init_params("bpr", 100, 30, 20, seed=4)
    assert a.tensors["user"].shape == (100, 20)
    assert all(np.array_equal(a[k], b[k]) for k in a.tensors)
    assert a.num_parameters == (100 + 30) * 20
    with pytest.raises(ValueError):
        init_params("bpr", 3, 3, 0, seed=0)
    with pytest.raises(ValueError):
        init_params("gcn", 3, 3, 2, seed=0)


def test_init_mean_within_three_sigma():
    p = init_params("bpr", 50_000, 0, 20, seed=7, init_std=0.01)
    x = p.tensors["user"].ravel()
    assert x.size == 10**6
    assert abs(x.mean()) <= 3 * 0.01 / np.sqrt(x.size)


def test_bpr_equal_scores_give_ln2():
    p = _bpr([[0.0, 0.0]], [[1.0, 1.0], [2.0, 2.0]])
    loss, _ = base_loss(p, Batch("user", np.array([0]), np.array([0]), np.array([[1]])))
    assert np.isclose(loss, np.log(2), atol=1e-12)


def test_bpr_loss_vanishes_for_large_margin():
    p = _bpr([[1.0]], [[400.0], [-400.0]])
    loss, _ = base_loss(p, Batch("user", np.array([0]), np.array([0]), np.array([[1]])))
    assert 0.0 <= loss < 1e-300


def test_base_loss_empty_batch():
    p = init_params("bpr", 2, 2, 2, seed=0)
    e = np.empty(0, dtype=np.int64)
    with pytest.raises(ValueError):
        base_loss(p, Batch("user", e, e, e.reshape(0, 1)))


def test_base_loss_permutation_invariant():
    rng = np.random.default_rng(3)
    for kind in ("bpr", "neumf"):
        p = random_model(kind, rng)
        b = random_batch(rng, p.num_users, p.num_items, n_pairs=6)
        perm = rng.permutation(6)
        b2 = Batch("user", b.anchors[perm], b.positives[perm], b.negatives[perm])
        assert np.isclose(base_loss(p, b)[0], base_loss(p, b2)[0], atol=1e-14)


@pytest.mark.parametrize("kind", ["bpr", "neumf"])
def test_base_loss_gradient_matches_finite_differences(kind):
    rng = np.random.default_rng(11)
    for _ in range(5):
        p = random_model(kind, rng)
        b = random_batch(rng, p.num_users, p.num_items)
        _, g = base_loss(p, b)
        num = central_differences(p, lambda q: base_loss(q, b)[0])
        assert relative_error(g, num) <= 1e-4


def test_item_side_batch_matches_user_side_for_bpr():
    rng = np.random.default_rng(1)
    p = random_model("bpr", rng, n_users=5, n_items=5)
    # anchors are items; positives/negatives are users
    b = Batch("item", np.array([0, 1]), np.array([2, 3]), np.array([[4], [0]]))
    loss, _ = base_loss(p, b)
    s = p.score_matrix()
    d = np.array([s[2, 0] - s[4, 0], s[3, 1] - s[0, 1]])
    assert np.isclose(loss, np.mean(np.log1p(np.exp(-d))))


def test_adam_first_step_moves_by_lr():
    p = ModelParams("bpr", 1, 1, 1, {"user": np.array([[0.5]]), "item": np.array([[0.0]])})
    state = AdamState(lr=0.01, eps=1e-8)
    adam_step(p, state, {"user": np.array([[2.0]]), "item": np.array([[0.0]])})
    assert np.isclose(p["user"][0, 0], 0.5 - 0.01, atol=1e-9)
    assert p["item"][0, 0] == 0.0
    assert state.step == 1


def test_adam_zero_gradient_only_decays_moments():
    p = init_params("bpr", 3, 3, 2, seed=0)
    before = {k: v.copy() for k, v in p.tensors.items()}
    state = AdamState(lr=0.1)
    adam_step(p, state, zero_grads(p))
    assert all(np.array_equal(before[k], p[k]) for k in before)
    state.m["user"][...] = 1.0
    adam_step(p, state, zero_grads(p))
    assert np.allclose(state.m["user"], 0.9)


def test_adam_l2_is_added_to_gradient():
    p = ModelParams("bpr", 1, 1, 1, {"user": np.array([[1.0]]), "item": np.array([[0.0]])})
    state = AdamState(lr=0.01, l2=0.5)
    adam_step(p, state, zero_grads(p))
    assert np.isclose(p["user"][0, 0], 1.0 - 0.01, atol=1e-8)


def test_adam_is_deterministic():
    def run():
        p = init_params("neumf", 4, 5, 4, seed=3)
        state = AdamState(lr=0.05, l2=1e-3)
        rng = np.random.default_rng(0)
        for _ in range(5):
            adam_step(p, state, {k: rng.normal(size=v.shape) for k, v in p.tensors.items()})
        return p

    a, b = run(), run()
    assert all(np.array_equal(a[k], b[k]) for k in a.tensors)


def test_adam_rejects_non_finite_gradient():
    p = init_params("bpr", 2, 2, 2, seed=0)
    g = zero_grads(p)
    g["item"][0, 0] = np.nan
    with pytest.raises(NumericalError, match="item"):
        adam_step(p, AdamState(), g)


def test_checkpoint_roundtrip_is_byte_stable(tmp_path):
    from rankdistill.dataset import InteractionDataset

    p = init_params("neumf", 3, 4, 4, seed=9)
    state = AdamState(lr=0.01)
    adam_step(p, state, {k: np.ones_like(v) for k, v in p.tensors.items()})
    a, b = tmp_path / "a.npz", tmp_path / "b.npz"
    save_checkpoint(a, p, state, meta={"role": "teacher"})
    save_checkpoint(b, p, state, meta={"role": "teacher"})
    assert a.read_bytes() == b.read_bytes()
    q, s2, meta = load_checkpoint(a)
    assert meta == {"role": "teacher"} and s2.step == 1
    assert all(np.array_equal(p[k], q[k]) for k in p.tensors)
    assert np.load(a)["param/W1"].shape == (8, 4)
    wrong = InteractionDataset.from_pairs(np.array([0]), np.array([0]), ["u"], ["i"])
    with pytest.raises(ValueError, match="dataset has"):
        load_checkpoint(a, wrong)
