import numpy as np
import pytest

from rankdistill.dataset import InteractionDataset, leave_one_out_split
from rankdistill.models import init_params
from rankdistill.synth import synthetic_dataset
from rankdistill.trainer import (
    ABLATIONS,
    LOSS_KEYS,
    Objective,
    TrainConfig,
    distill_student,
    run_ablation,
    train_teacher,
)

SMALL = TrainConfig(teacher_dim=8, student_dim=3, epochs=6, batch_size=16, lr=1e-2, m_under=5, m_over=5,
                    pool_teacher=10, pool_student=10, pool_random=10, rrd_k=5, rrd_l=5, patience=100)


@pytest.fixture(scope="module")
def data():
    return leave_one_out_split(synthetic_dataset(n_users=40, n_items=60, per_user=8, seed=5), seed=0)


@pytest.fixture(scope="module")
def teacher(data):
    return train_teacher(data, SMALL)[0]


def _weights(p):
    return {k: v.copy() for k, v in p.tensors.items()}


def test_distillation_is_deterministic(data, teacher):
    a, la = distill_student(data, teacher, SMALL)
    b, lb = distill_student(data, teacher, SMALL)
    for k in a.tensors:
        assert np.array_equal(a.tensors[k], b.tensors[k])
    strip = lambda recs: [{k: v for k, v in r.items() if k != "wall_time"} for r in recs]
    assert strip(la) == strip(lb)
    c, _ = distill_student(data, teacher, SMALL.replace(seed=1))
    assert not np.array_equal(a.tensors["user"], c.tensors["user"])


def test_zero_weights_reduce_to_plain_student(data, teacher):
    zero = SMALL.replace(lambda_rrd=0.0, lambda_ucd=0.0, lambda_icd=0.0)
    a, _ = distill_student(data, teacher, zero)
    b, _ = distill_student(data, teacher, SMALL.replace(method="student"))
    for k in a.tensors:
        assert np.array_equal(a.tensors[k], b.tensors[k])


def test_logged_total_is_sum_of_components(data, teacher):
    _, records = distill_student(data, teacher, SMALL)
    epochs = [r for r in records if "epoch" in r]
    assert len(epochs) == SMALL.epochs
    for r in epochs:
        assert abs(r["total"] - sum(r[k] for k in LOSS_KEYS)) <= 1e-9
        assert r["L_RRD"] > 0 and r["L_UCD"] > 0 and r["L_ICD"] > 0
    assert "best_epoch" in records[-1]


def test_targets_fixed_and_samples_refreshed_on_schedule(data, teacher):
    seen = []

    def cb(state):
        seen.append((state.epoch, state.rrd_targets.digest(), state.user_samples.digest(),
                     state.item_samples.digest(), state.user_samples.epoch))

    cfg = SMALL.replace(epochs=12, resample_period=5)
    _, records = distill_student(data, teacher, cfg, callback=cb)
    assert [s[0] for s in seen] == list(range(12))
    assert len({s[1] for s in seen}) == 1
    assert [s[4] for s in seen] == [0] * 5 + [5] * 5 + [10] * 2
    for prev, cur in zip(seen, seen[1:]):
        changed = prev[2] != cur[2] or prev[3] != cur[3]
        assert changed == (cur[0] % 5 == 0)
    assert [r["epoch"] for r in records if r.get("resampled")] == [0, 5, 10]


def test_teacher_separates_one_user_two_items():
    ds = InteractionDataset.from_pairs(np.array([0]), np.array([0]), ["u"], ["liked", "other"])
    cfg = TrainConfig(teacher_dim=4, epochs=300, lr=5e-2, l2=0.0, init_std=0.1)
    t, records = train_teacher(ds, cfg)
    assert t.scores(np.array([0]), np.array([0]))[0] > t.scores(np.array([0]), np.array([1]))[0]
    assert records[-1]["L_RS"] < records[0]["L_RS"]


def test_teacher_shape_mismatch_is_rejected(data):
    wrong = init_params("bpr", data.num_users + 1, data.num_items, 4, seed=0)
    with pytest.raises(ValueError, match="dataset has"):
        distill_student(data, wrong, SMALL)


def test_ablation_mapping():
    cfg = TrainConfig(lambda_rrd=0.1, lambda_ucd=0.02, lambda_icd=0.03)
    assert cfg.objective() == Objective(0.1, 0.02, 0.03, 0.0, False)
    m = {mode: cfg.replace(ablation=mode).objective() for mode in ABLATIONS}
    assert m["no_item_side"] == Objective(0.1, 0.02, 0.0, 0.0, False)
    assert m["no_user_side"] == Objective(0.1, 0.0, 0.03, 0.0, False)
    assert m["no_sampling"] == Objective(0.1, 0.02, 0.03, 0.0, True)
    nc = m["no_correction"]
    assert nc.lambda_ucd == nc.lambda_icd == 0.0 and nc.lambda_irrd == 0.03
    assert nc.lambda_rrd == pytest.approx(0.12)
    assert cfg.replace(method="rrd").objective() == Objective(0.1, 0.0, 0.0, 0.0, False)
    assert cfg.replace(method="student").objective() == Objective(0.0, 0.0, 0.0, 0.0, False)


def test_no_item_side_equals_full_when_icd_weight_is_zero(data, teacher):
    cfg = SMALL.replace(lambda_icd=0.0, epochs=3)
    full = run_ablation(data, teacher, cfg, "full")
    off = run_ablation(data, teacher, cfg, "no_item_side")
    for k in full[1].tensors:
        assert np.array_equal(full[1].tensors[k], off[1].tensors[k])
    with pytest.raises(ValueError):
        run_ablation(data, teacher, cfg, "bogus")


def test_no_correction_trains_item_side_rrd(data, teacher):
    _, records = distill_student(data, teacher, SMALL.replace(ablation="no_correction", epochs=2))
    r = records[0]
    assert r["L_IRRD"] > 0 and r["L_UCD"] == 0 and r["L_ICD"] == 0


def test_config_validation():
    with pytest.raises(KeyError, match="bogus"):
        TrainConfig.from_dict({"bogus": 1})
    with pytest.raises(ValueError):
        TrainConfig(method="xyz").validate()
    with pytest.raises(ValueError):
        TrainConfig(resample_period=0).validate()
    assert TrainConfig.from_dict(TrainConfig().to_dict()) == TrainConfig()
