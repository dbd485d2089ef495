"""
Distilling a small recommender from a large one
===============================================

Train a teacher on synthetic low-rank data, then compare three students:
no distillation, static relaxed-ranking targets, and targets plus
discrepancy-aware correction. Runs in a few seconds.
"""

# %%
from rankdistill import TrainConfig, avg_rank_discrepancy, distill_student, evaluate, leave_one_out_split, train_teacher
from rankdistill.synth import synthetic_dataset

data = leave_one_out_split(synthetic_dataset(n_users=200, n_items=300, per_user=15, seed=0), seed=0)
cfg = TrainConfig(teacher_dim=48, student_dim=6, epochs=150, patience=20,
                  lr=1e-2, l2=1e-4, teacher_lr=1e-2, teacher_l2=1e-6, seed=0)

# %%
# The teacher only sees the pairwise ranking loss.
teacher, teacher_log = train_teacher(data, cfg)
print("teacher H@5:", round(evaluate(teacher, data).aggregate()["H@5"], 4),
      "best epoch", teacher_log[-1]["best_epoch"])

# %%
# Every student shares the same initialisation seed and negatives.
for method in ("student", "rrd", "dcd"):
    student, log = distill_student(data, teacher, cfg.replace(method=method))
    h5 = evaluate(student, data).aggregate()["H@5"]
    gaps = [avg_rank_discrepancy(teacher, student, data, side) for side in ("user", "item")]
    print(f"{method:8s} H@5={h5:.4f}  discrepancy user={gaps[0]:.1f} item={gaps[1]:.1f}")

# %%
# The per-epoch log keeps each weighted loss term; they add up to ``total``.
first = log[0]
print({k: round(v, 4) for k, v in first.items() if k.startswith("L_") or k == "total"})

# %%
# Correction samples can be inspected during training through a callback.
def peek(state):
    if state.epoch == 0:
        s = state.user_samples
        print("user 0 under-estimated:", s.under[0][s.under[0] >= 0][:5],
              "over-estimated:", s.over[0][s.over[0] >= 0][:5])

distill_student(data, teacher, cfg.replace(epochs=1), callback=peek)
