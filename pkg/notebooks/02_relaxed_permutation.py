"""
The relaxed listwise likelihood
===============================

A head list must come out on top in its given order; the tail only has to
stay below the head, in any order.
"""

# %%
import numpy as np

from rankdistill import relaxed_log_prob

head = np.array([2.0, 1.0])
tail = np.array([0.5, -1.0, 0.0])
print("log p =", relaxed_log_prob(head, tail))

# %%
# Spelled out as a product of softmax factors over the shrinking head plus
# the full tail.
p = 1.0
for k in range(len(head)):
    p *= np.exp(head[k]) / (np.exp(head[k:]).sum() + np.exp(tail).sum())
print("direct  =", np.log(p))

# %%
# Reordering the tail changes nothing; reordering the head does.
print(relaxed_log_prob(head, tail[::-1]) - relaxed_log_prob(head, tail))
print(relaxed_log_prob(head[::-1], tail) - relaxed_log_prob(head, tail))

# %%
# Adding a constant to every score is a no-op, so huge logits are safe.
print(relaxed_log_prob(head + 1e4, tail + 1e4))

# %%
# Rank discrepancy turns a rank gap into a sampling weight in [0, 1).
from rankdistill import discrepancy_over, discrepancy_under

student_rank, teacher_rank = np.array([10, 2, 300]), np.array([2, 10, 0])
print("under:", discrepancy_under(student_rank, teacher_rank, mu=1e-3))
print("over: ", discrepancy_over(student_rank, teacher_rank, mu=1e-3))
