"""
Interaction data, leave-one-out splits and evaluation
=====================================================

Load a small implicit-feedback log, hold out one validation and one test item
per user, and score a random model with H@N / M@N.
"""

# %%
# A log is just (user, item) pairs. Any iterable of lines works as input.
import io

import numpy as np

from rankdistill import evaluate, init_params, leave_one_out_split, load_interactions

log = io.StringIO("""# user,item
ann,apple
ann,banana
ann,cherry
ann,date
bob,apple
bob,cherry
bob,fig
cat,banana
""")
ds = load_interactions(log)
print(ds.num_users, "users x", ds.num_items, "items,", ds.num_train, "interactions")

# %%
# Users with at least three interactions lose two of them to the held-out
# sets. ``cat`` keeps a single item and is simply not evaluated.
split = leave_one_out_split(ds, seed=0)
for u, name in enumerate(split.user_ids):
    held = [split.item_ids[i] if i >= 0 else "-" for i in (split.valid[u], split.test[u])]
    print(f"{name:4s} train={[split.item_ids[i] for i in split.train[u]]}  valid/test={held}")

# %%
# The same seed always yields the same split, which is recorded by a content hash.
print(split.fingerprint() == leave_one_out_split(ds, seed=0).fingerprint())

# %%
# Evaluation ranks each test item against every item the user has not seen.
model = init_params("bpr", split.num_users, split.num_items, dim=4, seed=1, init_std=1.0)
report = evaluate(model, split, ns=(1, 3))
print(report.aggregate())
