"""
Are the most attended items stable across seeds?
================================================

Train several models that differ only in their seed and compare, for every
held-out positive, the top 10% most attended history items.
"""

import io

import numpy as np

from atnaudit import audit, corpus
from atnaudit.trainer import TrainRunConfig
from atnaudit.synthetic import synthetic_ratings

interactions = corpus.build_interactions(corpus.parse_ratings(io.StringIO(synthetic_ratings(n_users=200))))
split = corpus.sample_test_negatives(interactions, corpus.leave_one_out(interactions), seed=0)

print(audit.top_attentive(np.array([0.1, 0.4, 0.4, 0.2]), np.array([7, 9, 3, 5]), fraction=0.5))
print(audit.mean_pairwise_jaccard([{1, 2}, {1, 2}, {1, 3}]))

###############################################################################
# Four seeds, three epochs each.

report = audit.stability_experiment(split, TrainRunConfig(epochs=3), seeds=[0, 1, 2, 3], log=print)
jac = np.array([c.mean_pairwise_jaccard for c in report.cases])
print("mean pairwise Jaccard over %d cases: %.3f" % (len(jac), jac.mean()))

for row in report.per_bin:
    if row["subset"] == "positive_predictions" and row["count"]:
        print("[%.2f, %.2f) n=%4d  mean Jaccard %.3f"
              % (row["bin_lo"], row["bin_hi"], row["count"], row["mean_jaccard"]))

###############################################################################
# Identical seeds give identical models, so every overlap is exactly 1.

same = audit.stability_experiment(split, TrainRunConfig(epochs=1), seeds=[5, 5], users=range(20))
print(all(c.mean_pairwise_jaccard == 1.0 for c in same.cases))
