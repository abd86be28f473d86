"""
Does shuffling attention change the prediction?
===============================================

Permute each test case's attention weights over its history 100 times and
record the mean absolute change in the probability of the predicted label.
"""

import io

import numpy as np

from atnaudit import audit, corpus, trainer
from atnaudit.model import forward, forward_with_attention
from atnaudit.synthetic import synthetic_ratings

interactions = corpus.build_interactions(corpus.parse_ratings(io.StringIO(synthetic_ratings(n_users=300))))
split = corpus.sample_test_negatives(interactions, corpus.leave_one_out(interactions), seed=0)
params = trainer.train(split, trainer.TrainRunConfig(epochs=5)).params

###############################################################################
# A single shuffle by hand.

history = split.train_histories[0]
target = split.test_instances[0].positive_item
base, _ = forward(params, history, target)
rng = np.random.default_rng(0)
shuffled = forward_with_attention(params, history, target, rng.permutation(base.attention.weights))
print("p(positive) %.4f -> %.4f after one shuffle" % (base.prob_pos, shuffled.prob_pos))

###############################################################################
# The full experiment on 30 users, positives and negatives alike.

report = audit.permutation_experiment(params, split, n_shuffles=100, seed=0, users=range(30))
deltas = np.array([c.mean_abs_delta for c in report.cases])
print(len(report.cases), "cases, mean |delta| %.4f, max %.4f" % (deltas.mean(), deltas.max()))

for row in report.per_bin:
    if row["subset"] in ("all", "false_negatives") and row["binned_by"] == "confidence" and row["count"]:
        print("%-16s [%.2f, %.2f) n=%5d  mean |delta| %.4f"
              % (row["subset"], row["bin_lo"], row["bin_hi"], row["count"], row["mean_abs_delta"]))
