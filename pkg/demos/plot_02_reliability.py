"""
Reliability diagrams for positive and negative test cases
==========================================================

Bucket test predictions by confidence and compare accuracy inside each
bucket. A calibrated model sits on the diagonal.
"""

import io

import numpy as np

from atnaudit import audit, corpus, metrics, trainer
from atnaudit.synthetic import synthetic_ratings

interactions = corpus.build_interactions(corpus.parse_ratings(io.StringIO(synthetic_ratings(n_users=300))))
split = corpus.sample_test_negatives(interactions, corpus.leave_one_out(interactions), seed=0)
model = trainer.train(split, trainer.TrainRunConfig(epochs=5))

preds = metrics.score_split(model.params, split)
print(len(preds), "scored candidates")

###############################################################################
# One diagram per subset. Empty bins report NaN.

for subset in audit.SUBSETS:
    diagram = audit.reliability_diagram(preds, subset)
    print("\n%s  (n=%d, ECE %.3f)" % (subset, diagram.n, diagram.ece))
    print("  bin          count   conf    acc")
    for b in diagram.bins:
        print("  [%.2f, %.2f) %6d  %.3f  %.3f" % (b.lo, b.hi, b.count, b.mean_confidence, b.accuracy))

###############################################################################
# The class-weighted loss trades negative accuracy for positive accuracy.

weighted = trainer.train(split, trainer.TrainRunConfig(epochs=5, class_weighting=True))
wpreds = metrics.score_split(weighted.params, split)
for name, p in (("plain", preds), ("weighted", wpreds)):
    pos = audit.reliability_diagram(p, "positive_cases")
    print("%-8s positive-case ECE %.3f, positive accuracy %.3f"
          % (name, pos.ece, np.mean(p.correct[p.labels == 1])))
