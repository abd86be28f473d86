"""
Training an attention recommender on a synthetic log
=====================================================

Build a leave-one-out split from a small synthetic ``ratings.dat``, train for
a few epochs and compare HR@10 against the tie-order baseline.
"""

import io

import numpy as np

from atnaudit import corpus, metrics, trainer
from atnaudit.synthetic import synthetic_ratings

# a MovieLens-shaped log: 300 users, every one with at least 20 ratings
text = synthetic_ratings(n_users=300, seed=0)
ratings = corpus.parse_ratings(io.StringIO(text))
print(ratings.num_users, "users", ratings.num_items, "items", len(ratings), "ratings")

# the latest interaction of each user is held out and paired with 99 unseen items
interactions = corpus.build_interactions(ratings)
split = corpus.sample_test_negatives(interactions, corpus.leave_one_out(interactions), seed=0)
inst = split.test_instances[0]
print("user 0 history length", len(split.train_histories[0]), "held out item", inst.positive_item)

###############################################################################
# Train. Every epoch draws 4 fresh negatives per positive; the model with the
# best HR@10 is kept.

config = trainer.TrainRunConfig(epochs=5, seed=1)
model = trainer.train(split, config, log=print)

report = metrics.evaluate(model, split)
print("best epoch", model.best_epoch)
print("HR@10 %.3f  NDCG@10 %.3f" % (report.hr_at_10, report.ndcg_at_10))
print("tie-order baseline HR@10 %.3f" % metrics.tie_baseline_hr(split))

###############################################################################
# Per-class accuracy at the 0.5 threshold: with 99 negatives per positive the
# two numbers tell very different stories.

print("accuracy on positives %.3f, on negatives %.3f"
      % (report.accuracy_positive, report.accuracy_negative))

losses = np.array(model.epoch_losses)
print("loss per epoch", np.round(losses, 4))
