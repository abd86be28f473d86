"""Ranking metrics over 1-positive/99-negative candidate lists, and Jaccard."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .corpus import NEGATIVE, POSITIVE, SplitDataset
from .model import ModelParams, RaggedBatch, forward_batch

N_CANDIDATES = 100


@dataclass
class EvalReport:
    hr_at_10: float
    ndcg_at_10: float
    accuracy_positive: float
    accuracy_negative: float
    n_users: int
    n_predictions: int


@dataclass
class LabeledPredictions:
    """Flat per-candidate scores; row ``u * 100`` is user ``u``'s held-out positive."""

    users: np.ndarray
    items: np.ndarray
    labels: np.ndarray
    prob_neg: np.ndarray
    prob_pos: np.ndarray

    @property
    def predicted(self) -> np.ndarray:
        return np.where(self.prob_pos > self.prob_neg, POSITIVE, NEGATIVE)

    @property
    def confidence(self) -> np.ndarray:
        return np.maximum(self.prob_neg, self.prob_pos)

    @property
    def correct(self) -> np.ndarray:
        return self.predicted == self.labels

    def __len__(self):
        return len(self.users)


def rank_positive(scores, positive_index: int, item_ids=None, n_candidates: int = N_CANDIDATES) -> int:
    """1-based rank of the positive; ties go to the lower item id.

    ``item_ids`` defaults to the candidate positions.
    """
    scores = np.asarray(scores, dtype=np.float64)
    if scores.shape != (n_candidates,):
        raise ValueError(f"expected {n_candidates} candidate scores, got {scores.shape[0]}")
    ids = np.arange(n_candidates) if item_ids is None else np.asarray(item_ids)
    s, c = scores[positive_index], ids[positive_index]
    return int(1 + np.sum(scores > s) + np.sum((scores == s) & (ids < c)))


def ranks(scores: np.ndarray, item_ids: np.ndarray) -> np.ndarray:
    """Row-wise :func:`rank_positive` with the positive in column 0."""
    s0, c0 = scores[:, :1], item_ids[:, :1]
    return 1 + (scores > s0).sum(axis=1) + ((scores == s0) & (item_ids < c0)).sum(axis=1)


def hr_at_k(rank, k: int = 10):
    return (np.asarray(rank) <= k).astype(int) if np.ndim(rank) else int(rank <= k)


def ndcg_at_k(rank, k: int = 10):
    r = np.asarray(rank, dtype=np.float64)
    out = np.where(r <= k, 1.0 / np.log2(r + 1.0), 0.0)
    return out if np.ndim(rank) else float(out)


def jaccard(a, b) -> float:
    a, b = set(a), set(b)
    union = len(a | b)
    if union == 0:
        raise ValueError("jaccard index is undefined for two empty sets")
    return len(a & b) / union


def score_split(params: ModelParams, split: SplitDataset, users=None,
                max_rows: int = 400_000) -> LabeledPredictions:
    """Score every test candidate against the user's full train history."""
    if params.num_items != split.num_items:
        raise ValueError(f"model has {params.num_items} items, split has {split.num_items}")
    users = range(split.num_users) if users is None else users
    out_users, out_items, out_neg, out_pos = [], [], [], []

    pending, rows = [], 0

    def flush():
        hist, offsets, targets, owners = [], [0], [], []
        for u in pending:
            inst = split.test_instances[u]
            h = split.train_histories[u]
            cands = (inst.positive_item, *inst.negatives)
            for c in cands:
                hist.append(h)
                offsets.append(offsets[-1] + len(h))
            targets.extend(cands)
            owners.extend([u] * len(cands))
        batch = RaggedBatch(np.concatenate(hist), np.array(offsets), np.array(targets, dtype=np.int64))
        probs = forward_batch(params, batch).probs
        out_users.append(np.array(owners, dtype=np.int64))
        out_items.append(batch.targets)
        out_neg.append(probs[:, 0])
        out_pos.append(probs[:, 1])
        pending.clear()

    for u in users:
        inst = split.test_instances[u]
        if len(inst.negatives) + 1 != N_CANDIDATES:
            raise ValueError(f"user {u} has {len(inst.negatives)} test negatives; "
                             f"expected {N_CANDIDATES - 1}")
        if len(split.train_histories[u]) == 0:
            raise ValueError(f"user {u} has an empty train history")
        pending.append(u)
        rows += N_CANDIDATES * len(split.train_histories[u])
        if rows >= max_rows:
            flush()
            rows = 0
    if pending:
        flush()

    users_arr = np.concatenate(out_users) if out_users else np.zeros(0, np.int64)
    items_arr = np.concatenate(out_items) if out_items else np.zeros(0, np.int64)
    labels = np.tile(np.r_[POSITIVE, np.full(N_CANDIDATES - 1, NEGATIVE)], len(users_arr) // N_CANDIDATES)
    return LabeledPredictions(users_arr, items_arr, labels,
                              np.concatenate(out_neg) if out_neg else np.zeros(0),
                              np.concatenate(out_pos) if out_pos else np.zeros(0))


def report_from_predictions(preds: LabeledPredictions, k: int = 10) -> EvalReport:
    n_users = len(preds) // N_CANDIDATES
    if n_users == 0:
        raise ValueError("no predictions to evaluate")
    r = ranks(preds.prob_pos.reshape(n_users, N_CANDIDATES), preds.items.reshape(n_users, N_CANDIDATES))
    correct = preds.correct
    is_pos = preds.labels == POSITIVE
    return EvalReport(
        hr_at_10=float(hr_at_k(r, k).mean()),
        ndcg_at_10=float(ndcg_at_k(r, k).mean()),
        accuracy_positive=float(correct[is_pos].mean()),
        accuracy_negative=float(correct[~is_pos].mean()),
        n_users=n_users,
        n_predictions=len(preds),
    )


def evaluate(model, split: SplitDataset, k: int = 10) -> EvalReport:
    """HR@k, NDCG@k and per-class accuracy; ``model`` is params or a TrainedModel."""
    params = getattr(model, "params", model)
    return report_from_predictions(score_split(params, split), k)


def tie_baseline_hr(split: SplitDataset, k: int = 10) -> float:
    """HR@k of a model that scores every candidate equally (pure tie-break order)."""
    hits = []
    for inst in split.test_instances:
        ids = np.array((inst.positive_item, *inst.negatives))
        order = sorted(range(len(ids)), key=lambda j: ids[j])
        hits.append(order.index(0) < k)
    return float(np.mean(hits))
