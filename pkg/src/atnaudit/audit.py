"""Calibration, attention-permutation and cross-seed attention-stability audits.

All three work on the 100-candidate test lists of a split. Confidence is the
probability of the predicted label, so it lives in [0.5, 1] and is bucketed
into equal-width bins over that range.
"""
from __future__ import annotations

import dataclasses
import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from ._rng import substream
from .corpus import NEGATIVE, POSITIVE, SplitDataset
from .metrics import LabeledPredictions, jaccard
from .model import ModelParams, RaggedBatch, forward_batch

SUBSETS = ("positive_cases", "negative_cases", "all")


@dataclass
class ReliabilityBin:
    lo: float
    hi: float
    count: int
    mean_confidence: float  # nan when empty
    accuracy: float  # nan when empty


@dataclass
class ReliabilityDiagram:
    subset: str
    bins: list[ReliabilityBin]
    ece: float
    n: int


def bin_index(values, n_bins: int = 10, lo: float = 0.5, hi: float = 1.0) -> np.ndarray:
    """Bin of each value for ``[lo, hi)`` bins; ``hi`` itself goes in the last bin."""
    # compare against the reported edges so a value equal to an edge opens its bin
    inner = np.array([e for _, e in bin_edges(n_bins, lo, hi)[:-1]])
    return np.searchsorted(inner, np.asarray(values, dtype=np.float64), side="right")


def bin_edges(n_bins: int = 10, lo: float = 0.5, hi: float = 1.0):
    return [(lo + (hi - lo) * k / n_bins, lo + (hi - lo) * (k + 1) / n_bins) for k in range(n_bins)]


def reliability_bins(confidence, correct, n_bins: int = 10) -> tuple[list[ReliabilityBin], float]:
    confidence = np.asarray(confidence, dtype=np.float64)
    correct = np.asarray(correct, dtype=bool)
    n = len(confidence)
    if n == 0:
        raise ValueError("reliability diagram of an empty population")
    idx = bin_index(confidence, n_bins)
    bins, ece = [], 0.0
    for k, (lo, hi) in enumerate(bin_edges(n_bins)):
        mask = idx == k
        count = int(mask.sum())
        if count:
            conf, acc = float(confidence[mask].mean()), float(correct[mask].mean())
            ece += count / n * abs(acc - conf)
        else:
            conf = acc = math.nan
        bins.append(ReliabilityBin(lo, hi, count, conf, acc))
    return bins, ece


def _subset_mask(labels, subset):
    if subset == "all":
        return np.ones(len(labels), dtype=bool)
    if subset == "positive_cases":
        return labels == POSITIVE
    if subset == "negative_cases":
        return labels == NEGATIVE
    raise ValueError(f"unknown subset {subset!r}; expected one of {SUBSETS}")


def reliability_diagram(predictions: LabeledPredictions, subset: str = "all",
                        n_bins: int = 10) -> ReliabilityDiagram:
    """Accuracy against confidence for the cases whose true label matches ``subset``."""
    mask = _subset_mask(predictions.labels, subset)
    bins, ece = reliability_bins(predictions.confidence[mask], predictions.correct[mask], n_bins)
    return ReliabilityDiagram(subset, bins, ece, int(mask.sum()))


# -- attention permutation -------------------------------------------------

@dataclass
class PermutationCaseResult:
    user_id: int
    target_item: int
    true_label: int
    predicted_label: int
    confidence: float
    prob_pos: float
    mean_abs_delta: float


@dataclass
class PermutationReport:
    cases: list[PermutationCaseResult]
    per_bin: list[dict]
    n_shuffles: int
    seed: int


PERMUTATION_SUBSETS = ("all", "positive_cases", "false_negatives", "false_positives")


def _permutation_bins(cases: list[PermutationCaseResult], n_bins: int) -> list[dict]:
    true = np.array([c.true_label for c in cases])
    pred = np.array([c.predicted_label for c in cases])
    conf = np.array([c.confidence for c in cases])
    p_pos = np.array([c.prob_pos for c in cases])
    delta = np.array([c.mean_abs_delta for c in cases])
    masks = {
        "all": np.ones(len(cases), dtype=bool),
        "positive_cases": true == POSITIVE,
        "false_negatives": (true == POSITIVE) & (pred == NEGATIVE),
        "false_positives": (true == NEGATIVE) & (pred == POSITIVE),
    }
    rows = []
    # the same false negatives keyed by p(positive) instead of confidence
    tables = [(name, "confidence", conf, 0.5, 1.0, masks[name]) for name in PERMUTATION_SUBSETS]
    tables.append(("false_negatives", "prob_pos", p_pos, 0.0, 0.5, masks["false_negatives"]))
    for name, key, values, lo, hi, mask in tables:
        idx = bin_index(values, n_bins, lo, hi)
        for k, (b_lo, b_hi) in enumerate(bin_edges(n_bins, lo, hi)):
            m = mask & (idx == k)
            count = int(m.sum())
            rows.append({
                "subset": name, "binned_by": key, "bin_lo": b_lo, "bin_hi": b_hi, "count": count,
                "mean_abs_delta": float(delta[m].mean()) if count else math.nan,
                "accuracy": float((true[m] == pred[m]).mean()) if count else math.nan,
                "mean_confidence": float(conf[m].mean()) if count else math.nan,
            })
    return rows


def _case_deltas(params, history, targets, base_weights, base_probs, perms):
    """Mean |delta p(predicted label)| per candidate over its permutations.

    ``base_weights`` is (C, L); ``perms`` is (C, S, L) index permutations.
    """
    C, S, L = perms.shape
    permuted = np.take_along_axis(base_weights[:, None, :], perms, axis=2)  # (C, S, L)
    fixed = np.concatenate([base_weights[:, None, :], permuted], axis=1).reshape(-1)
    n_seg = C * (S + 1)
    batch = RaggedBatch(np.tile(history, n_seg), np.arange(n_seg + 1) * L,
                        np.repeat(targets, S + 1))
    probs = forward_batch(params, batch, fixed_weights=fixed).probs.reshape(C, S + 1, 2)
    predicted = np.where(base_probs[:, 1] > base_probs[:, 0], POSITIVE, NEGATIVE)
    p = probs[np.arange(C), :, predicted]  # (C, S + 1)
    deltas = np.abs(p[:, 1:] - p[:, :1])
    # forward is pure: an unchanged weight vector gives an unchanged output
    deltas[(permuted == base_weights[:, None, :]).all(axis=2)] = 0.0
    return deltas.mean(axis=1)


def permutation_experiment(params: ModelParams, split: SplitDataset, n_shuffles: int = 100,
                           seed: int = 0, users=None, include_negatives: bool = True,
                           n_bins: int = 10, max_rows: int = 400_000) -> PermutationReport:
    """Shuffle each test case's attention weights and measure the output change.

    For every candidate (the held-out positive and, unless disabled, its 99
    negatives) the attention vector is permuted ``n_shuffles`` times with a
    stream derived from ``(seed, user, item)``; the reported value is the
    mean absolute change in the probability of the originally predicted
    label.
    """
    if params.num_items != split.num_items:
        raise ValueError(f"model has {params.num_items} items, split has {split.num_items}")
    users = range(split.num_users) if users is None else users
    cases = []
    for u in users:
        inst = split.test_instances[u]
        history = split.train_histories[u]
        L = len(history)
        cands = np.array((inst.positive_item, *inst.negatives) if include_negatives
                         else (inst.positive_item,), dtype=np.int64)
        labels = np.r_[POSITIVE, np.full(len(cands) - 1, NEGATIVE)]
        base = forward_batch(params, RaggedBatch(np.tile(history, len(cands)),
                                                 np.arange(len(cands) + 1) * L, cands))
        base_w = base.weights.reshape(len(cands), L)
        perms = np.empty((len(cands), n_shuffles, L), dtype=np.int64)
        for c, item in enumerate(cands):
            rng = substream(seed, "permute", u, int(item))
            perms[c] = rng.permuted(np.tile(np.arange(L), (n_shuffles, 1)), axis=1)

        chunk = max(1, max_rows // ((n_shuffles + 1) * L))
        deltas = np.concatenate([
            _case_deltas(params, history, cands[s:s + chunk], base_w[s:s + chunk],
                         base.probs[s:s + chunk], perms[s:s + chunk])
            for s in range(0, len(cands), chunk)
        ])
        for c, item in enumerate(cands):
            p_neg, p_pos = base.probs[c]
            cases.append(PermutationCaseResult(
                u, int(item), int(labels[c]), POSITIVE if p_pos > p_neg else NEGATIVE,
                float(max(p_neg, p_pos)), float(p_pos), float(deltas[c])))
    return PermutationReport(cases, _permutation_bins(cases, n_bins), n_shuffles, seed)


# -- cross-seed stability --------------------------------------------------

def top_attentive(weights, history, fraction: float = 0.1) -> frozenset:
    """The ``ceil(fraction * L)`` most attended history items (ties: lower item id)."""
    weights = np.asarray(getattr(weights, "weights", weights), dtype=np.float64)
    history = np.asarray(history)
    if len(history) == 0:
        raise ValueError("empty history")
    # guard against 0.1 * 30 == 3.0000000000000004
    k = max(1, math.ceil(fraction * len(history) - 1e-9))
    order = np.lexsort((history, -weights))
    return frozenset(int(i) for i in history[order[:k]])


def mean_pairwise_jaccard(sets) -> float:
    """Mean Jaccard index over all unordered pairs of ``sets``."""
    pairs = [jaccard(a, b) for a, b in itertools.combinations(sets, 2)]
    if not pairs:
        raise ValueError("need at least 2 sets")
    return float(np.mean(pairs))


@dataclass
class StabilityCaseResult:
    user_id: int
    target_item: int
    mean_pairwise_jaccard: float
    mean_confidence: float
    mean_prob_pos: float
    n_positive_runs: int
    n_runs: int
    top_sets: list[list[int]] = field(default_factory=list)


@dataclass
class StabilityReport:
    cases: list[StabilityCaseResult]
    per_bin: list[dict]
    seeds: list[int]
    top_fraction: float


def _stability_bins(cases, n_bins):
    conf = np.array([c.mean_confidence for c in cases])
    jac = np.array([c.mean_pairwise_jaccard for c in cases])
    positive = np.array([2 * c.n_positive_runs > c.n_runs for c in cases])
    idx = bin_index(conf, n_bins)
    rows = []
    for name, mask in (("positive_predictions", positive), ("all", np.ones(len(cases), dtype=bool))):
        for k, (lo, hi) in enumerate(bin_edges(n_bins)):
            m = mask & (idx == k)
            count = int(m.sum())
            rows.append({"subset": name, "bin_lo": lo, "bin_hi": hi, "count": count,
                         "mean_jaccard": float(jac[m].mean()) if count else math.nan,
                         "mean_confidence": float(conf[m].mean()) if count else math.nan})
    return rows


def stability_experiment(split: SplitDataset, run_config=None, seeds=None, models=None,
                         fraction: float = 0.1, users=None, n_bins: int = 10,
                         log=None) -> StabilityReport:
    """Compare top attended items of the held-out positive across seeded runs.

    Either train one model per seed (only the seed of ``run_config`` changes)
    or pass already trained ``models`` (params or TrainedModel) with their
    ``seeds`` for labelling.
    """
    if models is None:
        from .trainer import TrainRunConfig, train

        run_config = run_config or TrainRunConfig()
        seeds = list(range(10)) if seeds is None else list(seeds)
        if len(seeds) < 2:
            raise ValueError("stability needs at least 2 runs")
        models = []
        for s in seeds:
            if log:
                log(f"training seed {s}")
            models.append(train(split, dataclasses.replace(run_config, seed=s)).params)
    else:
        models = [getattr(m, "params", m) for m in models]
        seeds = list(seeds) if seeds is not None else list(range(len(models)))
    if len(models) < 2:
        raise ValueError("stability needs at least 2 runs")

    users = list(range(split.num_users) if users is None else users)
    hist = [split.train_histories[u] for u in users]
    targets = [split.test_instances[u].positive_item for u in users]
    lengths = np.array([len(h) for h in hist])
    offsets = np.concatenate([[0], np.cumsum(lengths)])
    batch = RaggedBatch(np.concatenate(hist), offsets, np.array(targets, dtype=np.int64))

    runs = []
    for params in models:
        trace = forward_batch(params, batch)
        tops = [top_attentive(trace.weights[offsets[j]:offsets[j + 1]], hist[j], fraction)
                for j in range(len(users))]
        runs.append((tops, trace.probs))

    cases = []
    for j, u in enumerate(users):
        sets = [tops[j] for tops, _ in runs]
        probs = np.array([p[j] for _, p in runs])
        cases.append(StabilityCaseResult(
            u, targets[j], mean_pairwise_jaccard(sets), float(probs.max(axis=1).mean()),
            float(probs[:, 1].mean()), int((probs[:, 1] > probs[:, 0]).sum()), len(models),
            [sorted(s) for s in sets]))
    return StabilityReport(cases, _stability_bins(cases, n_bins), [int(s) for s in seeds], fraction)


def explain(prediction, history, id_map, target) -> str:
    """One-line explanation citing the most attended history item.

    Ties on the maximum weight cite the lowest raw id.
    """
    attention = getattr(prediction, "attention", prediction)
    weights = np.asarray(getattr(attention, "weights", attention), dtype=np.float64)
    history = np.asarray(history)
    if len(weights) == 0 or len(weights) != len(history):
        raise ValueError("attention must be non-empty and aligned with the history")
    id_map = np.asarray(id_map)
    top = np.flatnonzero(weights == weights.max())
    cited = min(int(id_map[history[j]]) for j in top)
    return f"You are recommended to watch #{int(id_map[target])} because you watched #{cited}"
