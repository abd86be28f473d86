"""Item-based neural CF with attention pooling and a two-class softmax head.

For a user history ``h_1..h_L`` and a target item ``t``::

    x_j      = P[h_j] * Q[t]                       # Hadamard interaction
    logit_j  = v . relu(W x_j + b)
    a_j      = exp(logit_j) / (sum_k exp(logit_k)) ** beta
    pooled   = L ** -alpha * sum_j a_j x_j
    probs    = softmax(head(relu-MLP(pooled)))     # [p(negative), p(positive)]

Batches are ragged: all histories are concatenated into one flat index array
with an ``offsets`` vector marking segment boundaries, so cost is linear in
the total history length of the batch rather than in a padded maximum.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .corpus import NEGATIVE, POSITIVE


@dataclass(frozen=True)
class ModelConfig:
    embedding_dim: int = 16
    mlp_widths: tuple[int, ...] = (64, 32, 16)
    attention_hidden_dim: int | None = None
    alpha: float = 0.0
    beta: float = 0.8

    def __post_init__(self):
        object.__setattr__(self, "mlp_widths", tuple(int(w) for w in self.mlp_widths))
        if self.embedding_dim < 1:
            raise ValueError("embedding_dim must be >= 1")
        if not self.mlp_widths or min(self.mlp_widths) < 1:
            raise ValueError("mlp_widths must be a non-empty list of positive widths")
        if self.attention_hidden_dim is not None and self.attention_hidden_dim < 1:
            raise ValueError("attention_hidden_dim must be >= 1")
        if not np.isfinite(self.alpha):
            raise ValueError(f"alpha must be finite, got {self.alpha}")
        if not 0.0 < self.beta <= 1.0:
            raise ValueError(f"beta must lie in (0, 1], got {self.beta}")

    @property
    def hidden_dim(self) -> int:
        return self.attention_hidden_dim or self.embedding_dim


@dataclass
class ModelParams:
    config: ModelConfig
    num_items: int
    P: np.ndarray  # history-role item embeddings
    Q: np.ndarray  # target-role item embeddings
    att_W: np.ndarray
    att_b: np.ndarray
    att_v: np.ndarray
    tower_W: list[np.ndarray]
    tower_b: list[np.ndarray]
    head_W: np.ndarray
    head_b: np.ndarray

    def tensors(self) -> dict[str, np.ndarray]:
        """Named tensors in canonical order."""
        out = {"P": self.P, "Q": self.Q,
               "attention.W": self.att_W, "attention.b": self.att_b, "attention.v": self.att_v}
        for k, (W, b) in enumerate(zip(self.tower_W, self.tower_b)):
            out[f"tower.{k}.W"] = W
            out[f"tower.{k}.b"] = b
        out["head.W"] = self.head_W
        out["head.b"] = self.head_b
        return out

    def expected_shapes(self) -> dict[str, tuple[int, ...]]:
        return expected_shapes(self.config, self.num_items)

    @classmethod
    def from_tensors(cls, config: ModelConfig, num_items: int, tensors: dict) -> "ModelParams":
        shapes = expected_shapes(config, num_items)
        if list(tensors) != list(shapes):
            raise ValueError(f"tensor names {list(tensors)} do not match {list(shapes)}")
        for name, shape in shapes.items():
            if tuple(tensors[name].shape) != shape:
                raise ValueError(f"tensor {name} has shape {tuple(tensors[name].shape)}, expected {shape}")
        n = len(config.mlp_widths)
        return cls(
            config, num_items, tensors["P"], tensors["Q"],
            tensors["attention.W"], tensors["attention.b"], tensors["attention.v"],
            [tensors[f"tower.{k}.W"] for k in range(n)],
            [tensors[f"tower.{k}.b"] for k in range(n)],
            tensors["head.W"], tensors["head.b"],
        )

    def map(self, fn) -> "ModelParams":
        return ModelParams.from_tensors(self.config, self.num_items,
                                        {k: fn(v) for k, v in self.tensors().items()})

    def zeros_like(self) -> "ModelParams":
        return self.map(np.zeros_like)

    def copy(self) -> "ModelParams":
        return self.map(np.copy)


# Gradients mirror the parameter layout exactly.
Gradients = ModelParams


def expected_shapes(config: ModelConfig, num_items: int) -> dict[str, tuple[int, ...]]:
    d, h = config.embedding_dim, config.hidden_dim
    shapes = {"P": (num_items, d), "Q": (num_items, d),
              "attention.W": (h, d), "attention.b": (h,), "attention.v": (h,)}
    fan_in = d
    for k, width in enumerate(config.mlp_widths):
        shapes[f"tower.{k}.W"] = (width, fan_in)
        shapes[f"tower.{k}.b"] = (width,)
        fan_in = width
    shapes["head.W"] = (2, fan_in)
    shapes["head.b"] = (2,)
    return shapes


def _truncated_normal(rng, shape, std):
    x = rng.normal(0.0, std, size=shape)
    bad = np.abs(x) > 2 * std
    while bad.any():
        x[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(x) > 2 * std
    return x


def _glorot(rng, shape, fan_in, fan_out):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def init_params(config: ModelConfig, num_items: int, rng: np.random.Generator) -> ModelParams:
    """Embeddings ~ N(0, 0.01^2) truncated at 2 sigma, Glorot-uniform weights, zero biases."""
    if num_items < 1:
        raise ValueError("num_items must be >= 1")
    d, h = config.embedding_dim, config.hidden_dim
    P = _truncated_normal(rng, (num_items, d), 0.01)
    Q = _truncated_normal(rng, (num_items, d), 0.01)
    att_W = _glorot(rng, (h, d), d, h)
    att_v = _glorot(rng, (h,), h, 1)
    tower_W, tower_b = [], []
    fan_in = d
    for width in config.mlp_widths:
        tower_W.append(_glorot(rng, (width, fan_in), fan_in, width))
        tower_b.append(np.zeros(width))
        fan_in = width
    head_W = _glorot(rng, (2, fan_in), fan_in, 2)
    return ModelParams(config, num_items, P, Q, att_W, np.zeros(h), att_v,
                       tower_W, tower_b, head_W, np.zeros(2))


class RaggedBatch(NamedTuple):
    """Concatenated histories; segment ``b`` is ``items[offsets[b]:offsets[b+1]]``."""

    items: np.ndarray
    offsets: np.ndarray
    targets: np.ndarray

    @property
    def lengths(self) -> np.ndarray:
        return np.diff(self.offsets)

    @property
    def segment_ids(self) -> np.ndarray:
        return np.repeat(np.arange(len(self.targets)), self.lengths)

    def __len__(self):
        return len(self.targets)


def make_batch(histories, targets) -> RaggedBatch:
    histories = [np.asarray(h, dtype=np.int64) for h in histories]
    lengths = np.array([len(h) for h in histories], dtype=np.int64)
    if len(histories) == 0 or lengths.min() < 1:
        raise ValueError("every history must be non-empty")
    offsets = np.concatenate([[0], np.cumsum(lengths)])
    return RaggedBatch(np.concatenate(histories), offsets, np.asarray(targets, dtype=np.int64))


@dataclass
class AttentionDistribution:
    weights: np.ndarray
    beta: float


@dataclass
class Prediction:
    prob_neg: float
    prob_pos: float
    attention: AttentionDistribution

    @property
    def predicted_label(self) -> int:
        return POSITIVE if self.prob_pos > self.prob_neg else NEGATIVE

    @property
    def confidence(self) -> float:
        return max(self.prob_neg, self.prob_pos)


@dataclass
class ForwardTrace:
    """Intermediates of a batched forward pass, as needed by backprop."""

    params: ModelParams
    batch: RaggedBatch
    seg: np.ndarray
    X: np.ndarray
    weights: np.ndarray
    pooled_sum: np.ndarray
    length_scale: np.ndarray
    pre: list[np.ndarray]
    acts: list[np.ndarray]
    head_logits: np.ndarray
    probs: np.ndarray
    fixed_attention: bool
    att_pre: np.ndarray | None = None
    att_hidden: np.ndarray | None = None
    logits: np.ndarray | None = None
    softmax: np.ndarray | None = None


def _interactions(params: ModelParams, batch: RaggedBatch, seg: np.ndarray) -> np.ndarray:
    return params.P[batch.items] * params.Q[batch.targets][seg]


def _score(params: ModelParams, X: np.ndarray):
    att_pre = X @ params.att_W.T + params.att_b
    att_hidden = np.maximum(att_pre, 0.0)
    return att_pre, att_hidden, att_hidden @ params.att_v


def _smoothed_softmax(logits, offsets, seg, beta):
    starts = offsets[:-1]
    m = np.maximum.reduceat(logits, starts)
    e = np.exp(logits - m[seg])
    s = np.add.reduceat(e, starts)
    weights = e / (s ** beta)[seg] * np.exp(m * (1.0 - beta))[seg]
    return weights, e / s[seg]


def _pool_and_head(params: ModelParams, batch: RaggedBatch, X, weights):
    pooled_sum = np.add.reduceat(weights[:, None] * X, batch.offsets[:-1], axis=0)
    length_scale = batch.lengths.astype(np.float64) ** -params.config.alpha
    a = pooled_sum * length_scale[:, None]
    pre, acts = [], [a]
    for W, b in zip(params.tower_W, params.tower_b):
        z = a @ W.T + b
        a = np.maximum(z, 0.0)
        pre.append(z)
        acts.append(a)
    out = a @ params.head_W.T + params.head_b
    shifted = np.exp(out - out.max(axis=1, keepdims=True))
    probs = shifted / shifted.sum(axis=1, keepdims=True)
    return pooled_sum, length_scale, pre, acts, out, probs


def forward_batch(params: ModelParams, batch: RaggedBatch, fixed_weights=None) -> ForwardTrace:
    """Batched forward pass; ``trace.probs[:, 1]`` is p(positive).

    With ``fixed_weights`` (flat, aligned with ``batch.items``) the attention
    network is bypassed and those weights are pooled instead.
    """
    if len(batch) == 0 or batch.lengths.min() < 1:
        raise ValueError("every history must be non-empty")
    seg = batch.segment_ids
    X = _interactions(params, batch, seg)
    if fixed_weights is None:
        att_pre, att_hidden, logits = _score(params, X)
        weights, soft = _smoothed_softmax(logits, batch.offsets, seg, params.config.beta)
    else:
        weights = np.asarray(fixed_weights, dtype=np.float64)
        if weights.shape != batch.items.shape:
            raise ValueError(f"fixed weights have length {weights.shape[0]}, "
                             f"history has {batch.items.shape[0]}")
        if (weights < 0).any():
            raise ValueError("fixed attention weights must be non-negative")
        att_pre = att_hidden = logits = soft = None
    pooled_sum, length_scale, pre, acts, out, probs = _pool_and_head(params, batch, X, weights)
    return ForwardTrace(params, batch, seg, X, weights, pooled_sum, length_scale, pre, acts,
                        out, probs, fixed_weights is not None, att_pre, att_hidden, logits, soft)


def _single(history, target) -> RaggedBatch:
    history = np.asarray(history, dtype=np.int64)
    if history.ndim != 1 or len(history) == 0:
        raise ValueError("history must be a non-empty 1-d sequence of item ids")
    return RaggedBatch(history, np.array([0, len(history)]), np.array([int(target)]))


def attention_logits(params: ModelParams, history, target) -> np.ndarray:
    batch = _single(history, target)
    X = _interactions(params, batch, batch.segment_ids)
    return _score(params, X)[2]


def attention_weights(logits, beta: float) -> AttentionDistribution:
    logits = np.asarray(logits, dtype=np.float64)
    offsets = np.array([0, len(logits)])
    weights, _ = _smoothed_softmax(logits, offsets, np.zeros(len(logits), dtype=np.int64), beta)
    return AttentionDistribution(weights, beta)


def pool(params: ModelParams, history, target, attention, alpha: float | None = None) -> np.ndarray:
    weights = getattr(attention, "weights", attention)
    batch = _single(history, target)
    X = _interactions(params, batch, batch.segment_ids)
    alpha = params.config.alpha if alpha is None else alpha
    return (np.asarray(weights)[:, None] * X).sum(axis=0) * float(len(batch.items)) ** -alpha


def _prediction(trace: ForwardTrace, beta) -> Prediction:
    p = trace.probs[0]
    return Prediction(float(p[0]), float(p[1]), AttentionDistribution(trace.weights.copy(), beta))


def forward(params: ModelParams, history, target) -> tuple[Prediction, ForwardTrace]:
    trace = forward_batch(params, _single(history, target))
    return _prediction(trace, params.config.beta), trace


def forward_with_attention(params: ModelParams, history, target, fixed_weights) -> Prediction:
    fixed = np.asarray(getattr(fixed_weights, "weights", fixed_weights), dtype=np.float64)
    history = np.asarray(history)
    if fixed.shape != history.shape:
        raise ValueError(f"fixed weights have length {len(fixed)}, history has {len(history)}")
    trace = forward_batch(params, _single(history, target), fixed_weights=fixed)
    return _prediction(trace, params.config.beta)
