"""Training: weighted cross-entropy, backprop, Adagrad, checkpoints."""
from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ._rng import substream
from .corpus import POSITIVE, SplitDataset, TrainExamples, epoch_examples
from .metrics import EvalReport, evaluate
from .model import (
    Gradients,
    ModelConfig,
    ModelParams,
    RaggedBatch,
    forward,
    forward_batch,
    init_params,
)

PROB_CLAMP = 1e-12
ADAGRAD_EPS = 1e-8
CHECKPOINT_MAGIC = b"ATNAUDIT1"


class TrainingError(ArithmeticError):
    """Non-finite values during training."""


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class LossConfig:
    class_weights: tuple[float, float] = (1.0, 1.0)  # (negative, positive)

    def __post_init__(self):
        if min(self.class_weights) <= 0:
            raise ValueError(f"class weights must be > 0, got {self.class_weights}")


@dataclass(frozen=True)
class TrainRunConfig:
    seed: int = 0
    epochs: int = 50
    batch_size: int = 256
    neg_ratio: int = 4
    learning_rate: float = 0.01
    class_weighting: bool = False
    model: ModelConfig = field(default_factory=ModelConfig)
    eval_every: int = 1
    keep_best: bool = True

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    def loss_config(self) -> LossConfig:
        if self.class_weighting:
            return LossConfig(class_weights(self.neg_ratio))
        return LossConfig()

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["model"]["mlp_widths"] = list(self.model.mlp_widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainRunConfig":
        d = dict(d)
        d["model"] = ModelConfig(**d["model"])
        return cls(**d)


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    hr10: float
    ndcg10: float


@dataclass
class TrainedModel:
    params: ModelParams
    run_config: TrainRunConfig
    history: list[EpochRecord] = field(default_factory=list)
    epoch_losses: list[float] = field(default_factory=list)
    best_epoch: int = 0


@dataclass
class OptimizerState:
    accumulators: ModelParams
    learning_rate: float = 0.01
    epsilon: float = ADAGRAD_EPS
    steps: int = 0

    @classmethod
    def for_params(cls, params: ModelParams, learning_rate: float = 0.01) -> "OptimizerState":
        return cls(params.zeros_like(), learning_rate)


def class_weights(neg_ratio) -> tuple[float, float]:
    """Inverse-frequency weights for 1 positive per ``neg_ratio`` negatives.

    ``w_c = (n_pos + n_neg) / (2 n_c)``: both classes carry equal total loss
    mass and the mean example weight stays 1.
    """
    if neg_ratio <= 0:
        raise ValueError("class weighting needs neg_ratio > 0")
    total = 1.0 + neg_ratio
    return total / (2.0 * neg_ratio), total / 2.0


def _losses(probs: np.ndarray, labels: np.ndarray, loss_config: LossConfig) -> np.ndarray:
    w = np.asarray(loss_config.class_weights)[labels]
    p = probs[np.arange(len(labels)), labels]
    return -w * np.log(np.clip(p, PROB_CLAMP, 1.0 - PROB_CLAMP))


def weighted_cross_entropy(prediction, label: int, loss_config: LossConfig = LossConfig()) -> float:
    """``-w[label] * log p[label]``; ``prediction`` is a Prediction or (p_neg, p_pos)."""
    if hasattr(prediction, "prob_pos"):
        probs = np.array([[prediction.prob_neg, prediction.prob_pos]])
    else:
        probs = np.asarray(prediction, dtype=np.float64).reshape(1, 2)
    return float(_losses(probs, np.array([int(label)]), loss_config)[0])


def backward_batch(params: ModelParams, trace, labels, loss_config: LossConfig = LossConfig(),
                   ) -> Gradients:
    """Gradient of the batch-mean weighted loss w.r.t. every tensor."""
    if trace.params is not params:
        raise ValueError("trace was produced with a different parameter set")
    labels = np.asarray(labels, dtype=np.int64)
    B = len(labels)
    if B != len(trace.batch):
        raise ValueError(f"{B} labels for a batch of {len(trace.batch)}")
    batch, seg, X = trace.batch, trace.seg, trace.X
    starts = batch.offsets[:-1]
    grads = params.zeros_like()

    probs = trace.probs
    p_true = probs[np.arange(B), labels]
    w = np.asarray(loss_config.class_weights)[labels]
    g = probs.copy()
    g[np.arange(B), labels] -= 1.0
    g *= (w / B)[:, None]
    # clamped region of the log has zero derivative
    g[(p_true < PROB_CLAMP) | (p_true > 1.0 - PROB_CLAMP)] = 0.0

    grads.head_W = g.T @ trace.acts[-1]
    grads.head_b = g.sum(axis=0)
    da = g @ params.head_W
    for k in range(len(params.tower_W) - 1, -1, -1):
        dz = da * (trace.pre[k] > 0)
        grads.tower_W[k] = dz.T @ trace.acts[k]
        grads.tower_b[k] = dz.sum(axis=0)
        da = dz @ params.tower_W[k]

    d_pooled_sum = da * trace.length_scale[:, None]
    dX = trace.weights[:, None] * d_pooled_sum[seg]
    if not trace.fixed_attention:
        d_weights = np.einsum("nd,nd->n", X, d_pooled_sum[seg])
        # d a_j / d l_k = a_j (delta_jk - beta * softmax_k)
        wd = d_weights * trace.weights
        d_logits = wd - params.config.beta * trace.softmax * np.add.reduceat(wd, starts)[seg]
        grads.att_v = trace.att_hidden.T @ d_logits
        d_att_pre = np.outer(d_logits, params.att_v) * (trace.att_pre > 0)
        grads.att_W = d_att_pre.T @ X
        grads.att_b = d_att_pre.sum(axis=0)
        dX += d_att_pre @ params.att_W

    q_rows = params.Q[batch.targets]
    grads.P = _scatter_rows(params.num_items, batch.items, dX * q_rows[seg])
    grads.Q = _scatter_rows(params.num_items, batch.targets,
                            np.add.reduceat(dX * params.P[batch.items], starts, axis=0))
    return grads


def _scatter_rows(n_rows, index, values):
    """Row-wise scatter-add of ``values`` into an ``(n_rows, d)`` zero matrix."""
    return np.stack([np.bincount(index, weights=col, minlength=n_rows) for col in values.T], axis=1)


def backward(params: ModelParams, trace, label: int, loss_config: LossConfig = LossConfig()) -> Gradients:
    return backward_batch(params, trace, [label], loss_config)


def example_loss(params: ModelParams, example, loss_config: LossConfig = LossConfig()) -> float:
    history, target, label = example
    prediction, _ = forward(params, history, target)
    return weighted_cross_entropy(prediction, label, loss_config)


def finite_difference_check(params: ModelParams, example, epsilon: float = 1e-5,
                            loss_config: LossConfig = LossConfig(), n_coords: int = 200,
                            rng: np.random.Generator | None = None, grads: Gradients | None = None,
                            ) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``example`` is ``(history, target, label)``. Up to ``n_coords`` coordinates
    per tensor are checked (all of them for smaller tensors). Pass ``grads``
    to check a precomputed gradient instead of calling :func:`backward`.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    history, target, label = example
    if grads is None:
        _, trace = forward(params, history, target)
        grads = backward(params, trace, label, loss_config)
    probe = params.copy()
    analytic_all = grads.tensors()
    worst = 0.0
    for name, tensor in probe.tensors().items():
        flat = tensor.reshape(-1)
        analytic = analytic_all[name].reshape(-1)
        if flat.size <= n_coords:
            coords = np.arange(flat.size)
        else:
            coords = rng.choice(flat.size, n_coords, replace=False)
        for c in coords:
            saved = flat[c]
            flat[c] = saved + epsilon
            up = example_loss(probe, example, loss_config)
            flat[c] = saved - epsilon
            down = example_loss(probe, example, loss_config)
            flat[c] = saved
            numeric = (up - down) / (2 * epsilon)
            err = abs(analytic[c] - numeric) / max(1e-8, abs(analytic[c]) + abs(numeric))
            worst = max(worst, err)
    return worst


def adagrad_update(params: ModelParams, grads: Gradients, state: OptimizerState):
    """One Adagrad step; returns new (params, state) and leaves inputs untouched."""
    p_t, g_t, a_t = params.tensors(), grads.tensors(), state.accumulators.tensors()
    new_p, new_a = {}, {}
    for name, p in p_t.items():
        g = g_t[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient {name} has shape {g.shape}, parameter has {p.shape}")
        if not np.isfinite(g).all():
            raise TrainingError(f"non-finite gradient in {name}")
        acc = a_t[name] + g * g
        new_a[name] = acc
        new_p[name] = p - state.learning_rate * g / (np.sqrt(acc) + state.epsilon)
    params = ModelParams.from_tensors(params.config, params.num_items, new_p)
    accumulators = ModelParams.from_tensors(params.config, params.num_items, new_a)
    return params, dataclasses.replace(state, accumulators=accumulators, steps=state.steps + 1)


class _Histories:
    """Flat train histories for fast batch assembly."""

    def __init__(self, split: SplitDataset):
        self.lengths = np.array([len(h) for h in split.train_histories], dtype=np.int64)
        self.offsets = np.concatenate([[0], np.cumsum(self.lengths)])
        self.items = (np.concatenate(split.train_histories).astype(np.int64)
                      if self.offsets[-1] else np.zeros(0, np.int64))

    def batch(self, users, targets, labels):
        """Ragged batch of train histories, each positive's own target removed.

        Examples left with an empty history are dropped; returns (batch, labels).
        """
        lengths = self.lengths[users]
        seg = np.repeat(np.arange(len(users)), lengths)
        local = np.arange(lengths.sum()) - np.repeat(np.cumsum(lengths) - lengths, lengths)
        flat = self.items[self.offsets[users][seg] + local]
        is_pos = labels == POSITIVE
        keep = ~(is_pos[seg] & (flat == targets[seg]))
        new_lengths = lengths - is_pos
        valid = new_lengths > 0
        flat = flat[keep]
        if not valid.all():
            new_lengths, targets, labels = new_lengths[valid], targets[valid], labels[valid]
        offsets = np.concatenate([[0], np.cumsum(new_lengths)])
        return RaggedBatch(flat, offsets, targets), labels


def iterate_batches(split: SplitDataset, examples: TrainExamples, batch_size: int, histories=None):
    histories = histories or _Histories(split)
    for start in range(0, len(examples), batch_size):
        chunk = examples[start:start + batch_size]
        batch, labels = histories.batch(chunk.users, chunk.items, chunk.labels)
        if len(batch):
            yield batch, labels


def mean_loss(params: ModelParams, split: SplitDataset, examples: TrainExamples,
              loss_config: LossConfig = LossConfig(), batch_size: int = 1024) -> float:
    total, count = 0.0, 0
    for batch, labels in iterate_batches(split, examples, batch_size):
        total += _losses(forward_batch(params, batch).probs, labels, loss_config).sum()
        count += len(labels)
    return total / max(count, 1)


def train(split: SplitDataset, run_config: TrainRunConfig, log=None) -> TrainedModel:
    """Seeded training run; the seed alone determines the result bitwise.

    ``log`` is an optional callable receiving one progress string per epoch.
    """
    seed = run_config.seed
    params = init_params(run_config.model, split.num_items, substream(seed, "init"))
    state = OptimizerState.for_params(params, run_config.learning_rate)
    loss_config = run_config.loss_config()
    histories = _Histories(split)
    result = TrainedModel(params, run_config)
    best_hr = -math.inf

    for epoch in range(1, run_config.epochs + 1):
        examples = epoch_examples(split, run_config.neg_ratio, substream(seed, "epoch", epoch))
        total, count = 0.0, 0
        for b, (batch, labels) in enumerate(iterate_batches(split, examples, run_config.batch_size,
                                                            histories)):
            trace = forward_batch(params, batch)
            losses = _losses(trace.probs, labels, loss_config)
            if not np.isfinite(losses).all():
                raise TrainingError(f"non-finite loss at epoch {epoch}, batch {b}")
            grads = backward_batch(params, trace, labels, loss_config)
            try:
                params, state = adagrad_update(params, grads, state)
            except TrainingError as exc:
                raise TrainingError(f"epoch {epoch}, batch {b}: {exc}") from None
            total += losses.sum()
            count += len(labels)
        epoch_loss = total / max(count, 1)
        result.epoch_losses.append(epoch_loss)

        evaluated = run_config.eval_every and epoch % run_config.eval_every == 0
        if evaluated:
            report: EvalReport = evaluate(params, split)
            result.history.append(EpochRecord(epoch, epoch_loss, report.hr_at_10, report.ndcg_at_10))
            if log:
                log(f"epoch {epoch}: loss {epoch_loss:.4f} hr@10 {report.hr_at_10:.4f} "
                    f"ndcg@10 {report.ndcg_at_10:.4f}")
            if not run_config.keep_best or report.hr_at_10 > best_hr:
                best_hr = report.hr_at_10
                result.params, result.best_epoch = params, epoch
        else:
            if log:
                log(f"epoch {epoch}: loss {epoch_loss:.4f}")
            if not run_config.keep_best or not run_config.eval_every:
                result.params, result.best_epoch = params, epoch
    return result


def save_checkpoint(model: TrainedModel, path) -> None:
    tensors = model.params.tensors()
    directory, offset = [], 0
    for name, arr in tensors.items():
        nbytes = arr.size * 8
        directory.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": nbytes})
        offset += nbytes
    header = {
        "run_config": model.run_config.to_dict(),
        "seed": model.run_config.seed,
        "num_items": model.params.num_items,
        "model_config": dataclasses.asdict(model.params.config),
        "best_epoch": model.best_epoch,
        "epoch_losses": model.epoch_losses,
        "history": [dataclasses.asdict(r) for r in model.history],
        "tensors": directory,
    }
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC + b"\n")
        f.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
        for arr in tensors.values():
            f.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path, expected_config: ModelConfig | None = None) -> TrainedModel:
    path = Path(path)
    data = path.read_bytes()
    magic, _, rest = data.partition(b"\n")
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    header_bytes, sep, payload = rest.partition(b"\n")
    try:
        if not sep:
            raise ValueError("missing header terminator")
        header = json.loads(header_bytes)
        run_config = TrainRunConfig.from_dict(header["run_config"])
        config = ModelConfig(**header["model_config"])
        num_items = int(header["num_items"])
    except (ValueError, KeyError, TypeError) as exc:
        raise CheckpointError(f"{path}: corrupt header ({exc})") from None

    if expected_config is not None and expected_config != config:
        diffs = [f"{f.name}: checkpoint {getattr(config, f.name)!r} vs expected "
                 f"{getattr(expected_config, f.name)!r}"
                 for f in dataclasses.fields(ModelConfig)
                 if getattr(config, f.name) != getattr(expected_config, f.name)]
        raise CheckpointError(f"{path}: model config mismatch ({'; '.join(diffs)})")

    expected_size = sum(t["nbytes"] for t in header["tensors"])
    if len(payload) != expected_size:
        raise CheckpointError(f"{path}: payload is {len(payload)} bytes, header declares {expected_size}")
    tensors = {}
    for t in header["tensors"]:
        raw = payload[t["offset"]:t["offset"] + t["nbytes"]]
        tensors[t["name"]] = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(t["shape"])
    try:
        params = ModelParams.from_tensors(config, num_items, tensors)
    except ValueError as exc:
        raise CheckpointError(f"{path}: {exc}") from None
    history = [EpochRecord(**r) for r in header["history"]]
    return TrainedModel(params, run_config, history, list(header["epoch_losses"]), header["best_epoch"])
