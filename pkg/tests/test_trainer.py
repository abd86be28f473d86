import dataclasses

import numpy as np
import pytest

from atnaudit import trainer
from atnaudit.model import ModelConfig, forward, forward_batch, make_batch
from atnaudit.trainer import (CheckpointError, LossConfig, OptimizerState, TrainingError,
                              TrainRunConfig)

from conftest import hand_split, random_params


def test_class_weights_for_ratio_four():
    assert trainer.class_weights(4) == (0.625, 2.5)
    w_neg, w_pos = trainer.class_weights(4)
    # equal total mass per class, mean weight one
    assert 4 * w_neg == pytest.approx(w_pos)
    assert (4 * w_neg + w_pos) / 5 == pytest.approx(1.0)


def test_class_weights_need_negatives():
    with pytest.raises(ValueError):
        trainer.class_weights(0)


def test_cross_entropy_values():
    assert trainer.weighted_cross_entropy((0.75, 0.25), 1) == pytest.approx(np.log(4))
    cfg = LossConfig((0.625, 2.5))
    assert trainer.weighted_cross_entropy((0.75, 0.25), 1, cfg) == pytest.approx(2.5 * np.log(4))
    assert trainer.weighted_cross_entropy((0.75, 0.25), 0, cfg) == pytest.approx(-0.625 * np.log(0.75))


def test_cross_entropy_is_clamped():
    loss = trainer.weighted_cross_entropy((1.0, 0.0), 1)
    assert np.isfinite(loss) and loss == pytest.approx(-np.log(1e-12))


def _example(rng, num_items, L, label):
    history = rng.choice(num_items, L, replace=False)
    target = int(rng.integers(num_items))
    return history, target, label


@pytest.mark.parametrize("L", [1, 2, 5])
@pytest.mark.parametrize("weighted", [False, True])
def test_gradient_matches_finite_differences(tiny_config, L, weighted):
    rng = np.random.default_rng(10 * L + weighted)
    params = random_params(tiny_config, 12, rng)
    loss_cfg = LossConfig(trainer.class_weights(4)) if weighted else LossConfig()
    for label in (0, 1):
        err = trainer.finite_difference_check(params, _example(rng, 12, L, label),
                                              loss_config=loss_cfg, rng=rng)
        assert err < 1e-4


def test_gradient_check_beta_one_and_alpha():
    cfg = ModelConfig(embedding_dim=3, mlp_widths=(5,), beta=1.0, alpha=0.5)
    rng = np.random.default_rng(1)
    params = random_params(cfg, 9, rng)
    assert trainer.finite_difference_check(params, _example(rng, 9, 4, 1), rng=rng) < 1e-4


def test_gradient_check_detects_a_wrong_gradient(tiny_config):
    rng = np.random.default_rng(2)
    params = random_params(tiny_config, 12, rng)
    example = _example(rng, 12, 3, 1)
    _, trace = forward(params, example[0], example[1])
    grads = trainer.backward(params, trace, 1)
    grads.att_v = grads.att_v * 1.1
    assert trainer.finite_difference_check(params, example, rng=rng, grads=grads) > 1e-3


def test_batched_gradient_is_mean_of_single(tiny_config):
    rng = np.random.default_rng(3)
    params = random_params(tiny_config, 15, rng)
    examples = [_example(rng, 15, L, int(L % 2)) for L in (1, 4, 2, 6)]
    batch = make_batch([e[0] for e in examples], [e[1] for e in examples])
    labels = [e[2] for e in examples]
    cfg = LossConfig((0.625, 2.5))
    batched = trainer.backward_batch(params, forward_batch(params, batch), labels, cfg).tensors()
    singles = [trainer.backward(params, forward(params, h, t)[1], y, cfg).tensors()
               for h, t, y in examples]
    for name, g in batched.items():
        assert np.allclose(g, sum(s[name] for s in singles) / len(examples), atol=1e-12)


def test_backward_rejects_foreign_trace(tiny_config):
    rng = np.random.default_rng(0)
    params = random_params(tiny_config, 10, rng)
    _, trace = forward(params, [1, 2], 3)
    with pytest.raises(ValueError, match="different parameter set"):
        trainer.backward(params.copy(), trace, 1)


def test_fixed_attention_backward_leaves_attention_alone(tiny_config):
    rng = np.random.default_rng(4)
    params = random_params(tiny_config, 10, rng)
    batch = make_batch([[1, 2, 3]], [5])
    trace = forward_batch(params, batch, fixed_weights=np.array([0.2, 0.5, 0.3]))
    grads = trainer.backward_batch(params, trace, [1])
    assert not grads.att_W.any() and not grads.att_v.any() and not grads.att_b.any()
    assert grads.head_W.any()


def test_adagrad_first_step():
    cfg = ModelConfig(embedding_dim=2, mlp_widths=(2,))
    rng = np.random.default_rng(0)
    params = random_params(cfg, 4, rng)
    grads = params.map(lambda t: np.full_like(t, -3.0))
    before = params.copy()
    state = OptimizerState.for_params(params, 0.01)
    new, state2 = trainer.adagrad_update(params, grads, state)
    # first step moves every coordinate by lr * g / (|g| + eps)
    step = 0.01 * 3.0 / (3.0 + 1e-8)
    for name, t in new.tensors().items():
        assert np.allclose(t, before.tensors()[name] + step, atol=1e-15)
        assert np.array_equal(params.tensors()[name], before.tensors()[name])
        assert np.allclose(state2.accumulators.tensors()[name], 9.0)
    assert state.steps == 0 and state2.steps == 1
    assert not state.accumulators.P.any()


def test_adagrad_step_shrinks():
    cfg = ModelConfig(embedding_dim=2, mlp_widths=(2,))
    params = random_params(cfg, 4, np.random.default_rng(0))
    grads = params.map(lambda t: np.ones_like(t))
    state = OptimizerState.for_params(params)
    p1, state = trainer.adagrad_update(params, grads, state)
    p2, state = trainer.adagrad_update(p1, grads, state)
    assert np.allclose(p1.P - p2.P, 0.01 / np.sqrt(2), atol=1e-9)


def test_adagrad_rejects_non_finite():
    cfg = ModelConfig(embedding_dim=2, mlp_widths=(2,))
    params = random_params(cfg, 4, np.random.default_rng(0))
    grads = params.zeros_like()
    grads.head_b = np.array([np.nan, 0.0])
    with pytest.raises(TrainingError, match="head.b"):
        trainer.adagrad_update(params, grads, OptimizerState.for_params(params))


def test_histories_drop_own_target():
    split = hand_split([[3, 4, 5], [7]])
    hist = trainer._Histories(split)
    batch, labels = hist.batch(np.array([0, 0, 1, 1]), np.array([4, 9, 7, 2]),
                               np.array([1, 0, 1, 0]))
    # user 1's positive (7) would leave an empty history and is dropped
    assert labels.tolist() == [1, 0, 0]
    assert batch.offsets.tolist() == [0, 2, 5, 6]
    assert batch.items.tolist() == [3, 5, 3, 4, 5, 7]
    assert batch.targets.tolist() == [4, 9, 2]


def _fast_config(**kw):
    base = dict(epochs=2, batch_size=128, model=ModelConfig(embedding_dim=8, mlp_widths=(8, 4)))
    base.update(kw)
    return TrainRunConfig(**base)


def test_training_is_deterministic(small_split):
    a = trainer.train(small_split, _fast_config(seed=3))
    b = trainer.train(small_split, _fast_config(seed=3))
    c = trainer.train(small_split, _fast_config(seed=4))
    for name, t in a.params.tensors().items():
        assert np.array_equal(t, b.params.tensors()[name])
    assert a.epoch_losses == b.epoch_losses
    assert not np.array_equal(a.params.P, c.params.P)


def test_training_reduces_loss(small_split):
    cfg = _fast_config(epochs=4, eval_every=0, learning_rate=0.05)
    model = trainer.train(small_split, cfg)
    assert model.epoch_losses[-1] < model.epoch_losses[0]
    assert model.best_epoch == 4


def test_zero_epochs_returns_initialization(small_split):
    model = trainer.train(small_split, _fast_config(epochs=0))
    assert model.epoch_losses == [] and model.best_epoch == 0
    assert model.params.P.shape == (small_split.num_items, 8)


def test_keep_best_tracks_hr(small_split):
    logs = []
    model = trainer.train(small_split, _fast_config(epochs=3), log=logs.append)
    assert len(logs) == 3 and len(model.history) == 3
    best = max(model.history, key=lambda r: r.hr10)
    assert model.best_epoch == min(r.epoch for r in model.history if r.hr10 == best.hr10)


def test_run_config_validation():
    with pytest.raises(ValueError):
        TrainRunConfig(learning_rate=0)
    with pytest.raises(ValueError):
        TrainRunConfig(batch_size=0)
    cfg = TrainRunConfig(seed=5, class_weighting=True)
    assert TrainRunConfig.from_dict(cfg.to_dict()) == cfg
    assert cfg.loss_config().class_weights == (0.625, 2.5)


@pytest.fixture(scope="module")
def trained(small_split):
    return trainer.train(small_split, _fast_config(epochs=1))


def test_checkpoint_round_trip(tmp_path, trained):
    path = tmp_path / "model.ckpt"
    trainer.save_checkpoint(trained, path)
    loaded = trainer.load_checkpoint(path)
    for name, t in trained.params.tensors().items():
        assert np.array_equal(t, loaded.params.tensors()[name])
    assert loaded.run_config == trained.run_config
    assert loaded.history == trained.history and loaded.best_epoch == trained.best_epoch
    trainer.save_checkpoint(loaded, tmp_path / "again.ckpt")
    assert path.read_bytes() == (tmp_path / "again.ckpt").read_bytes()


def test_checkpoint_config_mismatch(tmp_path, trained):
    path = tmp_path / "model.ckpt"
    trainer.save_checkpoint(trained, path)
    other = dataclasses.replace(trained.run_config.model, embedding_dim=16)
    with pytest.raises(CheckpointError, match="embedding_dim"):
        trainer.load_checkpoint(path, expected_config=other)


def test_checkpoint_corruption(tmp_path, trained):
    path = tmp_path / "model.ckpt"
    trainer.save_checkpoint(trained, path)
    data = path.read_bytes()
    path.write_bytes(data[:-8])
    with pytest.raises(CheckpointError, match="payload"):
        trainer.load_checkpoint(path)
    path.write_bytes(b"XXX" + data)
    with pytest.raises(CheckpointError, match="magic"):
        trainer.load_checkpoint(path)
    path.write_bytes(b"ATNAUDIT1\n{not json\n")
    with pytest.raises(CheckpointError, match="header"):
        trainer.load_checkpoint(path)


def test_checkpoint_missing_file(tmp_path):
    with pytest.raises(OSError):
        trainer.load_checkpoint(tmp_path / "absent.ckpt")
