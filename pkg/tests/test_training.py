import numpy as np
import pytest

from errors import TrainingError
from ssm_engine import MambaModel, ModelSpec, evaluate, softplus, trace_model
from synthetic import ToyTask
from tensor_core import make_rng
from training import TrainConfig, check_desk_scale, clip_grad_norm, model_backward, train_toy_model

SMALL_TASK = ToyTask(seq_len=8, n_train=64, n_val=32)
SMALL_SPEC = ModelSpec(seq_len=8, d_model=4, d_inner=4, d_state=2)


def test_model_gradients_match_finite_differences():
    model = MambaModel.init_random(ModelSpec(n_blocks=2, seq_len=6, d_model=4, d_inner=4, d_state=2), 0)
    tensors = model.named_tensors()
    for name in list(tensors):
        tensors[name] = tensors[name].astype(np.float64)
    model = MambaModel.from_named(model.spec, tensors)
    x = make_rng(1).normal(size=(3, 6, 4))
    y = np.array([0, 1, 1])
    _, grads = model_backward(model, trace_model(model, x), y)
    assert set(grads) == set(model.named_tensors())

    def loss():
        return model_backward(model, trace_model(model, x), y)[0]

    for name in ("head.weight", "blocks.0.in_proj.weight", "blocks.1.A_log", "patch_embed.bias"):
        value = model.named_tensors()[name]
        idx = tuple(0 for _ in value.shape)
        orig = value[idx]
        value[idx] = orig + 1e-6
        hi = loss()
        value[idx] = orig - 1e-6
        lo = loss()
        value[idx] = orig
        assert grads[name][idx] == pytest.approx((hi - lo) / 2e-6, rel=1e-4, abs=1e-9)


def test_clip_grad_norm():
    grads, norm = clip_grad_norm({"a": np.array([3.0]), "b": np.array([4.0])}, 1.0)
    assert norm == pytest.approx(5.0)
    assert grads["a"][0] == pytest.approx(0.6)
    same, _ = clip_grad_norm({"a": np.array([0.1])}, 1.0)
    assert same["a"][0] == 0.1


def test_desk_scale_limits():
    check_desk_scale(ModelSpec(n_blocks=2, seq_len=64))
    with pytest.raises(TrainingError, match="desk-scale"):
        check_desk_scale(ModelSpec(d_inner=32))


def test_spec_must_fit_task():
    with pytest.raises(TrainingError):
        train_toy_model(SMALL_TASK, ModelSpec(seq_len=16), seed=0)
    with pytest.raises(TrainingError, match="binary"):
        train_toy_model(SMALL_TASK, ModelSpec(seq_len=8, n_classes=3), seed=0)


def test_training_is_deterministic():
    cfg = TrainConfig(max_iterations=10, eval_every=5, min_accuracy=0.0, target_accuracy=1.1)
    a = train_toy_model(SMALL_TASK, SMALL_SPEC, seed=3, cfg=cfg)
    b = train_toy_model(SMALL_TASK, SMALL_SPEC, seed=3, cfg=cfg)
    for name, value in a.model.named_tensors().items():
        assert np.array_equal(value, b.model.named_tensors()[name])
    assert a.history == b.history


def test_returns_best_checkpoint():
    cfg = TrainConfig(max_iterations=20, eval_every=5, min_accuracy=0.0, target_accuracy=1.1)
    result = train_toy_model(SMALL_TASK, SMALL_SPEC, seed=0, cfg=cfg)
    assert len(result.history) == 4
    assert result.val_accuracy == max(h[2] for h in result.history)
    (_, _), (x_val, y_val) = SMALL_TASK.splits(0)
    assert evaluate(result.model, x_val, y_val)[0] == result.val_accuracy


def test_too_hard_raises():
    cfg = TrainConfig(max_iterations=1, eval_every=1, min_accuracy=1.01)
    with pytest.raises(TrainingError, match="task too hard"):
        train_toy_model(SMALL_TASK, SMALL_SPEC, seed=0, cfg=cfg)


@pytest.mark.slow
@pytest.mark.parametrize("seed", range(3))
def test_marker_task_reaches_target(toy_run, seed):
    _, data, model = toy_run(seed)
    acc, _ = evaluate(model, *data.val)
    assert acc >= 0.95


@pytest.mark.slow
def test_sign_task_is_easy():
    task = ToyTask(kind="sign")
    cfg = TrainConfig(target_accuracy=0.995)
    result = train_toy_model(task, ModelSpec(), seed=0, cfg=cfg)
    assert result.val_accuracy >= 0.99


class TestDynamics:
    cfg = TrainConfig(max_iterations=10, eval_every=5, min_accuracy=0.0, target_accuracy=1.1)

    def test_frozen_by_default(self):
        result = train_toy_model(SMALL_TASK, SMALL_SPEC, seed=2, cfg=self.cfg)
        init = MambaModel.init_random(SMALL_SPEC, 2, self.cfg.dt_range)
        for block, ref in zip(result.model.blocks, init.blocks):
            assert np.array_equal(block.ssm.A_log, ref.ssm.A_log)
            assert np.array_equal(block.ssm.dt_bias, ref.ssm.dt_bias)
            assert not block.ssm.dt_proj.any()
            assert not np.array_equal(block.in_proj, ref.in_proj)
        delta = softplus(result.model.blocks[0].ssm.dt_bias.astype(np.float64))
        assert np.all((delta > 0.0199) & (delta < 0.0801))

    def test_trainable_when_unfrozen(self):
        cfg = TrainConfig(
            max_iterations=10, eval_every=5, min_accuracy=0.0, target_accuracy=1.1,
            freeze_dynamics=False,
        )
        result = train_toy_model(SMALL_TASK, SMALL_SPEC, seed=2, cfg=cfg)
        init = MambaModel.init_random(SMALL_SPEC, 2, cfg.dt_range)
        assert not np.array_equal(result.model.blocks[0].ssm.A_log, init.blocks[0].ssm.A_log)
        assert result.model.blocks[0].ssm.dt_proj.any()

    def test_dt_range_validated(self):
        with pytest.raises(TrainingError, match="dt_range"):
            TrainConfig(dt_range=(0.1, 0.01))
        assert TrainConfig(dt_range=[0.01, 0.1]).to_dict()["dt_range"] == [0.01, 0.1]
