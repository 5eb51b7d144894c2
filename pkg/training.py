"""
training.py: Train a small FP Mamba classifier on a toy task so that
sensitivity and PTQ measurements have a real model to act on.
"""

import logging
from dataclasses import dataclass, field

import numpy as np
from tqdm import tqdm

import settings
from errors import TrainingError
from reconstruction import Adam, block_backward, cosine_lr
from ssm_engine import MambaModel, ModelSpec, evaluate, log_softmax, trace_model
from tensor_core import make_rng

logger = logging.getLogger(__name__)

MAX_DESK_SCALE = {"n_blocks": 2, "seq_len": 64, "d_inner": 16, "d_state": 8}
# SSM dynamics held at init when freeze_dynamics is set
DYNAMICS_TENSORS = ("A_log", "dt_proj.weight", "dt_proj.bias")


@dataclass
class TrainConfig:
    max_iterations: int = 1500
    lr: float = 5e-3
    batch_size: int = 32
    eval_every: int = 25
    target_accuracy: float = 0.95
    min_accuracy: float = 0.80
    grad_clip: float = 1.0
    cosine: bool = False
    dt_range: tuple = (0.02, 0.08)
    freeze_dynamics: bool = True

    def __post_init__(self):
        self.dt_range = tuple(float(v) for v in self.dt_range)
        if len(self.dt_range) != 2 or not 0.0 < self.dt_range[0] <= self.dt_range[1]:
            raise TrainingError(f"dt_range {self.dt_range} must be (min, max) with 0 < min <= max")
        if self.max_iterations < 1 or self.batch_size < 1 or self.eval_every < 1:
            raise TrainingError("max_iterations, batch_size and eval_every must be >= 1")
        if self.lr <= 0:
            raise TrainingError("learning rate must be positive")

    def to_dict(self):
        out = dict(self.__dict__)
        out["dt_range"] = list(self.dt_range)
        return out


@dataclass
class TrainResult:
    model: MambaModel
    val_accuracy: float
    val_loss: float
    iterations: int
    history: list = field(default_factory=list)

    def summary(self):
        return {
            "val_accuracy": self.val_accuracy,
            "val_loss": self.val_loss,
            "iterations": self.iterations,
        }


def check_desk_scale(spec):
    for name, limit in MAX_DESK_SCALE.items():
        if getattr(spec, name) > limit:
            raise TrainingError(f"{name}={getattr(spec, name)} exceeds desk-scale limit {limit}")


def model_backward(model, trace, labels):
    """
    Cross-entropy loss and FP gradients for every named model tensor.
    Args:
        model (MambaModel): Model that produced `trace`.
        trace (ModelTrace): Unquantized forward trace.
        labels (np.ndarray): Integer class labels.
    Returns:
        (float, dict): Mean loss and gradients keyed like model.named_tensors().
    """
    bsz, L, _ = trace.inputs.shape
    logp = log_softmax(trace.logits.astype(np.float64))
    loss = float(-logp[np.arange(bsz), labels].mean())

    d_logits = np.exp(logp)
    d_logits[np.arange(bsz), labels] -= 1.0
    d_logits /= bsz
    grads = {
        "head.weight": trace.pooled.T @ d_logits,
        "head.bias": d_logits.sum(axis=0),
    }
    d_pooled = d_logits @ model.head_weight.T
    # mean pooling spreads the gradient evenly over time
    d_hidden = np.repeat(d_pooled[:, None, :] / L, L, axis=1)
    for i in reversed(range(len(model.blocks))):
        bg = block_backward(trace.block_traces[i], d_hidden)
        for name, g in bg.weights.items():
            grads[f"blocks.{i}.{name}"] = g
        d_hidden = d_hidden + bg.d_input
    grads["patch_embed.weight"] = np.einsum("bli,blm->im", trace.inputs, d_hidden)
    grads["patch_embed.bias"] = d_hidden.sum(axis=(0, 1))
    return loss, grads


def trainable_tensors(model, freeze_dynamics):
    """
    Tensors the optimizer updates. With freeze_dynamics, dt_proj is zeroed
    so every channel keeps the constant step softplus(dt_bias), and the
    decay and step tensors are left out.
    """
    params = model.named_tensors()
    if not freeze_dynamics:
        return params
    for block in model.blocks:
        block.ssm.dt_proj[...] = 0.0
    return {k: v for k, v in params.items() if not k.endswith(DYNAMICS_TENSORS)}


def clip_grad_norm(grads, max_norm):
    total = float(np.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values())))
    if max_norm and total > max_norm:
        factor = max_norm / (total + 1e-12)
        grads = {k: g * factor for k, g in grads.items()}
    return grads, total


def train_toy_model(task, spec=None, seed=0, cfg=None):
    """
    Train a MambaModel with Adam until validation accuracy reaches the target
    or the iteration cap. The best validation checkpoint is returned.
    Args:
        task (ToyTask): Data generator.
        spec (ModelSpec | None): Architecture; defaults sized to the task.
        seed (int): Seeds initialization, data and minibatch order.
        cfg (TrainConfig | None): Optimizer settings.
    Returns:
        TrainResult: Trained model and validation metrics.
    """
    cfg = cfg or TrainConfig()
    spec = spec or ModelSpec(seq_len=task.seq_len, d_input=task.d_input)
    check_desk_scale(spec)
    if spec.seq_len != task.seq_len or spec.d_input != task.d_input:
        raise TrainingError(
            f"model expects (L={spec.seq_len}, d_input={spec.d_input}), "
            f"task produces (L={task.seq_len}, d_input={task.d_input})"
        )
    if spec.n_classes != 2:
        raise TrainingError("toy tasks are binary; n_classes must be 2")

    (x_tr, y_tr), (x_val, y_val) = task.splits(seed)
    model = MambaModel.init_random(spec, seed, cfg.dt_range)
    params = trainable_tensors(model, cfg.freeze_dynamics)
    adam = Adam(params, cfg.lr)
    rng = make_rng(seed + 1)
    batch = min(cfg.batch_size, len(x_tr))

    best = (-1.0, float("inf"), model.copy(), 0)
    history = []
    steps = tqdm(
        range(cfg.max_iterations), desc="train-toy",
        disable=settings.progress_disabled(), leave=False,
    )
    for it in steps:
        idx = rng.choice(len(x_tr), size=batch, replace=False)
        loss, grads = model_backward(model, trace_model(model, x_tr[idx]), y_tr[idx])
        if not np.isfinite(loss):
            raise TrainingError(f"non-finite training loss at iteration {it}")
        grads, norm = clip_grad_norm({k: grads[k] for k in params}, cfg.grad_clip)
        lr = cosine_lr(cfg.lr, it, cfg.max_iterations) if cfg.cosine else cfg.lr
        adam.step(grads, lr)
        if (it + 1) % cfg.eval_every == 0 or it == cfg.max_iterations - 1:
            acc, val_loss = evaluate(model, x_val, y_val)
            history.append((it + 1, loss, acc, val_loss))
            if acc > best[0]:
                best = (acc, val_loss, model.copy(), it + 1)
            logger.debug("iter %d loss %.4f val acc %.4f", it + 1, loss, acc)
            if acc >= cfg.target_accuracy:
                break

    acc, val_loss, best_model, iterations = best
    if acc < cfg.min_accuracy:
        raise TrainingError(
            f"task too hard for spec: best val accuracy {acc:.3f} < {cfg.min_accuracy} "
            f"after {cfg.max_iterations} iterations"
        )
    logger.info("trained %s task: val accuracy %.4f after %d iterations", task.kind, acc, iterations)
    return TrainResult(best_model, acc, val_loss, iterations, history)
