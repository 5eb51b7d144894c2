"""
reconstruction.py: Gradients through the fake-quantized Mamba block and
block-wise finetuning of quantizer scales.

The backward pass is written out by hand for the fixed block computation:
out-projection, SiLU gate, selective scan (backward through time), causal
conv, in-projection. Rounding is bypassed with straight-through estimators.
The same pass yields FP weight gradients, which toy training reuses.
"""

import logging
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from tqdm import tqdm

import settings
from errors import ReconstructionError
from quantizers import QuantKind
from ssm_engine import ModelAssignment, quantize_site, sigmoid, silu, silu_grad, trace_block
from tensor_core import make_rng

logger = logging.getLogger(__name__)

GRAD_MODES = ("lsq", "exact")
SCALE_FLOOR = 1e-8


@dataclass
class ReconConfig:
    iterations: int = 500
    lr: float = 4e-4
    betas: tuple = (0.9, 0.999)
    batch_size: int = 2
    seed: int = 0
    learn_weight_scales: bool = True
    grad_mode: str = "lsq"
    eval_every: int = 50
    enabled: bool = True

    def __post_init__(self):
        self.betas = tuple(float(b) for b in self.betas)
        if self.iterations < 1:
            raise ReconstructionError("iterations must be >= 1")
        if self.lr < 0:
            raise ReconstructionError("learning rate must be >= 0")
        if len(self.betas) != 2 or not all(0.0 < b < 1.0 for b in self.betas):
            raise ReconstructionError(f"adam betas {self.betas} must lie in (0, 1)")
        if self.batch_size < 1 or self.eval_every < 1:
            raise ReconstructionError("batch_size and eval_every must be >= 1")
        if self.grad_mode not in GRAD_MODES:
            raise ReconstructionError(f"grad_mode must be one of {GRAD_MODES}")

    def to_dict(self):
        return {
            "iterations": self.iterations,
            "lr": self.lr,
            "betas": list(self.betas),
            "batch_size": self.batch_size,
            "seed": self.seed,
            "learn_weight_scales": self.learn_weight_scales,
            "grad_mode": self.grad_mode,
            "eval_every": self.eval_every,
            "enabled": self.enabled,
        }


@dataclass
class ScaleGradients:
    """Loss gradient per scale, keyed by quantizer name."""
    grads: dict = field(default_factory=dict)

    def add(self, name, index, value, size):
        if name not in self.grads:
            self.grads[name] = np.zeros(size, dtype=np.float64)
        self.grads[name][index] += value

    def get(self, name, size=1):
        return self.grads.get(name, np.zeros(size, dtype=np.float64))

    def __getitem__(self, name):
        return self.grads[name]

    def __contains__(self, name):
        return name in self.grads

    def names(self):
        return list(self.grads)

    def all_finite(self):
        return all(np.all(np.isfinite(g)) for g in self.grads.values())

    def to_dict(self):
        return {name: g.tolist() for name, g in self.grads.items()}


@dataclass
class BlockGradients:
    d_input: np.ndarray
    weights: dict
    scales: ScaleGradients


def site_grads(site, mode="lsq"):
    """
    Local STE derivatives of one quantization site.
    Returns:
        (np.ndarray, np.ndarray | None): dxhat/dx and dxhat/ds per element;
        the second is None for parameter-free quantizers.
    """
    dx = site.in_range.astype(site.xhat.dtype)
    if site.params.kind not in (QuantKind.UNIFORM, QuantKind.TGQ):
        return dx, None
    clipped = site.codes - site.zero_point
    if mode == "lsq":
        inside = (site.xhat - site.x) / site.scale
    else:
        inside = clipped
    return dx, np.where(site.in_range, inside, clipped)


def ste_fake_quant_grads(x, p, group=0, mode="lsq"):
    """
    Straight-through derivatives of a fake quantizer at x.
    Inside the code range dxhat/dx = 1 and dxhat/ds = (xhat - x)/s ("lsq") or
    q - z ("exact", the derivative with codes held fixed); clipped elements
    get dxhat/dx = 0 and dxhat/ds = q_clip - z. LtSQ passes 1 inside [0, 1)
    and has no scale.
    """
    if mode not in GRAD_MODES:
        raise ReconstructionError(f"grad mode must be one of {GRAD_MODES}")
    site = quantize_site("ste", p, np.asarray(x), group)
    dx, ds = site_grads(site, mode)
    if ds is None:
        ds = np.zeros_like(dx)
    return dx, ds


def _site_backward(ctx, key, grad, scales, mode):
    site = ctx.sites.get(key)
    if site is None:
        return grad
    dx, ds = site_grads(site, mode)
    if ds is not None:
        scales.add(site.name, site.group, float(np.sum(grad * ds)), site.params.num_groups)
    return grad * dx


def conv_backward(d_out, x, weight):
    """Gradients of causal_conv1d w.r.t. input, kernel and bias."""
    L = x.shape[1]
    d_x = np.zeros(x.shape, dtype=np.result_type(d_out, weight))
    d_w = np.zeros(weight.shape, dtype=np.result_type(d_out, x))
    for k in range(min(weight.shape[1], L)):
        d_x[:, : L - k] += d_out[:, k:] * weight[:, k]
        d_w[:, k] = np.sum(d_out[:, k:] * x[:, : L - k], axis=(0, 1))
    return d_x, d_w, d_out.sum(axis=(0, 1))


def _ssm_backward(s, d_y, bwd, wg):
    L = s.u.shape[1]
    d_C_hat = np.einsum("bld,bldn->bln", d_y, s.h_hat)
    d_D_hat = np.sum(d_y * s.u_hat, axis=(0, 1))
    d_u_hat = d_y * s.D_hat
    d_h_direct = d_y[..., None] * s.C_hat[:, :, None, :]

    # backward through time; carry is dL/dh_hat[t-1] via the decay term
    d_abar_hat = np.zeros(s.h_tilde.shape, dtype=d_h_direct.dtype)
    d_bbar = np.zeros_like(d_abar_hat)
    carry = np.zeros_like(d_abar_hat[:, 0])
    for t in range(L - 1, -1, -1):
        d_h = bwd(("h_t", t), d_h_direct[:, t] + carry)
        if t > 0:
            d_abar_hat[:, t] = d_h * s.h_hat[:, t - 1]
            carry = d_h * s.abar_hat[:, t]
        d_bbar[:, t] = d_h * s.u_hat[:, t, :, None]
        d_u_hat[:, t] += np.sum(d_h * s.bbar[:, t], axis=-1)

    d_exp = bwd("abar_t", d_abar_hat) * s.abar
    d_delta_hat = np.sum(d_exp * s.A_hat, axis=-1) + np.sum(d_bbar * s.B_hat[:, :, None, :], axis=-1)
    d_A = bwd("A", np.einsum("bldn,bld->dn", d_exp, s.delta_hat))
    wg["A_log"] = d_A * s.A
    wg["D"] = bwd("D", d_D_hat)
    d_Bt = bwd("B_t", np.einsum("bldn,bld->bln", d_bbar, s.delta_hat))
    d_Ct = bwd("C_t", d_C_hat)

    d_dpre = bwd("delta_t", d_delta_hat) * sigmoid(s.dpre)
    wg["dt_proj.bias"] = d_dpre.sum(axis=(0, 1))
    wg["dt_proj.weight"] = bwd("dt_proj.weight", np.einsum("blr,bld->rd", s.dtl_hat, d_dpre))
    d_dtl = bwd("dt_proj.act", d_dpre @ s.dt_proj.T)

    d_xdbl = np.concatenate([d_dtl, d_Bt, d_Ct], axis=-1)
    wg["x_proj.weight"] = bwd("x_proj.weight", np.einsum("bld,ble->de", s.u_hat, d_xdbl))
    return bwd("x_t", d_u_hat + d_xdbl @ s.x_proj.T)


def block_backward(trace, d_out, mode="lsq"):
    """
    Reverse pass through one traced Mamba block.
    Args:
        trace (BlockTrace): Forward trace from ssm_engine.trace_block.
        d_out (np.ndarray): Loss gradient w.r.t. the block output.
        mode (str): Scale-derivative convention, "lsq" or "exact".
    Returns:
        BlockGradients: Input gradient, FP weight gradients (keyed like
        MambaBlockWeights.named_tensors) and scale gradients.
    """
    if trace is None:
        raise ReconstructionError("missing forward trace")
    if mode not in GRAD_MODES:
        raise ReconstructionError(f"grad mode must be one of {GRAD_MODES}")
    ctx = trace.ctx
    scales = ScaleGradients()
    wg = {}

    def bwd(key, grad):
        return _site_backward(ctx, key, grad, scales, mode)

    d_out = np.asarray(d_out)
    wg["out_proj.weight"] = bwd("out_proj.weight", np.einsum("bld,blm->dm", trace.g_hat, d_out))
    d_g = bwd("out_proj.act", d_out @ trace.out_proj.T)

    d_y = d_g * silu(trace.z)
    d_z = d_g * trace.ssm.y * silu_grad(trace.z)
    d_u = _ssm_backward(trace.ssm, d_y, bwd, wg)

    d_c = d_u * silu_grad(trace.c)
    d_xi_hat, d_conv_w, wg["conv1d.bias"] = conv_backward(d_c, trace.xi_hat, trace.conv_weight)
    wg["conv1d.weight"] = bwd("conv1d.weight", d_conv_w)
    d_xi = bwd("conv1d.act", d_xi_hat)

    d_xz = np.concatenate([d_xi, d_z], axis=-1)
    wg["in_proj.weight"] = bwd("in_proj.weight", np.einsum("blm,bld->md", trace.x_hat, d_xz))
    d_x = bwd("in_proj.act", d_xz @ trace.in_proj.T)
    return BlockGradients(d_x, wg, scales)


def backward_block(fp_out, trace, mode="lsq"):
    """
    Scale gradients of mse(trace.out, fp_out) for a traced quantized block.
    Args:
        fp_out (np.ndarray): Floating-point block output O_k.
        trace (BlockTrace): Quantized forward trace producing Ô_k.
    Returns:
        ScaleGradients: One entry per enabled uniform/TGQ quantizer.
    """
    if trace is None:
        raise ReconstructionError("missing forward trace")
    diff = trace.out - np.asarray(fp_out)
    return block_backward(trace, 2.0 * diff / diff.size, mode).scales


def finite_diff_grads(loss_fn, scales, eps, relative=False):
    """
    Central-difference gradient of loss_fn at the given scales.
    Args:
        loss_fn (callable): Maps {name: np.ndarray of scales} to a float.
        scales (dict): Point of evaluation.
        eps (float): Step; multiplied by |s| when relative is set.
    Returns:
        ScaleGradients: Same layout as the analytic gradients.
    """
    if eps <= 0:
        raise ReconstructionError("finite-difference step must be positive")
    base = {name: np.asarray(v, dtype=np.float64) for name, v in scales.items()}
    out = ScaleGradients()
    for name, values in base.items():
        grad = np.zeros_like(values)
        for i in range(values.size):
            step = eps * abs(values[i]) if relative else eps
            plus, minus = values.copy(), values.copy()
            plus[i] += step
            minus[i] -= step
            grad[i] = (loss_fn({**base, name: plus}) - loss_fn({**base, name: minus})) / (2 * step)
        out.grads[name] = grad
    return out


def frozen_block_loss(trace, fp_out, mode="lsq"):
    """
    Block loss as a function of the scales with every code frozen at
    `trace`. Central differences of this function reproduce the STE
    gradients exactly, including paths through other quantizers and the
    recurrence.
    """
    qa = trace.ctx.assignment
    fp_out = np.asarray(fp_out)

    def loss_fn(scales):
        replay = trace_block(
            trace.x, trace.block, qa.with_scales(scales), frozen=trace.ctx.sites, grad_mode=mode
        )
        return float(np.mean((replay.out - fp_out) ** 2))

    return loss_fn


class Adam:
    """
    Adam over a dict of numpy arrays, updated in place.
    State is kept in float64 regardless of the parameter dtype.
    """

    def __init__(self, params, lr=4e-4, betas=(0.9, 0.999), eps=1e-8):
        if not all(0.0 < b < 1.0 for b in betas):
            raise ReconstructionError(f"adam betas {betas} must lie in (0, 1)")
        self.params = params
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros(np.shape(v), dtype=np.float64) for k, v in params.items()}
        self.v = {k: np.zeros(np.shape(v), dtype=np.float64) for k, v in params.items()}

    def step(self, grads, lr=None):
        lr = self.lr if lr is None else lr
        b1, b2 = self.betas
        self.t += 1
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for name, grad in grads.items():
            g = np.asarray(grad, dtype=np.float64)
            self.m[name] = b1 * self.m[name] + (1.0 - b1) * g
            self.v[name] = b2 * self.v[name] + (1.0 - b2) * g * g
            update = lr * (self.m[name] / c1) / (np.sqrt(self.v[name] / c2) + self.eps)
            p = self.params[name]
            p -= update.astype(p.dtype)


def cosine_lr(base, t, total):
    """Cosine annealing from base at t=0 to 0 at t=total."""
    return base * 0.5 * (1.0 + np.cos(np.pi * t / total))


def batched_block_forward(x, block, qa=None, chunk=64):
    return np.concatenate(
        [trace_block(x[i : i + chunk], block, qa).out for i in range(0, len(x), chunk)]
    )


@dataclass
class ReconResult:
    assignment: object
    initial_loss: float
    final_loss: float
    curve: list
    learned: list

    def curve_frame(self):
        return pd.DataFrame(self.curve, columns=["iteration", "loss", "lr"])

    def write_curve(self, path):
        self.curve_frame().to_csv(path, index=False)

    def summary(self):
        return {
            "initial_loss": self.initial_loss,
            "final_loss": self.final_loss,
            "iterations": len(self.curve),
            "learned": list(self.learned),
        }


def reconstruct_block(block, assignment, calib_inputs, cfg, fp_out=None, label="block"):
    """
    Learn the scales of one block by minimizing mse(O_k, Ô_k).
    Args:
        block (MambaBlockWeights): Block weights (shared by FP and quantized paths).
        assignment (QuantizerAssignment): Initialized quantizers.
        calib_inputs (np.ndarray): FP inputs entering the block, (n, L, M).
        cfg (ReconConfig): Optimizer settings.
        fp_out (np.ndarray | None): Cached FP outputs for calib_inputs.
    Returns:
        ReconResult: Best-so-far assignment, losses and the loss curve.
    """
    x = np.asarray(calib_inputs)
    if fp_out is None:
        fp_out = batched_block_forward(x, block)
    names = assignment.learnable_names(cfg.learn_weight_scales)
    scales = assignment.scales(names)
    adam = Adam(scales, cfg.lr, cfg.betas)
    rng = make_rng(cfg.seed)
    batch = min(cfg.batch_size, len(x))

    def full_loss(scale_values):
        out = batched_block_forward(x, block, assignment.with_scales(scale_values))
        return float(np.mean((out - fp_out) ** 2))

    initial = full_loss(scales)
    best_loss = initial
    best = {k: v.copy() for k, v in scales.items()}
    curve = []
    iterations = tqdm(
        range(cfg.iterations), desc=f"reconstruct {label}",
        disable=settings.progress_disabled(), leave=False,
    )
    for it in iterations:
        lr = cosine_lr(cfg.lr, it, cfg.iterations)
        idx = rng.choice(len(x), size=batch, replace=False)
        trace = trace_block(x[idx], block, assignment.with_scales(scales))
        diff = trace.out - fp_out[idx]
        loss = float(np.mean(diff**2))
        if not np.isfinite(loss):
            raise ReconstructionError(
                f"NaN loss at iteration {it} of {label}; scales: "
                + ", ".join(f"{k}={v.tolist()}" for k, v in scales.items())
            )
        grads = block_backward(trace, 2.0 * diff / diff.size, cfg.grad_mode).scales
        if not grads.all_finite():
            raise ReconstructionError(f"non-finite scale gradient at iteration {it} of {label}")
        adam.step({name: grads.get(name, scales[name].size) for name in names}, lr)
        for values in scales.values():
            np.maximum(values, SCALE_FLOOR, out=values)
        curve.append((it, loss, lr))
        if (it + 1) % cfg.eval_every == 0 or it == cfg.iterations - 1:
            current = full_loss(scales)
            if current < best_loss:
                best_loss = current
                best = {k: v.copy() for k, v in scales.items()}
    logger.info("%s: reconstruction mse %.6g -> %.6g", label, initial, best_loss)
    return ReconResult(assignment.with_scales(best), initial, best_loss, curve, names)


def reconstruct_model(model, quant, calibration, cfg):
    """
    Reconstruct every block in order, each on the FP inputs it sees.
    Returns:
        (ModelAssignment, list[ReconResult])
    """
    blocks, results = [], []
    for i, (block, qa) in enumerate(zip(model.blocks, quant.blocks)):
        result = reconstruct_block(
            block, qa, calibration.block_inputs[i], cfg, label=f"blocks.{i}"
        )
        blocks.append(result.assignment)
        results.append(result)
    return ModelAssignment(blocks, dict(quant.io)), results
