"""
ssm_engine.py: Floating-point and fake-quantized forward passes for the
selective SSM, the Mamba block around it, and a small classifier built from
those blocks.

Arithmetic follows the dtype of the input (float32 for real runs, float64
for gradient checks). The scan is sequential in time; batch and (D, N)
channels are vectorized.
"""

import json
import logging
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from errors import EngineError
from quantizers import QuantKind, QuantParams, affine_codes, fake_quant
from quantizers import log2_fake_quant, ltsq_fake_quant, shift_decay, tgq_group_index
from tensor_core import load_tensor, make_rng, save_tensor

logger = logging.getLogger(__name__)

SSM_ACTIVATIONS = ("x_t", "delta_t", "B_t", "C_t", "abar_t", "h_t")
BLOCK_ACTIVATIONS = (
    "in_proj.act",
    "conv1d.act",
    "x_t",
    "dt_proj.act",
    "delta_t",
    "B_t",
    "C_t",
    "abar_t",
    "h_t",
    "out_proj.act",
)
WEIGHT_NAMES = (
    "in_proj.weight",
    "conv1d.weight",
    "x_proj.weight",
    "dt_proj.weight",
    "out_proj.weight",
    "A",
    "D",
)
QUANTIZER_NAMES = BLOCK_ACTIVATIONS + WEIGHT_NAMES
IO_NAMES = ("patch_embed.act", "patch_embed.weight", "head.act", "head.weight")

TARGET_ALIASES = {"A̅_t": "abar_t", "Δ_t": "delta_t", "h": "h_t", "abar": "abar_t"}
# Mamba step-size init range, log-uniform
DT_RANGE = (1e-3, 1e-1)


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def silu(x):
    return x * sigmoid(x)


def silu_grad(x):
    sg = sigmoid(x)
    return sg * (1.0 + x * (1.0 - sg))


def softplus(x):
    return np.logaddexp(0.0, x)


def causal_conv1d(x, weight, bias):
    """
    Depthwise causal convolution over time; tap k reads x[t - k].
    Args:
        x (np.ndarray): (B, L, D) input.
        weight (np.ndarray): (D, K) kernel.
        bias (np.ndarray): (D,) bias.
    """
    L = x.shape[1]
    out = np.zeros(x.shape, dtype=np.result_type(x, weight, bias)) + bias
    for k in range(min(weight.shape[1], L)):
        out[:, k:] += weight[:, k] * x[:, : L - k]
    return out


# --------------------------------------------------------------------------
# Parameters


@dataclass
class ModelSpec:
    n_blocks: int = 1
    seq_len: int = 32
    d_input: int = 4
    d_model: int = 8
    d_inner: int = 16
    d_state: int = 4
    d_conv: int = 4
    dt_rank: int = 2
    n_classes: int = 2

    def __post_init__(self):
        for f in fields(self):
            value = getattr(self, f.name)
            if int(value) < 1:
                raise EngineError(f"model spec {f.name} must be >= 1, got {value}")
            setattr(self, f.name, int(value))

    def to_dict(self):
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise EngineError(f"unknown model spec keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class SsmParams:
    """
    Selective SSM parameters in the Mamba layout.
    x_proj maps the SSM input to [dt_low (R) | B (N) | C (N)]; dt_proj lifts
    dt_low back to D channels before softplus. A = -exp(A_log) < 0.
    """
    A_log: np.ndarray  # (D, N)
    D: np.ndarray  # (D,)
    x_proj: np.ndarray  # (D, R + 2N)
    dt_proj: np.ndarray  # (R, D)
    dt_bias: np.ndarray  # (D,)

    def __post_init__(self):
        d, n = self.A_log.shape
        r = self.dt_proj.shape[0]
        if self.D.shape != (d,) or self.dt_bias.shape != (d,):
            raise EngineError("SSM skip/bias shapes do not match d_inner")
        if self.x_proj.shape != (d, r + 2 * n):
            raise EngineError(f"x_proj shape {self.x_proj.shape} != {(d, r + 2 * n)}")
        if self.dt_proj.shape != (r, d):
            raise EngineError(f"dt_proj shape {self.dt_proj.shape} != {(r, d)}")

    @property
    def A(self):
        return -np.exp(self.A_log)

    @property
    def d_inner(self):
        return self.A_log.shape[0]

    @property
    def d_state(self):
        return self.A_log.shape[1]

    @property
    def dt_rank(self):
        return self.dt_proj.shape[0]

    @property
    def W_B(self):
        r = self.dt_rank
        return self.x_proj[:, r : r + self.d_state]

    @property
    def W_C(self):
        return self.x_proj[:, self.dt_rank + self.d_state :]


@dataclass
class MambaBlockWeights:
    in_proj: np.ndarray  # (M, 2D)
    conv_weight: np.ndarray  # (D, K)
    conv_bias: np.ndarray  # (D,)
    out_proj: np.ndarray  # (D, M)
    ssm: SsmParams

    def __post_init__(self):
        d = self.ssm.d_inner
        if self.in_proj.shape[1] != 2 * d:
            raise EngineError(f"in_proj must produce {2 * d} channels")
        if self.conv_weight.ndim != 2 or self.conv_weight.shape[0] != d or self.conv_weight.shape[1] < 1:
            raise EngineError("conv kernel must be (d_inner, K) with K >= 1")
        if self.out_proj.shape[0] != d:
            raise EngineError("out_proj input width must equal d_inner")

    @property
    def d_model(self):
        return self.in_proj.shape[0]

    @property
    def d_inner(self):
        return self.ssm.d_inner

    @classmethod
    def init_random(cls, spec, rng, dt_range=DT_RANGE):
        m, d, n, k, r = spec.d_model, spec.d_inner, spec.d_state, spec.d_conv, spec.dt_rank
        lo, hi = dt_range
        if not 0.0 < lo <= hi:
            raise EngineError(f"dt range {dt_range} must satisfy 0 < min <= max")
        dt = np.exp(rng.uniform(np.log(lo), np.log(hi), d))
        f32 = np.float32
        ssm = SsmParams(
            A_log=np.log(np.tile(np.arange(1, n + 1, dtype=np.float64), (d, 1))).astype(f32),
            D=np.ones(d, dtype=f32),
            x_proj=rng.normal(0.0, d**-0.5, (d, r + 2 * n)).astype(f32),
            dt_proj=rng.uniform(-(r**-0.5), r**-0.5, (r, d)).astype(f32),
            # inverse softplus of dt
            dt_bias=(dt + np.log(-np.expm1(-dt))).astype(f32),
        )
        return cls(
            in_proj=rng.normal(0.0, m**-0.5, (m, 2 * d)).astype(f32),
            conv_weight=rng.uniform(-(k**-0.5), k**-0.5, (d, k)).astype(f32),
            conv_bias=np.zeros(d, dtype=f32),
            out_proj=rng.normal(0.0, d**-0.5, (d, m)).astype(f32),
            ssm=ssm,
        )

    def named_tensors(self):
        """Trainable FP tensors by name; the arrays are shared, not copied."""
        return {
            "in_proj.weight": self.in_proj,
            "conv1d.weight": self.conv_weight,
            "conv1d.bias": self.conv_bias,
            "x_proj.weight": self.ssm.x_proj,
            "dt_proj.weight": self.ssm.dt_proj,
            "dt_proj.bias": self.ssm.dt_bias,
            "A_log": self.ssm.A_log,
            "D": self.ssm.D,
            "out_proj.weight": self.out_proj,
        }

    @classmethod
    def from_named(cls, t):
        return cls(
            in_proj=t["in_proj.weight"],
            conv_weight=t["conv1d.weight"],
            conv_bias=t["conv1d.bias"],
            out_proj=t["out_proj.weight"],
            ssm=SsmParams(
                A_log=t["A_log"],
                D=t["D"],
                x_proj=t["x_proj.weight"],
                dt_proj=t["dt_proj.weight"],
                dt_bias=t["dt_proj.bias"],
            ),
        )

    def quantized_tensors(self):
        """FP values seen by the weight quantizers."""
        return {
            "in_proj.weight": self.in_proj,
            "conv1d.weight": self.conv_weight,
            "x_proj.weight": self.ssm.x_proj,
            "dt_proj.weight": self.ssm.dt_proj,
            "out_proj.weight": self.out_proj,
            "A": self.ssm.A,
            "D": self.ssm.D,
        }

    def astype(self, dtype):
        return MambaBlockWeights.from_named(
            {k: np.array(v, dtype=dtype) for k, v in self.named_tensors().items()}
        )


@dataclass
class QuantizerAssignment:
    """
    QuantParams for every quantized tensor of one block, plus the routing
    outcome of the decay-factor quantizer.
    """
    params: dict
    abar_route: QuantKind = QuantKind.UNIFORM

    def __post_init__(self):
        self.abar_route = QuantKind(self.abar_route)
        unknown = set(self.params) - set(QUANTIZER_NAMES)
        if unknown:
            raise EngineError(f"unknown quantizer names: {sorted(unknown)}")

    def require(self, name):
        try:
            return self.params[name]
        except KeyError:
            raise EngineError(f"missing assignment for {name}") from None

    @classmethod
    def passthrough(cls):
        return cls({name: QuantParams.passthrough() for name in QUANTIZER_NAMES})

    def replace(self, **updates):
        params = dict(self.params)
        params.update(updates)
        route = self.abar_route
        if "abar_t" in updates:
            route = QuantKind.LTSQ if updates["abar_t"].kind == QuantKind.LTSQ else QuantKind.UNIFORM
        return QuantizerAssignment(params, route)

    def learnable_names(self, include_weights=True):
        names = []
        for name in QUANTIZER_NAMES:
            p = self.params.get(name)
            if p is None or not p.learnable:
                continue
            if name in WEIGHT_NAMES and not include_weights:
                continue
            names.append(name)
        return names

    def scales(self, names=None):
        names = self.learnable_names() if names is None else names
        return {name: np.array(self.params[name].scales, dtype=np.float64) for name in names}

    def with_scales(self, scales):
        params = dict(self.params)
        for name, values in scales.items():
            params[name] = params[name].with_scales(values)
        return QuantizerAssignment(params, self.abar_route)

    def to_dict(self):
        return {
            "abar_route": self.abar_route.value,
            "params": {name: p.to_dict() for name, p in self.params.items()},
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            {name: QuantParams.from_dict(p) for name, p in d["params"].items()},
            d.get("abar_route", "uniform"),
        )


@dataclass
class ModelAssignment:
    blocks: list
    io: dict = field(default_factory=dict)

    @classmethod
    def passthrough(cls, n_blocks):
        return cls([QuantizerAssignment.passthrough() for _ in range(n_blocks)])

    def to_dict(self):
        return {
            "blocks": [qa.to_dict() for qa in self.blocks],
            "io": {name: p.to_dict() for name, p in self.io.items()},
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            [QuantizerAssignment.from_dict(b) for b in d["blocks"]],
            {name: QuantParams.from_dict(p) for name, p in d.get("io", {}).items()},
        )


# --------------------------------------------------------------------------
# Fake-quant sites


@dataclass
class QuantSite:
    """One application of a quantizer during a forward pass."""
    name: str
    params: QuantParams
    x: np.ndarray
    codes: np.ndarray
    in_range: np.ndarray
    xhat: np.ndarray
    group: int = 0

    @property
    def scale(self):
        return self.params.scales[self.group]

    @property
    def zero_point(self):
        return self.params.zero_points[self.group]


def quantize_site(name, p, x, group=0):
    x = np.asarray(x)
    if p.kind in (QuantKind.UNIFORM, QuantKind.TGQ):
        s, z = p.scales[group], p.zero_points[group]
        q_raw, q = affine_codes(x, s, z, p.qmax)
        in_range = (q_raw >= 0) & (q_raw <= p.qmax)
        xhat = (s * (q - z)).astype(x.dtype)
        return QuantSite(name, p, x, q, in_range, xhat, group)
    if p.kind == QuantKind.LTSQ:
        qt, xhat = ltsq_fake_quant(x, p.bits)
        return QuantSite(name, p, x, qt.codes, (x >= 0) & (x < 1), xhat)
    qt, xhat = log2_fake_quant(x, p.bits)
    return QuantSite(name, p, x, qt.codes, x <= 1, xhat)


def replay_site(site, p, x, grad_mode="lsq"):
    """
    Re-evaluate a site with its codes frozen at the recorded pass.
    Inside the range the output follows x one-for-one; the scale enters
    linearly, so derivatives equal the straight-through ones.
    """
    if p.kind in (QuantKind.UNIFORM, QuantKind.TGQ):
        s = p.scales[site.group]
        z = site.zero_point
        clipped = s * (site.codes - z)
        if grad_mode == "lsq":
            inside = x + (site.xhat - site.x) * (s / site.scale)
        else:
            inside = x + (clipped - site.x)
        return np.where(site.in_range, inside, clipped).astype(x.dtype)
    return np.where(site.in_range, x + (site.xhat - site.x), site.xhat).astype(x.dtype)


class QuantContext:
    """
    Applies a QuantizerAssignment inside one forward pass and keeps every
    quantization site for the backward pass. With `frozen` set, sites are
    replayed from an earlier pass instead of re-quantized.
    """

    def __init__(self, assignment=None, frozen=None, grad_mode="lsq"):
        self.assignment = assignment
        self.frozen = frozen
        self.grad_mode = grad_mode
        self.sites = {}

    def params(self, name):
        if self.assignment is None:
            return None
        p = self.assignment.require(name)
        return p if p.enabled else None

    def __call__(self, name, x, key=None, group=0):
        p = self.params(name)
        if p is None:
            return x
        key = name if key is None else key
        if self.frozen is not None:
            if key not in self.frozen:
                raise EngineError(f"no recorded site for {key}")
            return replay_site(self.frozen[key], p, x, self.grad_mode)
        site = quantize_site(name, p, x, group)
        self.sites[key] = site
        return site.xhat

    def hidden_groups(self, seq_len):
        p = self.params("h_t")
        if p is None or p.kind != QuantKind.TGQ:
            return [0] * seq_len
        if p.seq_length != seq_len:
            raise EngineError(f"TGQ seq_length {p.seq_length} != sequence length {seq_len}")
        return [tgq_group_index(t, p.group_length, seq_len) for t in range(seq_len)]

    def shift_enabled(self):
        abar = self.params("abar_t")
        hidden = self.params("h_t")
        return (
            self.frozen is None
            and abar is not None
            and abar.kind == QuantKind.LTSQ
            and hidden is not None
            and hidden.kind in (QuantKind.UNIFORM, QuantKind.TGQ)
        )


# --------------------------------------------------------------------------
# Selective scan


def discretize(delta, A, B, strict=True):
    """
    Zero-order-hold style discretization used by Mamba.
    Args:
        delta (np.ndarray): Step sizes, (B, L, D) or broadcastable.
        A (np.ndarray): Continuous decay, (D, N) or broadcastable, negative.
        B (np.ndarray): Input matrix, (B, L, N) or broadcastable.
        strict (bool): Reject nonpositive delta; the quantized path turns
            this off because a quantized step may round to zero.
    Returns:
        (np.ndarray, np.ndarray): abar = exp(delta*A), bbar = delta*B.
    """
    delta = np.asarray(delta)
    A = np.asarray(A)
    B = np.asarray(B)
    if strict:
        if np.any(delta <= 0):
            raise EngineError("nonpositive delta")
        if np.any(A >= 0):
            raise EngineError("A must be strictly negative")
    if delta.ndim == 3 and A.ndim == 2:
        return np.exp(delta[..., None] * A), delta[..., None] * B[:, :, None, :]
    return np.exp(delta * A), delta * B


@dataclass
class SsmTrace:
    u: np.ndarray
    u_hat: np.ndarray
    x_proj: np.ndarray
    dtl: np.ndarray
    dtl_hat: np.ndarray
    dt_proj: np.ndarray
    dpre: np.ndarray
    delta: np.ndarray
    delta_hat: np.ndarray
    Bt: np.ndarray
    B_hat: np.ndarray
    Ct: np.ndarray
    C_hat: np.ndarray
    A: np.ndarray
    A_hat: np.ndarray
    D_hat: np.ndarray
    abar: np.ndarray
    abar_hat: np.ndarray
    bbar: np.ndarray
    decay: np.ndarray
    h_tilde: np.ndarray
    h_hat: np.ndarray
    y: np.ndarray


def _ssm_forward(u, ssm, ctx, use_shift=False):
    u = np.asarray(u)
    if u.ndim != 3 or u.shape[2] != ssm.d_inner:
        raise EngineError(f"shape mismatch: SSM input {u.shape} for d_inner={ssm.d_inner}")
    bsz, L, d = u.shape
    n, r = ssm.d_state, ssm.dt_rank

    u_hat = ctx("x_t", u)
    x_proj = ctx("x_proj.weight", ssm.x_proj)
    xdbl = u_hat @ x_proj
    dtl, Bt, Ct = xdbl[..., :r], xdbl[..., r : r + n], xdbl[..., r + n :]
    dtl_hat = ctx("dt_proj.act", dtl)
    dt_proj = ctx("dt_proj.weight", ssm.dt_proj)
    dpre = dtl_hat @ dt_proj + ssm.dt_bias
    delta = softplus(dpre)
    delta_hat = ctx("delta_t", delta)
    B_hat = ctx("B_t", Bt)
    C_hat = ctx("C_t", Ct)
    A = ssm.A.astype(u.dtype)
    A_hat = ctx("A", A)
    D_hat = ctx("D", ssm.D)

    abar, bbar = discretize(delta_hat, A_hat, B_hat, strict=ctx.assignment is None)
    abar_hat = ctx("abar_t", abar)

    dtype = np.result_type(abar_hat, bbar, u_hat)
    h_tilde = np.empty((bsz, L, d, n), dtype=dtype)
    h_hat = np.empty_like(h_tilde)
    decay = np.zeros_like(h_tilde)
    groups = ctx.hidden_groups(L)
    shift = use_shift and ctx.shift_enabled()
    h_prev = np.zeros((bsz, d, n), dtype=dtype)
    for t in range(L):
        if t > 0:
            if shift:
                site = ctx.sites[("h_t", t - 1)]
                v = (site.codes - site.zero_point).astype(np.int64)
                aq = ctx.sites["abar_t"].codes[:, t]
                decay[:, t] = shift_decay(v, aq, site.scale, dtype=dtype)
            else:
                decay[:, t] = abar_hat[:, t] * h_prev
        h_tilde[:, t] = decay[:, t] + bbar[:, t] * u_hat[:, t, :, None]
        h_prev = ctx("h_t", h_tilde[:, t], key=("h_t", t), group=groups[t])
        h_hat[:, t] = h_prev

    y = np.einsum("bldn,bln->bld", h_hat, C_hat) + D_hat * u_hat
    return SsmTrace(
        u=u, u_hat=u_hat, x_proj=x_proj, dtl=dtl, dtl_hat=dtl_hat, dt_proj=dt_proj,
        dpre=dpre, delta=delta, delta_hat=delta_hat, Bt=Bt, B_hat=B_hat, Ct=Ct,
        C_hat=C_hat, A=A, A_hat=A_hat, D_hat=D_hat, abar=abar, abar_hat=abar_hat,
        bbar=bbar, decay=decay, h_tilde=h_tilde, h_hat=h_hat, y=y,
    )


def ssm_scan_fp(x, p):
    """
    Floating-point selective scan with h_0 = 0.
    Args:
        x (np.ndarray): SSM input (B, L, D).
        p (SsmParams): SSM parameters.
    Returns:
        (np.ndarray, SsmTrace): Output (B, L, D) and the recorded activations.
    """
    trace = _ssm_forward(x, p, QuantContext())
    return trace.y, trace


def ssm_scan_quant(x, p, qa, use_shift=False):
    """
    Fake-quantized selective scan. Every named activation passes through its
    quantizer; h_t is re-quantized (per TGQ group) before feeding step t+1.
    With use_shift and LtSQ routing the decay is applied on integer codes.
    """
    if qa is None:
        raise EngineError("missing assignment for quantized scan")
    return _ssm_forward(x, p, QuantContext(qa), use_shift).y


# --------------------------------------------------------------------------
# Mamba block


@dataclass
class BlockTrace:
    block: MambaBlockWeights
    ctx: QuantContext
    x: np.ndarray
    x_hat: np.ndarray
    in_proj: np.ndarray
    xi: np.ndarray
    xi_hat: np.ndarray
    conv_weight: np.ndarray
    c: np.ndarray
    z: np.ndarray
    ssm: SsmTrace
    g: np.ndarray
    g_hat: np.ndarray
    out_proj: np.ndarray
    out: np.ndarray

    def activations(self):
        """FP values seen by each activation quantizer (h_t before re-quantization)."""
        s = self.ssm
        return {
            "in_proj.act": self.x,
            "conv1d.act": self.xi,
            "x_t": s.u,
            "dt_proj.act": s.dtl,
            "delta_t": s.delta,
            "B_t": s.Bt,
            "C_t": s.Ct,
            "abar_t": s.abar,
            "h_t": s.h_tilde,
            "out_proj.act": self.g,
        }


def trace_block(x, w, qa=None, use_shift=False, frozen=None, grad_mode="lsq"):
    """
    Forward one Mamba block and keep everything the backward pass needs.
    in_proj -> causal conv + SiLU -> selective scan -> SiLU gate -> out_proj.
    Args:
        x (np.ndarray): Block input (B, L, M).
        w (MambaBlockWeights): Block weights.
        qa (QuantizerAssignment | None): Quantizers; None runs in FP.
        use_shift (bool): Integer shift decay when A̅ is LtSQ-routed.
        frozen (dict | None): Sites of a reference pass to replay.
        grad_mode (str): "lsq" or "exact"; only affects replay.
    Returns:
        BlockTrace: Intermediates with the output in `out`.
    """
    x = np.asarray(x)
    if x.ndim != 3 or x.shape[2] != w.d_model:
        raise EngineError(f"shape mismatch: block input {x.shape} for d_model={w.d_model}")
    ctx = QuantContext(qa, frozen=frozen, grad_mode=grad_mode)
    d = w.d_inner
    x_hat = ctx("in_proj.act", x)
    in_proj = ctx("in_proj.weight", w.in_proj)
    xz = x_hat @ in_proj
    xi, z = xz[..., :d], xz[..., d:]
    xi_hat = ctx("conv1d.act", xi)
    conv_weight = ctx("conv1d.weight", w.conv_weight)
    c = causal_conv1d(xi_hat, conv_weight, w.conv_bias)
    ssm = _ssm_forward(silu(c), w.ssm, ctx, use_shift)
    g = ssm.y * silu(z)
    g_hat = ctx("out_proj.act", g)
    out_proj = ctx("out_proj.weight", w.out_proj)
    out = g_hat @ out_proj
    return BlockTrace(
        block=w, ctx=ctx, x=x, x_hat=x_hat, in_proj=in_proj, xi=xi, xi_hat=xi_hat,
        conv_weight=conv_weight, c=c, z=z, ssm=ssm, g=g, g_hat=g_hat,
        out_proj=out_proj, out=out,
    )


def mamba_block_forward(x, w, qa=None, use_shift=False):
    return trace_block(x, w, qa, use_shift=use_shift).out


# --------------------------------------------------------------------------
# Classifier model


@dataclass
class MambaModel:
    """Input projection, residual Mamba blocks, mean pooling, linear head."""
    spec: ModelSpec
    embed_weight: np.ndarray  # (d_input, M)
    embed_bias: np.ndarray  # (M,)
    blocks: list
    head_weight: np.ndarray  # (M, n_classes)
    head_bias: np.ndarray  # (n_classes,)

    @classmethod
    def init_random(cls, spec, seed=0, dt_range=DT_RANGE):
        rng = make_rng(seed)
        f32 = np.float32
        return cls(
            spec=spec,
            embed_weight=rng.normal(0.0, spec.d_input**-0.5, (spec.d_input, spec.d_model)).astype(f32),
            embed_bias=np.zeros(spec.d_model, dtype=f32),
            blocks=[MambaBlockWeights.init_random(spec, rng, dt_range) for _ in range(spec.n_blocks)],
            head_weight=rng.normal(0.0, 0.1 * spec.d_model**-0.5, (spec.d_model, spec.n_classes)).astype(f32),
            head_bias=np.zeros(spec.n_classes, dtype=f32),
        )

    def named_tensors(self):
        out = {
            "patch_embed.weight": self.embed_weight,
            "patch_embed.bias": self.embed_bias,
            "head.weight": self.head_weight,
            "head.bias": self.head_bias,
        }
        for i, block in enumerate(self.blocks):
            for name, value in block.named_tensors().items():
                out[f"blocks.{i}.{name}"] = value
        return out

    @classmethod
    def from_named(cls, spec, tensors):
        blocks = []
        for i in range(spec.n_blocks):
            prefix = f"blocks.{i}."
            blocks.append(MambaBlockWeights.from_named(
                {k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)}
            ))
        return cls(
            spec=spec,
            embed_weight=tensors["patch_embed.weight"],
            embed_bias=tensors["patch_embed.bias"],
            blocks=blocks,
            head_weight=tensors["head.weight"],
            head_bias=tensors["head.bias"],
        )

    def copy(self):
        return MambaModel.from_named(
            self.spec, {k: np.array(v, copy=True) for k, v in self.named_tensors().items()}
        )


@dataclass
class ModelTrace:
    inputs: np.ndarray
    embedded: np.ndarray
    block_inputs: list
    block_traces: list
    final: np.ndarray
    pooled: np.ndarray
    logits: np.ndarray


def trace_model(model, x, quant=None, use_shift=False):
    x = np.asarray(x)
    if x.ndim != 3 or x.shape[2] != model.spec.d_input:
        raise EngineError(f"shape mismatch: model input {x.shape}")
    io = quant.io if quant is not None else {}
    if quant is not None and len(quant.blocks) != len(model.blocks):
        raise EngineError("assignment block count does not match the model")
    embedded = fake_quant(x, io.get("patch_embed.act")) @ fake_quant(
        model.embed_weight, io.get("patch_embed.weight")
    ) + model.embed_bias
    hidden = embedded
    block_inputs, block_traces = [], []
    for i, block in enumerate(model.blocks):
        qa = quant.blocks[i] if quant is not None else None
        tr = trace_block(hidden, block, qa, use_shift=use_shift)
        block_inputs.append(hidden)
        block_traces.append(tr)
        hidden = hidden + tr.out
    pooled = hidden.mean(axis=1)
    logits = fake_quant(pooled, io.get("head.act")) @ fake_quant(
        model.head_weight, io.get("head.weight")
    ) + model.head_bias
    return ModelTrace(x, embedded, block_inputs, block_traces, hidden, pooled, logits)


def model_forward(model, x, quant=None, use_shift=False):
    return trace_model(model, x, quant, use_shift).logits


def log_softmax(logits):
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def cross_entropy(logits, labels):
    logp = log_softmax(np.asarray(logits, dtype=np.float64))
    return float(-logp[np.arange(len(labels)), labels].mean())


def evaluate(model, x, y, quant=None, batch_size=256, use_shift=False):
    """
    Accuracy and mean cross-entropy of the classifier on (x, y).
    Returns:
        (float, float): accuracy in [0, 1], loss.
    """
    correct, loss_sum = 0, 0.0
    for start in range(0, len(x), batch_size):
        xb, yb = x[start : start + batch_size], y[start : start + batch_size]
        logits = model_forward(model, xb, quant, use_shift)
        correct += int((logits.argmax(axis=-1) == yb).sum())
        loss_sum += cross_entropy(logits, yb) * len(yb)
    return correct / len(x), loss_sum / len(x)


# --------------------------------------------------------------------------
# Model I/O


def save_model(model, directory):
    """
    Write a JSON manifest plus one tensor blob per named tensor.
    Args:
        model (MambaModel): Model to save.
        directory (str | Path): Target directory, created if missing.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    tensors = {}
    for name, value in model.named_tensors().items():
        fname = f"{name}.f32"
        save_tensor(directory / fname, value)
        tensors[name] = {"file": fname, "shape": list(np.shape(value))}
    manifest = {"spec": model.spec.to_dict(), "tensors": tensors}
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2))
    logger.info("saved model with %d tensors to %s", len(tensors), directory)


def load_model(directory):
    directory = Path(directory)
    manifest_path = directory / "manifest.json"
    if not manifest_path.exists():
        raise EngineError(f"no model manifest in {directory}")
    manifest = json.loads(manifest_path.read_text())
    spec = ModelSpec.from_dict(manifest["spec"])
    tensors = {
        name: load_tensor(directory / entry["file"])
        for name, entry in manifest["tensors"].items()
    }
    return MambaModel.from_named(spec, tensors)


# --------------------------------------------------------------------------
# Sensitivity


@dataclass
class SensitivityResult:
    target: str
    bits: int | None
    fp_accuracy: float
    quant_accuracy: float
    accuracy_drop: float
    loss_increase: float

    @property
    def key(self):
        return (self.accuracy_drop, self.loss_increase)

    def to_dict(self):
        return dict(self.__dict__)


def sensitivity_sweep(model, data, target, bits, calibration, use_ltsq=False):
    """
    Quantize a single SSM activation of every block, keep the rest FP and
    measure how much the classifier degrades.
    Args:
        model (MambaModel): Trained FP model.
        data (tuple): (x, y) evaluation set.
        target (str): One of SSM_ACTIVATIONS.
        bits (int | None): Bit width; None keeps the target in FP.
        calibration (ModelCalibration): FP statistics; each block entry
            supplies Percentile-initialized params via site_params.
        use_ltsq (bool): Quantize abar_t with LtSQ instead of uniform.
    Returns:
        SensitivityResult: Accuracy drop and loss increase vs FP.
    """
    target = TARGET_ALIASES.get(target, target)
    if target not in SSM_ACTIVATIONS:
        raise EngineError(f"unknown target {target!r}; expected one of {SSM_ACTIVATIONS}")
    x, y = data
    fp_acc, fp_loss = evaluate(model, x, y)
    if bits is None:
        return SensitivityResult(target, None, fp_acc, fp_acc, 0.0, 0.0)
    if len(calibration.blocks) != len(model.blocks):
        raise EngineError(
            f"calibration covers {len(calibration.blocks)} block(s), model has {len(model.blocks)}"
        )

    blocks = []
    for cal in calibration.blocks:
        if target == "abar_t" and use_ltsq:
            p = QuantParams(QuantKind.LTSQ, bits)
        else:
            p = cal.site_params(target, bits)
        blocks.append(QuantizerAssignment.passthrough().replace(**{target: p}))
    q_acc, q_loss = evaluate(model, x, y, ModelAssignment(blocks))
    result = SensitivityResult(target, bits, fp_acc, q_acc, fp_acc - q_acc, q_loss - fp_loss)
    logger.info(
        "sensitivity %s@%d: acc %.4f -> %.4f (loss +%.4f)",
        target, bits, fp_acc, q_acc, q_loss - fp_loss,
    )
    return result
