"""
quantizers.py: Fake-quantization kernels for selective SSMs.

Uniform affine, log2, long-tailed skewness (LtSQ) and temporal group (TGQ)
quantizers, plus the bit-shift decay used for integer state updates.
Rounding is round-half-to-even (np.rint) everywhere.
"""

from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np

from errors import QuantError
from tensor_core import median


class QuantKind(str, Enum):
    UNIFORM = "uniform"
    LOG2 = "log2"
    LTSQ = "ltsq"
    TGQ = "tgq"


def num_groups(seq_length, group_length):
    return max(1, seq_length // group_length)


@dataclass
class QuantParams:
    """
    State of one quantizer: bit width, kind and affine parameters.
    Uniform uses one (scale, zero point); TGQ one per time group; LtSQ and
    log2 none. Disabled parameters turn every fake-quant into a pass-through.
    """
    kind: QuantKind
    bits: int
    scales: list = field(default_factory=list)
    zero_points: list = field(default_factory=list)
    group_length: int | None = None
    seq_length: int | None = None
    enabled: bool = True

    def __post_init__(self):
        self.kind = QuantKind(self.kind)
        self.bits = int(self.bits)
        self.scales = [float(s) for s in self.scales]
        self.zero_points = [int(z) for z in self.zero_points]
        if not 2 <= self.bits <= 8:
            raise QuantError(f"bit width {self.bits} outside [2, 8]")
        if len(self.scales) != len(self.zero_points):
            raise QuantError("scales and zero points must be parallel lists")
        if any(not np.isfinite(s) or s <= 0 for s in self.scales):
            raise QuantError("nonpositive scale")
        if any(z < 0 or z > self.qmax for z in self.zero_points):
            raise QuantError(f"zero point outside [0, {self.qmax}]")
        if self.kind in (QuantKind.LTSQ, QuantKind.LOG2):
            if self.scales:
                raise QuantError(f"{self.kind.value} quantizer is parameter-free")
        elif self.kind == QuantKind.UNIFORM:
            if len(self.scales) != 1:
                raise QuantError("uniform quantizer needs exactly one scale")
        else:
            if not self.group_length or self.group_length < 1:
                raise QuantError("TGQ needs group_length >= 1")
            if not self.seq_length or self.seq_length < 1:
                raise QuantError("TGQ needs seq_length >= 1")
            if len(self.scales) != self.num_groups:
                raise QuantError(
                    f"scale count mismatch: {len(self.scales)} scales for "
                    f"{self.num_groups} groups"
                )

    @property
    def qmax(self):
        return (1 << self.bits) - 1

    @property
    def num_groups(self):
        if self.kind != QuantKind.TGQ:
            return 1
        return num_groups(self.seq_length, self.group_length)

    @property
    def learnable(self):
        return self.enabled and self.kind in (QuantKind.UNIFORM, QuantKind.TGQ)

    def with_scales(self, scales):
        return replace(self, scales=[float(s) for s in scales])

    def to_dict(self):
        return {
            "kind": self.kind.value,
            "bits": self.bits,
            "scales": list(self.scales),
            "zero_points": list(self.zero_points),
            "group_length": self.group_length,
            "seq_length": self.seq_length,
            "enabled": self.enabled,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            kind=d["kind"],
            bits=d["bits"],
            scales=d.get("scales", []),
            zero_points=d.get("zero_points", []),
            group_length=d.get("group_length"),
            seq_length=d.get("seq_length"),
            enabled=d.get("enabled", True),
        )

    @classmethod
    def passthrough(cls):
        return cls(QuantKind.UNIFORM, 8, [1.0], [0], enabled=False)


@dataclass
class QTensor:
    """Integer codes plus the parameters that produced them."""
    codes: np.ndarray
    params: QuantParams
    time_axis: int | None = None

    @property
    def shape(self):
        return self.codes.shape

    def dequantize(self, dtype=np.float32):
        p = self.params
        q = self.codes.astype(np.float64)
        if p.kind == QuantKind.LOG2:
            out = np.exp2(-q)
        elif p.kind == QuantKind.LTSQ:
            out = 1.0 - np.exp2(-q)
        elif p.kind == QuantKind.UNIFORM:
            out = p.scales[0] * (q - p.zero_points[0])
        else:
            s, z = _group_broadcast(p, self.codes.shape, self.time_axis)
            out = s * (q - z)
        return out.astype(dtype)


def _float_dtype(x):
    return x.dtype if np.issubdtype(x.dtype, np.floating) else np.float32


def affine_codes(x, s, z, qmax):
    """
    Unclipped and clipped codes of x for scale s and zero point z.
    Returns:
        (np.ndarray, np.ndarray): (round(x/s) + z, clip of it to [0, qmax]).
    """
    q_raw = np.rint(x / s) + z
    return q_raw, np.clip(q_raw, 0, qmax)


def init_scale_zero(lb, ub, bits):
    """
    Scale and zero point that map [lb, ub] onto the b-bit code book.
    Args:
        lb (float): Lower bound of the clipping range.
        ub (float): Upper bound of the clipping range.
        bits (int): Bit width.
    Returns:
        (float, int): s = (ub - lb)/(2^b - 1), z = clip(round(-lb/s), 0, 2^b - 1).
    """
    lb = float(lb)
    ub = float(ub)
    if not ub > lb:
        raise QuantError(f"degenerate range [{lb}, {ub}]")
    qmax = (1 << int(bits)) - 1
    s = (ub - lb) / qmax
    z = int(np.clip(np.rint(-lb / s), 0, qmax))
    return s, z


def uniform_fake_quant(x, p):
    """
    Tensor-wise uniform fake quantization.
    Args:
        x (np.ndarray): Values to quantize.
        p (QuantParams): Uniform parameters.
    Returns:
        (QTensor, np.ndarray): Codes and dequantized values s*(q - z).
    """
    if p.kind != QuantKind.UNIFORM:
        raise QuantError(f"expected uniform parameters, got {p.kind.value}")
    x = np.asarray(x)
    dtype = _float_dtype(x)
    s, z = p.scales[0], p.zero_points[0]
    _, q = affine_codes(x, s, z, p.qmax)
    xhat = (s * (q - z)).astype(dtype)
    return QTensor(q.astype(np.int64), p), xhat


def log2_fake_quant(x, bits):
    x = np.asarray(x)
    if np.any(x <= 0):
        raise QuantError("log2 domain: inputs must be positive")
    p = QuantParams(QuantKind.LOG2, bits)
    q = np.clip(np.rint(-np.log2(x.astype(np.float64))), 0, p.qmax)
    xhat = np.exp2(-q).astype(_float_dtype(x))
    return QTensor(q.astype(np.int64), p), xhat


def ltsq_codes(a, qmax):
    """LtSQ codes of a in float64; inputs at or above 1 saturate at qmax."""
    one_minus = 1.0 - np.asarray(a, dtype=np.float64)
    saturated = one_minus <= 0.0
    u = -np.log2(np.where(saturated, 1.0, one_minus))
    return np.where(saturated, qmax, np.clip(np.rint(u), 0, qmax))


def ltsq_fake_quant(a, bits):
    """
    Long-tailed skewness quantization of decay factors in [0, 1).
    Codes log2-quantize 1 - a, so resolution is finest next to 1.
    Args:
        a (np.ndarray): Decay factors.
        bits (int): Bit width.
    Returns:
        (QTensor, np.ndarray): Codes and 1 - 2^-q.
    """
    a = np.asarray(a)
    if np.any(a < 0):
        raise QuantError("A̅ out of range: negative decay factor")
    p = QuantParams(QuantKind.LTSQ, bits)
    q = ltsq_codes(a, p.qmax)
    ahat = (1.0 - np.exp2(-q)).astype(_float_dtype(a))
    return QTensor(q.astype(np.int64), p), ahat


def skewness_route(abar_calib, alpha):
    """LtSQ when the median decay factor over all elements exceeds alpha."""
    abar_calib = np.asarray(abar_calib)
    if abar_calib.size == 0:
        raise QuantError("empty calibration tensor for routing")
    if not 0.0 <= alpha <= 1.0:
        raise QuantError(f"alpha {alpha} outside [0, 1]")
    return QuantKind.LTSQ if median(abar_calib) > alpha else QuantKind.UNIFORM


def tgq_group_index(t, group_length, seq_length):
    if group_length < 1:
        raise QuantError("group length must be >= 1")
    if not 0 <= t < seq_length:
        raise QuantError(f"time step {t} outside [0, {seq_length})")
    return min(t // group_length, num_groups(seq_length, group_length) - 1)


def tgq_group_indices(seq_length, group_length):
    if group_length < 1:
        raise QuantError("group length must be >= 1")
    g = num_groups(seq_length, group_length)
    return np.minimum(np.arange(seq_length) // group_length, g - 1)


def _time_axis(ndim):
    # (L, D, N) or (B, L, D, N)
    if ndim == 3:
        return 0
    if ndim == 4:
        return 1
    raise QuantError(f"hidden states must be 3-D or 4-D, got {ndim}-D")


def _group_broadcast(p, shape, time_axis):
    if time_axis is None:
        time_axis = _time_axis(len(shape))
    idx = tgq_group_indices(p.seq_length, p.group_length)
    view = [1] * len(shape)
    view[time_axis] = shape[time_axis]
    s = np.asarray(p.scales, dtype=np.float64)[idx].reshape(view)
    z = np.asarray(p.zero_points, dtype=np.float64)[idx].reshape(view)
    return s, z


def tgq_fake_quant(h, p):
    """
    Temporal group quantization of a hidden-state sequence.
    Each time slice t uses the (s, z) of group min(t // λ, G - 1).
    Args:
        h (np.ndarray): Hidden states shaped (L, D, N) or (B, L, D, N).
        p (QuantParams): TGQ parameters with one scale per group.
    Returns:
        (QTensor, np.ndarray): Codes and dequantized hidden states.
    """
    if p.kind != QuantKind.TGQ:
        raise QuantError(f"expected TGQ parameters, got {p.kind.value}")
    h = np.asarray(h)
    axis = _time_axis(h.ndim)
    if h.shape[axis] != p.seq_length:
        raise QuantError(
            f"sequence length {h.shape[axis]} does not match TGQ seq_length {p.seq_length}"
        )
    if len(p.scales) != num_groups(p.seq_length, p.group_length):
        raise QuantError("scale count mismatch")
    s, z = _group_broadcast(p, h.shape, axis)
    _, q = affine_codes(h, s, z, p.qmax)
    hhat = (s * (q - z)).astype(_float_dtype(h))
    return QTensor(q.astype(np.int64), p, time_axis=axis), hhat


def shift_decay(hq_minus_z, aq, s, dtype=np.float32):
    """
    Integer state decay s*(v - (v >> aq)) with arithmetic right shift.
    Args:
        hq_minus_z (np.ndarray): Zero-point-free integer hidden-state codes v.
        aq (np.ndarray): LtSQ codes of the decay factor.
        s (float): Hidden-state scale of the group v belongs to.
    Returns:
        np.ndarray: Dequantized decayed state, within one LSB of s*v*(1 - 2^-aq).
    """
    v = np.asarray(hq_minus_z, dtype=np.int64)
    shift = np.minimum(np.asarray(aq, dtype=np.int64), 63)
    return (float(s) * (v - np.right_shift(v, shift)).astype(np.float64)).astype(dtype)


def fake_quant(x, p):
    """Dequantized output of any quantizer kind; identity when disabled."""
    if p is None or not p.enabled:
        return x
    if p.kind == QuantKind.UNIFORM:
        return uniform_fake_quant(x, p)[1]
    if p.kind == QuantKind.TGQ:
        return tgq_fake_quant(x, p)[1]
    if p.kind == QuantKind.LTSQ:
        return ltsq_fake_quant(x, p.bits)[1]
    return log2_fake_quant(x, p.bits)[1]
