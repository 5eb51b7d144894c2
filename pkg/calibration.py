"""
calibration.py: Activation statistics and quantizer initialization.

CalibStats keeps exact min/max plus a seeded reservoir sample of a
calibration stream. MinMax, Percentile and OMSE turn statistics into
QuantParams; BitPolicy decides the bit width per named tensor.
"""

import fnmatch
import logging
from dataclasses import dataclass, field

import numpy as np
from tqdm import tqdm

import settings
from errors import CalibrationError, QuantError
from quantizers import QuantKind, QuantParams, affine_codes, init_scale_zero, num_groups
from quantizers import skewness_route, tgq_group_indices
from ssm_engine import BLOCK_ACTIVATIONS, ModelAssignment, QuantizerAssignment, trace_model
from tensor_core import make_rng

logger = logging.getLogger(__name__)

INITIALIZERS = ("minmax", "percentile", "omse")
# bit width that leaves a tensor in floating point
FP_BITS = 32


@dataclass
class CalibStats:
    """
    Streaming statistics for one named tensor.
    min and max are exact; percentiles and the median come from a uniform
    reservoir sample (Algorithm R) of fixed capacity.
    """
    capacity: int = settings.reservoir_capacity
    seed: int = 0
    min: float = float("inf")
    max: float = float("-inf")
    count: int = 0
    filled: int = 0
    reservoir: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.capacity < 1:
            raise CalibrationError("reservoir capacity must be >= 1")
        self.reservoir = np.empty(self.capacity, dtype=np.float64)
        self._rng = make_rng(self.seed)

    @property
    def samples(self):
        return self.reservoir[: self.filled]

    @property
    def median(self):
        return self.percentile(50.0)

    def percentile(self, p):
        if self.filled == 0:
            raise CalibrationError("no calibration samples observed")
        return float(np.percentile(self.samples, p, method="linear"))

    def observe(self, batch):
        """
        Fold a batch of activations into the statistics.
        Args:
            batch (array-like): Any shape; flattened.
        Returns:
            CalibStats: self, for chaining.
        """
        values = np.asarray(batch, dtype=np.float64).ravel()
        if values.size == 0:
            raise CalibrationError("empty calibration batch")
        if not np.all(np.isfinite(values)):
            raise CalibrationError("non-finite activation in calibration batch")
        self.min = min(self.min, float(values.min()))
        self.max = max(self.max, float(values.max()))

        take = min(self.capacity - self.filled, values.size)
        if take > 0:
            self.reservoir[self.filled : self.filled + take] = values[:take]
            self.filled += take
        rest = values[take:]
        if rest.size:
            seen = self.count + take + np.arange(rest.size, dtype=np.int64)
            slots = self._rng.integers(0, seen + 1)
            hit = slots < self.capacity
            slots, kept = slots[hit], rest[hit]
            # later items win when two land in the same slot
            uniq, last = np.unique(slots[::-1], return_index=True)
            self.reservoir[uniq] = kept[::-1][last]
        self.count += values.size
        return self

    def to_dict(self):
        out = {"min": self.min, "max": self.max, "count": self.count, "retained": self.filled}
        if self.filled:
            out.update(
                median=self.median,
                p1=self.percentile(1.0),
                p99=self.percentile(99.0),
            )
        return out


class TemporalCalibStats:
    """One CalibStats per TGQ time group of a (B, L, D, N) hidden-state stream."""

    def __init__(self, seq_length, group_length, capacity=None, seed=0):
        self.seq_length = seq_length
        self.group_length = group_length
        capacity = capacity or settings.reservoir_capacity
        g = num_groups(seq_length, group_length)
        self.groups = [CalibStats(capacity=capacity, seed=seed + i) for i in range(g)]
        self._index = tgq_group_indices(seq_length, group_length)

    def observe(self, h, time_axis=1):
        h = np.asarray(h)
        if h.shape[time_axis] != self.seq_length:
            raise CalibrationError(
                f"hidden sequence length {h.shape[time_axis]} != {self.seq_length}"
            )
        for gi, stats in enumerate(self.groups):
            steps = np.flatnonzero(self._index == gi)
            stats.observe(np.take(h, steps, axis=time_axis))
        return self


def _zero_inclusive(lb, ub):
    return min(lb, 0.0), max(ub, 0.0)


def params_from_range(lb, ub, bits):
    lb, ub = _zero_inclusive(lb, ub)
    try:
        s, z = init_scale_zero(lb, ub, bits)
    except QuantError as e:
        raise CalibrationError(str(e)) from e
    return QuantParams(QuantKind.UNIFORM, bits, [s], [z])


def minmax_range(stats):
    if stats.count == 0:
        raise CalibrationError("no calibration samples observed")
    if stats.max == stats.min:
        raise CalibrationError(f"degenerate range: constant stream at {stats.min}")
    return stats.min, stats.max


def percentile_range(stats, p_lo=1.0, p_hi=99.0):
    lb, ub = stats.percentile(p_lo), stats.percentile(p_hi)
    if lb == ub:
        raise CalibrationError(f"degenerate range: percentiles coincide at {lb}")
    return lb, ub


def omse_range(samples, bits):
    """
    Clip-ratio grid search minimizing fake-quant MSE over the samples.
    Candidates are [c*min, c*max] for c in {0.01, ..., 1.00}; ties keep the
    smaller c.
    Returns:
        (float, float, float, float): lb, ub, mse and the chosen ratio c.
    """
    x = np.asarray(samples, dtype=np.float64).ravel()
    if x.size == 0:
        raise CalibrationError("no calibration samples observed")
    lo, hi = _zero_inclusive(float(x.min()), float(x.max()))
    qmax = (1 << bits) - 1
    best = None
    for k in range(1, 101):
        c = k / 100.0
        lb, ub = c * lo, c * hi
        if not ub > lb:
            continue
        s, z = init_scale_zero(lb, ub, bits)
        _, q = affine_codes(x, s, z, qmax)
        err = float(np.mean((s * (q - z) - x) ** 2))
        if best is None or err < best[2]:
            best = (lb, ub, err, c)
    if best is None:
        raise CalibrationError("degenerate range at every clip ratio")
    return best


def init_minmax(stats, bits):
    return params_from_range(*minmax_range(stats), bits)


def init_percentile(stats, bits, p_lo=1.0, p_hi=99.0):
    return params_from_range(*percentile_range(stats, p_lo, p_hi), bits)


def init_omse(stats, bits):
    if stats.filled == 0:
        raise CalibrationError("no calibration samples observed")
    lb, ub, err, c = omse_range(stats.samples, bits)
    logger.debug("omse chose c=%.2f range=[%.4g, %.4g] mse=%.4g", c, lb, ub, err)
    return params_from_range(lb, ub, bits)


def init_params(stats, bits, method):
    if bits == FP_BITS:
        return QuantParams.passthrough()
    if method == "minmax":
        return init_minmax(stats, bits)
    if method == "percentile":
        return init_percentile(stats, bits)
    if method == "omse":
        return init_omse(stats, bits)
    raise CalibrationError(f"unknown initializer {method!r}; expected one of {INITIALIZERS}")


def init_weight_params(value, bits):
    """MinMax over a static weight; an all-zero tensor gets the range [0, 1]."""
    if bits == FP_BITS:
        return QuantParams.passthrough()
    value = np.asarray(value, dtype=np.float64)
    lb, ub = _zero_inclusive(float(value.min()), float(value.max()))
    if ub == lb:
        ub = lb + 1.0
    return params_from_range(lb, ub, bits)


def init_tgq(temporal, bits, method="percentile"):
    """Per-group (s, z) for a TemporalCalibStats."""
    scales, zeros = [], []
    for stats in temporal.groups:
        p = init_params(stats, bits, method)
        scales.append(p.scales[0])
        zeros.append(p.zero_points[0])
    return QuantParams(
        QuantKind.TGQ,
        bits,
        scales,
        zeros,
        group_length=temporal.group_length,
        seq_length=temporal.seq_length,
    )


WEIGHT_LEAVES = ("A", "D")


def is_weight_name(tensor_name):
    return tensor_name.endswith(".weight") or tensor_name.rsplit(".", 1)[-1] in WEIGHT_LEAVES


@dataclass
class BitPolicy:
    """
    Bit widths per named tensor. Overrides are fnmatch patterns checked in
    insertion order; the first match wins.
    """
    default_weight_bits: int = 6
    default_act_bits: int = 4
    overrides: dict = field(default_factory=dict)

    def __post_init__(self):
        for bits in (self.default_weight_bits, self.default_act_bits, *self.overrides.values()):
            if int(bits) != FP_BITS and not 2 <= int(bits) <= 8:
                raise CalibrationError(f"bit width {bits} outside [2, 8] (or {FP_BITS} for FP)")

    @classmethod
    def io_default(cls, weight_bits=6, act_bits=4):
        # 8-bit first and last layer, plus the projection/conv inputs kept at 8 bits
        return cls(
            weight_bits,
            act_bits,
            {
                "patch_embed.*": 8,
                "head.*": 8,
                "*.in_proj.act": 8,
                "*.conv1d.act": 8,
                "*.dt_proj.act": 8,
            },
        )

    def to_dict(self):
        return {
            "default_weight_bits": self.default_weight_bits,
            "default_act_bits": self.default_act_bits,
            "overrides": dict(self.overrides),
        }


def apply_bit_policy(policy, tensor_name):
    for pattern, bits in policy.overrides.items():
        if fnmatch.fnmatchcase(tensor_name, pattern):
            return int(bits)
    if is_weight_name(tensor_name):
        return policy.default_weight_bits
    return policy.default_act_bits


class ActivationCalibrator:
    """
    Statistics for every quantized activation of one Mamba block, fed from
    floating-point block traces.
    """

    def __init__(self, seq_length, group_length, capacity=None, seed=0):
        capacity = capacity or settings.reservoir_capacity
        self.stats = {
            name: CalibStats(capacity=capacity, seed=seed + i)
            for i, name in enumerate(BLOCK_ACTIVATIONS)
            if name != "h_t"
        }
        self.hidden = TemporalCalibStats(seq_length, group_length, capacity, seed=seed + 101)
        self.hidden_flat = CalibStats(capacity=capacity, seed=seed + 100)

    def observe(self, trace):
        for name, value in trace.activations().items():
            if name == "h_t":
                self.hidden.observe(value, time_axis=1)
                self.hidden_flat.observe(value)
            else:
                self.stats[name].observe(value)
        return self

    @property
    def abar(self):
        return self.stats["abar_t"]

    def site_params(self, name, bits, method="percentile"):
        """Tensor-wise uniform params for one activation, h_t included."""
        stats = self.hidden_flat if name == "h_t" else self.stats[name]
        return init_params(stats, bits, method)

    def to_dict(self):
        out = {name: s.to_dict() for name, s in self.stats.items()}
        out["h_t"] = self.hidden_flat.to_dict()
        out["h_t.groups"] = [g.to_dict() for g in self.hidden.groups]
        return out


def build_assignment(
    calibrator,
    weights,
    policy,
    prefix,
    method="percentile",
    alpha=0.9,
    use_ltsq=True,
    use_tgq=True,
):
    """
    Route, size and initialize every quantizer of one block.
    Args:
        calibrator (ActivationCalibrator): Statistics from FP traces.
        weights (MambaBlockWeights): Block weights (MinMax-initialized).
        policy (BitPolicy): Bit widths; names are prefixed with `prefix`.
        prefix (str): Block name, e.g. "blocks.0".
        method (str): Activation initializer.
        alpha (float): Skewness boundary for LtSQ routing.
        use_ltsq (bool): Allow LtSQ routing at all.
        use_tgq (bool): Group hidden-state scales over time.
    Returns:
        QuantizerAssignment: Complete assignment for the block.
    """
    params = {}
    route = QuantKind.UNIFORM
    if use_ltsq:
        route = skewness_route(calibrator.abar.samples, alpha)
    for name in BLOCK_ACTIVATIONS:
        bits = apply_bit_policy(policy, f"{prefix}.{name}")
        if bits == FP_BITS:
            params[name] = QuantParams.passthrough()
        elif name == "abar_t" and route == QuantKind.LTSQ:
            params[name] = QuantParams(QuantKind.LTSQ, bits)
        elif name == "h_t" and use_tgq:
            params[name] = init_tgq(calibrator.hidden, bits, method)
        else:
            params[name] = calibrator.site_params(name, bits, method)
    for name, value in weights.quantized_tensors().items():
        params[name] = init_weight_params(value, apply_bit_policy(policy, f"{prefix}.{name}"))
    logger.info(
        "%s: abar median %.4f -> %s, h_t %s with %d group(s)",
        prefix,
        calibrator.abar.median,
        route.value,
        params["h_t"].kind.value,
        params["h_t"].num_groups,
    )
    return QuantizerAssignment(params, abar_route=route)


@dataclass
class ModelCalibration:
    """Per-block calibrators, the FP inputs of every block, and first/last-layer stats."""
    blocks: list
    block_inputs: list
    io: dict

    def to_dict(self):
        return {
            "blocks": [cal.to_dict() for cal in self.blocks],
            "io": {name: stats.to_dict() for name, stats in self.io.items()},
        }


def calibrate_model(model, calib_x, group_length, batch_size=64, capacity=None, seed=0):
    """
    Run the FP model over calibration inputs and collect statistics.
    Args:
        model (MambaModel): Floating-point model.
        calib_x (np.ndarray): (n, L, d_input) calibration inputs.
        group_length (int): TGQ group length used for hidden-state stats.
        batch_size (int): Sequences per forward pass.
    Returns:
        ModelCalibration: Statistics plus cached block inputs.
    """
    capacity = capacity or settings.reservoir_capacity
    spec = model.spec
    calibrators = [
        ActivationCalibrator(spec.seq_len, group_length, capacity, seed=seed + 1000 * i)
        for i in range(spec.n_blocks)
    ]
    io = {
        "patch_embed.act": CalibStats(capacity=capacity, seed=seed + 7),
        "head.act": CalibStats(capacity=capacity, seed=seed + 11),
    }
    inputs = [[] for _ in range(spec.n_blocks)]
    starts = range(0, len(calib_x), batch_size)
    for start in tqdm(starts, desc="calibrate", disable=settings.progress_disabled(), leave=False):
        tr = trace_model(model, calib_x[start : start + batch_size])
        io["patch_embed.act"].observe(tr.inputs)
        io["head.act"].observe(tr.pooled)
        for i, block_trace in enumerate(tr.block_traces):
            calibrators[i].observe(block_trace)
            inputs[i].append(tr.block_inputs[i])
    logger.info("calibrated %d block(s) on %d sequences", spec.n_blocks, len(calib_x))
    return ModelCalibration(calibrators, [np.concatenate(b) for b in inputs], io)


def build_model_assignment(
    calibration,
    model,
    policy,
    method="percentile",
    alpha=0.9,
    use_ltsq=True,
    use_tgq=True,
):
    """Assignments for all blocks plus the 8-bit-capable first and last layers."""
    blocks = [
        build_assignment(
            cal, block, policy, f"blocks.{i}", method, alpha, use_ltsq, use_tgq
        )
        for i, (cal, block) in enumerate(zip(calibration.blocks, model.blocks))
    ]
    io = {
        "patch_embed.act": init_params(
            calibration.io["patch_embed.act"], apply_bit_policy(policy, "patch_embed.act"), method
        ),
        "patch_embed.weight": init_weight_params(
            model.embed_weight, apply_bit_policy(policy, "patch_embed.weight")
        ),
        "head.act": init_params(
            calibration.io["head.act"], apply_bit_policy(policy, "head.act"), method
        ),
        "head.weight": init_weight_params(
            model.head_weight, apply_bit_policy(policy, "head.weight")
        ),
    }
    return ModelAssignment(blocks, io)
