"""
efficiency.py: Theoretical storage and bit-operation cost of a quantized
Mamba classifier relative to its 32-bit floating-point baseline.
"""

import logging
from dataclasses import dataclass

import pandas as pd

from calibration import FP_BITS, BitPolicy, apply_bit_policy
from ssm_engine import ModelSpec

logger = logging.getLogger(__name__)


@dataclass
class LayerCost:
    name: str
    macs: int
    params: int
    weight_bits: int
    act_bits: int

    @property
    def bops(self):
        return self.macs * self.weight_bits * self.act_bits

    @property
    def storage_bits(self):
        return self.params * self.weight_bits


def vim_b_spec():
    """Vision Mamba base-sized classifier: 16x16 patches of a 224 image plus a class token."""
    return ModelSpec(
        n_blocks=24,
        seq_len=197,
        d_input=768,
        d_model=768,
        d_inner=1536,
        d_state=16,
        d_conv=4,
        dt_rank=48,
        n_classes=1000,
    )


def layer_costs(spec, policy):
    """
    MAC and parameter inventory for one sequence, with bit widths from policy.
    Linear layers multiply their weight by an input activation; the scan
    multiplies decay factors and C against the hidden state.
    """
    L, m, d, n = spec.seq_len, spec.d_model, spec.d_inner, spec.d_state
    k, r = spec.d_conv, spec.dt_rank

    def bits(name):
        return apply_bit_policy(policy, name)

    layers = [
        LayerCost(
            "patch_embed", L * spec.d_input * m, spec.d_input * m + m,
            bits("patch_embed.weight"), bits("patch_embed.act"),
        )
    ]
    for i in range(spec.n_blocks):
        p = f"blocks.{i}"
        layers += [
            LayerCost(f"{p}.in_proj", L * m * 2 * d, m * 2 * d, bits(f"{p}.in_proj.weight"), bits(f"{p}.in_proj.act")),
            LayerCost(f"{p}.conv1d", L * d * k, d * k + d, bits(f"{p}.conv1d.weight"), bits(f"{p}.conv1d.act")),
            LayerCost(f"{p}.x_proj", L * d * (r + 2 * n), d * (r + 2 * n), bits(f"{p}.x_proj.weight"), bits(f"{p}.x_t")),
            LayerCost(f"{p}.dt_proj", L * r * d, r * d + d, bits(f"{p}.dt_proj.weight"), bits(f"{p}.dt_proj.act")),
            # decay, input injection and readout per state element
            LayerCost(f"{p}.scan", 3 * L * d * n, 0, bits(f"{p}.abar_t"), bits(f"{p}.h_t")),
            LayerCost(f"{p}.A", 0, d * n, bits(f"{p}.A"), bits(f"{p}.delta_t")),
            LayerCost(f"{p}.D", L * d, d, bits(f"{p}.D"), bits(f"{p}.x_t")),
            LayerCost(f"{p}.out_proj", L * d * m, d * m, bits(f"{p}.out_proj.weight"), bits(f"{p}.out_proj.act")),
        ]
    layers.append(
        LayerCost(
            "head", m * spec.n_classes, m * spec.n_classes + spec.n_classes,
            bits("head.weight"), bits("head.act"),
        )
    )
    return layers


def costs_frame(layers):
    return pd.DataFrame(
        [
            {
                "layer": c.name,
                "macs": c.macs,
                "params": c.params,
                "weight_bits": c.weight_bits,
                "act_bits": c.act_bits,
                "bops": c.bops,
                "storage_bits": c.storage_bits,
            }
            for c in layers
        ]
    )


def estimate_efficiency(spec, weight_bits=6, act_bits=6, policy=None):
    """
    Storage bits and BOPs of a quantized model and their reductions.
    Args:
        spec (ModelSpec): Architecture.
        weight_bits (int): Default weight bit width.
        act_bits (int): Default activation bit width.
        policy (BitPolicy | None): Overrides; defaults to a flat policy.
    Returns:
        dict: flops, bops, storage_bits, their FP baselines, reductions in
        [0, 1] and a per-layer pandas DataFrame under "layers".
    """
    policy = policy or BitPolicy(weight_bits, act_bits)
    layers = layer_costs(spec, policy)
    fp = BitPolicy(FP_BITS, FP_BITS)
    fp_layers = layer_costs(spec, fp)

    macs = sum(c.macs for c in layers)
    bops = sum(c.bops for c in layers)
    fp_bops = sum(c.bops for c in fp_layers)
    storage = sum(c.storage_bits for c in layers)
    fp_storage = sum(c.storage_bits for c in fp_layers)
    bops_reduction = 1.0 - bops / fp_bops
    result = {
        "macs": macs,
        "flops": 2 * macs,
        "bops": bops,
        "fp_bops": fp_bops,
        "storage_bits": storage,
        "fp_storage_bits": fp_storage,
        "params": sum(c.params for c in layers),
        "reductions": {
            "storage": 1.0 - storage / fp_storage,
            "bops": bops_reduction,
            # FLOPs of a b-bit op are counted at b_w*b_a/32^2 of an FP op
            "flops": bops_reduction,
        },
        "policy": policy.to_dict(),
        "layers": costs_frame(layers),
    }
    logger.info(
        "storage %.2f MB -> %.2f MB (%.1f%% saved), BOPs %.1f%% saved",
        fp_storage / 8e6, storage / 8e6,
        100 * result["reductions"]["storage"], 100 * bops_reduction,
    )
    return result
