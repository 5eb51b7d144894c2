import numpy as np
import pytest

from calibration import ActivationCalibrator, BitPolicy, build_assignment
from pipeline import ExperimentConfig, obtain_model, prepare_data
from ssm_engine import MambaBlockWeights, ModelSpec, trace_block
from synthetic import ToyTask
from tensor_core import make_rng

SMALL_DIMS = {"d_model": 4, "d_inner": 4, "d_state": 2, "d_conv": 3, "dt_rank": 1, "seq_len": 8}


@pytest.fixture
def make_block():
    """Random block weights plus a matching input batch."""

    def _make(seed=0, dtype=np.float64, batch=2, **dims):
        spec = ModelSpec(**{**SMALL_DIMS, **dims})
        rng = make_rng(seed)
        block = MambaBlockWeights.init_random(spec, rng).astype(dtype)
        x = rng.normal(0.0, 1.0, (batch, spec.seq_len, spec.d_model)).astype(dtype)
        return block, x

    return _make


@pytest.fixture
def assign_block():
    """Calibrate a block on x and build its quantizer assignment."""

    def _assign(block, x, weight_bits=8, act_bits=8, alpha=0.9, use_ltsq=True, use_tgq=True, lam=None):
        L = x.shape[1]
        cal = ActivationCalibrator(L, lam or L, capacity=4096, seed=0)
        cal.observe(trace_block(x, block))
        policy = BitPolicy(weight_bits, act_bits)
        return build_assignment(cal, block, policy, "blocks.0", "percentile", alpha, use_ltsq, use_tgq)

    return _assign


@pytest.fixture(scope="session")
def toy_run():
    """(config, data, trained model) for the default toy experiment, built once per seed."""
    cache = {}

    def _run(seed=0):
        if seed not in cache:
            cfg = ExperimentConfig(dataset=ToyTask(), model=ModelSpec(), seed=seed)
            data = prepare_data(cfg)
            cache[seed] = (cfg, data, obtain_model(cfg, data=data))
        return cache[seed]

    return _run


@pytest.fixture(scope="session")
def toy_config(toy_run):
    return toy_run(0)[0]


@pytest.fixture(scope="session")
def toy_data(toy_run):
    return toy_run(0)[1]


@pytest.fixture(scope="session")
def toy_model(toy_run):
    return toy_run(0)[2]
