import numpy as np
import pytest

from calibration import build_model_assignment, calibrate_model
from errors import ReconstructionError
from quantizers import QuantKind, QuantParams, uniform_fake_quant
from reconstruction import (
    Adam,
    ReconConfig,
    ScaleGradients,
    backward_block,
    batched_block_forward,
    block_backward,
    cosine_lr,
    finite_diff_grads,
    frozen_block_loss,
    reconstruct_block,
    site_grads,
    ste_fake_quant_grads,
)
from ssm_engine import QUANTIZER_NAMES, QuantContext, QuantizerAssignment, trace_block
from tensor_core import make_rng


def grads_agree(analytic, numeric, scales, rtol=1e-3, atol=1e-10):
    for name, values in scales.items():
        a = analytic.get(name, values.size)
        f = numeric[name]
        if not np.all(np.abs(a - f) <= rtol * np.abs(f) + atol):
            return False
    return True


class TestSteGrads:
    def test_inside_and_clipped(self):
        p = QuantParams(QuantKind.UNIFORM, 4, [0.1], [0])
        dx, ds = ste_fake_quant_grads(np.array([0.53, 5.0]), p, mode="lsq")
        assert dx.tolist() == [1.0, 0.0]
        assert ds[0] == pytest.approx((0.5 - 0.53) / 0.1)
        assert ds[1] == 15.0

    def test_exact_mode_matches_finite_difference(self):
        rng = make_rng(0)
        for _ in range(200):
            s = rng.uniform(0.05, 0.5)
            z = int(rng.integers(0, 16))
            x = rng.uniform(-3.0, 3.0)
            p = QuantParams(QuantKind.UNIFORM, 4, [s], [z])
            ratio = x / s
            if abs(ratio - np.floor(ratio) - 0.5) < 0.01:
                continue
            _, ds = ste_fake_quant_grads(np.array([x]), p, mode="exact")
            eps = 1e-6 * s
            hi = uniform_fake_quant(np.array([x]), p.with_scales([s + eps]))[1][0]
            lo = uniform_fake_quant(np.array([x]), p.with_scales([s - eps]))[1][0]
            assert ds[0] == pytest.approx((hi - lo) / (2 * eps), rel=1e-3, abs=1e-6)

    def test_ltsq_has_no_scale(self):
        dx, ds = ste_fake_quant_grads(np.array([0.5, 0.999]), QuantParams(QuantKind.LTSQ, 4))
        assert dx.tolist() == [1.0, 1.0]
        assert np.all(ds == 0.0)

    def test_bad_mode(self):
        with pytest.raises(ReconstructionError):
            ste_fake_quant_grads(np.ones(2), QuantParams.passthrough(), mode="sgd")

    def test_tgq_groups_only_see_their_steps(self):
        rng = make_rng(1)
        h = rng.normal(size=(4, 3, 2))
        p = QuantParams(QuantKind.TGQ, 4, [0.2, 0.3], [8, 8], group_length=2, seq_length=4)
        ctx = QuantContext(QuantizerAssignment({"h_t": p}))
        for t in range(4):
            ctx("h_t", h[t], key=("h_t", t), group=t // 2)
        upstream = [np.zeros((3, 2)), np.zeros((3, 2)), rng.normal(size=(3, 2)), rng.normal(size=(3, 2))]
        per_group = np.zeros(2)
        for t in range(4):
            site = ctx.sites[("h_t", t)]
            _, ds = site_grads(site)
            per_group[site.group] += np.sum(upstream[t] * ds)
        assert per_group[0] == 0.0
        assert per_group[1] != 0.0


def random_assignment(rng, block, x, assign_block):
    qa = assign_block(
        block, x,
        weight_bits=int(rng.integers(4, 9)),
        act_bits=int(rng.integers(4, 9)),
        alpha=float(rng.choice([0.0, 1.0])),
        use_tgq=bool(rng.integers(0, 2)),
        lam=int(rng.integers(1, x.shape[1] + 1)),
    )
    off = [name for name in QUANTIZER_NAMES if rng.uniform() < 0.3]
    return qa.replace(**{name: QuantParams.passthrough() for name in off})


def gradient_agreement(n_configs, make_block, assign_block, mode="lsq"):
    rng = make_rng(123)
    agreed = checked = 0
    for i in range(n_configs):
        block, x = make_block(
            seed=i,
            batch=int(rng.integers(1, 3)),
            seq_len=int(rng.integers(3, 7)),
            d_model=int(rng.integers(2, 4)),
            d_inner=int(rng.integers(2, 5)),
            d_state=int(rng.integers(1, 3)),
            d_conv=int(rng.integers(2, 4)),
        )
        qa = random_assignment(rng, block, x, assign_block)
        names = qa.learnable_names()
        if not names:
            continue
        fp_out = trace_block(x, block).out
        trace = trace_block(x, block, qa)
        analytic = backward_block(fp_out, trace, mode)
        scales = qa.scales(names)
        numeric = finite_diff_grads(frozen_block_loss(trace, fp_out, mode), scales, 1e-5, relative=True)
        checked += 1
        agreed += grads_agree(analytic, numeric, scales)
    return agreed, checked


class TestBlockGradients:
    def test_analytic_matches_frozen_code_differences(self, make_block, assign_block):
        agreed, checked = gradient_agreement(60, make_block, assign_block)
        assert checked > 0
        assert agreed >= 0.95 * checked

    def test_exact_mode_matches_frozen_code_differences(self, make_block, assign_block):
        agreed, checked = gradient_agreement(30, make_block, assign_block, mode="exact")
        assert agreed >= 0.95 * checked

    @pytest.mark.slow
    def test_thousand_configurations(self, make_block, assign_block):
        agreed, checked = gradient_agreement(1000, make_block, assign_block)
        assert agreed >= 0.95 * checked

    @pytest.mark.parametrize("name", ["out_proj.act", "out_proj.weight"])
    def test_true_loss_for_a_single_quantizer(self, make_block, assign_block, name):
        block, x = make_block(seed=7, seq_len=5)
        full = assign_block(block, x, 6, 6)
        qa = QuantizerAssignment.passthrough().replace(**{name: full.params[name]})
        fp_out = trace_block(x, block).out
        trace = trace_block(x, block, qa)
        analytic = backward_block(fp_out, trace, "exact")

        def loss_fn(scales):
            out = trace_block(x, block, qa.with_scales(scales)).out
            return float(np.mean((out - fp_out) ** 2))

        scales = qa.scales([name])
        numeric = finite_diff_grads(loss_fn, scales, 1e-7, relative=True)
        assert analytic[name] == pytest.approx(numeric[name], rel=1e-3, abs=1e-10)

    def test_no_error_no_gradient(self, make_block, assign_block):
        block, x = make_block(seed=3)
        trace = trace_block(x, block, assign_block(block, x, 6, 4))
        grads = backward_block(trace.out, trace)
        assert grads.names()
        assert all(np.all(g == 0.0) for g in grads.grads.values())

    def test_fp_weight_gradients(self, make_block):
        block, x = make_block(seed=4)
        target = make_rng(9).normal(size=(x.shape[0], x.shape[1], block.d_model))
        trace = trace_block(x, block)
        d_out = 2.0 * (trace.out - target) / target.size
        grads = block_backward(trace, d_out).weights
        tensors = block.named_tensors()
        assert set(grads) == set(tensors)
        for name in ("in_proj.weight", "A_log", "dt_proj.bias", "conv1d.bias"):
            value = tensors[name]
            idx = tuple(0 for _ in value.shape)
            orig = value[idx]
            eps = 1e-6
            value[idx] = orig + eps
            hi = np.mean((trace_block(x, block).out - target) ** 2)
            value[idx] = orig - eps
            lo = np.mean((trace_block(x, block).out - target) ** 2)
            value[idx] = orig
            assert grads[name][idx] == pytest.approx((hi - lo) / (2 * eps), rel=1e-4, abs=1e-9)

    def test_missing_trace(self):
        with pytest.raises(ReconstructionError, match="missing forward trace"):
            backward_block(np.zeros(1), None)


def test_scale_gradients_flag_non_finite():
    grads = ScaleGradients()
    grads.add("h_t", 0, 1.0, 2)
    assert grads.all_finite()
    grads.add("h_t", 1, np.inf, 2)
    assert not grads.all_finite()


class TestOptimizer:
    def test_finite_difference_of_quadratic(self):
        grads = finite_diff_grads(lambda s: float((s["a"][0] - 2.0) ** 2), {"a": np.array([1.0])}, 1e-3)
        assert grads["a"][0] == pytest.approx(-2.0, abs=1e-6)

    def test_cosine_schedule(self):
        assert cosine_lr(4e-4, 0, 100) == pytest.approx(4e-4)
        assert cosine_lr(4e-4, 50, 100) == pytest.approx(2e-4)
        assert cosine_lr(4e-4, 100, 100) == pytest.approx(0.0, abs=1e-20)

    def test_adam_first_step_moves_by_lr(self):
        params = {"s": np.array([1.0, 1.0])}
        Adam(params, lr=0.01).step({"s": np.array([3.0, -0.5])})
        assert params["s"] == pytest.approx([0.99, 1.01], abs=1e-6)

    def test_bad_config(self):
        with pytest.raises(ReconstructionError):
            ReconConfig(betas=(0.9, 1.0))
        with pytest.raises(ReconstructionError):
            ReconConfig(grad_mode="ste")


class TestReconstructBlock:
    def setup_data(self, make_block, assign_block):
        block, x = make_block(seed=5, dtype=np.float32, batch=16, seq_len=8)
        qa = assign_block(block, x, 6, 4, lam=4)
        return block, x, qa

    def test_lowers_block_error(self, make_block, assign_block):
        block, x, qa = self.setup_data(make_block, assign_block)
        cfg = ReconConfig(iterations=100, lr=1e-3, eval_every=10)
        result = reconstruct_block(block, qa, x, cfg)
        assert result.final_loss <= result.initial_loss
        assert len(result.curve) == 100
        assert np.isfinite(result.curve_frame()["loss"]).all()
        for name in result.learned:
            assert result.assignment.params[name].zero_points == qa.params[name].zero_points
        out = batched_block_forward(x, block, result.assignment)
        fp = batched_block_forward(x, block)
        assert float(np.mean((out - fp) ** 2)) == pytest.approx(result.final_loss, rel=1e-6)

    def test_zero_lr_keeps_scales(self, make_block, assign_block):
        block, x, qa = self.setup_data(make_block, assign_block)
        result = reconstruct_block(block, qa, x, ReconConfig(iterations=20, lr=0.0))
        assert result.final_loss == result.initial_loss
        for name in result.learned:
            assert result.assignment.params[name].scales == qa.params[name].scales

    def test_deterministic(self, make_block, assign_block):
        block, x, qa = self.setup_data(make_block, assign_block)
        cfg = ReconConfig(iterations=15, lr=1e-3, eval_every=5, seed=3)
        a = reconstruct_block(block, qa, x, cfg)
        b = reconstruct_block(block, qa, x, cfg)
        assert a.assignment.to_dict() == b.assignment.to_dict()
        assert a.curve == b.curve

    def test_activation_scales_only(self, make_block, assign_block):
        block, x, qa = self.setup_data(make_block, assign_block)
        cfg = ReconConfig(iterations=5, learn_weight_scales=False)
        result = reconstruct_block(block, qa, x, cfg)
        assert "in_proj.weight" not in result.learned
        assert result.assignment.params["in_proj.weight"] == qa.params["in_proj.weight"]


@pytest.mark.slow
def test_reconstruction_halves_toy_block_error(toy_run):
    cfg, data, model = toy_run(0)
    assert (cfg.weight_bits, cfg.act_bits) == (6, 4)
    calibration = calibrate_model(model, data.calib_x, group_length=cfg.lam)
    quant = build_model_assignment(calibration, model, cfg.bit_policy)
    result = reconstruct_block(
        model.blocks[0], quant.blocks[0], calibration.block_inputs[0],
        ReconConfig(iterations=500, seed=0),
    )
    assert result.final_loss <= 0.5 * result.initial_loss
