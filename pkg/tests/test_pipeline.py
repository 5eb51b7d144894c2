import json
from pathlib import Path

import numpy as np
import pytest

from errors import ConfigError, EngineError
from pipeline import (
    STAGES,
    ExperimentConfig,
    PolicyConfig,
    SweepConfig,
    analyze_distributions,
    analyze_traces,
    load_config,
    prepare_data,
    run_ptq_pipeline,
    run_sweep,
)
from reconstruction import ReconConfig
from ssm_engine import MambaModel, ModelSpec
from synthetic import ToyTask, gen_dynamic_hidden, gen_longtailed_abar

ROOT = Path(__file__).resolve().parent.parent


def small_config(**overrides):
    spec = ModelSpec(n_blocks=2, seq_len=8, d_model=4, d_inner=4, d_state=2)
    values = dict(
        model=spec,
        dataset=ToyTask(seq_len=8, n_train=32, n_val=32),
        calib_size=16,
        lam=4,
        recon=ReconConfig(iterations=4, eval_every=2),
    )
    values.update(overrides)
    return ExperimentConfig(**values)


@pytest.fixture
def small_setup():
    cfg = small_config()
    return cfg, MambaModel.init_random(cfg.model, 0), prepare_data(cfg)


class TestConfig:
    def test_example_file_loads(self):
        cfg = load_config(ROOT / "configs" / "toy.toml")
        assert cfg.lam == 10
        assert cfg.sweep.alphas == [0.0, 0.8, 0.9, 1.0]
        assert cfg.model.seq_len == cfg.dataset.seq_len

    def test_json_round_trip(self, tmp_path):
        cfg = small_config(alpha=0.7)
        path = tmp_path / "cfg.json"
        path.write_text(json.dumps(cfg.to_dict()))
        again = load_config(path)
        assert again.to_dict() == cfg.to_dict()

    def test_defaults(self):
        cfg = load_config(None)
        assert (cfg.weight_bits, cfg.act_bits, cfg.alpha, cfg.lam) == (6, 4, 0.9, 10)
        assert cfg.calib_size == 1024

    @pytest.mark.parametrize(
        "payload,match",
        [
            ({"colour": 1}, "unknown config keys"),
            ({"recon": {"steps": 3}}, r"unknown keys in \[recon\]"),
            ({"model": {"width": 3}}, "model"),
            ({"alpha": 1.5}, "alpha"),
            ({"lambda": 0}, "lambda"),
            ({"initializer": "kl"}, "initializer"),
            ({"recon": {"lr": -1.0}}, "recon"),
            ({"sweep": {"variants": ["fancy"]}}, "variants"),
        ],
    )
    def test_rejects_bad_values(self, tmp_path, payload, match):
        path = tmp_path / "bad.json"
        path.write_text(json.dumps(payload))
        with pytest.raises(ConfigError, match=match):
            load_config(path)

    def test_missing_and_unsupported(self, tmp_path):
        with pytest.raises(ConfigError, match="not found"):
            load_config(tmp_path / "nope.toml")
        (tmp_path / "cfg.yaml").write_text("alpha: 1")
        with pytest.raises(ConfigError, match="unsupported"):
            load_config(tmp_path / "cfg.yaml")

    def test_policy_overrides_take_precedence(self):
        policy = PolicyConfig(overrides={"head.*": 6}).build(6, 4)
        assert policy.overrides["head.*"] == 6
        assert policy.overrides["patch_embed.*"] == 8
        assert PolicyConfig(io_overrides=False).build(6, 4).overrides == {}

    def test_sweep_points(self):
        points = SweepConfig(alphas=[0.8, 0.9], variants=["ltsq", "uniform"]).points()
        assert len(points) == 4
        assert points[0] == {"variant": "ltsq", "weight_bits": 6, "act_bits": 4, "alpha": 0.8, "lambda": 10}


class TestPipeline:
    def test_stages_and_hashes(self, small_setup):
        cfg, model, data = small_setup
        result = run_ptq_pipeline(cfg, model, data)
        assert [s["name"] for s in result.report["stages"]] == list(STAGES)
        assert all(len(s["hash"]) == 64 for s in result.report["stages"])
        again = run_ptq_pipeline(cfg, model, data)
        assert [s["hash"] for s in again.report["stages"]] == [s["hash"] for s in result.report["stages"]]
        assert len(result.recon_results) == 2
        assert 0.0 <= result.report["accuracy"] <= 1.0
        json.dumps(result.report, default=float)

    def test_without_quantization_matches_fp(self, small_setup):
        cfg, model, data = small_setup
        cfg = small_config(quantize=False)
        result = run_ptq_pipeline(cfg, model, data)
        assert result.report["accuracy"] == result.report["fp_accuracy"]
        assert result.report["loss"] == result.report["fp_loss"]

    @pytest.mark.parametrize("alpha,route", [(0.0, "ltsq"), (1.0, "uniform")])
    def test_alpha_endpoints(self, small_setup, alpha, route):
        _, model, data = small_setup
        result = run_ptq_pipeline(small_config(alpha=alpha), model, data, stop_after="route")
        routes = result.report["stages"][-1]["routes"]
        assert [r["route"] for r in routes] == [route, route]

    def test_unknown_stage(self, small_setup):
        cfg, model, data = small_setup
        with pytest.raises(ConfigError):
            run_ptq_pipeline(cfg, model, data, stop_after="deploy")

    def test_skipped_reconstruction(self, small_setup):
        _, model, data = small_setup
        result = run_ptq_pipeline(small_config(recon=ReconConfig(enabled=False)), model, data)
        stage = result.report["stages"][3]
        assert stage["name"] == "reconstruct" and stage["skipped"]
        assert result.recon_results == []


class TestAnalysis:
    def test_routes_and_quartiles(self):
        abar = [gen_longtailed_abar(0.95, (4, 16, 8, 4), seed=0), gen_longtailed_abar(0.5, (4, 16, 8, 4), seed=1)]
        constant = np.ones((16, 8, 4))
        frames = analyze_traces(abar, [constant], alpha=0.9)
        assert frames["abar_medians"]["route"].tolist() == ["ltsq", "uniform"]
        steps = frames["hidden_steps"]
        assert len(steps) == 16
        assert steps[["min", "q1", "median", "q3", "max"]].nunique().max() == 1

    def test_growing_states_show_growing_ranges(self):
        h = gen_dynamic_hidden("grow", 200, (32, 64), seed=0)
        steps = analyze_traces([], [h])["hidden_steps"]
        windows = steps["absmax"].to_numpy().reshape(20, 10).mean(axis=1)
        assert np.all(windows[1:] >= 0.9 * windows[:-1])

    def test_rejects_bad_rank(self):
        with pytest.raises(EngineError, match="hidden states"):
            analyze_traces([], [np.zeros((4, 4))])

    def test_writes_tables(self, small_setup, tmp_path):
        cfg, model, data = small_setup
        frames = analyze_distributions(model, data.val[0], tmp_path, batch_size=4)
        for name in ("abar_medians", "hidden_steps", "histograms"):
            assert (tmp_path / f"{name}.csv").exists()
        summary = json.loads((tmp_path / "analysis.json").read_text())
        assert summary["batch_size"] == 4
        assert len(frames["abar_medians"]) == 2
        assert len(frames["hidden_steps"]) == 2 * 8


class TestSweep:
    def test_grid(self, small_setup):
        cfg, model, data = small_setup
        cfg = small_config(
            recon=ReconConfig(enabled=False),
            sweep=SweepConfig(alphas=[0.0, 1.0], variants=["ltsq+tgq", "uniform"]),
        )
        table = run_sweep(cfg, model, data, jobs=1)
        assert len(table) == 4
        assert table["index"].tolist() == [0, 1, 2, 3]
        ltsq_at_zero = table[(table["variant"] == "ltsq+tgq") & (table["alpha"] == 0.0)]
        assert ltsq_at_zero["ltsq_blocks"].iloc[0] == 2
        assert (table.loc[table["variant"] == "uniform", "ltsq_blocks"] == 0).all()

    def test_parallel_matches_serial(self, small_setup):
        cfg, model, data = small_setup
        cfg = small_config(
            recon=ReconConfig(enabled=False),
            sweep=SweepConfig(alphas=[0.0, 1.0], variants=["ltsq"]),
        )
        serial = run_sweep(cfg, model, data, jobs=1)
        parallel = run_sweep(cfg, model, data, jobs=2)
        assert serial.drop(columns=["recon_final_loss"]).equals(parallel.drop(columns=["recon_final_loss"]))


@pytest.mark.slow
def test_full_variant_is_best_on_toy_task(toy_run):
    strictly_best = 0
    for seed in range(3):
        cfg, data, model = toy_run(seed)
        acc = run_sweep(cfg, model, data).set_index("variant")["accuracy"]
        assert acc["ltsq+tgq"] >= acc["ltsq"]
        assert acc["ltsq+tgq"] >= acc["tgq"]
        strictly_best += int(acc["ltsq+tgq"] > acc.drop("ltsq+tgq").max())
    assert strictly_best >= 2
