"""
pipeline.py: Experiment configuration and the end-to-end PTQ pipeline.

calibrate -> route -> init -> reconstruct -> eval, plus distribution
analysis, per-activation sensitivity and parallel hyper-parameter sweeps.
"""

import hashlib
import itertools
import json
import logging
import tomllib
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import pandas as pd
from tqdm import tqdm

import settings
from calibration import INITIALIZERS, BitPolicy, build_model_assignment, calibrate_model
from errors import ConfigError, EngineError, QMambaError
from quantizers import QuantKind, skewness_route
from reconstruction import ReconConfig, reconstruct_model
from ssm_engine import (
    SSM_ACTIVATIONS,
    ModelAssignment,
    ModelSpec,
    evaluate,
    load_model,
    sensitivity_sweep,
    trace_model,
)
from synthetic import ToyTask
from tensor_core import make_rng
from training import TrainConfig, train_toy_model

logger = logging.getLogger(__name__)

STAGES = ("calibrate", "route", "init", "reconstruct", "eval")
VARIANTS = {
    "ltsq+tgq": (True, True),
    "ltsq": (True, False),
    "tgq": (False, True),
    "uniform": (False, False),
}


@dataclass
class PolicyConfig:
    io_overrides: bool = True
    overrides: dict = field(default_factory=dict)

    def build(self, weight_bits, act_bits):
        base = BitPolicy.io_default(weight_bits, act_bits) if self.io_overrides else None
        merged = {pattern: int(bits) for pattern, bits in self.overrides.items()}
        if base is not None:
            for pattern, bits in base.overrides.items():
                merged.setdefault(pattern, bits)
        return BitPolicy(weight_bits, act_bits, merged)


@dataclass
class SweepConfig:
    alphas: list = field(default_factory=lambda: [0.9])
    lambdas: list = field(default_factory=lambda: [10])
    bits: list = field(default_factory=lambda: [[6, 4]])
    variants: list = field(default_factory=lambda: list(VARIANTS))
    jobs: int = 1

    def __post_init__(self):
        unknown = set(self.variants) - set(VARIANTS)
        if unknown:
            raise ConfigError(f"unknown sweep variants {sorted(unknown)}; expected {list(VARIANTS)}")
        for pair in self.bits:
            if len(pair) != 2:
                raise ConfigError(f"sweep bit config {pair} must be [weight_bits, act_bits]")

    def points(self):
        return [
            {"variant": v, "weight_bits": int(w), "act_bits": int(a), "alpha": float(al), "lambda": int(lm)}
            for v, (w, a), al, lm in itertools.product(self.variants, self.bits, self.alphas, self.lambdas)
        ]


def _build(cls, name, values):
    if values is None:
        return cls()
    if isinstance(values, cls):
        return values
    known = {f.name for f in fields(cls)}
    unknown = set(values) - known
    if unknown:
        raise ConfigError(f"unknown keys in [{name}]: {sorted(unknown)}")
    try:
        return cls(**values)
    except QMambaError as e:
        raise ConfigError(f"[{name}] {e}") from e
    except (TypeError, ValueError) as e:
        raise ConfigError(f"[{name}] {type(e).__name__}: {e}") from e


@dataclass
class ExperimentConfig:
    """
    Everything one experiment needs. File keys mirror the field names, with
    `lambda` stored as `lam`.
    """
    model: ModelSpec = field(default_factory=ModelSpec)
    weight_bits: int = 6
    act_bits: int = 4
    policy: PolicyConfig = field(default_factory=PolicyConfig)
    alpha: float = 0.9
    lam: int = 10
    initializer: str = "percentile"
    use_ltsq: bool = True
    use_tgq: bool = True
    quantize: bool = True
    use_shift: bool = False
    calib_size: int = 1024
    analyze_batch_size: int = 32
    recon: ReconConfig = field(default_factory=ReconConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    dataset: ToyTask = field(default_factory=ToyTask)
    sweep: SweepConfig = field(default_factory=SweepConfig)
    seed: int = settings.default_seed

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"alpha {self.alpha} outside [0, 1]")
        if self.lam < 1:
            raise ConfigError(f"lambda {self.lam} must be >= 1")
        if self.initializer not in INITIALIZERS:
            raise ConfigError(f"initializer {self.initializer!r} not in {INITIALIZERS}")
        if self.calib_size < 1 or self.analyze_batch_size < 1:
            raise ConfigError("calib_size and analyze_batch_size must be >= 1")

    @property
    def bit_policy(self):
        return self.policy.build(self.weight_bits, self.act_bits)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "lambda" in d:
            d["lam"] = d.pop("lambda")
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            spec = ModelSpec.from_dict(d.pop("model", {}))
        except EngineError as e:
            raise ConfigError(f"[model] {e}") from e
        nested = {
            "policy": _build(PolicyConfig, "policy", d.pop("policy", None)),
            "recon": _build(ReconConfig, "recon", d.pop("recon", None)),
            "train": _build(TrainConfig, "train", d.pop("train", None)),
            "dataset": _build(ToyTask, "dataset", d.pop("dataset", None)),
            "sweep": _build(SweepConfig, "sweep", d.pop("sweep", None)),
        }
        try:
            return cls(model=spec, **nested, **d)
        except TypeError as e:
            raise ConfigError(f"invalid config value: {e}") from e

    def to_dict(self):
        return {
            "model": self.model.to_dict(),
            "weight_bits": self.weight_bits,
            "act_bits": self.act_bits,
            "policy": {"io_overrides": self.policy.io_overrides, "overrides": dict(self.policy.overrides)},
            "alpha": self.alpha,
            "lambda": self.lam,
            "initializer": self.initializer,
            "use_ltsq": self.use_ltsq,
            "use_tgq": self.use_tgq,
            "quantize": self.quantize,
            "use_shift": self.use_shift,
            "calib_size": self.calib_size,
            "analyze_batch_size": self.analyze_batch_size,
            "recon": self.recon.to_dict(),
            "train": self.train.to_dict(),
            "dataset": self.dataset.to_dict(),
            "sweep": dict(self.sweep.__dict__),
            "seed": self.seed,
        }


def load_config(path=None):
    """
    Read an ExperimentConfig from TOML or JSON; no path gives the defaults.
    """
    if path is None:
        return ExperimentConfig()
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        if path.suffix == ".toml":
            with path.open("rb") as f:
                data = tomllib.load(f)
        elif path.suffix == ".json":
            data = json.loads(path.read_text())
        else:
            raise ConfigError(f"unsupported config format {path.suffix!r}; use .toml or .json")
    except (tomllib.TOMLDecodeError, json.JSONDecodeError) as e:
        raise ConfigError(f"cannot parse {path}: {e}") from e
    return ExperimentConfig.from_dict(data)


def stage_hash(payload):
    text = json.dumps(payload, sort_keys=True, default=float)
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


@dataclass
class ExperimentData:
    train: tuple
    val: tuple
    calib_x: np.ndarray


def prepare_data(cfg):
    """Train/val splits plus an unlabeled calibration draw from the same task."""
    task = cfg.dataset
    train, val = task.splits(cfg.seed)
    calib_x, _ = task.sample(cfg.calib_size, make_rng(cfg.seed + 2))
    return ExperimentData(train, val, calib_x)


def obtain_model(cfg, model_dir=None, data=None):
    """Load a saved model, or train one on the configured toy task."""
    if model_dir is not None:
        model = load_model(model_dir)
        if model.spec != cfg.model:
            logger.warning("loaded model spec %s overrides config spec", model.spec.to_dict())
        return model
    return train_toy_model(cfg.dataset, cfg.model, cfg.seed, cfg.train).model


@dataclass
class PipelineResult:
    report: dict
    assignment: ModelAssignment
    calibration: object = None
    recon_results: list = field(default_factory=list)


def run_ptq_pipeline(cfg, model=None, data=None, stop_after="eval"):
    """
    Calibrate, route, initialize, reconstruct and evaluate.
    Args:
        cfg (ExperimentConfig): Experiment settings.
        model (MambaModel | None): FP model; trained from cfg when None.
        data (ExperimentData | None): Splits; generated from cfg when None.
        stop_after (str): Last stage to run.
    Returns:
        PipelineResult: JSON-ready report with one hash per stage.
    """
    if stop_after not in STAGES:
        raise ConfigError(f"unknown stage {stop_after!r}; expected one of {STAGES}")
    data = data or prepare_data(cfg)
    model = model or obtain_model(cfg, data=data)
    last = STAGES.index(stop_after)
    stages = []
    report = {"config": cfg.to_dict(), "stages": stages}

    def record(name, payload, **metrics):
        stages.append({"name": name, "hash": stage_hash(payload), **metrics})
        logger.info("stage %s done", name)

    if not cfg.quantize:
        quant = ModelAssignment.passthrough(len(model.blocks))
        for name in STAGES[: min(last, 3) + 1]:
            record(name, {"skipped": True}, skipped=True)
        calibration, results = None, []
    else:
        calibration = calibrate_model(
            model, data.calib_x, group_length=cfg.lam, batch_size=64, seed=cfg.seed
        )
        record("calibrate", calibration.to_dict(), sequences=len(data.calib_x))
        if last == 0:
            return PipelineResult(report, ModelAssignment.passthrough(len(model.blocks)), calibration)

        routes = []
        for cal in calibration.blocks:
            median = cal.abar.median
            kind = skewness_route(cal.abar.samples, cfg.alpha) if cfg.use_ltsq else QuantKind.UNIFORM
            routes.append({"abar_median": median, "route": kind.value})
        record("route", routes, routes=routes)
        if last == 1:
            return PipelineResult(report, ModelAssignment.passthrough(len(model.blocks)), calibration)

        quant = build_model_assignment(
            calibration, model, cfg.bit_policy, cfg.initializer,
            cfg.alpha, cfg.use_ltsq, cfg.use_tgq,
        )
        record("init", quant.to_dict(), policy=cfg.bit_policy.to_dict())
        results = []
        if last >= 3:
            if cfg.recon.enabled:
                quant, results = reconstruct_model(model, quant, calibration, cfg.recon)
                record("reconstruct", quant.to_dict(), blocks=[r.summary() for r in results])
            else:
                record("reconstruct", {"skipped": True}, skipped=True)

    if last == 4:
        fp_acc, fp_loss = evaluate(model, *data.val)
        acc, loss = evaluate(model, *data.val, quant=quant, use_shift=cfg.use_shift)
        metrics = {"fp_accuracy": fp_acc, "fp_loss": fp_loss, "accuracy": acc, "loss": loss}
        record("eval", metrics, **metrics)
        report.update(metrics)
        logger.info("accuracy FP %.4f -> quantized %.4f", fp_acc, acc)
    return PipelineResult(report, quant, calibration, results)


# --------------------------------------------------------------------------
# Distribution analysis


def _time_major(h):
    h = np.asarray(h, dtype=np.float64)
    if h.ndim == 3:
        return h.reshape(h.shape[0], -1)
    if h.ndim == 4:
        return np.moveaxis(h, 1, 0).reshape(h.shape[1], -1)
    raise EngineError(f"hidden states must be 3-D (L, D, N) or 4-D (B, L, D, N), got {h.ndim}-D")


def analyze_traces(abar_by_ssm, hidden_by_ssm, alpha=0.9, bins=64):
    """
    Tabulate decay-factor medians, per-step hidden-state ranges and histograms.
    Args:
        abar_by_ssm (list): One decay-factor array per SSM.
        hidden_by_ssm (list): One hidden-state array per SSM, time-major
            (L, D, N) or batched (B, L, D, N).
        alpha (float): Skewness boundary used for the routing column.
    Returns:
        dict[str, pd.DataFrame]: abar_medians, hidden_steps, histograms.
    """
    medians, steps, hists = [], [], []
    for i, abar in enumerate(abar_by_ssm):
        abar = np.asarray(abar, dtype=np.float64).ravel()
        medians.append({
            "ssm": i,
            "median": float(np.median(abar)),
            "min": float(abar.min()),
            "max": float(abar.max()),
            "route": skewness_route(abar, alpha).value,
        })
        counts, edges = np.histogram(abar, bins=bins, range=(0.0, 1.0))
        hists += [
            {"ssm": i, "tensor": "abar_t", "bin_left": lo, "bin_right": hi, "count": int(c)}
            for lo, hi, c in zip(edges[:-1], edges[1:], counts)
        ]
    for i, h in enumerate(hidden_by_ssm):
        flat = _time_major(h)
        q = np.percentile(flat, [0, 25, 50, 75, 100], axis=1)
        absmax = np.abs(flat).max(axis=1)
        steps += [
            {
                "ssm": i, "t": t, "min": q[0, t], "q1": q[1, t], "median": q[2, t],
                "q3": q[3, t], "max": q[4, t], "absmax": absmax[t],
            }
            for t in range(flat.shape[0])
        ]
        counts, edges = np.histogram(flat, bins=bins)
        hists += [
            {"ssm": i, "tensor": "h_t", "bin_left": lo, "bin_right": hi, "count": int(c)}
            for lo, hi, c in zip(edges[:-1], edges[1:], counts)
        ]
    return {
        "abar_medians": pd.DataFrame(medians),
        "hidden_steps": pd.DataFrame(steps),
        "histograms": pd.DataFrame(hists),
    }


def write_frames(frames, out_dir):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for name, frame in frames.items():
        frame.to_csv(out_dir / f"{name}.csv", index=False)


def analyze_distributions(model, x, out_dir, alpha=0.9, batch_size=32):
    """
    Trace the FP model on one batch and write distribution tables.
    Writes abar_medians.csv, hidden_steps.csv, histograms.csv and
    analysis.json into out_dir.
    """
    x = np.asarray(x)[:batch_size]
    trace = trace_model(model, x)
    frames = analyze_traces(
        [bt.ssm.abar for bt in trace.block_traces],
        [bt.ssm.h_tilde for bt in trace.block_traces],
        alpha,
    )
    write_frames(frames, out_dir)
    summary = {
        "batch_size": int(len(x)),
        "alpha": alpha,
        "ssms": frames["abar_medians"].to_dict(orient="records"),
    }
    (Path(out_dir) / "analysis.json").write_text(json.dumps(summary, indent=2))
    logger.info("wrote distribution analysis for %d SSM(s) to %s", len(trace.block_traces), out_dir)
    return frames


def run_sensitivity(model, data, bits=4, use_ltsq=False, batch_size=64):
    """Accuracy drop from quantizing each SSM activation alone."""
    calibration = calibrate_model(
        model, data.calib_x, group_length=model.spec.seq_len, batch_size=batch_size
    )
    rows = [
        sensitivity_sweep(model, data.val, target, bits, calibration, use_ltsq).to_dict()
        for target in SSM_ACTIVATIONS
    ]
    return pd.DataFrame(rows).sort_values(
        ["accuracy_drop", "loss_increase"], ascending=False, kind="stable"
    )


# --------------------------------------------------------------------------
# Sweeps


def point_config(cfg, point):
    use_ltsq, use_tgq = VARIANTS[point["variant"]]
    return replace(
        cfg,
        weight_bits=point["weight_bits"],
        act_bits=point["act_bits"],
        alpha=point["alpha"],
        lam=point["lambda"],
        use_ltsq=use_ltsq,
        use_tgq=use_tgq,
    )


def _sweep_point(cfg, model, data, index, point):
    result = run_ptq_pipeline(point_config(cfg, point), model, data)
    route = next((s for s in result.report["stages"] if s["name"] == "route"), {})
    routes = route.get("routes", [])
    row = dict(point)
    row.update(
        index=index,
        fp_accuracy=result.report["fp_accuracy"],
        accuracy=result.report["accuracy"],
        loss=result.report["loss"],
        ltsq_blocks=sum(r["route"] == QuantKind.LTSQ.value for r in routes),
        recon_final_loss=float(np.mean([r.final_loss for r in result.recon_results]))
        if result.recon_results else float("nan"),
    )
    return row


def run_sweep(cfg, model=None, data=None, jobs=None):
    """
    Evaluate every (variant, bits, alpha, lambda) point of cfg.sweep.
    Points run in worker processes when jobs > 1; each is seeded from cfg.seed.
    Returns:
        pd.DataFrame: One row per point in grid order.
    """
    data = data or prepare_data(cfg)
    model = model or obtain_model(cfg, data=data)
    points = cfg.sweep.points()
    jobs = jobs or cfg.sweep.jobs
    rows = []
    progress = tqdm(total=len(points), desc="sweep", disable=settings.progress_disabled())
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            futures = {ex.submit(_sweep_point, cfg, model, data, i, p): i for i, p in enumerate(points)}
            for f in as_completed(futures):
                rows.append(f.result())
                progress.update(1)
    else:
        for i, p in enumerate(points):
            rows.append(_sweep_point(cfg, model, data, i, p))
            progress.update(1)
    progress.close()
    return pd.DataFrame(rows).sort_values("index").reset_index(drop=True)
