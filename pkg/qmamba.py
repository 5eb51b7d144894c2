#!/usr/bin/env python3
"""
qmamba.py: Command-line front end for post-training quantization of
selective state space models.

Each verb reads an experiment config (TOML or JSON), honours --seed and
--out, and writes JSON/CSV artifacts. Failures exit nonzero with a JSON
error object on stderr.
"""

import argparse
import json
import logging
import sys
from pathlib import Path

import settings
from efficiency import estimate_efficiency, vim_b_spec
from errors import QMambaError
from pipeline import (
    analyze_distributions,
    load_config,
    obtain_model,
    prepare_data,
    run_ptq_pipeline,
    run_sensitivity,
    run_sweep,
)
from ssm_engine import ModelAssignment, evaluate, save_model
from training import train_toy_model

logger = logging.getLogger("qmamba")

VERBS = ("calibrate", "quantize", "reconstruct", "eval", "analyze", "sweep", "estimate", "train-toy")


def write_json(path, payload):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, default=float))
    return path


def cmd_train_toy(cfg, args, out):
    result = train_toy_model(cfg.dataset, cfg.model, cfg.seed, cfg.train)
    save_model(result.model, out / "model")
    write_json(out / "train.json", {**result.summary(), "history": result.history, "config": cfg.to_dict()})
    return result.summary()


def _pipeline(cfg, args, out, stop_after):
    data = prepare_data(cfg)
    model = obtain_model(cfg, args.model, data)
    result = run_ptq_pipeline(cfg, model, data, stop_after=stop_after)
    write_json(out / "report.json", result.report)
    return result


def cmd_calibrate(cfg, args, out):
    result = _pipeline(cfg, args, out, "route")
    write_json(out / "calibration.json", result.calibration.to_dict() if result.calibration else {})
    return {"stages": [s["name"] for s in result.report["stages"]]}


def cmd_quantize(cfg, args, out):
    cfg.recon.enabled = False
    result = _pipeline(cfg, args, out, "eval")
    write_json(out / "assignment.json", result.assignment.to_dict())
    return {"accuracy": result.report["accuracy"], "fp_accuracy": result.report["fp_accuracy"]}


def cmd_reconstruct(cfg, args, out):
    result = _pipeline(cfg, args, out, "eval")
    write_json(out / "assignment.json", result.assignment.to_dict())
    for i, r in enumerate(result.recon_results):
        r.write_curve(out / f"recon_curve_block{i}.csv")
    return {
        "accuracy": result.report["accuracy"],
        "fp_accuracy": result.report["fp_accuracy"],
        "recon": [r.summary() for r in result.recon_results],
    }


def cmd_eval(cfg, args, out):
    if args.assignment is None:
        result = _pipeline(cfg, args, out, "eval")
        return {"accuracy": result.report["accuracy"], "fp_accuracy": result.report["fp_accuracy"]}
    data = prepare_data(cfg)
    model = obtain_model(cfg, args.model, data)
    quant = ModelAssignment.from_dict(json.loads(Path(args.assignment).read_text()))
    fp_acc, fp_loss = evaluate(model, *data.val)
    acc, loss = evaluate(model, *data.val, quant=quant, use_shift=cfg.use_shift)
    summary = {"fp_accuracy": fp_acc, "fp_loss": fp_loss, "accuracy": acc, "loss": loss}
    write_json(out / "report.json", summary)
    return summary


def cmd_analyze(cfg, args, out):
    data = prepare_data(cfg)
    model = obtain_model(cfg, args.model, data)
    frames = analyze_distributions(model, data.val[0], out, cfg.alpha, cfg.analyze_batch_size)
    summary = {"routes": frames["abar_medians"]["route"].tolist()}
    if args.sensitivity_bits:
        table = run_sensitivity(model, data, args.sensitivity_bits)
        table.to_csv(out / "sensitivity.csv", index=False)
        summary["most_sensitive"] = table["target"].tolist()[:2]
    return summary


def cmd_sweep(cfg, args, out):
    data = prepare_data(cfg)
    model = obtain_model(cfg, args.model, data)
    table = run_sweep(cfg, model, data, jobs=args.jobs)
    out.mkdir(parents=True, exist_ok=True)
    table.to_csv(out / "sweep.csv", index=False)
    return {"points": len(table), "best": table.loc[table["accuracy"].idxmax()].to_dict()}


def cmd_estimate(cfg, args, out):
    spec = vim_b_spec() if args.preset == "vim-b" else cfg.model
    result = estimate_efficiency(spec, cfg.weight_bits, cfg.act_bits, cfg.bit_policy)
    out.mkdir(parents=True, exist_ok=True)
    result.pop("layers").to_csv(out / "layers.csv", index=False)
    write_json(out / "efficiency.json", {**result, "spec": spec.to_dict()})
    return result["reductions"]


COMMANDS = {
    "calibrate": cmd_calibrate,
    "quantize": cmd_quantize,
    "reconstruct": cmd_reconstruct,
    "eval": cmd_eval,
    "analyze": cmd_analyze,
    "sweep": cmd_sweep,
    "estimate": cmd_estimate,
    "train-toy": cmd_train_toy,
}


def build_parser():
    parser = argparse.ArgumentParser(description="qmamba: post-training quantization for selective SSMs.")
    parser.add_argument("--log-level", default=None, help="Override QMAMBA_LOG_LEVEL.")
    sub = parser.add_subparsers(dest="verb", required=True)
    for verb in VERBS:
        p = sub.add_parser(verb)
        p.add_argument("--config", default=None, help="Experiment config, .toml or .json.")
        p.add_argument("--seed", type=int, default=None, help="Override the config seed.")
        p.add_argument("--out", default=None, help="Output directory (default: $QMAMBA_OUT/<verb>).")
        if verb != "estimate" and verb != "train-toy":
            p.add_argument("--model", default=None, help="Saved model directory; trains the toy model if omitted.")
        if verb == "eval":
            p.add_argument("--assignment", default=None, help="assignment.json to evaluate instead of running the pipeline.")
        if verb == "analyze":
            p.add_argument("--sensitivity-bits", type=int, default=4, help="Bit width for the sensitivity table; 0 skips it.")
        if verb == "sweep":
            p.add_argument("--jobs", type=int, default=None, help="Worker processes (default: sweep.jobs).")
        if verb == "estimate":
            p.add_argument("--preset", choices=["config", "vim-b"], default="config", help="Model spec to cost.")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    settings.setup_logging(args.log_level)
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg.seed = args.seed
        out = Path(args.out or Path(settings.default_out_dir) / args.verb)
        out.mkdir(parents=True, exist_ok=True)
        summary = COMMANDS[args.verb](cfg, args, out)
    except (QMambaError, OSError, ValueError) as e:
        logger.debug("failed", exc_info=True)
        print(
            json.dumps({"error": type(e).__name__, "message": str(e), "verb": args.verb}),
            file=sys.stderr,
        )
        return 1
    print(json.dumps({"verb": args.verb, "out": str(out), **summary}, default=float))
    return 0


if __name__ == "__main__":
    sys.exit(main())
