"""Command-line entry point: simulate, train and evaluate runs.

Each command reads one JSON config file, fills in defaults, writes the
fully resolved config next to its outputs and is deterministic given
that resolved config (numeric outputs fixed to 9 significant digits).
All randomness derives from the single root ``seed`` via fixed-tag
sub-streams (see seeds module).

Exit codes: 0 success, 2 input/config error, 3 numerical failure.

Config layout (all blocks optional, unknown keys rejected)::

    {
      "seed": 0,
      "out_dir": "runs/example",
      "simulate": { ... SimConfig fields, e.g. "n_individuals": 100 ... },
      "data": {"time_series": "ts.csv", "baseline": "base.csv"},
      "pipeline": {"enabled": true, "min_visits": 2,
                   "variance_threshold": 1.0, "transform": "none"},
      "model": { ... ModelConfig fields, e.g. "epochs": 100 ... },
      "evaluate": {"checkpoint": "checkpoint.json", "methods": [...],
                   "reference": "reg_shift", "replicates": null}
    }
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import os
import sys

from . import datagen, evaluation, model as model_mod, pipeline
from .datagen import GroupSystem, SimConfig
from .errors import (
    InvalidArgumentError,
    LatentDynError,
    NonFiniteError,
    SchemaError,
    TrainingDivergedError,
)
from .model import JointModel, ModelConfig
from .pipeline import format_float

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_NUMERIC = 3

_TOP_KEYS = {"seed", "out_dir", "simulate", "data", "pipeline", "model", "evaluate"}
_DATA_KEYS = {"time_series", "baseline"}
_PIPELINE_KEYS = {"enabled", "min_visits", "variance_threshold", "transform"}
_EVALUATE_KEYS = {"checkpoint", "methods", "reference", "replicates"}

_PIPELINE_DEFAULTS = {"enabled": True, "min_visits": 2, "variance_threshold": 1.0, "transform": "none"}


def _check_keys(block: dict, allowed: set, context: str) -> None:
    unknown = sorted(set(block) - allowed)
    if unknown:
        raise SchemaError(f"{context}: unknown keys {unknown}; allowed: {sorted(allowed)}")


def _load_config(path: str) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            config = json.load(fh)
    except FileNotFoundError:
        raise SchemaError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(config, dict):
        raise SchemaError(f"{path}: config must be a JSON object")
    _check_keys(config, _TOP_KEYS, path)
    return config


def _resolve_common(config: dict, args) -> dict:
    resolved = dict(config)
    if args.seed is not None:
        resolved["seed"] = args.seed
    resolved.setdefault("seed", 0)
    if args.out is not None:
        resolved["out_dir"] = args.out
    resolved.setdefault("out_dir", ".")
    block = dict(_PIPELINE_DEFAULTS)
    block.update(resolved.get("pipeline", {}))
    _check_keys(block, _PIPELINE_KEYS, "pipeline")
    resolved["pipeline"] = block
    return resolved


def _sim_config(resolved: dict) -> SimConfig:
    block = dict(resolved.get("simulate", {}))
    field_names = {f.name for f in dataclasses.fields(SimConfig)}
    _check_keys(block, field_names, "simulate")
    if "groups" in block:
        block["groups"] = [
            GroupSystem(tuple(map(tuple, g["a"])), tuple(g.get("c", (0.0, 0.0)))) for g in block["groups"]
        ]
    if "initial_value" in block:
        block["initial_value"] = tuple(block["initial_value"])
    block.setdefault("seed", resolved["seed"])
    return SimConfig(**block)


def _model_config(resolved: dict) -> ModelConfig:
    block = dict(resolved.get("model", {}))
    field_names = {f.name for f in dataclasses.fields(ModelConfig)}
    _check_keys(block, field_names, "model")
    block.setdefault("seed", resolved["seed"])
    return ModelConfig(**block)


def _write_resolved(resolved: dict, out_dir: str) -> None:
    payload = dict(resolved)
    # the output location is not part of the computation, so keep the
    # resolved config byte-identical across reruns into different dirs
    payload.pop("out_dir", None)
    for key in ("simulate", "model"):
        if key in payload and dataclasses.is_dataclass(payload[key]):
            payload[key] = dataclasses.asdict(payload[key])
    with open(os.path.join(out_dir, "resolved_config.json"), "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)


def _ensure_out_dir(path: str) -> None:
    try:
        os.makedirs(path, exist_ok=True)
        probe = os.path.join(path, ".write_probe")
        with open(probe, "w", encoding="utf-8"):
            pass
        os.remove(probe)
    except OSError as exc:
        raise SchemaError(f"output directory {path!r} is not writable: {exc}") from None


def _load_data(resolved: dict) -> pipeline.Dataset:
    block = dict(resolved.get("data", {}))
    _check_keys(block, _DATA_KEYS, "data")
    missing = [k for k in _DATA_KEYS if k not in block]
    if missing:
        raise SchemaError(f"data: missing keys {missing}")
    for key in _DATA_KEYS:
        if not os.path.exists(block[key]):
            raise SchemaError(f"data.{key}: file not found: {block[key]}")
    return pipeline.load_dataset(block["time_series"], block["baseline"])


def _apply_pipeline(dataset: pipeline.Dataset, block: dict):
    reports = []
    if block["enabled"]:
        dataset, reports = pipeline.preprocess(
            dataset, min_visits=int(block["min_visits"]), variance_threshold=float(block["variance_threshold"])
        )
    dataset = pipeline.transform_items(dataset, mode=block["transform"])
    return dataset, reports


def cmd_simulate(args) -> int:
    resolved = _resolve_common(_load_config(args.config), args)
    sim = _sim_config(resolved)
    sim.validate()
    out = resolved["out_dir"]
    _ensure_out_dir(out)
    cohort = datagen.simulate_cohort(sim)
    datagen.write_cohort(
        cohort,
        os.path.join(out, "time_series.csv"),
        os.path.join(out, "baseline.csv"),
        os.path.join(out, "ground_truth.csv"),
    )
    resolved["simulate"] = sim
    _write_resolved(resolved, out)
    print(f"simulated {len(cohort.individuals)} individuals -> {out}")
    return EXIT_OK


def _write_trace(result: model_mod.TrainResult, path: str) -> None:
    columns = ["epoch", "mean_total", "mean_kl", "mean_recon_nll", "mean_consistency", "mean_variance_reg", "skipped"]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(columns)
        for row in result.epochs:
            w.writerow(
                [row["epoch"]]
                + [format_float(row[c]) for c in columns[1:-1]]
                + [row["skipped"]]
            )


def cmd_train(args) -> int:
    resolved = _resolve_common(_load_config(args.config), args)
    model_config = _model_config(resolved)
    dataset = _load_data(resolved)
    out = resolved["out_dir"]
    _ensure_out_dir(out)
    dataset, reports = _apply_pipeline(dataset, resolved["pipeline"])
    if not dataset.individuals:
        raise SchemaError("no individuals left after preprocessing")
    model = JointModel.create(model_config, dataset.n_items, dataset.n_baseline)
    model, result = model_mod.train(model, dataset)
    model_mod.save_checkpoint(model, os.path.join(out, "checkpoint.json"))
    _write_trace(result, os.path.join(out, "training_trace.csv"))
    with open(os.path.join(out, "filter_reports.json"), "w", encoding="utf-8") as fh:
        fh.write(pipeline.reports_to_json(reports))
    resolved["model"] = model_config
    _write_resolved(resolved, out)
    print(f"trained on {len(dataset.individuals)} individuals for {model_config.epochs} epochs -> {out}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    resolved = _resolve_common(_load_config(args.config), args)
    block = dict(resolved.get("evaluate", {}))
    _check_keys(block, _EVALUATE_KEYS, "evaluate")
    methods = tuple(block.get("methods", evaluation.DEFAULT_METHODS))
    reference = block.get("reference", evaluation.DEFAULT_REFERENCE)
    if args.replicates is not None:
        block["replicates"] = args.replicates
    replicates = block.get("replicates")
    out = resolved["out_dir"]
    _ensure_out_dir(out)
    resolved["evaluate"] = block

    if replicates:
        sim = _sim_config(resolved)
        model_config = _model_config(resolved)
        report = evaluation.replicate_study(
            sim,
            n_replicates=int(replicates),
            model_config=model_config,
            root_seed=int(resolved["seed"]),
            methods=methods,
            reference=reference,
        )
        resolved["simulate"], resolved["model"] = sim, model_config
    else:
        checkpoint = block.get("checkpoint")
        if not checkpoint:
            raise SchemaError("evaluate: single-run mode needs a 'checkpoint' path")
        if not os.path.exists(checkpoint):
            raise SchemaError(f"evaluate.checkpoint: file not found: {checkpoint}")
        model = model_mod.load_checkpoint(checkpoint)
        dataset = _load_data(resolved)
        dataset, _ = _apply_pipeline(dataset, resolved["pipeline"])
        report, records = evaluation.evaluate_dataset(model, dataset, methods, reference)
        evaluation.write_predictions_csv(records, os.path.join(out, "predictions.csv"), list(methods))

    with open(os.path.join(out, "metrics.json"), "w", encoding="utf-8") as fh:
        fh.write(report.to_json())
    evaluation.write_metrics_csv(report, os.path.join(out, "metrics.csv"))
    _write_resolved(resolved, out)
    summary = report.improvement_summary("ode") if "ode" in report.improvements else None
    if summary:
        print(
            f"evaluated {report.replicate_count} run(s); ode vs {reference}: "
            f"mean {summary['mean']:.2f}%, min {summary['min']:.2f}%, max {summary['max']:.2f}%"
        )
    else:
        print(f"evaluated {report.replicate_count} run(s) -> {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="latentdyn",
        description="Latent dynamic modeling of longitudinal cohort data",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn, help_text in (
        ("simulate", cmd_simulate, "write a simulated cohort to disk"),
        ("train", cmd_train, "preprocess a dataset and train the joint model"),
        ("evaluate", cmd_evaluate, "next-visit prediction metrics, single run or replicate study"),
    ):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True, help="path to the JSON run config")
        p.add_argument("--out", default=None, help="output directory (overrides config out_dir)")
        p.add_argument("--seed", type=int, default=None, help="root seed (overrides config seed)")
        if name == "evaluate":
            p.add_argument(
                "--replicates", type=int, default=None,
                help="run a fresh simulate/train/evaluate study with this many replicates",
            )
        p.set_defaults(fn=fn)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (TrainingDivergedError, NonFiniteError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (SchemaError, InvalidArgumentError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except LatentDynError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
