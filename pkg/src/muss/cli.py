"""Command-line interface.

Subcommands: generate, pretrain, calibrate, predict, scaling, fewshot,
infogain. Configuration comes from a JSON file; results are written as
CSV, models as JSON checkpoints. Exit codes: 0 success, 2 usage error,
3 malformed configuration, 4 missing file.
"""

import argparse
import dataclasses
import json
import sys

import numpy as np

from . import harness, synth
from .calib import CalibratedUnit, CalibrationConfig, calibrate, init_new_unit, predict
from .core import MultiUnitDataset, PriorConfig
from .harness import DataSplits, ExperimentConfig
from .train import TrainConfig, fit

EXIT_USAGE = 2
EXIT_BAD_CONFIG = 3
EXIT_MISSING_FILE = 4


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def _load_json(path) -> dict:
    try:
        with open(path) as fh:
            return json.load(fh)
    except FileNotFoundError:
        raise CliError(EXIT_MISSING_FILE, f"file not found: {path}")
    except json.JSONDecodeError as exc:
        raise CliError(EXIT_BAD_CONFIG, f"invalid JSON in {path}: {exc}")


def _build_dataclass(cls, payload: dict, where: str):
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(payload) - known
    if unknown:
        raise CliError(
            EXIT_BAD_CONFIG, f"unknown keys in {where}: {', '.join(sorted(unknown))}"
        )
    try:
        return cls(**payload)
    except (TypeError, ValueError) as exc:
        raise CliError(EXIT_BAD_CONFIG, f"invalid {where}: {exc}")


def load_experiment_config(path) -> tuple[ExperimentConfig, dict]:
    """Read the experiment configuration JSON; absent keys keep desk defaults."""
    payload = _load_json(path) if path else {}
    if not isinstance(payload, dict):
        raise CliError(EXIT_BAD_CONFIG, "config root must be a JSON object")
    top_known = {
        "seed",
        "context_dim",
        "hidden_width",
        "hidden_depth",
        "priors",
        "train",
        "calibration",
        "n_max",
        "scaling",
        "fewshot",
    }
    unknown = set(payload) - top_known
    if unknown:
        raise CliError(
            EXIT_BAD_CONFIG, f"unknown config keys: {', '.join(sorted(unknown))}"
        )
    kwargs = {
        k: payload[k]
        for k in ("seed", "context_dim", "hidden_width", "hidden_depth", "n_max")
        if k in payload
    }
    if "priors" in payload:
        kwargs["priors"] = _build_dataclass(PriorConfig, payload["priors"], "priors")
    if "train" in payload:
        kwargs["train"] = _build_dataclass(TrainConfig, payload["train"], "train")
    if "calibration" in payload:
        kwargs["calibration"] = _build_dataclass(
            CalibrationConfig, payload["calibration"], "calibration"
        )
    try:
        cfg = ExperimentConfig(**kwargs)
    except (TypeError, ValueError) as exc:
        raise CliError(EXIT_BAD_CONFIG, f"invalid config: {exc}")
    return cfg, payload


def _read_dataset(path):
    try:
        return synth.read_dataset(path)
    except FileNotFoundError:
        raise CliError(EXIT_MISSING_FILE, f"file not found: {path}")
    except ValueError as exc:
        raise CliError(EXIT_BAD_CONFIG, f"bad dataset {path}: {exc}")


def _require_labels(labels, path):
    if labels is None:
        raise CliError(
            EXIT_BAD_CONFIG,
            f"dataset {path} carries no train/val/test split; regenerate with --split",
        )
    return labels


def _load_model(path):
    try:
        return harness.load_checkpoint(path)
    except FileNotFoundError:
        raise CliError(EXIT_MISSING_FILE, f"file not found: {path}")
    except (ValueError, KeyError, json.JSONDecodeError) as exc:
        raise CliError(EXIT_BAD_CONFIG, f"bad checkpoint {path}: {exc}")


def cmd_generate(args):
    gen_cfg = synth.GeneratorConfig(
        n_units=args.units,
        seed=args.seed,
        points_median=args.points_median,
        horizon_days=args.horizon_days,
    )
    data = synth.generate(gen_cfg)
    labels = None
    if not args.no_split:
        split_seed = args.split_seed if args.split_seed is not None else args.seed
        labels = synth.chunked_split_labels(data, seed=split_seed)
    synth.write_dataset(args.out, data, labels)
    print(f"wrote {data.total_points} observations for {data.n_units} units to {args.out}")
    return 0


def cmd_pretrain(args):
    data, labels = _read_dataset(args.data)
    labels = _require_labels(labels, args.data)
    cfg, _ = load_experiment_config(args.config)
    train, val, _test = synth.apply_split(data, labels)
    train_cfg = dataclasses.replace(
        cfg.train, seed=cfg.seed if args.seed is None else args.seed, log_every=args.log_every
    )
    result = fit(train, val, cfg.network_for(data), cfg.priors, train_cfg)
    harness.save_checkpoint(args.out, result)
    if args.history:
        harness.write_history_csv(args.history, result)
    best = result.history[result.selected_epoch - 1]
    print(
        f"selected epoch {result.selected_epoch} with validation MSE "
        f"{best.validation_mse:.6g}; checkpoint written to {args.out}"
    )
    return 0


def _single_unit(data: MultiUnitDataset, unit_id, path):
    if unit_id is not None:
        for unit in data:
            if unit.unit_id == unit_id:
                return unit
        raise CliError(EXIT_BAD_CONFIG, f"unit {unit_id!r} not present in {path}")
    if data.n_units != 1:
        raise CliError(
            EXIT_BAD_CONFIG,
            f"{path} holds {data.n_units} units; pick one with --unit",
        )
    return data.units[0]


def cmd_calibrate(args):
    model = _load_model(args.model)
    data, _labels = _read_dataset(args.data)
    unit = _single_unit(data, args.unit, args.data)
    if args.n is not None:
        unit = unit.subset(np.arange(min(args.n, len(unit))))
    cfg, _ = load_experiment_config(args.config)
    calibrated = calibrate(model, unit, cfg.calibration)
    payload = {
        "unit_id": unit.unit_id,
        "context": [float(v) for v in calibrated.context],
        "precision": calibrated.precision,
        "n_points": calibrated.n_points,
    }
    with open(args.out, "w") as fh:
        json.dump(payload, fh, indent=2)
        fh.write("\n")
    print(f"calibrated context on {calibrated.n_points} points; wrote {args.out}")
    return 0


def cmd_predict(args):
    model = _load_model(args.model)
    try:
        x = np.array([float(v) for v in args.x.split(",")], dtype=float)
    except ValueError:
        raise CliError(EXIT_USAGE, f"could not parse --x value {args.x!r}")
    if args.calibrated:
        payload = _load_json(args.calibrated)
        unit = CalibratedUnit(
            context=np.array(payload["context"], dtype=float),
            precision=float(payload["precision"]),
            n_points=int(payload["n_points"]),
        )
    elif args.unit:
        if args.unit not in model.unit_ids:
            raise CliError(EXIT_BAD_CONFIG, f"unit {args.unit!r} not in checkpoint")
        i = model.unit_ids.index(args.unit)
        unit = CalibratedUnit(
            context=model.params.contexts[i],
            precision=float(model.precisions[i]),
            n_points=0,
        )
    else:
        unit = init_new_unit(model)
    mean, std = predict(model, unit, x)
    print(f"{synth.format_float(mean)},{synth.format_float(std)}")
    return 0


def cmd_scaling(args):
    data, labels = _read_dataset(args.data)
    labels = _require_labels(labels, args.data)
    cfg, payload = load_experiment_config(args.config)
    section = payload.get("scaling", {})
    m_list = [int(m) for m in section.get("m_list", [1, 2, 4, 8, 16, 32])]
    repetitions = int(section.get("repetitions", 5))
    splits = DataSplits(*synth.apply_split(data, labels))
    result = harness.run_scaling(splits, m_list, repetitions, cfg)
    harness.write_scaling_csv(args.out, result)
    summary = {
        "a": result.coeff_a,
        "b": result.coeff_b,
        "r_squared": result.r_squared,
        "per_m_mean": {str(m): v for m, v in result.per_m_mean.items()},
    }
    print(json.dumps(summary))
    return 0


def _holdout_args(args, payload):
    section = payload.get("fewshot", {})
    n_base = int(section.get("n_base", 24))
    repetitions = int(section.get("repetitions", 3))
    return n_base, repetitions


def cmd_fewshot(args):
    data, labels = _read_dataset(args.data)
    labels = _require_labels(labels, args.data)
    cfg, payload = load_experiment_config(args.config)
    n_base, repetitions = _holdout_args(args, payload)
    result = harness.run_fewshot(data, labels, n_base, repetitions, cfg)
    harness.write_fewshot_csv(args.out, result)
    if args.aggregate_out:
        harness.write_aggregate_csv(args.aggregate_out, result.aggregate, "mape")
    print(
        json.dumps(
            {
                "base_reference_mape": result.base_reference_mape,
                "repetitions_run": result.repetitions_run,
                "skipped_units": result.skipped_units,
            }
        )
    )
    return 0


def cmd_infogain(args):
    data, labels = _read_dataset(args.data)
    labels = _require_labels(labels, args.data)
    cfg, payload = load_experiment_config(args.config)
    n_base, repetitions = _holdout_args(args, payload)
    result = harness.run_infogain(data, labels, n_base, repetitions, cfg)
    harness.write_infogain_csv(args.out, result)
    if args.aggregate_out:
        harness.write_aggregate_csv(args.aggregate_out, result.aggregate, "nats")
    print(
        json.dumps(
            {
                "repetitions_run": result.repetitions_run,
                "skipped_units": result.skipped_units,
            }
        )
    )
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="muss", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="generate a synthetic multi-unit dataset")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--units", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--points-median", type=float, default=300.0)
    p.add_argument("--horizon-days", type=int, default=730)
    p.add_argument("--no-split", action="store_true")
    p.add_argument("--split-seed", type=int, default=None)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("pretrain", help="fit the multi-unit model on a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--history", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--log-every", type=int, default=0)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("calibrate", help="calibrate a new unit's context")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--unit", default=None)
    p.add_argument("--n", type=int, default=None)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("predict", help="predictive mean and standard deviation")
    p.add_argument("--model", required=True)
    p.add_argument("--x", required=True, help="comma-separated feature vector")
    p.add_argument("--calibrated", default=None)
    p.add_argument("--unit", default=None)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("scaling", help="test error versus number of units")
    p.add_argument("--data", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_scaling)

    p = sub.add_parser("fewshot", help="few-shot calibration error curves")
    p.add_argument("--data", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--aggregate-out", default=None)
    p.set_defaults(func=cmd_fewshot)

    p = sub.add_parser("infogain", help="information-gain curves")
    p.add_argument("--data", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--aggregate-out", default=None)
    p.set_defaults(func=cmd_infogain)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc.code}: {exc}", file=sys.stderr)
        return exc.code
    except FileNotFoundError as exc:
        print(f"error: {EXIT_MISSING_FILE}: file not found: {exc.filename}", file=sys.stderr)
        return EXIT_MISSING_FILE


if __name__ == "__main__":
    raise SystemExit(main())
