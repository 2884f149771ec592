"""Experiment orchestration: scaling with unit count, few-shot learning, information gain.

All experiments are deterministic in one master seed: every task (a
pretraining run, a calibration curve) receives a seed derived from the
master stream during a serial planning phase, after which independent
tasks may execute in a worker pool. Result aggregation is order-fixed,
so parallel runs reproduce serial output byte for byte. The environment
variable ``MUSS_THREADS`` caps worker parallelism.
"""

import csv
import dataclasses
import io
import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .calib import CalibrationConfig, CalibratedUnit, calibrate, init_new_unit
from .core import ModelParams, MultiUnitDataset, PriorConfig, UnitDataset
from .net import NetworkSpec
from .posterior import context_hessian, kl_to_standard_normal, laplace_posterior
from .synth import format_float, sequential_fewshot_sequence
from .train import FitResult, TrainConfig, fit, predictions_for_unit

MAPE_GUARD = 1e-3


class DataSplits(NamedTuple):
    train: MultiUnitDataset
    val: MultiUnitDataset
    test: MultiUnitDataset


@dataclass(frozen=True)
class ExperimentConfig:
    """Shared model/optimizer settings for the experiment runners.

    The defaults are desk-scale: a 64-wide, 3-deep network with a
    4-dimensional context, trained for 2000 epochs. Paper-scale values
    (width 400, depth 4, K=10, 20000 epochs at rate 1e-4, batch 2048)
    remain fully configurable.
    """

    seed: int = 0
    context_dim: int = 4
    hidden_width: int = 64
    hidden_depth: int = 3
    priors: PriorConfig = field(default_factory=PriorConfig)
    train: TrainConfig = field(
        default_factory=lambda: TrainConfig(
            learning_rate=1e-3, epochs=2000, batch_budget=512
        )
    )
    calibration: CalibrationConfig = field(default_factory=CalibrationConfig)
    n_max: int = 10

    def network_for(self, data) -> NetworkSpec:
        return NetworkSpec(
            input_dim=data.input_dim,
            context_dim=self.context_dim,
            hidden_width=self.hidden_width,
            hidden_depth=self.hidden_depth,
        )


def mape(predictions, targets, guard: float = MAPE_GUARD) -> float:
    """Mean absolute percentage error with a denominator guard.

    Targets closer to zero than ``guard`` are divided by ``guard``
    instead, keeping the metric bounded on normalized data.
    """
    predictions = np.asarray(predictions, dtype=float).reshape(-1)
    targets = np.asarray(targets, dtype=float).reshape(-1)
    if targets.size == 0:
        raise ValueError("mape requires at least one target")
    if predictions.shape != targets.shape:
        raise ValueError("predictions and targets must have equal length")
    denom = np.maximum(np.abs(targets), guard)
    return float(100.0 * np.mean(np.abs(predictions - targets) / denom))


def fit_inverse_sqrt(m_values, mse_values) -> tuple[float, float, float]:
    """Least-squares fit of mse = a + b / sqrt(m); returns (a, b, R^2)."""
    m = np.asarray(m_values, dtype=float)
    y = np.asarray(mse_values, dtype=float)
    design = np.column_stack([np.ones_like(m), 1.0 / np.sqrt(m)])
    coef, *_ = np.linalg.lstsq(design, y, rcond=None)
    resid = y - design @ coef
    ss_res = float(resid @ resid)
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    if ss_tot == 0.0:
        r2 = 1.0 if ss_res < 1e-30 else -math.inf
    else:
        r2 = 1.0 - ss_res / ss_tot
    return float(coef[0]), float(coef[1]), r2


def _worker_count(n_tasks: int) -> int:
    env = os.environ.get("MUSS_THREADS")
    workers = int(env) if env else (os.cpu_count() or 1)
    return max(1, min(workers, n_tasks))


_POOL_BLAS_LIMIT = None


def _limit_worker_blas(threads: int):
    # keep a reference so the limit persists for the worker's lifetime
    global _POOL_BLAS_LIMIT
    try:
        from threadpoolctl import threadpool_limits

        _POOL_BLAS_LIMIT = threadpool_limits(limits=threads)
    except ImportError:
        pass


def _run_tasks(func, args_list):
    """Run tasks serially or in a process pool; output order is fixed."""
    workers = _worker_count(len(args_list))
    if workers <= 1 or len(args_list) <= 1:
        return [func(a) for a in args_list]
    per_worker = max(1, (os.cpu_count() or 1) // workers)
    with ProcessPoolExecutor(
        max_workers=workers, initializer=_limit_worker_blas, initargs=(per_worker,)
    ) as pool:
        return list(pool.map(func, args_list))


# ---------------------------------------------------------------------------
# scaling experiment


@dataclass
class ScalingRow:
    m: int
    run_id: int
    mean_test_mse: float


@dataclass
class ScalingResult:
    rows: list[ScalingRow]
    coeff_a: float
    coeff_b: float
    r_squared: float
    per_m_mean: dict[int, float]


def _subset_units(data: MultiUnitDataset, indices) -> MultiUnitDataset:
    return MultiUnitDataset([data.units[i] for i in indices])


def _capped_train_config(cfg: ExperimentConfig, train_data, seed: int) -> TrainConfig:
    # cap the batch budget at the training set size: drawing more rows than
    # exist only duplicates work without reducing estimator variance
    nonempty = sum(1 for u in train_data if len(u) > 0)
    budget = max(nonempty, min(cfg.train.batch_budget, train_data.total_points))
    return dataclasses.replace(cfg.train, seed=int(seed), batch_budget=budget)


def _scaling_task(task):
    m, rep, group_index, unit_indices, seed, splits, cfg = task
    train_data = _subset_units(splits.train, unit_indices)
    val_data = _subset_units(splits.val, unit_indices)
    test_data = _subset_units(splits.test, unit_indices)
    result = fit(
        train_data,
        val_data,
        cfg.network_for(train_data),
        cfg.priors,
        _capped_train_config(cfg, train_data, seed),
    )
    unit_mses = []
    for i, unit in enumerate(test_data):
        if len(unit) == 0:
            continue
        preds = predictions_for_unit(
            unit.x, result.params.contexts[i], result.params.theta, result.spec
        )
        unit_mses.append(float(np.mean((preds - unit.y) ** 2)))
    return (m, rep, group_index, unit_mses)


def run_scaling(
    splits: DataSplits,
    m_list: list[int],
    repetitions: int,
    cfg: ExperimentConfig,
) -> ScalingResult:
    """Average test MSE as a function of the number of jointly trained units.

    For every group size m and repetition, the units are randomly
    partitioned into disjoint groups of m (leftovers dropped, fresh
    partition each repetition), one model is fitted per group, and the
    per-unit test MSEs are averaged across the repetition. The aggregate
    per-m means are then fitted with a + b/sqrt(m).
    """
    n_units = splits.train.n_units
    if any(m < 1 or m > n_units for m in m_list):
        raise ValueError("every group size must be within [1, n_units]")
    master = np.random.SeedSequence(cfg.seed)
    partition_seq, fit_seq = master.spawn(2)
    rep_rngs = [np.random.default_rng(s) for s in partition_seq.spawn(repetitions)]

    tasks = []
    for rep in range(repetitions):
        for m in m_list:
            perm = rep_rngs[rep].permutation(n_units)
            n_groups = n_units // m
            if n_groups == 0:
                raise ValueError(f"group size {m} exceeds the {n_units} available units")
            for g in range(n_groups):
                tasks.append((m, rep, g, tuple(int(i) for i in perm[g * m : (g + 1) * m])))

    seeds = fit_seq.generate_state(len(tasks), dtype=np.uint32)
    args = [
        (m, rep, g, idx, int(seeds[k]), splits, cfg)
        for k, (m, rep, g, idx) in enumerate(tasks)
    ]
    outcomes = _run_tasks(_scaling_task, args)

    per_rep: dict[tuple[int, int], list[float]] = {}
    for m, rep, _g, unit_mses in outcomes:
        per_rep.setdefault((m, rep), []).extend(unit_mses)
    rows = []
    for rep in range(repetitions):
        for m in m_list:
            mses = per_rep.get((m, rep), [])
            if not mses:
                raise RuntimeError(f"no test observations for group size {m}, run {rep}")
            rows.append(ScalingRow(m=m, run_id=rep, mean_test_mse=float(np.mean(mses))))

    per_m = {
        m: float(np.mean([r.mean_test_mse for r in rows if r.m == m])) for m in m_list
    }
    a, b, r2 = fit_inverse_sqrt(list(per_m.keys()), list(per_m.values()))
    return ScalingResult(rows=rows, coeff_a=a, coeff_b=b, r_squared=r2, per_m_mean=per_m)


# ---------------------------------------------------------------------------
# few-shot and information-gain experiments (shared holdout protocol)


@dataclass
class HoldoutCurve:
    """Per-unit outcome of one holdout repetition."""

    unit_id: str
    repetition: int
    mape_by_n: list[float]
    nats_by_n: list[float]


@dataclass
class HoldoutExperiment:
    curves: list[HoldoutCurve]
    representative: dict[str, int]
    base_reference_mapes: list[float]
    repetitions_run: int
    skipped_units: list[str]


@dataclass
class AggregateRow:
    n: int
    median: float
    q25: float
    q75: float
    count: int


@dataclass
class FewShotResult:
    per_unit: dict[str, list[tuple[int, float]]]
    aggregate: list[AggregateRow]
    base_reference_mape: float
    repetitions_run: int
    skipped_units: list[str]


@dataclass
class InfoGainResult:
    per_unit: dict[str, list[tuple[int, float, float]]]
    aggregate: list[AggregateRow]
    repetitions_run: int
    skipped_units: list[str]

    LOG2_E = math.log2(math.e)


def _holdout_task(task):
    (rep, base_indices, holdout_indices, seed, data, labels, cfg) = task
    base_train = MultiUnitDataset(
        [data.units[i].subset(np.flatnonzero(labels[i] == 0)) for i in base_indices]
    )
    base_val = MultiUnitDataset(
        [data.units[i].subset(np.flatnonzero(labels[i] == 1)) for i in base_indices]
    )
    base_test = [data.units[i].subset(np.flatnonzero(labels[i] == 2)) for i in base_indices]
    result = fit(
        base_train,
        base_val,
        cfg.network_for(base_train),
        cfg.priors,
        _capped_train_config(cfg, base_train, seed),
    )

    base_mapes = []
    for i, unit in enumerate(base_test):
        if len(unit) == 0:
            continue
        preds = predictions_for_unit(
            unit.x, result.params.contexts[i], result.params.theta, result.spec
        )
        base_mapes.append(mape(preds, unit.y))

    curves = []
    skipped = []
    for i in holdout_indices:
        unit = data.units[i]
        steps = sequential_fewshot_sequence(unit, n_max=cfg.n_max)
        if not steps:
            skipped.append(unit.unit_id)
            continue
        picks = [s.train_index for s in steps]
        mape_by_n = []
        nats_by_n = []
        for n in range(0, len(steps) + 1):
            subset = unit.subset(picks[:n])
            calibrated = calibrate(result, subset, cfg.calibration)
            # the zero-shot entry is scored on the first step's window
            window = steps[max(n, 1) - 1].test_indices
            test = unit.subset(window)
            preds = predictions_for_unit(
                test.x, calibrated.context, result.params.theta, result.spec
            )
            mape_by_n.append(mape(preds, test.y))
            hess = context_hessian(result, subset, calibrated)
            post = laplace_posterior(hess, calibrated.context)
            nats_by_n.append(kl_to_standard_normal(post).nats)
        curves.append(
            HoldoutCurve(
                unit_id=unit.unit_id,
                repetition=rep,
                mape_by_n=mape_by_n,
                nats_by_n=nats_by_n,
            )
        )
    return curves, base_mapes, skipped


def run_holdout_experiment(
    data: MultiUnitDataset,
    labels: list[np.ndarray],
    n_base: int,
    n_repetitions: int,
    cfg: ExperimentConfig,
) -> HoldoutExperiment:
    """Pretrain on random base units, few-shot calibrate the rest.

    Repetitions are added (beyond ``n_repetitions``) until every unit has
    been a holdout at least once. Holdout units use their full timeline
    under the sequential protocol, ignoring the train/val/test split; the
    base units train on their training split with validation selection.
    One randomly chosen repetition represents each unit.
    """
    n_units = data.n_units
    if not 1 <= n_base < n_units:
        raise ValueError("n_base must leave at least one holdout unit")
    master = np.random.SeedSequence(cfg.seed)
    plan_seq, fit_seq, pick_seq = master.spawn(3)
    plan_rng = np.random.default_rng(plan_seq)

    plans = []
    covered: set[int] = set()
    max_reps = 10 * n_repetitions + 50
    while len(plans) < n_repetitions or (len(covered) < n_units and len(plans) < max_reps):
        base = np.sort(plan_rng.choice(n_units, size=n_base, replace=False))
        holdout = np.setdiff1d(np.arange(n_units), base)
        plans.append((tuple(int(i) for i in base), tuple(int(i) for i in holdout)))
        covered.update(int(i) for i in holdout)
    if len(covered) < n_units:
        raise RuntimeError("holdout coverage not reached; raise n_repetitions")

    seeds = fit_seq.generate_state(len(plans), dtype=np.uint32)
    args = [
        (rep, base, holdout, int(seeds[rep]), data, labels, cfg)
        for rep, (base, holdout) in enumerate(plans)
    ]
    outcomes = _run_tasks(_holdout_task, args)

    curves: list[HoldoutCurve] = []
    base_mapes: list[float] = []
    skipped: set[str] = set()
    for rep_curves, rep_base, rep_skipped in outcomes:
        curves.extend(rep_curves)
        base_mapes.extend(rep_base)
        skipped.update(rep_skipped)

    pick_rng = np.random.default_rng(pick_seq)
    representative = {}
    for unit_id in data.unit_ids:
        reps = sorted(c.repetition for c in curves if c.unit_id == unit_id)
        if reps:
            representative[unit_id] = int(reps[pick_rng.integers(0, len(reps))])
    return HoldoutExperiment(
        curves=curves,
        representative=representative,
        base_reference_mapes=base_mapes,
        repetitions_run=len(plans),
        skipped_units=sorted(skipped),
    )


def _aggregate(values_by_n: dict[int, list[float]]) -> list[AggregateRow]:
    rows = []
    for n in sorted(values_by_n):
        vals = np.array(values_by_n[n])
        rows.append(
            AggregateRow(
                n=n,
                median=float(np.median(vals)),
                q25=float(np.percentile(vals, 25)),
                q75=float(np.percentile(vals, 75)),
                count=len(vals),
            )
        )
    return rows


def _representative_curves(experiment: HoldoutExperiment) -> list[HoldoutCurve]:
    chosen = []
    for curve in experiment.curves:
        if experiment.representative.get(curve.unit_id) == curve.repetition:
            chosen.append(curve)
    return chosen


def fewshot_result(experiment: HoldoutExperiment) -> FewShotResult:
    per_unit = {}
    values_by_n: dict[int, list[float]] = {}
    for curve in _representative_curves(experiment):
        per_unit[curve.unit_id] = [(n, v) for n, v in enumerate(curve.mape_by_n)]
        for n, v in enumerate(curve.mape_by_n):
            values_by_n.setdefault(n, []).append(v)
    reference = float(np.median(experiment.base_reference_mapes)) if experiment.base_reference_mapes else math.nan
    return FewShotResult(
        per_unit=per_unit,
        aggregate=_aggregate(values_by_n),
        base_reference_mape=reference,
        repetitions_run=experiment.repetitions_run,
        skipped_units=experiment.skipped_units,
    )


def infogain_result(experiment: HoldoutExperiment) -> InfoGainResult:
    per_unit = {}
    values_by_n: dict[int, list[float]] = {}
    for curve in _representative_curves(experiment):
        per_unit[curve.unit_id] = [
            (n, v, v * InfoGainResult.LOG2_E) for n, v in enumerate(curve.nats_by_n)
        ]
        for n, v in enumerate(curve.nats_by_n):
            values_by_n.setdefault(n, []).append(v)
    return InfoGainResult(
        per_unit=per_unit,
        aggregate=_aggregate(values_by_n),
        repetitions_run=experiment.repetitions_run,
        skipped_units=experiment.skipped_units,
    )


def run_fewshot(
    data: MultiUnitDataset,
    labels: list[np.ndarray],
    n_base: int,
    n_repetitions: int,
    cfg: ExperimentConfig,
) -> FewShotResult:
    """Few-shot test MAPE curves over holdout units; see run_holdout_experiment."""
    return fewshot_result(run_holdout_experiment(data, labels, n_base, n_repetitions, cfg))


def run_infogain(
    data: MultiUnitDataset,
    labels: list[np.ndarray],
    n_base: int,
    n_repetitions: int,
    cfg: ExperimentConfig,
) -> InfoGainResult:
    """Per-unit information-gain curves over holdout units."""
    return infogain_result(run_holdout_experiment(data, labels, n_base, n_repetitions, cfg))


# ---------------------------------------------------------------------------
# serialization

CHECKPOINT_VERSION = 1


def checkpoint_payload(result: FitResult) -> dict:
    spec = result.spec
    return {
        "format_version": CHECKPOINT_VERSION,
        "network": {
            "input_dim": spec.input_dim,
            "context_dim": spec.context_dim,
            "hidden_width": spec.hidden_width,
            "hidden_depth": spec.hidden_depth,
        },
        "priors": {
            "theta_sigma": result.priors.theta_sigma,
            "alpha": result.priors.alpha,
            "beta": result.priors.beta,
        },
        "theta": [float(v) for v in result.params.theta],
        "units": [
            {
                "unit_id": uid,
                "context": [float(v) for v in result.params.contexts[i]],
                "raw_precision": float(result.params.raw_precisions[i]),
            }
            for i, uid in enumerate(result.unit_ids)
        ],
        "training": {
            "seed": result.config.seed,
            "epochs": result.config.epochs,
            "selected_epoch": result.selected_epoch,
        },
    }


def save_checkpoint(path, result: FitResult):
    with open(path, "w") as fh:
        json.dump(checkpoint_payload(result), fh, indent=2)
        fh.write("\n")


def load_checkpoint(path) -> FitResult:
    with open(path) as fh:
        payload = json.load(fh)
    if payload.get("format_version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {payload.get('format_version')}")
    spec = NetworkSpec(**payload["network"])
    priors = PriorConfig(**payload["priors"])
    units = payload["units"]
    params = ModelParams(
        theta=np.array(payload["theta"], dtype=float),
        contexts=np.array([u["context"] for u in units], dtype=float).reshape(
            len(units), spec.context_dim
        ),
        raw_precisions=np.array([u["raw_precision"] for u in units], dtype=float),
    )
    params.validate_for(spec, len(units))
    training = payload["training"]
    cfg = TrainConfig(seed=int(training["seed"]), epochs=int(training["epochs"]))
    return FitResult(
        params=params,
        spec=spec,
        priors=priors,
        config=cfg,
        unit_ids=[u["unit_id"] for u in units],
        history=[],
        selected_epoch=int(training["selected_epoch"]),
    )


def write_history_csv(path, result: FitResult):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["epoch", "objective", "val_mse"])
        for rec in result.history:
            writer.writerow(
                [rec.epoch, format_float(rec.objective_estimate), format_float(rec.validation_mse)]
            )


def scaling_csv_bytes(result: ScalingResult) -> bytes:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["m", "run_id", "mean_test_mse"])
    for row in result.rows:
        writer.writerow([row.m, row.run_id, format_float(row.mean_test_mse)])
    return buf.getvalue().encode()


def write_scaling_csv(path, result: ScalingResult):
    with open(path, "wb") as fh:
        fh.write(scaling_csv_bytes(result))


def write_fewshot_csv(path, result: FewShotResult):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["unit_id", "n", "test_mape"])
        for unit_id in sorted(result.per_unit):
            for n, value in result.per_unit[unit_id]:
                writer.writerow([unit_id, n, format_float(value)])


def write_infogain_csv(path, result: InfoGainResult):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["unit_id", "n", "nats", "bits"])
        for unit_id in sorted(result.per_unit):
            for n, nats, bits in result.per_unit[unit_id]:
                writer.writerow([unit_id, n, format_float(nats), format_float(bits)])


def write_aggregate_csv(path, rows: list[AggregateRow], value_name: str):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["n", f"median_{value_name}", "q25", "q75", "count"])
        for row in rows:
            writer.writerow(
                [row.n, format_float(row.median), format_float(row.q25), format_float(row.q75), row.count]
            )
