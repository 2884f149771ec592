"""Joint MAP estimation by mini-batch stochastic gradient ascent.

Each iteration draws a per-unit mini-batch (with replacement), evaluates
an unbiased estimate of the unconstrained objective and its gradient,
and takes one Adam ascent step. An epoch is ceil(N / batch_budget)
iterations; validation MSE is recorded once per epoch and the parameters
from the best epoch are returned.
"""

import math
import sys
from dataclasses import dataclass, field

import numpy as np

from .core import (
    LOG_2PI,
    ModelParams,
    MultiUnitDataset,
    PriorConfig,
    context_log_prior,
    inverse_softplus,
    precision_log_prior,
    sigmoid,
    softplus,
    theta_log_prior,
)
from .net import NetworkSpec, _forward_cached, backward_batch, forward_batch, init_params


@dataclass(frozen=True)
class TrainConfig:
    """Optimization settings for joint pretraining."""

    learning_rate: float = 1e-4
    epochs: int = 20000
    batch_budget: int = 2048
    seed: int = 0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    # model selection averages validation MSE per observation by default;
    # set per_unit_validation to weight every unit equally instead
    per_unit_validation: bool = False
    log_every: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.epochs < 1 or self.batch_budget < 1:
            raise ValueError("epochs and batch_budget must be >= 1")


@dataclass
class EpochRecord:
    epoch: int
    objective_estimate: float
    validation_mse: float


@dataclass
class FitResult:
    """Selected parameters plus the per-epoch training history."""

    params: ModelParams
    spec: NetworkSpec
    priors: PriorConfig
    config: TrainConfig
    unit_ids: list[str]
    history: list[EpochRecord]
    selected_epoch: int

    @property
    def precisions(self) -> np.ndarray:
        return self.params.precisions


@dataclass
class ParamGradient:
    """Gradient of the objective with respect to (theta, contexts, t)."""

    d_theta: np.ndarray
    d_contexts: np.ndarray
    d_raw_precisions: np.ndarray


class TrainingDiverged(RuntimeError):
    """Raised when the objective becomes non-finite during optimization."""


def draw_minibatch(data: MultiUnitDataset, cfg: TrainConfig, rng) -> list[np.ndarray]:
    """Per-unit index arrays drawn uniformly with replacement.

    Unit i receives max(1, round(B * N_i / N)) draws; units without
    observations get an empty index array.
    """
    sizes = np.array([len(u) for u in data], dtype=float)
    total = sizes.sum()
    if total <= 0:
        return [np.empty(0, dtype=int) for _ in data.units]
    active = int(np.count_nonzero(sizes))
    if cfg.batch_budget < active:
        raise ValueError(
            f"batch_budget {cfg.batch_budget} is below the {active} non-empty units"
        )
    counts = [
        max(1, round(cfg.batch_budget * n / total)) if n else 0 for n in sizes
    ]
    # one generator call per batch; uniform floats scale to uniform indices
    draws = rng.random(int(sum(counts)))
    batch = []
    pos = 0
    for n, b in zip(sizes, counts):
        batch.append((draws[pos : pos + b] * n).astype(np.int64))
        pos += b
    return batch


def stochastic_gradient(
    params: ModelParams,
    data: MultiUnitDataset,
    batch: list[np.ndarray],
    spec: NetworkSpec,
    priors: PriorConfig,
) -> tuple[ParamGradient, float]:
    """Unbiased estimate of the objective and its gradient from one mini-batch.

    Per-unit likelihood sums are reweighted by N_i/B_i so the estimator's
    expectation over batch draws equals the full-data objective. The raw
    precision gradient includes the softplus chain factor sigmoid(t_i).
    """
    params.validate_for(spec, data.n_units)
    d = spec.input_dim
    m = data.n_units
    taus = params.precisions

    # assemble all selected observations into one matrix, rows grouped by unit
    blocks = []
    bounds = [0]
    row_weight = []
    row_tau = []
    targets = []
    unit_rows = []
    for i, unit in enumerate(data):
        idx = batch[i]
        n_i, b_i = len(unit), len(idx)
        if b_i == 0:
            bounds.append(bounds[-1])
            continue
        rows = np.empty((b_i, spec.in_features))
        rows[:, :d] = unit.x[idx]
        rows[:, d:] = params.contexts[i]
        blocks.append(rows)
        bounds.append(bounds[-1] + b_i)
        row_weight.append(np.full(b_i, n_i / b_i))
        row_tau.append(np.full(b_i, taus[i]))
        targets.append(unit.y[idx])
        unit_rows.append(i)

    d_theta = -params.theta / priors.theta_sigma**2
    d_contexts = -params.contexts.copy()
    d_tau = (priors.alpha - 1.0) / taus - priors.beta
    k = spec.context_dim
    value = theta_log_prior(params.theta, priors)
    value += float(-0.5 * m * k * LOG_2PI - 0.5 * np.sum(params.contexts**2))
    value += float(
        m * (priors.alpha * math.log(priors.beta) - math.lgamma(priors.alpha))
        + (priors.alpha - 1.0) * np.sum(np.log(taus))
        - priors.beta * np.sum(taus)
    )

    if blocks:
        inputs = np.concatenate(blocks, axis=0)
        w = np.concatenate(row_weight)
        tau_r = np.concatenate(row_tau)
        y = np.concatenate(targets)
        preds, cache = _forward_cached(inputs, params.theta, spec)
        resid = y - preds
        value += float(
            np.sum(w * (0.5 * (np.log(tau_r) - LOG_2PI) - 0.5 * tau_r * resid**2))
        )
        d_theta_lik, d_inputs = backward_batch(cache, w * tau_r * resid, spec)
        d_theta += d_theta_lik
        starts = np.array([bounds[i] for i in unit_rows])
        ctx_sums = np.add.reduceat(d_inputs[:, d:], starts, axis=0)
        tau_sums = np.add.reduceat(w * (0.5 / tau_r - 0.5 * resid**2), starts)
        for pos, i in enumerate(unit_rows):
            d_contexts[i] += ctx_sums[pos]
            d_tau[i] += tau_sums[pos]

    d_raw = sigmoid(params.raw_precisions) * d_tau
    return ParamGradient(d_theta, d_contexts, d_raw), value


def exact_gradient(
    params: ModelParams,
    data: MultiUnitDataset,
    spec: NetworkSpec,
    priors: PriorConfig,
) -> tuple[ParamGradient, float]:
    """Full-data objective and gradient (every observation used once)."""
    batch = [np.arange(len(u)) for u in data]
    return stochastic_gradient(params, data, batch, spec, priors)


class AdamState:
    """First/second moment accumulators for a list of parameter arrays."""

    def __init__(self, shapes):
        self.step = 0
        self.m = [np.zeros(s) for s in shapes]
        self.v = [np.zeros(s) for s in shapes]


def adam_step(
    state: AdamState,
    params: list[np.ndarray],
    grads: list[np.ndarray],
    learning_rate: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> list[np.ndarray]:
    """One bias-corrected Adam ascent step, applied in place."""
    state.step += 1
    k = state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g**2
        m_hat = m / (1.0 - beta1**k)
        v_hat = v / (1.0 - beta2**k)
        p += learning_rate * m_hat / (np.sqrt(v_hat) + eps)
    return params


def predictions_for_unit(unit_x, context, theta, spec) -> np.ndarray:
    """Network means for all rows of one unit."""
    if unit_x.shape[0] == 0:
        return np.zeros(0)
    rows = np.empty((unit_x.shape[0], spec.in_features))
    rows[:, : spec.input_dim] = unit_x
    rows[:, spec.input_dim :] = context
    return forward_batch(rows, theta, spec)


def validation_mse(
    params: ModelParams, data: MultiUnitDataset, spec: NetworkSpec, per_unit: bool = False
) -> float:
    """Mean squared error of the network means on a held-out set."""
    return _BatchedEvaluator(data, spec).mse(params, per_unit)


class _BatchedEvaluator:
    """Pre-assembled input rows for repeated evaluation of one dataset.

    The feature part of every row is filled once; only the context slices
    are refreshed per call, so per-epoch validation is a single forward
    pass regardless of the unit count.
    """

    def __init__(self, data: MultiUnitDataset, spec: NetworkSpec):
        total = data.total_points
        if total == 0:
            raise ValueError("validation requires at least one observation")
        self.spec = spec
        self.rows = np.empty((total, spec.in_features))
        self.targets = np.empty(total)
        self.slices = []
        pos = 0
        for i, unit in enumerate(data):
            n = len(unit)
            if n == 0:
                continue
            self.rows[pos : pos + n, : spec.input_dim] = unit.x
            self.targets[pos : pos + n] = unit.y
            self.slices.append((pos, pos + n, i))
            pos += n
        self.starts = np.array([s[0] for s in self.slices])
        self.counts = np.array([s[1] - s[0] for s in self.slices], dtype=float)

    def mse(self, params: ModelParams, per_unit: bool = False) -> float:
        d = self.spec.input_dim
        for lo, hi, i in self.slices:
            self.rows[lo:hi, d:] = params.contexts[i]
        preds = forward_batch(self.rows, params.theta, self.spec)
        sq = (preds - self.targets) ** 2
        if per_unit:
            sums = np.add.reduceat(sq, self.starts)
            return float(np.mean(sums / self.counts))
        return float(np.mean(sq))


def _diagnose_nonfinite(params, data, batch, spec, priors) -> str:
    from .core import _log_likelihood_explicit  # local import to avoid cycle noise

    taus = params.precisions
    parts = {
        "log_likelihood": _log_likelihood_explicit(
            params.contexts, taus, params.theta, data, spec
        ),
        "theta_prior": theta_log_prior(params.theta, priors),
        "context_prior": sum(context_log_prior(c) for c in params.contexts),
        "precision_prior": sum(
            precision_log_prior(float(t), priors) if t > 0 else -np.inf for t in taus
        ),
    }
    bad = [name for name, v in parts.items() if not np.isfinite(v)]
    return ", ".join(bad) if bad else "objective estimate"


def fit(
    train_data: MultiUnitDataset,
    val_data: MultiUnitDataset,
    spec: NetworkSpec,
    priors: PriorConfig,
    cfg: TrainConfig,
) -> FitResult:
    """MAP-estimate (contexts, precisions, theta) on the training split.

    Runs ``cfg.epochs`` epochs of ceil(N/B) stochastic-gradient iterations,
    records the validation MSE after every epoch, and returns the
    parameters of the epoch with the lowest validation MSE (earliest epoch
    on ties). Raises :class:`TrainingDiverged` if the objective estimate
    becomes non-finite.
    """
    if train_data.unit_ids != val_data.unit_ids:
        raise ValueError("train and validation splits must list the same units in order")
    seq = np.random.SeedSequence(cfg.seed)
    init_seq, batch_seq = seq.spawn(2)
    rng = np.random.default_rng(batch_seq)

    m = train_data.n_units
    params = ModelParams(
        theta=init_params(spec, init_seq),
        contexts=np.zeros((m, spec.context_dim)),
        raw_precisions=np.full(m, inverse_softplus(priors.alpha / priors.beta)),
    )
    state = AdamState([params.theta.shape, params.contexts.shape, params.raw_precisions.shape])

    n_total = train_data.total_points
    if n_total == 0:
        raise ValueError("training split has no observations")
    iters_per_epoch = max(1, math.ceil(n_total / cfg.batch_budget))
    evaluator = _BatchedEvaluator(val_data, spec)

    history: list[EpochRecord] = []
    best_mse = math.inf
    best_epoch = -1
    best_params = params.copy()

    for epoch in range(1, cfg.epochs + 1):
        j_sum = 0.0
        for _ in range(iters_per_epoch):
            batch = draw_minibatch(train_data, cfg, rng)
            grad, j_hat = stochastic_gradient(params, train_data, batch, spec, priors)
            if not np.isfinite(j_hat):
                term = _diagnose_nonfinite(params, train_data, batch, spec, priors)
                raise TrainingDiverged(
                    f"non-finite objective at epoch {epoch} (offending term: {term})"
                )
            adam_step(
                state,
                [params.theta, params.contexts, params.raw_precisions],
                [grad.d_theta, grad.d_contexts, grad.d_raw_precisions],
                cfg.learning_rate,
                cfg.adam_beta1,
                cfg.adam_beta2,
                cfg.adam_eps,
            )
            j_sum += j_hat
        if not np.all(softplus(params.raw_precisions) > 0.0):
            raise TrainingDiverged(f"precision collapsed to zero at epoch {epoch}")
        val_mse = evaluator.mse(params, cfg.per_unit_validation)
        history.append(EpochRecord(epoch, j_sum / iters_per_epoch, val_mse))
        if val_mse < best_mse:
            best_mse = val_mse
            best_epoch = epoch
            best_params = params.copy()
        if cfg.log_every and epoch % cfg.log_every == 0:
            print(
                f"epoch {epoch} objective {j_sum / iters_per_epoch:.6g} "
                f"val_mse {val_mse:.6g}",
                file=sys.stderr,
            )

    return FitResult(
        params=best_params,
        spec=spec,
        priors=priors,
        config=cfg,
        unit_ids=list(train_data.unit_ids),
        history=history,
        selected_epoch=best_epoch,
    )
