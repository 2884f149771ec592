"""Few-shot calibration of a new unit against a frozen pretrained model.

Only the new unit's context vector (and optionally its precision) is
fitted; the shared network weights stay at their pretrained values. The
update is full-batch gradient ascent on the unit-restricted objective:
with a handful of points there is no reason to subsample.
"""

from dataclasses import dataclass

import numpy as np

from .core import (
    ModelParams,
    MultiUnitDataset,
    UnitDataset,
    inverse_softplus,
    softplus,
)
from .net import forward
from .train import AdamState, FitResult, TrainingDiverged, adam_step, exact_gradient


@dataclass(frozen=True)
class CalibrationConfig:
    """Settings for context calibration on a new unit.

    The defaults are 100 full-batch ascent steps at rate 1e-4 with the
    precision held fixed. ``optimizer`` selects plain gradient ascent
    ("ascent", default) or Adam ("adam"); plain ascent keeps the
    likelihood's precision scaling in the step size, which is what makes
    rate 1e-4 effective over only 100 steps.
    """

    epochs: int = 100
    learning_rate: float = 1e-4
    fix_precision: bool = True
    reinit_each_call: bool = True
    optimizer: str = "ascent"

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.optimizer not in ("ascent", "adam"):
            raise ValueError("optimizer must be 'ascent' or 'adam'")


@dataclass
class CalibratedUnit:
    """Calibrated parameters of one previously unseen unit."""

    context: np.ndarray
    precision: float
    n_points: int

    def __post_init__(self):
        self.context = np.asarray(self.context, dtype=float).reshape(-1)
        if self.precision <= 0:
            raise ValueError("precision must be strictly positive")


def init_new_unit(base: FitResult) -> CalibratedUnit:
    """Starting point for an unseen unit: zero context, average precision."""
    if base.params.n_units < 1:
        raise ValueError("base model must cover at least one unit")
    tau = float(np.mean(base.precisions))
    return CalibratedUnit(
        context=np.zeros(base.spec.context_dim), precision=tau, n_points=0
    )


def calibrate(
    base: FitResult,
    new_data: UnitDataset,
    cfg: CalibrationConfig = CalibrationConfig(),
    start: CalibratedUnit | None = None,
) -> CalibratedUnit:
    """Fit a new unit's context to its observations with theta frozen.

    Runs ``cfg.epochs`` full-batch ascent steps from the standard
    initialization (or from ``start`` when ``reinit_each_call`` is off).
    With ``fix_precision`` the precision stays at its initial value and
    exactly K parameters move; otherwise the raw precision is fitted too.
    """
    if start is None or cfg.reinit_each_call:
        start = init_new_unit(base)
    context = start.context.copy()
    tau0 = float(start.precision)
    raw_precision = inverse_softplus(tau0)

    wrapped = MultiUnitDataset([new_data]) if len(new_data) else MultiUnitDataset(
        [UnitDataset.empty(new_data.unit_id, base.spec.input_dim)]
    )
    theta = base.params.theta
    state = AdamState([(base.spec.context_dim,), (1,)]) if cfg.optimizer == "adam" else None

    for step in range(1, cfg.epochs + 1):
        params = ModelParams(
            theta=theta,
            contexts=context[None, :],
            raw_precisions=np.array([raw_precision]),
        )
        grad, value = exact_gradient(params, wrapped, base.spec, base.priors)
        if not np.isfinite(value):
            raise TrainingDiverged(
                f"non-finite calibration objective at step {step} "
                f"(unit {new_data.unit_id}, n={len(new_data)})"
            )
        d_context = grad.d_contexts[0]
        d_raw = 0.0 if cfg.fix_precision else float(grad.d_raw_precisions[0])
        if cfg.optimizer == "adam":
            box = [context, np.array([raw_precision])]
            adam_step(state, box, [d_context, np.array([d_raw])], cfg.learning_rate)
            context, raw_precision = box[0], float(box[1][0])
        else:
            context = context + cfg.learning_rate * d_context
            raw_precision = raw_precision + cfg.learning_rate * d_raw

    # a fixed precision is returned untouched, not round-tripped through
    # the unconstrained parameterization
    final_tau = tau0 if cfg.fix_precision else float(softplus(raw_precision))
    return CalibratedUnit(
        context=context,
        precision=final_tau,
        n_points=len(new_data),
    )


def predict(base: FitResult, unit: CalibratedUnit, x: np.ndarray) -> tuple[float, float]:
    """Predictive mean and standard deviation for one input vector."""
    mean = forward(x, unit.context, base.params.theta, base.spec)
    return mean, 1.0 / np.sqrt(unit.precision)
