"""Laplace approximation of a unit's context posterior and its information gain.

With the shared weights and the unit precision held fixed, the objective
separates across units, so the posterior over one unit's context can be
approximated independently: a Gaussian centered at the calibrated
context, with covariance given by the inverse of the negated objective
Hessian. Comparing that Gaussian to the standard-normal prior yields the
amount of information the unit's observations carried, in nats or bits.
"""

import math
from dataclasses import dataclass

import numpy as np

from .calib import CalibratedUnit, CalibrationConfig, calibrate
from .core import ModelParams, MultiUnitDataset, UnitDataset, inverse_softplus
from .train import FitResult, exact_gradient

LOG2_E = math.log2(math.e)

_FD_STEP = 1e-4
_JITTER_START = 1e-6
_JITTER_MAX = 1e-2


@dataclass
class LaplacePosterior:
    """Gaussian approximation of one unit's context posterior."""

    mean: np.ndarray
    covariance: np.ndarray


@dataclass
class InformationGain:
    """Divergence of the context posterior from its prior."""

    nats: float
    bits: float


def context_gradient(
    base: FitResult, unit_data: UnitDataset, context: np.ndarray, precision: float
) -> np.ndarray:
    """Gradient of the unit-restricted objective with respect to the context.

    The precision enters the context gradient only as a multiplicative
    factor, so mapping it through the unconstrained parameterization
    (an ulp-level round trip) is immaterial here.
    """
    wrapped = MultiUnitDataset(
        [unit_data if len(unit_data) else UnitDataset.empty(unit_data.unit_id, base.spec.input_dim)]
    )
    params = ModelParams(
        theta=base.params.theta,
        contexts=np.asarray(context, dtype=float)[None, :],
        raw_precisions=np.array([inverse_softplus(precision)]),
    )
    grad, _ = exact_gradient(params, wrapped, base.spec, base.priors)
    return grad.d_contexts[0]


def context_hessian(
    base: FitResult, unit_data: UnitDataset, unit: CalibratedUnit
) -> np.ndarray:
    """Negated Hessian of the unit objective at the calibrated context.

    Computed by central finite differences of the analytic context
    gradient with step 1e-4 and symmetrized as (H + H^T)/2. The result is
    exactly the identity when the unit has no observations.
    """
    k = base.spec.context_dim
    c0 = np.asarray(unit.context, dtype=float).reshape(-1)
    if c0.shape[0] != k:
        raise ValueError(f"context has dimension {c0.shape[0]}, spec wants {k}")
    hess = np.empty((k, k))
    for j in range(k):
        step = np.zeros(k)
        step[j] = _FD_STEP
        g_plus = context_gradient(base, unit_data, c0 + step, unit.precision)
        g_minus = context_gradient(base, unit_data, c0 - step, unit.precision)
        hess[:, j] = -(g_plus - g_minus) / (2.0 * _FD_STEP)
    if not np.all(np.isfinite(hess)):
        raise FloatingPointError("non-finite entries in the context Hessian")
    return 0.5 * (hess + hess.T)


def laplace_posterior(hessian: np.ndarray, mean: np.ndarray) -> LaplacePosterior:
    """Gaussian posterior with covariance inverse to the (jittered) Hessian.

    If the Hessian is not positive definite, a diagonal jitter starting at
    1e-6 is escalated tenfold up to 1e-2 before giving up.
    """
    hessian = np.asarray(hessian, dtype=float)
    mean = np.asarray(mean, dtype=float).reshape(-1)
    k = mean.shape[0]
    if hessian.shape != (k, k):
        raise ValueError("Hessian shape must match the context dimension")

    jitter = 0.0
    while True:
        try:
            np.linalg.cholesky(hessian + jitter * np.eye(k) if jitter else hessian)
            break
        except np.linalg.LinAlgError:
            jitter = _JITTER_START if jitter == 0.0 else jitter * 10.0
            if jitter > _JITTER_MAX:
                raise np.linalg.LinAlgError(
                    "context Hessian is not positive definite even after jitter"
                )
    matrix = hessian + jitter * np.eye(k) if jitter else hessian
    covariance = np.linalg.inv(matrix)
    return LaplacePosterior(mean=mean.copy(), covariance=covariance)


def kl_to_standard_normal(post: LaplacePosterior) -> InformationGain:
    """KL divergence from the posterior to the standard-normal prior.

    nats = (trace(S) + |mu|^2 - K - log det S) / 2, converted to bits by
    the factor log2(e).
    """
    s = np.asarray(post.covariance, dtype=float)
    mu = np.asarray(post.mean, dtype=float).reshape(-1)
    k = mu.shape[0]
    # Cholesky both certifies positive-definiteness and gives log det
    chol = np.linalg.cholesky(s)
    logdet = 2.0 * float(np.sum(np.log(np.diag(chol))))
    nats = 0.5 * (float(np.trace(s)) + float(mu @ mu) - k - logdet)
    if nats < -1e-9:
        raise FloatingPointError(f"negative divergence {nats}; inconsistent posterior")
    nats = max(float(nats), 0.0)
    return InformationGain(nats=nats, bits=nats * LOG2_E)


def information_gain_curve(
    base: FitResult,
    unit_data: UnitDataset,
    n_max: int = 10,
    cfg: CalibrationConfig = CalibrationConfig(),
) -> list[tuple[int, InformationGain]]:
    """Information gain after calibrating on 0..n_max sequential points.

    The training points follow the sequential holdout protocol (picks at
    least one week apart); entry n uses the first n picks. The n = 0 entry
    is exactly zero because the posterior then equals the prior.
    """
    from .synth import sequential_fewshot_sequence

    steps = sequential_fewshot_sequence(unit_data, n_max=n_max)
    train_indices = [s.train_index for s in steps]
    curve = []
    for n in range(0, min(n_max, len(train_indices)) + 1):
        subset = unit_data.subset(train_indices[:n])
        unit = calibrate(base, subset, cfg)
        hess = context_hessian(base, subset, unit)
        post = laplace_posterior(hess, unit.context)
        curve.append((n, kl_to_standard_normal(post)))
    return curve
