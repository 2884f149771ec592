"""Domain types and closed-form probability terms of the multi-unit model.

A *unit* is one physical process instance with its own observation set.
All units share the network weights ``theta``; each unit i carries a
context vector ``c_i`` and an unconstrained precision parameter ``t_i``
with actual precision ``tau_i = softplus(t_i)``.

Everything here is a pure function of its arguments; values are treated
as immutable once constructed and are safe to share across threads.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .net import NetworkSpec, forward_batch

LOG_2PI = math.log(2.0 * math.pi)

# exp() is safe on this side of the branch and the linear approximation
# error is below machine epsilon on the other.
_SOFTPLUS_BRANCH = 30.0


def softplus(t):
    """Overflow-safe log(1 + exp(t)); accepts scalars or arrays."""
    t_arr = np.asarray(t, dtype=float)
    low = np.minimum(t_arr, _SOFTPLUS_BRANCH)
    high = np.maximum(t_arr, _SOFTPLUS_BRANCH)
    out = np.where(
        t_arr > _SOFTPLUS_BRANCH,
        t_arr + np.log1p(np.exp(-high)),
        np.log1p(np.exp(low)),
    )
    return float(out) if np.isscalar(t) or t_arr.ndim == 0 else out


def inverse_softplus(y):
    """Inverse of softplus on positive reals: log(exp(y) - 1)."""
    y_arr = np.asarray(y, dtype=float)
    if np.any(y_arr <= 0.0):
        raise ValueError("inverse_softplus requires positive input")
    low = np.minimum(y_arr, _SOFTPLUS_BRANCH)
    high = np.maximum(y_arr, _SOFTPLUS_BRANCH)
    out = np.where(
        y_arr > _SOFTPLUS_BRANCH,
        y_arr + np.log1p(-np.exp(-high)),
        np.log(np.expm1(low)),
    )
    return float(out) if np.isscalar(y) or y_arr.ndim == 0 else out


def sigmoid(t):
    """Overflow-safe logistic function, the derivative of softplus."""
    t_arr = np.asarray(t, dtype=float)
    pos = 1.0 / (1.0 + np.exp(-np.maximum(t_arr, 0.0)))
    exp_low = np.exp(np.minimum(t_arr, 0.0))
    neg = exp_low / (1.0 + exp_low)
    out = np.where(t_arr >= 0.0, pos, neg)
    return float(out) if np.isscalar(t) or t_arr.ndim == 0 else out


@dataclass(frozen=True)
class Observation:
    """One measurement pair: features ``x`` (length D), target ``y``.

    ``timestamp`` is integer seconds since the epoch; features and target
    are normalized, dimensionless quantities.
    """

    x: np.ndarray
    y: float
    timestamp: int


class UnitDataset:
    """Observations of a single unit, ordered by non-decreasing timestamp.

    Stores the observations columnar (``x`` as an (N, D) matrix, ``y`` and
    ``timestamps`` as length-N vectors) for efficient batch evaluation.
    """

    def __init__(self, unit_id: str, x: np.ndarray, y: np.ndarray, timestamps: np.ndarray):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        y = np.asarray(y, dtype=float).reshape(-1)
        timestamps = np.asarray(timestamps, dtype=np.int64).reshape(-1)
        if x.shape[0] != y.shape[0] or y.shape[0] != timestamps.shape[0]:
            raise ValueError("x, y and timestamps must have matching lengths")
        if x.size and not np.all(np.isfinite(x)):
            raise ValueError(f"unit {unit_id}: non-finite feature values")
        if y.size and not np.all(np.isfinite(y)):
            raise ValueError(f"unit {unit_id}: non-finite target values")
        if timestamps.size > 1 and np.any(np.diff(timestamps) < 0):
            raise ValueError(f"unit {unit_id}: timestamps must be non-decreasing")
        self.unit_id = str(unit_id)
        self.x = x
        self.y = y
        self.timestamps = timestamps

    @classmethod
    def from_observations(cls, unit_id: str, observations: list[Observation]) -> "UnitDataset":
        if not observations:
            raise ValueError("use empty(unit_id, dim) for a unit without observations")
        x = np.stack([np.asarray(o.x, dtype=float) for o in observations])
        y = np.array([o.y for o in observations], dtype=float)
        ts = np.array([o.timestamp for o in observations], dtype=np.int64)
        return cls(unit_id, x, y, ts)

    @classmethod
    def empty(cls, unit_id: str, input_dim: int) -> "UnitDataset":
        return cls(
            unit_id,
            np.zeros((0, input_dim)),
            np.zeros(0),
            np.zeros(0, dtype=np.int64),
        )

    @property
    def observations(self) -> list[Observation]:
        return [
            Observation(x=self.x[j].copy(), y=float(self.y[j]), timestamp=int(self.timestamps[j]))
            for j in range(len(self))
        ]

    @property
    def input_dim(self) -> int:
        return self.x.shape[1]

    def subset(self, indices) -> "UnitDataset":
        idx = np.asarray(indices, dtype=int)
        return UnitDataset(self.unit_id, self.x[idx], self.y[idx], self.timestamps[idx])

    def __len__(self) -> int:
        return self.x.shape[0]

    def __repr__(self):
        return f"UnitDataset({self.unit_id!r}, n={len(self)}, d={self.input_dim})"


class MultiUnitDataset:
    """Indexed collection of unit datasets sharing one feature dimension."""

    def __init__(self, units: list[UnitDataset]):
        if not units:
            raise ValueError("a multi-unit dataset needs at least one unit")
        ids = [u.unit_id for u in units]
        if len(set(ids)) != len(ids):
            raise ValueError("unit ids must be unique")
        dims = {u.input_dim for u in units}
        if len(dims) != 1:
            raise ValueError(f"all units must share one feature dimension, got {sorted(dims)}")
        self.units = list(units)

    @property
    def n_units(self) -> int:
        return len(self.units)

    @property
    def input_dim(self) -> int:
        return self.units[0].input_dim

    @property
    def total_points(self) -> int:
        return sum(len(u) for u in self.units)

    @property
    def unit_ids(self) -> list[str]:
        return [u.unit_id for u in self.units]

    def __iter__(self):
        return iter(self.units)

    def __len__(self) -> int:
        return len(self.units)

    def __getitem__(self, i) -> UnitDataset:
        return self.units[i]

    def __repr__(self):
        return f"MultiUnitDataset(m={self.n_units}, n={self.total_points})"


@dataclass
class ModelParams:
    """All learnable parameters.

    ``theta`` is the flat network weight vector, ``contexts`` an (M, K)
    matrix of per-unit context vectors and ``raw_precisions`` the length-M
    vector of unconstrained precision parameters t_i. The positive
    precision of unit i is ``softplus(t_i)`` and never stored directly.
    """

    theta: np.ndarray
    contexts: np.ndarray
    raw_precisions: np.ndarray

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=float).reshape(-1)
        self.contexts = np.asarray(self.contexts, dtype=float)
        if self.contexts.ndim != 2:
            raise ValueError("contexts must be an (M, K) matrix")
        self.raw_precisions = np.asarray(self.raw_precisions, dtype=float).reshape(-1)
        if self.raw_precisions.shape[0] != self.contexts.shape[0]:
            raise ValueError("one raw precision per unit is required")

    @property
    def n_units(self) -> int:
        return self.contexts.shape[0]

    @property
    def context_dim(self) -> int:
        return self.contexts.shape[1]

    @property
    def precisions(self) -> np.ndarray:
        return softplus(self.raw_precisions)

    def copy(self) -> "ModelParams":
        return ModelParams(
            self.theta.copy(), self.contexts.copy(), self.raw_precisions.copy()
        )

    def validate_for(self, spec: NetworkSpec, n_units: int | None = None):
        if self.theta.shape[0] != spec.n_params:
            raise ValueError(
                f"theta has {self.theta.shape[0]} components, spec needs {spec.n_params}"
            )
        if self.context_dim != spec.context_dim:
            raise ValueError(
                f"contexts have dimension {self.context_dim}, spec wants {spec.context_dim}"
            )
        if n_units is not None and self.n_units != n_units:
            raise ValueError(f"params cover {self.n_units} units, data has {n_units}")


@dataclass(frozen=True)
class PriorConfig:
    """Hyper-parameters of the parameter priors.

    ``theta_sigma`` is the standard deviation of the spherical Gaussian
    prior on every network weight. ``alpha`` and ``beta`` are the
    concentration and rate of the Gamma prior on each unit precision
    (defaults give prior mean 1e3 and variance 1e6).
    """

    theta_sigma: float = 1.0
    alpha: float = 1.0
    beta: float = 0.001

    def __post_init__(self):
        if self.theta_sigma <= 0 or self.alpha <= 0 or self.beta <= 0:
            raise ValueError("prior hyper-parameters must be strictly positive")


def gaussian_log_density(y, mean, precision):
    """log N(y | mean, 1/precision), parameterized by precision.

    Accepts scalars or broadcastable arrays; ``precision`` must be
    strictly positive.
    """
    precision_arr = np.asarray(precision, dtype=float)
    if np.any(precision_arr <= 0.0):
        raise ValueError("precision must be strictly positive")
    out = 0.5 * (np.log(precision_arr) - LOG_2PI) - 0.5 * precision_arr * (
        np.asarray(y, dtype=float) - np.asarray(mean, dtype=float)
    ) ** 2
    return float(out) if out.ndim == 0 else out


def context_log_prior(c: np.ndarray) -> float:
    """log N(c | 0_K, I_K) for one context vector."""
    c = np.asarray(c, dtype=float).reshape(-1)
    k = c.shape[0]
    return float(-0.5 * k * LOG_2PI - 0.5 * np.dot(c, c))


def precision_log_prior(tau: float, cfg: PriorConfig) -> float:
    """log Gamma(tau | alpha, beta) with rate parameterization."""
    if tau <= 0.0:
        raise ValueError("tau must be strictly positive")
    return float(
        cfg.alpha * math.log(cfg.beta)
        - math.lgamma(cfg.alpha)
        + (cfg.alpha - 1.0) * math.log(tau)
        - cfg.beta * tau
    )


def theta_log_prior(theta: np.ndarray, cfg: PriorConfig) -> float:
    """Sum of log N(theta_p | 0, theta_sigma^2) over all components."""
    theta = np.asarray(theta, dtype=float).reshape(-1)
    n = theta.shape[0]
    var = cfg.theta_sigma**2
    return float(-0.5 * n * (LOG_2PI + math.log(var)) - 0.5 * np.dot(theta, theta) / var)


def log_prior(params: ModelParams, cfg: PriorConfig) -> float:
    """Joint log-prior of (contexts, precisions, theta).

    Per-unit terms use tau_i = softplus(t_i); the per-unit sums are added
    to the network weight prior.
    """
    total = theta_log_prior(params.theta, cfg)
    taus = params.precisions
    for i in range(params.n_units):
        total += context_log_prior(params.contexts[i])
        total += precision_log_prior(float(taus[i]), cfg)
    return total


def _log_likelihood_explicit(contexts, taus, theta, data: MultiUnitDataset, spec: NetworkSpec):
    """Log-likelihood with explicit per-unit precisions."""
    total = 0.0
    for i, unit in enumerate(data):
        n = len(unit)
        if n == 0:
            continue
        rows = np.empty((n, spec.in_features))
        rows[:, : spec.input_dim] = unit.x
        rows[:, spec.input_dim :] = contexts[i]
        preds = forward_batch(rows, theta, spec)
        total += float(np.sum(gaussian_log_density(unit.y, preds, taus[i])))
    return total


def log_likelihood(params: ModelParams, data: MultiUnitDataset, spec: NetworkSpec) -> float:
    """Total log-likelihood of all observations under the current model."""
    params.validate_for(spec, data.n_units)
    if data.input_dim != spec.input_dim:
        raise ValueError(
            f"data features have dimension {data.input_dim}, spec wants {spec.input_dim}"
        )
    return _log_likelihood_explicit(
        params.contexts, params.precisions, params.theta, data, spec
    )


def objective(
    contexts: np.ndarray,
    taus: np.ndarray,
    theta: np.ndarray,
    data: MultiUnitDataset,
    spec: NetworkSpec,
    priors: PriorConfig,
) -> float:
    """Posterior-mode objective J = log-likelihood + log-prior at explicit taus."""
    taus = np.asarray(taus, dtype=float).reshape(-1)
    contexts = np.asarray(contexts, dtype=float)
    theta = np.asarray(theta, dtype=float).reshape(-1)
    total = _log_likelihood_explicit(contexts, taus, theta, data, spec)
    total += theta_log_prior(theta, priors)
    for i in range(contexts.shape[0]):
        total += context_log_prior(contexts[i])
        total += precision_log_prior(float(taus[i]), priors)
    return total


def objective_reparameterized(
    params: ModelParams,
    data: MultiUnitDataset,
    spec: NetworkSpec,
    priors: PriorConfig,
) -> float:
    """Objective in the unconstrained parameterization, tau = softplus(t)."""
    params.validate_for(spec, data.n_units)
    return objective(
        params.contexts, params.precisions, params.theta, data, spec, priors
    )
