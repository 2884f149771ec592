import numpy as np
import pytest

from muss.core import ModelParams, MultiUnitDataset, PriorConfig, UnitDataset
from muss.net import NetworkSpec, init_params


def make_unit(unit_id, x, y, start_ts=0, step=3600):
    x = np.atleast_2d(np.asarray(x, dtype=float))
    y = np.asarray(y, dtype=float).reshape(-1)
    ts = start_ts + step * np.arange(len(y))
    return UnitDataset(unit_id, x, y, ts)


def random_problem(rng, m=None, d=None, k=None, width=None, depth=None, n_lo=1, n_hi=4):
    """A small random model + dataset pair for gradient checking."""
    m = m or int(rng.integers(1, 4))
    d = d or int(rng.integers(1, 5))
    k = k or int(rng.integers(1, 5))
    width = width or int(rng.integers(2, 17))
    depth = depth or int(rng.integers(1, 4))
    spec = NetworkSpec(input_dim=d, context_dim=k, hidden_width=width, hidden_depth=depth)
    units = []
    for i in range(m):
        n = int(rng.integers(n_lo, n_hi + 1))
        units.append(make_unit(f"u{i}", rng.normal(size=(n, d)), rng.normal(size=n)))
    data = MultiUnitDataset(units)
    params = ModelParams(
        theta=init_params(spec, int(rng.integers(0, 2**31))),
        contexts=rng.normal(size=(m, k)) * 0.5,
        raw_precisions=rng.normal(size=m),
    )
    return spec, data, params


def min_preactivation_gap(spec, theta, rows):
    """Smallest |pre-activation| over all hidden units and rows.

    Finite-difference probes are only meaningful when no rectifier sits
    within the probe step of its kink; callers redraw until this gap is
    comfortably larger than the step.
    """
    from muss.net import split_theta

    layers = split_theta(theta, spec)
    a = np.atleast_2d(rows)
    gap = np.inf
    for w, b in layers[:-1]:
        z = a @ w + b
        gap = min(gap, float(np.min(np.abs(z))))
        a = np.maximum(z, 0.0)
    return gap


def random_problem_clear_of_kinks(rng, gap=1e-3, **kwargs):
    """Random problem whose pre-activations all clear the rectifier kink."""
    for _ in range(200):
        spec, data, params = random_problem(rng, **kwargs)
        rows = np.concatenate(
            [
                np.column_stack([u.x, np.tile(params.contexts[i], (len(u), 1))])
                for i, u in enumerate(data)
                if len(u)
            ]
        )
        if min_preactivation_gap(spec, params.theta, rows) > gap:
            return spec, data, params
    raise RuntimeError("could not find a kink-free configuration")


@pytest.fixture
def rng():
    return np.random.default_rng(20240816)
