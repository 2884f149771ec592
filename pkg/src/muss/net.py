"""Feedforward network f(x; c, theta) with analytic gradients.

The network consumes the concatenation [x, c] of an input vector and a
unit context vector, applies ``hidden_depth`` ReLU layers of width
``hidden_width``, and ends with an affine map to a scalar.

All weights live in a single flat parameter vector ``theta``. The layout
is fixed and documented so checkpoints and finite-difference tests can
address individual components: layers in order, each as its row-major
weight block (shape ``(fan_in, fan_out)``) followed by its bias block.
"""

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class NetworkSpec:
    """Architecture of the shared network.

    Parameters
    ----------
    input_dim : int
        Dimension D of the observation features.
    context_dim : int
        Dimension K of the per-unit context vector.
    hidden_width : int
        Units per hidden layer.
    hidden_depth : int
        Number of hidden (ReLU) layers; the output layer is extra.
    """

    input_dim: int
    context_dim: int
    hidden_width: int = 400
    hidden_depth: int = 4

    def __post_init__(self):
        if self.input_dim < 1 or self.context_dim < 1:
            raise ValueError("input_dim and context_dim must be >= 1")
        if self.hidden_width < 1 or self.hidden_depth < 1:
            raise ValueError("hidden_width and hidden_depth must be >= 1")

    @property
    def in_features(self) -> int:
        return self.input_dim + self.context_dim

    def layer_dims(self) -> list[tuple[int, int]]:
        """(fan_in, fan_out) for every affine layer, in order."""
        dims = [(self.in_features, self.hidden_width)]
        dims += [(self.hidden_width, self.hidden_width)] * (self.hidden_depth - 1)
        dims.append((self.hidden_width, 1))
        return dims

    @property
    def n_params(self) -> int:
        return sum(fi * fo + fo for fi, fo in self.layer_dims())


@dataclass
class GradientBundle:
    """Back-propagation result for a single input point."""

    value: float
    d_theta: np.ndarray
    d_context: np.ndarray


def split_theta(theta: np.ndarray, spec: NetworkSpec) -> list[tuple[np.ndarray, np.ndarray]]:
    """View the flat parameter vector as [(W, b), ...] per layer.

    The returned arrays share memory with ``theta``.
    """
    theta = np.asarray(theta, dtype=float)
    if theta.shape != (spec.n_params,):
        raise ValueError(
            f"theta has {theta.shape} but spec requires ({spec.n_params},)"
        )
    layers = []
    pos = 0
    for fan_in, fan_out in spec.layer_dims():
        w = theta[pos : pos + fan_in * fan_out].reshape(fan_in, fan_out)
        pos += fan_in * fan_out
        b = theta[pos : pos + fan_out]
        pos += fan_out
        layers.append((w, b))
    return layers


def init_params(spec: NetworkSpec, seed) -> np.ndarray:
    """Deterministic fan-balanced uniform initialization.

    Weights are uniform on [-sqrt(6/(fan_in+fan_out)), +sqrt(...)],
    biases exactly zero. ``seed`` is anything ``default_rng`` accepts.
    """
    rng = np.random.default_rng(seed)
    theta = np.zeros(spec.n_params)
    layers = split_theta(theta, spec)
    for w, _b in layers:
        fan_in, fan_out = w.shape
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        w[...] = rng.uniform(-bound, bound, size=w.shape)
    return theta


def forward_batch(inputs: np.ndarray, theta: np.ndarray, spec: NetworkSpec) -> np.ndarray:
    """Evaluate the network on pre-concatenated rows [x, c].

    Parameters
    ----------
    inputs : (B, D+K) array
    theta : (P,) flat parameter vector

    Returns
    -------
    (B,) array of network outputs.
    """
    out, _ = _forward_cached(np.asarray(inputs, dtype=float), theta, spec)
    return out


def _forward_cached(inputs, theta, spec):
    """Forward pass keeping pre-activations for back-propagation."""
    if inputs.ndim != 2 or inputs.shape[1] != spec.in_features:
        raise ValueError(
            f"inputs have shape {inputs.shape}, expected (B, {spec.in_features})"
        )
    layers = split_theta(theta, spec)
    activations = [inputs]
    pre_acts = []
    a = inputs
    for w, b in layers[:-1]:
        z = a @ w + b
        pre_acts.append(z)
        a = np.maximum(z, 0.0)
        activations.append(a)
    w_out, b_out = layers[-1]
    out = a @ w_out + b_out
    return out[:, 0], (layers, activations, pre_acts)


def backward_batch(cache, upstream: np.ndarray, spec: NetworkSpec):
    """Back-propagate per-row upstream scalars through a cached forward pass.

    Returns ``(d_theta, d_inputs)`` where ``d_theta`` is the gradient of
    ``sum_b upstream[b] * f(row_b)`` with respect to the flat parameters and
    ``d_inputs`` its gradient with respect to each input row. The ReLU
    subgradient at exactly zero is taken as zero.
    """
    layers, activations, pre_acts = cache
    d_theta = np.zeros(spec.n_params)
    d_layers = split_theta(d_theta, spec)

    delta = np.asarray(upstream, dtype=float)[:, None]
    for idx in range(len(layers) - 1, -1, -1):
        w, _b = layers[idx]
        dw, db = d_layers[idx]
        np.matmul(activations[idx].T, delta, out=dw)
        np.sum(delta, axis=0, out=db)
        delta = delta @ w.T
        if idx > 0:
            delta *= pre_acts[idx - 1] > 0.0
    return d_theta, delta


def forward(x: np.ndarray, c: np.ndarray, theta: np.ndarray, spec: NetworkSpec) -> float:
    """Network output for a single observation and context."""
    row = _single_row(x, c, spec)
    return float(forward_batch(row, theta, spec)[0])


def forward_backward(
    x: np.ndarray,
    c: np.ndarray,
    theta: np.ndarray,
    spec: NetworkSpec,
    upstream: float = 1.0,
) -> GradientBundle:
    """Value and exact gradients of ``upstream * f(x; c, theta)``.

    ``d_theta`` follows the flat layout; ``d_context`` is the gradient with
    respect to the context portion of the input.
    """
    row = _single_row(x, c, spec)
    out, cache = _forward_cached(row, theta, spec)
    d_theta, d_inputs = backward_batch(cache, np.array([upstream]), spec)
    return GradientBundle(
        value=float(out[0]),
        d_theta=d_theta,
        d_context=d_inputs[0, spec.input_dim :].copy(),
    )


def _single_row(x, c, spec):
    x = np.asarray(x, dtype=float).reshape(-1)
    c = np.asarray(c, dtype=float).reshape(-1)
    if x.shape[0] != spec.input_dim:
        raise ValueError(f"x has dimension {x.shape[0]}, spec wants {spec.input_dim}")
    if c.shape[0] != spec.context_dim:
        raise ValueError(f"c has dimension {c.shape[0]}, spec wants {spec.context_dim}")
    return np.concatenate([x, c])[None, :]
