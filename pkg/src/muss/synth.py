"""Synthetic multi-unit process generator and dataset split protocols.

Units are random realizations of one prototype choke-flow relation:
total flow is a power law in valve opening times the square root of the
pressure drop, modulated by gas-lift and temperature terms, plus
unit-specific Gaussian measurement noise. Two of the seven features
(the oil and gas fractions) deliberately never enter the target.

Feature order: u, p_wh, p_dc, t_wh, eta_oil, eta_gas, q_gl; target q_tot.
"""

import csv
import io
from dataclasses import dataclass

import numpy as np

from .core import MultiUnitDataset, Observation, UnitDataset

FEATURE_NAMES = ["u", "p_wh", "p_dc", "t_wh", "eta_oil", "eta_gas", "q_gl"]
TARGET_NAME = "q_tot"
SPLIT_NAMES = ("train", "val", "test")

DAY_SECONDS = 86400
WEEK_SECONDS = 7 * DAY_SECONDS


@dataclass(frozen=True)
class UnitPhysics:
    """Latent physical parameters of one synthetic unit."""

    flow_coefficient: float
    choke_exponent: float
    gaslift_gain: float
    temperature_gain: float
    noise_std: float

    def __post_init__(self):
        if self.flow_coefficient <= 0:
            raise ValueError("flow_coefficient must be positive")
        if not 0.5 <= self.choke_exponent <= 1.5:
            raise ValueError("choke_exponent out of range [0.5, 1.5]")
        if not 0.0 <= self.gaslift_gain <= 0.5:
            raise ValueError("gaslift_gain out of range [0, 0.5]")
        if not 0.0 <= self.temperature_gain <= 0.2:
            raise ValueError("temperature_gain out of range [0, 0.2]")
        if not 0.01 <= self.noise_std <= 0.05:
            raise ValueError("noise_std out of range [0.01, 0.05]")


@dataclass(frozen=True)
class GeneratorConfig:
    """Shape of a generated multi-unit dataset."""

    n_units: int
    seed: int = 0
    horizon_days: int = 730
    points_median: float = 300.0
    points_log_sigma: float = 0.5
    points_min: int = 30
    points_max: int = 3000

    def __post_init__(self):
        if self.n_units < 1:
            raise ValueError("n_units must be >= 1")
        if self.points_min < 1 or self.points_max < self.points_min:
            raise ValueError("invalid point count bounds")


def sample_unit(rng) -> UnitPhysics:
    """Draw one unit's latent physics."""
    return UnitPhysics(
        flow_coefficient=float(np.exp(rng.normal(0.0, 0.3))),
        choke_exponent=float(rng.uniform(0.5, 1.5)),
        gaslift_gain=float(rng.uniform(0.0, 0.5)),
        temperature_gain=float(rng.uniform(0.0, 0.2)),
        noise_std=float(rng.uniform(0.01, 0.05)),
    )


def mean_flow(phys: UnitPhysics, x: np.ndarray) -> float:
    """Noise-free target for a feature vector in the canonical order."""
    u, p_wh, p_dc, t_wh, _eta_oil, _eta_gas, q_gl = np.asarray(x, dtype=float)
    return float(
        phys.flow_coefficient
        * u**phys.choke_exponent
        * np.sqrt(p_wh - p_dc)
        * (1.0 + phys.gaslift_gain * q_gl)
        * (1.0 + phys.temperature_gain * (t_wh - 0.5))
    )


def sample_observation(phys: UnitPhysics, rng, timestamp: int) -> Observation:
    """Draw one observation: features, then target with unit noise.

    The target is clipped to [-0.5, 3] to bound pathological tails.
    """
    u = rng.uniform(0.05, 1.0)
    p_wh = rng.uniform(0.3, 1.0)
    p_dc = rng.uniform(0.1, p_wh)
    t_wh = rng.uniform(0.0, 1.0)
    eta_oil = rng.uniform(0.0, 1.0)
    eta_gas = rng.uniform(0.0, 1.0 - eta_oil)
    q_gl = rng.uniform(0.0, 1.0)
    x = np.array([u, p_wh, p_dc, t_wh, eta_oil, eta_gas, q_gl])
    y = mean_flow(phys, x) + rng.normal(0.0, phys.noise_std)
    return Observation(x=x, y=float(np.clip(y, -0.5, 3.0)), timestamp=int(timestamp))


def _unit_point_count(cfg: GeneratorConfig, rng) -> int:
    n = rng.lognormal(mean=np.log(cfg.points_median), sigma=cfg.points_log_sigma)
    return int(np.clip(round(n), cfg.points_min, cfg.points_max))


def generate(cfg: GeneratorConfig) -> MultiUnitDataset:
    """Generate a multi-unit dataset, deterministic in the seed.

    Every unit gets its own RNG stream spawned from the master seed, so
    generation is reproducible and order-independent across units.
    """
    streams = np.random.SeedSequence(cfg.seed).spawn(cfg.n_units)
    horizon = cfg.horizon_days * DAY_SECONDS
    units = []
    for i, stream in enumerate(streams):
        rng = np.random.default_rng(stream)
        phys = sample_unit(rng)
        count = _unit_point_count(cfg, rng)
        timestamps = np.sort(rng.integers(0, horizon, size=count))
        observations = [sample_observation(phys, rng, ts) for ts in timestamps]
        units.append(UnitDataset.from_observations(f"unit-{i:03d}", observations))
    return MultiUnitDataset(units)


def unit_physics(cfg: GeneratorConfig) -> list[UnitPhysics]:
    """The latent physics behind ``generate(cfg)``, for ground-truth tests."""
    streams = np.random.SeedSequence(cfg.seed).spawn(cfg.n_units)
    return [sample_unit(np.random.default_rng(s)) for s in streams]


def chunked_split_labels(
    data: MultiUnitDataset,
    fractions: tuple[float, float, float] = (0.81, 0.14, 0.05),
    chunk_days: int = 30,
    seed: int = 0,
) -> list[np.ndarray]:
    """Assign every observation to train/val/test by whole time chunks.

    Each unit's timeline is tiled into ``chunk_days`` windows; windows are
    shuffled and assigned greedily to whichever set is furthest below its
    target share of the unit's points. All observations of a chunk land in
    the same set, and chunk boundaries decorrelate neighboring sets.

    Returns one integer label array per unit (0=train, 1=val, 2=test).
    """
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError("fractions must sum to 1")
    streams = np.random.SeedSequence(seed).spawn(data.n_units)
    targets = np.asarray(fractions, dtype=float)
    labels = []
    for unit, stream in zip(data, streams):
        rng = np.random.default_rng(stream)
        lab = np.zeros(len(unit), dtype=int)
        if len(unit) == 0:
            labels.append(lab)
            continue
        chunk_ids = unit.timestamps // (chunk_days * DAY_SECONDS)
        unique_chunks = np.unique(chunk_ids)
        order = rng.permutation(len(unique_chunks))
        assigned = np.zeros(3)
        for chunk in unique_chunks[order]:
            members = chunk_ids == chunk
            deficit = targets - assigned / max(assigned.sum(), 1.0)
            set_idx = int(np.argmax(deficit))
            lab[members] = set_idx
            assigned[set_idx] += int(members.sum())
        labels.append(lab)
    return labels


def apply_split(
    data: MultiUnitDataset, labels: list[np.ndarray]
) -> tuple[MultiUnitDataset, MultiUnitDataset, MultiUnitDataset]:
    """Materialize the three split datasets, keeping every unit in each.

    Units keep their order (and may be empty in a split) so that per-unit
    parameter indices line up across the splits.
    """
    splits = []
    for which in range(3):
        units = [
            unit.subset(np.flatnonzero(lab == which)) for unit, lab in zip(data, labels)
        ]
        splits.append(MultiUnitDataset(units))
    return tuple(splits)


def chunked_split(
    data: MultiUnitDataset,
    fractions: tuple[float, float, float] = (0.81, 0.14, 0.05),
    chunk_days: int = 30,
    seed: int = 0,
):
    """Chunked train/validation/test split; see ``chunked_split_labels``."""
    return apply_split(data, chunked_split_labels(data, fractions, chunk_days, seed))


@dataclass
class SequenceStep:
    """One step of the sequential few-shot protocol."""

    train_index: int
    test_indices: np.ndarray


def sequential_fewshot_sequence(unit: UnitDataset, n_max: int = 10) -> list[SequenceStep]:
    """Sequential training picks at least one week apart, each with a test window.

    The first observation is the first pick; every later pick is the first
    observation at least seven days after the previous one. A step's test
    window holds all observations strictly within the following week, or
    the single next observation when that window is empty. Stops after
    ``n_max`` steps, or earlier when no further pick or test data exists.
    Any train/validation/test split is deliberately ignored here.
    """
    ts = unit.timestamps
    n = len(unit)
    steps: list[SequenceStep] = []
    pick = 0 if n > 0 else None
    while pick is not None and len(steps) < n_max:
        window_end = ts[pick] + WEEK_SECONDS
        in_window = np.flatnonzero((ts > ts[pick]) & (ts < window_end))
        if in_window.size == 0:
            later = np.flatnonzero(np.arange(n) > pick)
            if later.size == 0:
                break
            in_window = later[:1]
        steps.append(SequenceStep(train_index=pick, test_indices=in_window))
        nxt = np.flatnonzero(ts >= ts[pick] + WEEK_SECONDS)
        pick = int(nxt[0]) if nxt.size else None
    return steps


def format_float(value: float) -> str:
    """Shortest decimal string that round-trips the float exactly."""
    return repr(float(value))


def write_dataset(path, data: MultiUnitDataset, labels: list[np.ndarray] | None = None):
    """Write a dataset (with optional split labels) as CSV."""
    with open(path, "w", newline="") as fh:
        _write_dataset_stream(fh, data, labels)


def _write_dataset_stream(fh, data, labels):
    writer = csv.writer(fh, lineterminator="\n")
    writer.writerow(["unit_id", "timestamp", *FEATURE_NAMES, TARGET_NAME, "split"])
    for i, unit in enumerate(data):
        lab = labels[i] if labels is not None else None
        for j in range(len(unit)):
            split = SPLIT_NAMES[lab[j]] if lab is not None else "none"
            writer.writerow(
                [
                    unit.unit_id,
                    int(unit.timestamps[j]),
                    *[format_float(v) for v in unit.x[j]],
                    format_float(unit.y[j]),
                    split,
                ]
            )


def dataset_csv_bytes(data: MultiUnitDataset, labels=None) -> bytes:
    buf = io.StringIO()
    _write_dataset_stream(buf, data, labels)
    return buf.getvalue().encode()


def read_dataset(path) -> tuple[MultiUnitDataset, list[np.ndarray] | None]:
    """Read a dataset CSV written by :func:`write_dataset`.

    Returns the dataset and the per-unit split labels, or ``None`` labels
    when every row is marked ``none``.
    """
    per_unit: dict[str, list] = {}
    order: list[str] = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        expected = ["unit_id", "timestamp", *FEATURE_NAMES, TARGET_NAME, "split"]
        if header != expected:
            raise ValueError(f"unexpected dataset header: {header}")
        for row in reader:
            if len(row) != len(expected):
                raise ValueError(f"malformed dataset row: {row}")
            unit_id = row[0]
            if unit_id not in per_unit:
                per_unit[unit_id] = []
                order.append(unit_id)
            if row[-1] not in (*SPLIT_NAMES, "none"):
                raise ValueError(f"unknown split label {row[-1]!r}")
            per_unit[unit_id].append(
                (
                    int(row[1]),
                    [float(v) for v in row[2:9]],
                    float(row[9]),
                    row[10],
                )
            )
    units = []
    labels = []
    any_split = False
    for unit_id in order:
        rows = per_unit[unit_id]
        x = np.array([r[1] for r in rows], dtype=float).reshape(len(rows), 7)
        y = np.array([r[2] for r in rows], dtype=float)
        ts = np.array([r[0] for r in rows], dtype=np.int64)
        units.append(UnitDataset(unit_id, x, y, ts))
        # rows marked "none" stay outside every split (-1)
        lab = np.array([SPLIT_NAMES.index(r[3]) if r[3] != "none" else -1 for r in rows])
        if any(r[3] != "none" for r in rows):
            any_split = True
        labels.append(lab)
    return MultiUnitDataset(units), (labels if any_split else None)
