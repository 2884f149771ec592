"""Multi-unit soft sensing.

A hierarchical regression model for collections of similar physical
units: one shared network, per-unit context vectors and noise
precisions, joint MAP pretraining, few-shot calibration of new units,
and Laplace-approximation information-gain analysis, validated on a
built-in synthetic multi-unit process generator.
"""

from .calib import CalibratedUnit, CalibrationConfig, calibrate, init_new_unit, predict
from .core import (
    ModelParams,
    MultiUnitDataset,
    Observation,
    PriorConfig,
    UnitDataset,
    gaussian_log_density,
    log_likelihood,
    log_prior,
    objective,
    objective_reparameterized,
    softplus,
)
from .harness import (
    DataSplits,
    ExperimentConfig,
    FewShotResult,
    InfoGainResult,
    ScalingResult,
    load_checkpoint,
    mape,
    run_fewshot,
    run_infogain,
    run_scaling,
    save_checkpoint,
)
from .net import GradientBundle, NetworkSpec, forward, forward_backward, init_params
from .posterior import (
    InformationGain,
    LaplacePosterior,
    context_hessian,
    information_gain_curve,
    kl_to_standard_normal,
    laplace_posterior,
)
from .synth import (
    GeneratorConfig,
    UnitPhysics,
    chunked_split,
    generate,
    read_dataset,
    sequential_fewshot_sequence,
    write_dataset,
)
from .train import (
    AdamState,
    FitResult,
    TrainConfig,
    TrainingDiverged,
    adam_step,
    draw_minibatch,
    exact_gradient,
    fit,
    stochastic_gradient,
)

__version__ = "0.1.0"
