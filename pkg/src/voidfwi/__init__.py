"""Void detection in 2D specimens: full-waveform inversion with a
neural-network material ansatz and supervised warm starts."""

from .adjoint import (
    FrechetKernel,
    Residuals,
    frechet_kernel,
    gamma_gradient,
    measurement_loss,
    residuals,
    solve_adjoint,
)
from .config import ConfigError, ExperimentConfig, config_hash, load_config
from .data import (
    DatasetManifest,
    EllipseBounds,
    SampleRecord,
    generate_dataset,
    pretrain_subset,
    sample_ellipse,
)
from .estimators import VoidNetRegressor, WaveformInverter
from .grid import (
    EllipseParams,
    GridSpec,
    ScalarField,
    rasterize_ellipse,
    resample_nearest,
)
from .metrics import (
    PrCurve,
    average_precision,
    average_precision_score,
    binarize_labels,
    pr_curve,
)
from .network import (
    AdamState,
    EncoderDecoderNet,
    LayerSpec,
    adam_step,
    load_checkpoint,
    prepare_input,
    save_checkpoint,
)
from .solver import (
    DivergenceError,
    MaterialModel,
    SensorArray,
    SensorTraces,
    SourceSpec,
    SpaceTimeField,
    TimeSpec,
    burst,
    solve_forward,
    stable_dt,
)
from .training import (
    ForwardSetup,
    RunHistory,
    fwi_gradient,
    pretrain,
    run_fwi,
    transfer_weights,
)

__version__ = "0.1.0"
