"""Cycle-constrained diffusion for low-field to high-field MRI synthesis,
with slice-alignment and local-structure self-supervised pretraining, on
fully synthetic phantom data."""

from .errors import CompatibilityError, TrainingError
from .losses import LossParts, LossWeights
from .lsc import CorruptionSpec, LscConfig
from .metrics import MetricReport
from .models import ModelBundle, NetConfig, init_models
from .phantom import (
    DatasetManifest,
    DegradationParams,
    PairedSample,
    Volume,
    generate_phantom,
    load_manifest,
    make_dataset,
)
from .pipeline import Config, TrainResult
from .schedule import DiffusionSchedule, build_schedule
from .sgp import SgpConfig, SliceBatch

__version__ = "0.1.0"

__all__ = [
    "CompatibilityError",
    "Config",
    "CorruptionSpec",
    "DatasetManifest",
    "DegradationParams",
    "DiffusionSchedule",
    "LossParts",
    "LossWeights",
    "LscConfig",
    "MetricReport",
    "ModelBundle",
    "NetConfig",
    "PairedSample",
    "SgpConfig",
    "SliceBatch",
    "TrainResult",
    "TrainingError",
    "Volume",
    "build_schedule",
    "generate_phantom",
    "init_models",
    "load_manifest",
    "make_dataset",
    "__version__",
]
