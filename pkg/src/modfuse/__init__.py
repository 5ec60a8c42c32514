"""Tri-modal (vision, audio, EEG) transformer fusion on a small numpy autodiff engine."""

from .autodiff import Tape, Tensor, backward
from .config import RunConfig
from .data import SynthConfig, Trial, generate_synthetic, load_dataset, subject_split, synthesize
from .encoders import MODALITIES, AudioEncoderConfig, EEGEncoderConfig, VisionEncoderConfig, encode
from .errors import ConfigError, DataError, DivergenceError, ModfuseError, ShapeError, UsageError
from .fusion import FusionConfig, fusion_logits
from .gradcheck import grad_check
from .nn import ParamRegistry
from .report import SubjectResult, aggregate, emit_barplot_data, emit_table
from .training import Checkpoint, TrainConfig, evaluate, finetune_fusion, pretrain_modality

__version__ = "0.1.0"

__all__ = [
    "MODALITIES",
    "AudioEncoderConfig",
    "Checkpoint",
    "ConfigError",
    "DataError",
    "DivergenceError",
    "EEGEncoderConfig",
    "FusionConfig",
    "ModfuseError",
    "ParamRegistry",
    "RunConfig",
    "ShapeError",
    "SubjectResult",
    "SynthConfig",
    "Tape",
    "Tensor",
    "TrainConfig",
    "Trial",
    "UsageError",
    "VisionEncoderConfig",
    "aggregate",
    "backward",
    "emit_barplot_data",
    "emit_table",
    "encode",
    "evaluate",
    "finetune_fusion",
    "fusion_logits",
    "generate_synthetic",
    "grad_check",
    "load_dataset",
    "pretrain_modality",
    "subject_split",
    "synthesize",
]
