"""Quantized fine-tuning testbed with momentum-scaled outlier channels."""

from .checkpoint import checkpoint_load, checkpoint_save
from .engines import KINDS, QuantLinear, prepare
from .model import ModelConfig, ToyLM, TrainConfig, build_model, char_tokenize, sample_batch
from .outliers import (
    CalibrationStats,
    OutlierCalibrator,
    accumulate_calibration,
    allocate_budgets,
    hit_rate,
    load_calibration,
    runtime_outliers,
    save_calibration,
    select_outliers,
)
from .quantization import QuantizedTensor, dequantize, quant_error, quantize, quantized_matmul
from .scaling import ScalingState, compute_beta, momentum_update, pearson_similarity, smooth_factors
from .training import Adam, Trainer, attach_from_calibration, run_calibration

__version__ = "0.1.0"

__all__ = [
    "KINDS",
    "QuantLinear",
    "prepare",
    "CalibrationStats",
    "OutlierCalibrator",
    "accumulate_calibration",
    "allocate_budgets",
    "hit_rate",
    "runtime_outliers",
    "select_outliers",
    "save_calibration",
    "load_calibration",
    "QuantizedTensor",
    "dequantize",
    "quant_error",
    "quantize",
    "quantized_matmul",
    "ScalingState",
    "compute_beta",
    "momentum_update",
    "pearson_similarity",
    "smooth_factors",
    "ModelConfig",
    "TrainConfig",
    "ToyLM",
    "build_model",
    "char_tokenize",
    "sample_batch",
    "checkpoint_save",
    "checkpoint_load",
    "Adam",
    "Trainer",
    "run_calibration",
    "attach_from_calibration",
    "__version__",
]
