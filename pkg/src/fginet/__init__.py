"""FGI-Net gaze estimation on a small numpy autodiff core."""
from .data import GazeDataset, GazeSample, load_dataset, synth_dataset, write_dataset
from .errors import ConfigError, DataError, FGINetError, FormatError, NumericError, UsageError
from .estimator import GazeEstimator
from .gaze import angular_error_deg, evaluate, make_folds, vec_to_yawpitch, yawpitch_to_vec
from .model import (FgiNet, ModelConfig, apply_ablation, build, count_flops, count_params,
                    load_checkpoint, reference_config, save_checkpoint)
from .training import PRESETS, TrainPlan, dropout_rate_at, fit, l1_loss, lr_at, preset

__version__ = "0.1.0"

__all__ = [
    "GazeDataset", "GazeSample", "load_dataset", "synth_dataset", "write_dataset",
    "ConfigError", "DataError", "FGINetError", "FormatError", "NumericError", "UsageError",
    "GazeEstimator", "angular_error_deg", "evaluate", "make_folds", "vec_to_yawpitch",
    "yawpitch_to_vec", "FgiNet", "ModelConfig", "apply_ablation", "build", "count_flops",
    "count_params", "load_checkpoint", "reference_config", "save_checkpoint", "PRESETS",
    "TrainPlan", "dropout_rate_at", "fit", "l1_loss", "lr_at", "preset",
]
