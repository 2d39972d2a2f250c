"""scikit-learn style wrapper: ``fit(X, y)`` / ``predict(X)`` over raw pixels."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .data import GazeDataset, normalize
from .errors import UsageError
from .gaze import angular_error_deg, predict as _predict, vec_to_yawpitch, yawpitch_to_vec
from .model import apply_ablation, build, reference_config
from .training import fit as _fit, preset


def check_images(X, channels: int = 3) -> np.ndarray:
    """Validate a pixel batch ``[N, C, H, W]`` in [0, 1] and return it as float32."""
    X = check_array(X, allow_nd=True, ensure_2d=False, dtype=np.float32,
                    ensure_all_finite=True)
    if X.ndim != 4 or X.shape[1] != channels:
        raise UsageError(f"expected images shaped [N, {channels}, H, W], got {X.shape}")
    if X.min() < 0 or X.max() > 1:
        raise UsageError("pixel values must lie in [0, 1]")
    return X


def check_gaze_targets(y, n: int) -> np.ndarray:
    """Targets as ``[N, 2]`` yaw/pitch radians or ``[N, 3]`` gaze vectors."""
    y = check_array(y, dtype=np.float64, ensure_all_finite=True)
    if y.shape[0] != n:
        raise UsageError(f"got {n} images but {y.shape[0]} targets")
    if y.shape[1] not in (2, 3):
        raise UsageError(f"targets must have 2 (yaw, pitch) or 3 (vector) columns, got {y.shape[1]}")
    return y


class GazeEstimator(RegressorMixin, BaseEstimator):
    """FGI-Net gaze regressor.

    ``X`` holds raw RGB pixels in [0, 1]; ``y`` is either yaw/pitch pairs or
    3-D gaze vectors and ``predict`` answers in the same form. ``score``
    returns the negated mean angular error in degrees, so larger is better.
    """

    def __init__(self, preset: str = "eyediap", epochs: int | None = None,
                 batch_size: int | None = None, ablation: str | None = None,
                 seed: int = 0):
        self.preset = preset
        self.epochs = epochs
        self.batch_size = batch_size
        self.ablation = ablation
        self.seed = seed

    def _plan(self):
        plan = preset(self.preset)
        changes = {"seed": self.seed}
        if self.epochs is not None:
            changes["epochs"] = self.epochs
        if self.batch_size is not None:
            changes["batch_size"] = self.batch_size
        return plan.replace(**changes)

    def fit(self, X, y, subjects=None):
        X = check_images(X)
        y = check_gaze_targets(y, len(X))
        self.target_kind_ = "yaw_pitch" if y.shape[1] == 2 else "vector"
        yp = y if y.shape[1] == 2 else np.stack(vec_to_yawpitch(y), axis=-1)
        config = reference_config(X.shape[2:])
        if self.ablation:
            config = apply_ablation(config, self.ablation)
        self.net_ = build(config, self.seed)
        ds = GazeDataset(X, yp, subjects if subjects is not None else ["0"] * len(X))
        self.history_ = _fit(self.net_, ds, self._plan())
        self.n_features_in_ = int(np.prod(X.shape[1:]))
        return self

    def predict(self, X):
        check_is_fitted(self, "net_")
        X = check_images(X)
        if X.shape[2:] != tuple(self.net_.config.input_size):
            raise UsageError(f"model was fitted on {self.net_.config.input_size} images, "
                             f"got {X.shape[2:]}")
        vec = _predict(self.net_, normalize(X))
        if self.target_kind_ == "vector":
            return vec
        return np.stack(vec_to_yawpitch(vec), axis=-1)

    def score(self, X, y, sample_weight=None):
        y = check_gaze_targets(y, len(X))
        pred = self.predict(X)
        gt = y if y.shape[1] == 3 else yawpitch_to_vec(y[:, 0], y[:, 1])
        pv = pred if pred.shape[1] == 3 else yawpitch_to_vec(pred[:, 0], pred[:, 1])
        return -float(np.average(angular_error_deg(pv, gt), weights=sample_weight))
