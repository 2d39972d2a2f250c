"""Gaze geometry, the angular-error metric and cross-validation folds.

Convention: the camera looks down -z, yaw is positive to the subject's
left and pitch is positive upward, so ``(0, 0)`` maps to ``(0, 0, -1)``.
Every conversion lives here, which keeps the convention swappable.
"""
from __future__ import annotations

import csv
from pathlib import Path
from typing import NamedTuple

import numpy as np
from sklearn.model_selection import KFold, LeaveOneGroupOut, StratifiedKFold

from .core.tensor import Tensor, no_grad
from .errors import UsageError


def yawpitch_to_vec(yaw, pitch) -> np.ndarray:
    """Unit gaze vector(s) ``[..., 3]`` from yaw/pitch in radians."""
    yaw = np.asarray(yaw, dtype=np.float64)
    pitch = np.asarray(pitch, dtype=np.float64)
    cp = np.cos(pitch)
    return np.stack([-cp * np.sin(yaw), -np.sin(pitch), -cp * np.cos(yaw)], axis=-1)


def vec_to_yawpitch(v) -> tuple:
    """Inverse of :func:`yawpitch_to_vec`; accepts any positive scaling of ``v``.

    At the poles ``atan2(0, 0) == 0`` defines the yaw.
    """
    v = np.asarray(v, dtype=np.float64)
    if v.shape[-1] != 3:
        raise UsageError(f"gaze vectors must have 3 components, got shape {v.shape}")
    norm = np.linalg.norm(v, axis=-1)
    if np.any(norm == 0):
        raise UsageError("cannot convert a zero-length gaze vector")
    # + 0.0 turns -0.0 into 0.0 so the pole case gets atan2(0, 0) == 0
    yaw = np.arctan2(-v[..., 0] + 0.0, -v[..., 2] + 0.0)
    pitch = np.arcsin(np.clip(-v[..., 1] / norm, -1.0, 1.0))
    return yaw, pitch


def angular_error_deg(pred, gt):
    """Angle between gaze vectors in degrees, in [0, 180].

    Works row-wise on ``[..., 3]`` inputs and returns a float for single
    vectors.
    """
    a = np.asarray(pred, dtype=np.float64)
    b = np.asarray(gt, dtype=np.float64)
    if a.shape[-1] != 3 or b.shape[-1] != 3:
        raise UsageError(f"gaze vectors must have 3 components, got {a.shape} and {b.shape}")
    na = np.linalg.norm(a, axis=-1)
    nb = np.linalg.norm(b, axis=-1)
    if np.any(na == 0) or np.any(nb == 0):
        raise UsageError("angular error is undefined for zero-length vectors")
    # atan2(|a x b|, a . b) equals arccos of the clamped cosine but keeps
    # full precision near 0 and 180 degrees
    ua = a / na[..., None]
    ub = b / nb[..., None]
    sin = np.linalg.norm(np.cross(ua, ub), axis=-1)
    cos = np.clip(np.sum(ua * ub, axis=-1), -1.0, 1.0)
    out = np.degrees(np.arctan2(sin, cos))
    return float(out) if out.ndim == 0 else out


# ------------------------------------------------------------------- protocols

def parse_protocol(protocol) -> tuple:
    """``"loso"`` / ``"leave_one_subject_out"`` -> ("loso", None);
    ``"kfold:4"``, ``"4fold"`` or ``("kfold", 4)`` -> ("kfold", 4)."""
    if isinstance(protocol, tuple):
        kind, k = protocol
    else:
        text = str(protocol).strip().lower()
        if text in ("loso", "leave_one_subject_out", "leave-one-subject-out"):
            return "loso", None
        if text.startswith("kfold"):
            kind, _, k = text.partition(":")
            kind = "kfold"
        elif text.endswith("fold") and text[:-4].isdigit():
            kind, k = "kfold", text[:-4]
        else:
            raise UsageError(f"unknown protocol {protocol!r}; use 'loso' or 'kfold:K'")
    if kind != "kfold":
        raise UsageError(f"unknown protocol {protocol!r}")
    try:
        k = int(k)
    except (TypeError, ValueError):
        raise UsageError(f"kfold needs an integer K, got {protocol!r}") from None
    if k < 2:
        raise UsageError(f"kfold needs K >= 2, got {k}")
    return "kfold", k


def make_folds(subjects, protocol="loso", seed: int = 0) -> list:
    """Split sample indices into ``(train_idx, test_idx)`` pairs.

    ``subjects`` holds one label per sample (or ``None`` per sample when
    unlabeled; an integer is taken as an unlabeled sample count).
    Leave-one-subject-out gives one fold per subject, ordered by label.
    K-fold shuffles with ``seed`` and stratifies by subject when labels
    exist, so every fold sees every subject in proportion.
    """
    if isinstance(subjects, (int, np.integer)):
        subjects = [None] * int(subjects)
    labels = list(subjects)
    n = len(labels)
    kind, k = parse_protocol(protocol)
    idx = np.arange(n)
    labeled = n > 0 and all(s is not None and s != "" for s in labels)
    if kind == "loso":
        if not labeled:
            raise UsageError("leave-one-subject-out needs a subject label on every sample")
        groups = np.asarray([str(s) for s in labels])
        if len(set(groups)) < 2:
            raise UsageError("leave-one-subject-out needs at least 2 distinct subjects")
        splits = LeaveOneGroupOut().split(idx, groups=groups)
    else:
        if k > n:
            raise UsageError(f"kfold({k}) needs at least {k} samples, got {n}")
        if labeled and len(set(map(str, labels))) > 1:
            y = np.asarray([str(s) for s in labels])
            smallest = min(np.unique(y, return_counts=True)[1])
            if smallest >= k:
                splits = StratifiedKFold(k, shuffle=True, random_state=seed).split(idx, y)
            else:
                # too few samples per subject to stratify; fall back to plain shuffling
                splits = KFold(k, shuffle=True, random_state=seed).split(idx)
        else:
            splits = KFold(k, shuffle=True, random_state=seed).split(idx)
    return [(np.asarray(tr, dtype=np.int64), np.asarray(te, dtype=np.int64)) for tr, te in splits]


# ------------------------------------------------------------------ evaluation

class EvalResult(NamedTuple):
    mean_error_deg: float
    per_sample: np.ndarray
    predictions: np.ndarray


def predict(net, images: np.ndarray, batch_size: int = 64) -> np.ndarray:
    """Eval-mode forward over normalized images ``[N, 3, H, W]`` -> ``[N, 3]``."""
    was_training = net.training
    net.eval()
    out = []
    try:
        with no_grad():
            for start in range(0, len(images), batch_size):
                out.append(net(Tensor(images[start:start + batch_size])).data)
    finally:
        net.train(was_training)
    return np.concatenate(out).astype(np.float64) if out else np.zeros((0, 3))


def evaluate(net, dataset, batch_size: int = 64) -> EvalResult:
    """Mean angular error of ``net`` over a :class:`~fginet.data.GazeDataset`."""
    if len(dataset) == 0:
        raise UsageError("cannot evaluate on an empty sample set")
    pred = predict(net, dataset.images(), batch_size)
    errs = np.atleast_1d(angular_error_deg(pred, dataset.gaze))
    return EvalResult(float(np.mean(errs)), errs, pred)


def write_fold_csv(path, rows) -> None:
    """Rows of ``(fold, n_test, mean_error_deg)``."""
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["fold", "n_test", "mean_error_deg"])
        for fold, n_test, err in rows:
            w.writerow([fold, n_test, repr(float(err))])


def write_predictions_csv(path, dataset, result: EvalResult) -> None:
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["index", "subject", "pred_x", "pred_y", "pred_z", "error_deg"])
        for i, (p, e) in enumerate(zip(result.predictions, result.per_sample)):
            w.writerow([i, dataset.subjects[i], *(repr(float(c)) for c in p), repr(float(e))])
