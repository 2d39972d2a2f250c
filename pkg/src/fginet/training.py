"""Optimization recipe: L1 loss, Adam/AdamW, cyclical learning rate with
warmup and step decay, linearly decaying stage dropout, and the epoch loop."""
from __future__ import annotations

import csv
import dataclasses
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable

import numpy as np

from . import config_io
from .core import functional as F
from .core.tensor import Tensor
from .errors import ConfigError, NumericError, UsageError
from .gaze import evaluate

ADAM_EPS = 1e-8


@dataclass(frozen=True)
class TrainPlan:
    optimizer: str = "adam"
    betas: tuple = (0.88, 0.999)
    base_lr: float = 0.0005
    max_lr: float = 0.0005
    clr_step_size: int = 5
    warmup_epochs: int = 5
    decay_factor: float | None = None
    decay_step: int | None = None
    # "lr": decay_factor scales the learning rate every decay_step epochs;
    # "weight": decay_factor is used as AdamW's decoupled weight decay instead
    decay_mode: str = "lr"
    weight_decay: float = 0.0
    batch_size: int = 32
    epochs: int = 50
    dropout_base: tuple = (0.0, 0.0, 0.0)
    seed: int = 0

    def validate(self) -> None:
        if self.optimizer not in ("adam", "adamw"):
            raise ConfigError(f"optimizer must be 'adam' or 'adamw', got {self.optimizer!r}")
        if len(self.betas) != 2 or not all(0 <= b < 1 for b in self.betas):
            raise ConfigError(f"betas must be two values in [0, 1), got {self.betas}")
        if not 0 < self.base_lr <= self.max_lr:
            raise ConfigError(f"need 0 < base_lr <= max_lr, got {self.base_lr}, {self.max_lr}")
        if self.clr_step_size < 1:
            raise ConfigError(f"clr_step_size must be >= 1, got {self.clr_step_size}")
        if self.warmup_epochs < 0:
            raise ConfigError(f"warmup_epochs must be >= 0, got {self.warmup_epochs}")
        if (self.decay_factor is None) != (self.decay_step is None) and self.decay_mode == "lr":
            raise ConfigError("decay_factor and decay_step must be set together")
        if self.decay_step is not None and self.decay_step < 1:
            raise ConfigError(f"decay_step must be >= 1, got {self.decay_step}")
        if self.decay_factor is not None and self.decay_factor <= 0:
            raise ConfigError(f"decay_factor must be positive, got {self.decay_factor}")
        if self.decay_mode not in ("lr", "weight"):
            raise ConfigError(f"decay_mode must be 'lr' or 'weight', got {self.decay_mode!r}")
        if self.weight_decay < 0:
            raise ConfigError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if self.batch_size < 1 or self.epochs < 1:
            raise ConfigError(f"batch_size and epochs must be >= 1, got {self.batch_size}, {self.epochs}")
        if not all(0 <= p < 1 for p in self.dropout_base):
            raise ConfigError(f"dropout rates must lie in [0, 1), got {self.dropout_base}")

    @property
    def effective_weight_decay(self) -> float:
        if self.optimizer != "adamw":
            return 0.0
        if self.decay_mode == "weight" and self.decay_factor is not None:
            return float(self.decay_factor)
        return float(self.weight_decay)

    def replace(self, **changes) -> "TrainPlan":
        plan = dataclasses.replace(self, **changes)
        plan.validate()
        return plan

    def to_flat(self) -> dict:
        return config_io.flatten(self, "train")

    @classmethod
    def from_flat(cls, flat: dict, base: "TrainPlan | None" = None) -> "TrainPlan":
        merged = config_io.unflatten(base.to_flat(), "train") if base is not None else {}
        merged.update(config_io.unflatten(flat, "train"))
        for key in ("betas", "dropout_base"):
            if key in merged:
                merged[key] = tuple(merged[key])
        try:
            plan = cls(**merged)
        except TypeError as exc:
            raise ConfigError(f"malformed train config: {exc}") from None
        plan.validate()
        return plan


_FINETUNE = TrainPlan(optimizer="adam", betas=(0.88, 0.999), base_lr=0.0005, max_lr=0.0005,
                      clr_step_size=5, warmup_epochs=5)

PRESETS = {
    "pretrain-eth": TrainPlan(optimizer="adamw", betas=(0.88, 0.99), base_lr=0.0001,
                              max_lr=0.0005, clr_step_size=5, warmup_epochs=3,
                              decay_factor=0.5, decay_step=10, weight_decay=0.01,
                              batch_size=64, epochs=30),
    "gaze360": dataclasses.replace(_FINETUNE, batch_size=32, epochs=60),
    "mpii": dataclasses.replace(_FINETUNE, batch_size=64, epochs=80, decay_factor=0.5,
                                decay_step=60),
    "eyediap": dataclasses.replace(_FINETUNE, batch_size=12, epochs=50,
                                   dropout_base=(0.09, 0.06, 0.03)),
    "rtgene": dataclasses.replace(_FINETUNE, batch_size=32, epochs=50),
}


def preset(name: str) -> TrainPlan:
    try:
        return PRESETS[name]
    except KeyError:
        raise UsageError(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}") from None


# -------------------------------------------------------------------- schedules

def _triangle(plan: TrainPlan, epoch: float) -> float:
    s = plan.clr_step_size
    cycle = math.floor(1 + epoch / (2 * s))
    x = abs(epoch / s - 2 * cycle + 1)
    return plan.base_lr + (plan.max_lr - plan.base_lr) * max(0.0, 1.0 - x)


def _decay(plan: TrainPlan, epoch: float) -> float:
    if plan.decay_mode != "lr" or plan.decay_factor is None:
        return 1.0
    return plan.decay_factor ** math.floor(epoch / plan.decay_step)


def lr_at(plan: TrainPlan, epoch: float) -> float:
    """Learning rate at a (possibly fractional) epoch.

    Linear warmup from 0 to the scheduled value at ``warmup_epochs``, then
    triangular cycling between ``base_lr`` and ``max_lr`` with half-period
    ``clr_step_size``, scaled by the step decay.
    """
    if epoch < 0:
        raise UsageError(f"epoch must be >= 0, got {epoch}")
    w = plan.warmup_epochs
    if epoch < w:
        return (epoch / w) * _triangle(plan, w) * _decay(plan, w)
    return _triangle(plan, epoch) * _decay(plan, epoch)


def dropout_rate_at(base_rates, epoch: int, total_epochs: int) -> tuple:
    """Per-stage rates decaying linearly from ``base_rates`` to 0 at ``total_epochs``."""
    if total_epochs < 1:
        raise UsageError(f"total_epochs must be >= 1, got {total_epochs}")
    frac = min(max(epoch / total_epochs, 0.0), 1.0)
    return tuple(b * (1.0 - frac) for b in base_rates)


# ---------------------------------------------------------------- loss / optim

def l1_loss(pred: Tensor, target) -> Tensor:
    """Mean absolute error over every element."""
    if not isinstance(target, Tensor):
        target = Tensor(np.asarray(target, dtype=pred.dtype))
    if pred.shape != target.shape:
        raise UsageError(f"l1_loss shape mismatch: {pred.shape} vs {target.shape}")
    return F.absolute(pred - target).mean()


def optimizer_step(params, grads, state: dict, plan: TrainPlan, lr: float) -> None:
    """One in-place Adam/AdamW update of ``params`` (arrays) from ``grads``.

    ``state`` maps ``"t"`` to the step count and ``"m"``/``"v"`` to lists of
    moment arrays; an empty dict is initialised on first use.
    """
    if not lr > 0:
        raise UsageError(f"learning rate must be positive, got {lr}")
    b1, b2 = plan.betas
    if not state:
        state["t"] = 0
        state["m"] = [np.zeros_like(p) for p in params]
        state["v"] = [np.zeros_like(p) for p in params]
    state["t"] += 1
    t = state["t"]
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    wd = plan.effective_weight_decay
    for p, g, m, v in zip(params, grads, state["m"], state["v"]):
        if g is None:
            continue
        if wd:
            p -= (lr * wd) * p
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        p -= (lr * (m / c1) / (np.sqrt(v / c2) + ADAM_EPS)).astype(p.dtype, copy=False)


class Optimizer:
    """Adam/AdamW over a module's parameters, configured by a :class:`TrainPlan`."""

    def __init__(self, parameters, plan: TrainPlan):
        self.params = list(parameters)
        self.plan = plan
        self.state: dict = {}

    def step(self, lr: float) -> None:
        optimizer_step([p.data for p in self.params], [p.grad for p in self.params],
                       self.state, self.plan, lr)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


# ----------------------------------------------------------------------- loop

HISTORY_FIELDS = ("epoch", "lr", "train_loss", "val_angular_error_deg")


def batches(n: int, batch_size: int, rng: np.random.Generator) -> list:
    """Shuffled index batches; a trailing singleton is merged into the
    previous batch because batch norm needs two samples."""
    perm = rng.permutation(n)
    out = [perm[i:i + batch_size] for i in range(0, n, batch_size)]
    if len(out) > 1 and len(out[-1]) == 1:
        tail = out.pop()
        out[-1] = np.concatenate([out[-1], tail])
    return out


def fit(net, dataset, plan: TrainPlan, callbacks: Iterable[Callable] = (), val=None) -> list:
    """Train ``net`` on ``dataset`` and return one record per epoch.

    Shuffling and dropout draw from generators seeded by ``plan.seed``;
    parameter initialisation is fixed when the net is built. Records hold
    ``epoch``, the epoch-start ``lr``, the sample-weighted ``train_loss``
    and, when ``val`` is given, ``val_angular_error_deg``. Each callback is
    called as ``cb(record, net)``.
    """
    plan.validate()
    n = len(dataset)
    if n == 0:
        raise UsageError("cannot train on an empty dataset")
    if n < 2:
        raise UsageError("training needs at least 2 samples (batch norm statistics)")
    shuffle_rng = np.random.default_rng([plan.seed, 0])
    net.reseed_dropout(np.random.default_rng([plan.seed, 1]))
    opt = Optimizer(net.parameters(), plan)
    gaze = dataset.gaze.astype(np.float32)
    history = []
    net.train()
    for epoch in range(plan.epochs):
        net.set_dropout_rates(dropout_rate_at(plan.dropout_base, epoch, plan.epochs)
                              if any(plan.dropout_base) else (0.0,) * net.n_stages)
        order = batches(n, plan.batch_size, shuffle_rng)
        total = 0.0
        for bi, idx in enumerate(order):
            lr = lr_at(plan, epoch + (bi + 1) / len(order))
            try:
                loss = l1_loss(net(Tensor(dataset.images(idx))), gaze[idx])
            except NumericError as exc:
                raise NumericError(f"epoch {epoch} batch {bi}: {exc}") from None
            value = float(loss.data)
            if not math.isfinite(value):
                raise NumericError(f"epoch {epoch} batch {bi}: loss is {value}")
            opt.zero_grad()
            loss.backward()
            opt.step(lr)
            total += value * len(idx)
        record = {"epoch": epoch, "lr": lr_at(plan, epoch), "train_loss": total / n,
                  "val_angular_error_deg": evaluate(net, val).mean_error_deg if val is not None
                  else float("nan")}
        net.train()
        history.append(record)
        for cb in callbacks:
            cb(record, net)
    return history


def write_history_csv(path, history) -> None:
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(HISTORY_FIELDS)
        for rec in history:
            w.writerow([rec["epoch"]] + [repr(float(rec[k])) for k in HISTORY_FIELDS[1:]])
